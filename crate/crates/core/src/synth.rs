//! Synthetic multimodal benchmark with controllable per-query quality.
//!
//! Every subject owns a random unit identity vector per modality. Gallery
//! templates add a small amount of noise to it; query frames add noise whose
//! scale is `sigma * (1 + kappa * (1 - q))` for the query's quality factor
//! `q`. Simulated intermediate features replicate each frame across blocks
//! and patches with patch noise that also grows as quality falls, which is the
//! signal the quality estimator learns from.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{reduce_features, IntermediateFeatures};
use crate::types::{GalleryManifest, MetricKind, ModalityChannel, QueryRecord, TemplateEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub modality_id: String,
    pub metric_kind: MetricKind,
    pub feature_dim: usize,
    /// Base per-dimension noise of query frames.
    pub noise_sigma: f64,
    /// Quality sensitivity; falls back to the global value when absent.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Fraction of queries drawn from the degraded quality range.
    pub degraded_fraction: f64,
    /// Fraction of queries for which this modality is unavailable.
    #[serde(default)]
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityModel {
    pub kappa: f64,
    /// Uniform range of q for ordinary queries.
    pub clean_range: (f64, f64),
    /// Uniform range of q for degraded queries.
    pub degraded_range: (f64, f64),
}

impl Default for QualityModel {
    fn default() -> Self {
        Self {
            kappa: 40.0,
            clean_range: (0.85, 1.0),
            degraded_range: (0.0, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub templates_per_subject: usize,
    pub queries_per_subject: usize,
    pub frames_per_query: usize,
    pub modalities: Vec<SynthModality>,
    pub quality: QualityModel,
    /// Per-dimension noise of gallery templates.
    pub template_noise: f64,
    /// Share of query noise common to all frames of the query.
    pub shared_noise: f64,
    pub blocks: usize,
    pub patches: usize,
    /// Patch noise is `patch_noise * (1 + patch_kappa * (1 - q))`.
    pub patch_noise: f64,
    pub patch_kappa: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_subjects: 100,
            test_subjects: 50,
            templates_per_subject: 4,
            queries_per_subject: 6,
            frames_per_query: 12,
            modalities: vec![
                SynthModality {
                    modality_id: "face".into(),
                    metric_kind: MetricKind::Cosine,
                    feature_dim: 32,
                    noise_sigma: 0.04,
                    kappa: None,
                    degraded_fraction: 0.4,
                    missing_fraction: 0.0,
                },
                SynthModality {
                    modality_id: "gait".into(),
                    metric_kind: MetricKind::Euclidean,
                    feature_dim: 32,
                    noise_sigma: 0.22,
                    kappa: Some(1.0),
                    degraded_fraction: 0.0,
                    missing_fraction: 0.0,
                },
            ],
            quality: QualityModel::default(),
            template_noise: 0.02,
            shared_noise: 0.9,
            blocks: 2,
            patches: 4,
            patch_noise: 0.05,
            patch_kappa: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.train_subjects,
            self.test_subjects,
            self.templates_per_subject,
            self.queries_per_subject,
            self.frames_per_query,
            self.blocks,
            self.patches,
        ];
        if counts.contains(&0) {
            return Err(Error::DegenerateConfig("all counts must be at least 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::DegenerateConfig("no modalities".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(&m.modality_id) {
                return Err(Error::DegenerateConfig(format!("duplicate modality {}", m.modality_id)));
            }
            if m.feature_dim < 2 {
                return Err(Error::DegenerateConfig(format!("{}: feature_dim < 2", m.modality_id)));
            }
            if !(m.noise_sigma > 0.0) {
                return Err(Error::DegenerateConfig(format!("{}: sigma must be positive", m.modality_id)));
            }
            if m.kappa.unwrap_or(self.quality.kappa) < 0.0 {
                return Err(Error::DegenerateConfig(format!("{}: negative kappa", m.modality_id)));
            }
            for f in [m.degraded_fraction, m.missing_fraction] {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::DegenerateConfig(format!("{}: fraction outside [0,1]", m.modality_id)));
                }
            }
        }
        for (lo, hi) in [self.quality.clean_range, self.quality.degraded_range] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::DegenerateConfig("quality ranges must lie in [0,1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_noise) || self.template_noise < 0.0 || self.patch_noise < 0.0 {
            return Err(Error::DegenerateConfig("noise parameters out of range".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<ModalityChannel> {
        self.modalities
            .iter()
            .map(|m| ModalityChannel {
                modality_id: m.modality_id.clone(),
                metric_kind: m.metric_kind,
                feature_dim: m.feature_dim,
            })
            .collect()
    }
}

/// Ground-truth quality factor of one (query, modality) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub query_id: String,
    pub modality_id: String,
    pub quality_factor: f64,
}

/// Gallery and probes of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub gallery: GalleryManifest,
    pub queries: Vec<QueryRecord>,
    pub quality: Vec<QualityRow>,
}

impl Split {
    /// Ground-truth quality keyed by (query_id, modality_id).
    pub fn quality_map(&self) -> BTreeMap<(String, String), f64> {
        self.quality
            .iter()
            .map(|r| ((r.query_id.clone(), r.modality_id.clone()), r.quality_factor))
            .collect()
    }

    pub fn quality_of(&self, query_index: usize, modality_id: &str) -> Option<f64> {
        let qid = &self.queries[query_index].query_id;
        self.quality
            .iter()
            .find(|r| &r.query_id == qid && r.modality_id == modality_id)
            .map(|r| r.quality_factor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub channels: Vec<ModalityChannel>,
    pub train: Split,
    pub test: Split,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = normal_vec(rng, d);
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Deterministic RNG substream keyed by the generator seed and a purpose tag.
fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST: u64 = 2;

/// Simulated block×patch×channel features of one frame (U×P×d).
pub fn simulate_intermediate(
    frame: &Array1<f64>,
    quality: f64,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array3<f64> {
    let d = frame.len();
    let scale = config.patch_noise * (1.0 + config.patch_kappa * (1.0 - quality));
    ndarray::Array3::from_shape_fn((config.blocks, config.patches, d), |(_, _, c)| {
        let e: f64 = StandardNormal.sample(rng);
        frame[c] + scale * e
    })
}

/// Builds both splits; output is a pure function of the configuration.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    Ok(SynthDataset {
        channels: config.channels(),
        train: generate_split(config, SPLIT_TRAIN, "tr", config.train_subjects)?,
        test: generate_split(config, SPLIT_TEST, "te", config.test_subjects)?,
    })
}

fn generate_split(config: &SynthConfig, split_tag: u64, prefix: &str, subjects: usize) -> Result<Split> {
    let subject_ids: Vec<String> = (0..subjects).map(|s| format!("{prefix}{s:04}")).collect();
    // identities per modality: one stream per (split, modality)
    let identities: Vec<Array2<f64>> = config
        .modalities
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let mut rng = substream(config.seed, (split_tag << 48) | ((mi as u64) << 40));
            let mut ids = Array2::zeros((subjects, m.feature_dim));
            for s in 0..subjects {
                ids.row_mut(s).assign(&unit_vec(&mut rng, m.feature_dim));
            }
            ids
        })
        .collect();

    let mut templates = Vec::with_capacity(subjects * config.templates_per_subject);
    let mut gallery_features: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (mi, m) in config.modalities.iter().enumerate() {
        let mut rng = substream(config.seed, (split_tag << 48) | ((mi as u64) << 40) | (1 << 32));
        let mut g = Array2::zeros((subjects * config.templates_per_subject, m.feature_dim));
        for s in 0..subjects {
            for k in 0..config.templates_per_subject {
                let noise = normal_vec(&mut rng, m.feature_dim) * config.template_noise;
                g.row_mut(s * config.templates_per_subject + k)
                    .assign(&(&identities[mi].row(s) + &noise));
            }
        }
        gallery_features.insert(m.modality_id.clone(), g);
    }
    for (s, sid) in subject_ids.iter().enumerate() {
        for k in 0..config.templates_per_subject {
            templates.push(TemplateEntry {
                template_id: format!("{sid}_g{k}"),
                subject_id: subject_ids[s].clone(),
            });
        }
    }

    let mut queries = Vec::with_capacity(subjects * config.queries_per_subject);
    let mut quality = Vec::new();
    let l = config.frames_per_query;
    for (s, sid) in subject_ids.iter().enumerate() {
        for k in 0..config.queries_per_subject {
            let qi = (s * config.queries_per_subject + k) as u64;
            let query_id = format!("{sid}_q{k}");
            let mut features = BTreeMap::new();
            let mut qe_features = BTreeMap::new();
            for (mi, m) in config.modalities.iter().enumerate() {
                let mut rng = substream(config.seed, (split_tag << 48) | ((mi as u64) << 40) | (2 << 32) | qi);
                let degraded = rng.random::<f64>() < m.degraded_fraction;
                let (lo, hi) = if degraded {
                    config.quality.degraded_range
                } else {
                    config.quality.clean_range
                };
                let q = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let missing = rng.random::<f64>() < m.missing_fraction;
                quality.push(QualityRow {
                    query_id: query_id.clone(),
                    modality_id: m.modality_id.clone(),
                    quality_factor: q,
                });
                let kappa = m.kappa.unwrap_or(config.quality.kappa);
                let scale = m.noise_sigma * (1.0 + kappa * (1.0 - q));
                let rho = config.shared_noise;
                let shared = normal_vec(&mut rng, m.feature_dim);
                let identity = identities[mi].row(s);
                let mut frames = Array2::zeros((l, m.feature_dim));
                let mut reduced = Array2::zeros((l, 2 * m.feature_dim));
                for f in 0..l {
                    let indep = normal_vec(&mut rng, m.feature_dim);
                    let noise = (&shared * rho + &indep * (1.0 - rho * rho).sqrt()) * scale;
                    let frame = &identity + &noise;
                    let inter = simulate_intermediate(&frame, q, config, &mut rng);
                    let (u, p, d) = inter.dim();
                    let tensor = IntermediateFeatures(inter.into_shape_with_order((1, u, p, d)).map_err(|e| Error::ShapeError(e.to_string()))?);
                    reduced.row_mut(f).assign(&reduce_features(&tensor)?.row(0));
                    frames.row_mut(f).assign(&frame);
                }
                if !missing {
                    features.insert(m.modality_id.clone(), frames);
                    qe_features.insert(m.modality_id.clone(), reduced);
                }
            }
            queries.push(QueryRecord {
                query_id,
                subject_id: sid.clone(),
                frame_count: l,
                features,
                qe_features,
            });
        }
    }

    let gallery = GalleryManifest {
        subjects: subject_ids.iter().cloned().collect(),
        templates,
        features: gallery_features,
    };
    gallery.validate()?;
    Ok(Split {
        gallery,
        queries,
        quality,
    })
}

/// Full intermediate tensor for a single frame sequence, for callers that need
/// the unreduced L×U×P×d form.
pub fn intermediate_sequence(frames: &Array2<f64>, quality: f64, config: &SynthConfig, seed: u64) -> IntermediateFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = frames.dim();
    let mut out = Array4::zeros((l, config.blocks, config.patches, d));
    for f in 0..l {
        let inter = simulate_intermediate(&frames.row(f).to_owned(), quality, config, &mut rng);
        out.slice_mut(ndarray::s![f, .., .., ..]).assign(&inter);
    }
    IntermediateFeatures(out)
}
