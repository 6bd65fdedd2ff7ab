//! End-to-end pipeline on a synthetic dataset: QE training, fusion training,
//! baseline fitting and evaluation of every method on the test split.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_weighted_sum, fuse_rows, max_fusion, mean_fusion, min_fusion, normalize_concat, Normalization,
    NormalizationStats, WeightedSum, WeightedSumConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_all, train_fusion, FusionConfig, FusionData, FusionModel, FusionSample, FusionTrainReport, Gating, LossKind};
use crate::metrics::ScoreTable;
use crate::quality::{train_qe, QeConfig, QeSample, QeTrainReport, QualityEstimator, TrainingGallery};
use crate::report::{evaluate, EvalReport, MetricTargets};
use crate::scores::{aggregate_query_feature, build_concat_scores, score_matrix, similarity_scores};
use crate::synth::{generate, Split, SynthConfig, SynthDataset};
use crate::types::{ConcatScores, ModalityChannel, ScoreLabels, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub modality_order: Vec<String>,
    pub gating_modality: String,
    /// Frames drawn per query for each fusion training step.
    pub frames_per_sample: usize,
    pub qe: QeConfig,
    pub fusion: FusionConfig,
    pub weighted_sum: WeightedSumConfig,
    pub targets: MetricTargets,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            modality_order: synth.modalities.iter().map(|m| m.modality_id.clone()).collect(),
            gating_modality: synth.modalities[0].modality_id.clone(),
            synth,
            frames_per_sample: 8,
            qe: QeConfig::default(),
            fusion: FusionConfig::default(),
            weighted_sum: WeightedSumConfig::default(),
            targets: MetricTargets::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same configuration with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synth.seed = seed;
        c.qe.seed = seed;
        c.fusion.seed = seed;
        c.weighted_sum.seed = seed;
        c.targets.open_set.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.targets.validate()?;
        let known: Vec<&String> = self.synth.modalities.iter().map(|m| &m.modality_id).collect();
        if self.modality_order.len() < 2 {
            return Err(Error::DegenerateConfig("fusion needs at least two modalities".into()));
        }
        for m in self.modality_order.iter().chain(std::iter::once(&self.gating_modality)) {
            if !known.contains(&m) {
                return Err(Error::DegenerateConfig(format!("unknown modality {m}")));
            }
        }
        if self.frames_per_sample == 0 || self.fusion.experts == 0 {
            return Err(Error::DegenerateConfig("frames_per_sample and experts must be at least 1".into()));
        }
        Ok(())
    }

    fn channel(&self, id: &str) -> Result<ModalityChannel> {
        self.synth
            .channels()
            .into_iter()
            .find(|c| c.modality_id == id)
            .ok_or_else(|| Error::DegenerateConfig(format!("unknown modality {id}")))
    }

    pub fn channels_in_order(&self) -> Result<Vec<ModalityChannel>> {
        self.modality_order.iter().map(|m| self.channel(m)).collect()
    }
}

/// QE training probes for one modality; queries lacking it are skipped.
pub fn qe_samples(split: &Split, modality_id: &str) -> Vec<QeSample> {
    split
        .queries
        .iter()
        .filter_map(|q| {
            Some(QeSample {
                subject_id: q.subject_id.clone(),
                frame_features: q.features.get(modality_id)?.clone(),
                reduced: q.qe_features.get(modality_id)?.clone(),
            })
        })
        .collect()
}

/// Trains the quality estimator of the gating modality on the training split.
pub fn train_quality_estimator(dataset: &SynthDataset, config: &ExperimentConfig) -> Result<(QualityEstimator, QeTrainReport)> {
    let ch = config.channel(&config.gating_modality)?;
    let gallery = TrainingGallery::from_templates(&dataset.train.gallery, &ch.modality_id, ch.metric_kind)?;
    let samples = qe_samples(&dataset.train, &ch.modality_id);
    train_qe(&ch.modality_id, &samples, &gallery, &config.qe)
}

/// Per-query quality weight of the gating modality, using all frames.
pub fn query_weights(split: &Split, qe: &QualityEstimator) -> Result<Vec<Option<f64>>> {
    split
        .queries
        .iter()
        .map(|q| match q.qe_features.get(&qe.modality_id) {
            Some(f) => Ok(Some(qe.predict_query_weight(f.view())?.query)),
            None => Ok(None),
        })
        .collect()
}

/// All-frame scores of a split, one matrix per modality in `order`.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub matrices: Vec<ScoreMatrix>,
    pub query_subjects: Vec<String>,
    pub template_subjects: Vec<String>,
    pub weights: Vec<Option<f64>>,
}

impl ScoreSet {
    pub fn build(split: &Split, channels: &[ModalityChannel], qe: Option<&QualityEstimator>) -> Result<Self> {
        let matrices = channels
            .iter()
            .map(|c| score_matrix(&c.modality_id, c.metric_kind, &split.queries, &split.gallery))
            .collect::<Result<Vec<_>>>()?;
        let weights = match qe {
            Some(qe) => query_weights(split, qe)?,
            None => vec![None; split.queries.len()],
        };
        Ok(Self {
            matrices,
            query_subjects: split.queries.iter().map(|q| q.subject_id.clone()).collect(),
            template_subjects: split.gallery.template_subjects(),
            weights,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_subjects.len()
    }

    pub fn concat(&self, q: usize) -> Result<ConcatScores> {
        let refs: Vec<&ScoreMatrix> = self.matrices.iter().collect();
        build_concat_scores(&refs, &self.matrices[0].query_ids[q])
    }

    pub fn labels(&self, q: usize) -> ScoreLabels {
        ScoreLabels::from_subjects(&self.query_subjects[q], &self.template_subjects)
    }

    pub fn fusion_samples(&self) -> Result<Vec<FusionSample>> {
        (0..self.num_queries())
            .map(|q| {
                Ok(FusionSample {
                    scores: self.concat(q)?,
                    labels: self.labels(q),
                    weight: self.weights[q],
                })
            })
            .collect()
    }

    /// Table of one modality's raw scores.
    pub fn single_table(&self, j: usize) -> Result<ScoreTable> {
        let m = &self.matrices[j];
        ScoreTable::with_mask(
            m.values.clone(),
            m.mask.clone(),
            self.query_subjects.clone(),
            self.template_subjects.clone(),
        )
    }

    /// Table built from a per-query fused row.
    pub fn table_from_rows(&self, rows: &[Vec<f64>]) -> Result<ScoreTable> {
        let t = self.template_subjects.len();
        let mut values = Array2::from_elem((rows.len(), t), f64::NAN);
        for (q, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(Error::ShapeError(format!("fused row of {} for {t} templates", r.len())));
            }
            values.row_mut(q).assign(&ndarray::ArrayView1::from(r));
        }
        ScoreTable::new(values, self.query_subjects.clone(), self.template_subjects.clone())
    }
}

/// Training view that re-draws `frames` frames per query on every request.
pub struct FrameSampler<'a> {
    split: &'a Split,
    channels: Vec<ModalityChannel>,
    qe: Option<&'a QualityEstimator>,
    frames: usize,
    template_subjects: Vec<String>,
    eval: Vec<FusionSample>,
}

impl<'a> FrameSampler<'a> {
    pub fn new(split: &'a Split, channels: Vec<ModalityChannel>, qe: Option<&'a QualityEstimator>, frames: usize) -> Result<Self> {
        let eval = ScoreSet::build(split, &channels, qe)?.fusion_samples()?;
        Ok(Self {
            split,
            channels,
            qe,
            frames,
            template_subjects: split.gallery.template_subjects(),
            eval,
        })
    }
}

impl FusionData for FrameSampler<'_> {
    fn len(&self) -> usize {
        self.split.queries.len()
    }

    fn sample(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<FusionSample> {
        let q = &self.split.queries[i];
        let picked: Vec<usize> = if q.frame_count > self.frames {
            let mut idx = sample(rng, q.frame_count, self.frames).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..q.frame_count).collect()
        };
        let t = self.split.gallery.len();
        let n = self.channels.len();
        let mut values = Array2::from_elem((t, n), f64::NAN);
        let mut mask = Array2::from_elem((t, n), false);
        for (j, c) in self.channels.iter().enumerate() {
            let Some(frames) = q.features.get(&c.modality_id) else {
                continue;
            };
            let g = &self.split.gallery.features[&c.modality_id];
            let feat = aggregate_query_feature(frames.select(Axis(0), &picked).view())?;
            values.column_mut(j).assign(&similarity_scores(c.metric_kind, feat.view(), g.view())?);
            mask.column_mut(j).fill(true);
        }
        let weight = match self.qe {
            Some(qe) => match q.qe_features.get(&qe.modality_id) {
                Some(f) => Some(qe.predict_query_weight(f.select(Axis(0), &picked).view())?.query),
                None => None,
            },
            None => None,
        };
        Ok(FusionSample {
            scores: ConcatScores {
                modality_order: self.channels.iter().map(|c| c.modality_id.clone()).collect(),
                values,
                mask,
            },
            labels: ScoreLabels::from_subjects(&q.subject_id, &self.template_subjects),
            weight,
        })
    }

    fn sample_eval(&self, i: usize) -> Result<FusionSample> {
        Ok(self.eval[i].clone())
    }
}

/// Trains the fusion model on the training split with the frozen QE.
pub fn train_qme(
    dataset: &SynthDataset,
    qe: Option<&QualityEstimator>,
    config: &ExperimentConfig,
    fusion: &FusionConfig,
) -> Result<(FusionModel, FusionTrainReport)> {
    let qe = match fusion.gating {
        Gating::Quality => Some(qe.ok_or_else(|| Error::Invalid("quality gating needs a quality estimator".into()))?),
        Gating::Uniform => None,
    };
    let sampler = FrameSampler::new(&dataset.train, config.channels_in_order()?, qe, config.frames_per_sample)?;
    train_fusion(&sampler, config.modality_order.clone(), &config.gating_modality, fusion)
}

/// Normalization statistics and weighted-sum coefficients fitted on training scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub stats: NormalizationStats,
    pub weighted_sum: WeightedSum,
}

impl Baselines {
    pub fn fit(train: &ScoreSet, config: &WeightedSumConfig) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for m in &train.matrices {
            let mut all = Vec::new();
            let mut nm = Vec::new();
            for q in 0..m.num_queries() {
                for (t, s) in m.row(q).into_iter().enumerate() {
                    if let Some(s) = s {
                        all.push(s);
                        if train.query_subjects[q] != train.template_subjects[t] {
                            nm.push(s);
                        }
                    }
                }
            }
            pools.insert(m.modality_id.clone(), (all, nm));
        }
        let stats = NormalizationStats::fit(&pools)?;
        let data = (0..train.num_queries())
            .map(|q| Ok((normalize_concat(&stats, Normalization::ZScore, &train.concat(q)?)?, train.labels(q))))
            .collect::<Result<Vec<_>>>()?;
        let weighted_sum = fit_weighted_sum(&data, config)?;
        Ok(Self { stats, weighted_sum })
    }
}

/// A fusion method of the comparison table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Single(String),
    Min,
    Max,
    Mean,
    ZScore,
    MinMax,
    Rhe,
    WeightedSum,
    Qme,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Single(m) => m.clone(),
            Method::Min => "min".into(),
            Method::Max => "max".into(),
            Method::Mean => "mean".into(),
            Method::ZScore => "zscore".into(),
            Method::MinMax => "minmax".into(),
            Method::Rhe => "rhe".into(),
            Method::WeightedSum => "weighted_sum".into(),
            Method::Qme => "qme".into(),
        }
    }

    pub fn parse(name: &str, modalities: &[String]) -> Result<Self> {
        Ok(match name {
            "min" => Method::Min,
            "max" => Method::Max,
            "mean" => Method::Mean,
            "zscore" => Method::ZScore,
            "minmax" => Method::MinMax,
            "rhe" => Method::Rhe,
            "weighted_sum" => Method::WeightedSum,
            "qme" => Method::Qme,
            m if modalities.iter().any(|x| x == m) => Method::Single(m.to_string()),
            other => return Err(Error::Invalid(format!("unknown method {other}"))),
        })
    }

    /// Every registered method, single modalities first.
    pub fn all(modalities: &[String]) -> Vec<Self> {
        let mut v: Vec<Self> = modalities.iter().cloned().map(Method::Single).collect();
        v.extend([
            Method::Min,
            Method::Max,
            Method::Mean,
            Method::ZScore,
            Method::MinMax,
            Method::Rhe,
            Method::WeightedSum,
            Method::Qme,
        ]);
        v
    }
}

/// Fused Q×T table of a non-learned or baseline method.
pub fn baseline_table(method: &Method, test: &ScoreSet, baselines: &Baselines) -> Result<ScoreTable> {
    if let Method::Single(m) = method {
        let j = test
            .matrices
            .iter()
            .position(|x| &x.modality_id == m)
            .ok_or_else(|| Error::Invalid(format!("unknown modality {m}")))?;
        return test.single_table(j);
    }
    let t = test.template_subjects.len();
    let mut rows = Vec::with_capacity(test.num_queries());
    for q in 0..test.num_queries() {
        let raw = test.concat(q)?;
        if !(0..raw.num_modalities()).any(|j| raw.modality_present(j)) {
            rows.push(vec![f64::NAN; t]);
            continue;
        }
        let row = match method {
            Method::Min => fuse_rows(&raw, min_fusion)?,
            Method::Max => fuse_rows(&raw, max_fusion)?,
            Method::Mean => fuse_rows(&raw, mean_fusion)?,
            Method::ZScore => fuse_rows(&normalize_concat(&baselines.stats, Normalization::ZScore, &raw)?, mean_fusion)?,
            Method::MinMax => fuse_rows(&normalize_concat(&baselines.stats, Normalization::MinMax, &raw)?, mean_fusion)?,
            Method::Rhe => fuse_rows(&normalize_concat(&baselines.stats, Normalization::Rhe, &raw)?, mean_fusion)?,
            Method::WeightedSum => {
                let z = normalize_concat(&baselines.stats, Normalization::ZScore, &raw)?;
                fuse_rows(&z, |r| baselines.weighted_sum.fuse(r))?
            }
            Method::Single(_) | Method::Qme => return Err(Error::Invalid(format!("{} is not a fixed baseline", method.name()))),
        };
        rows.push(row);
    }
    test.table_from_rows(&rows)
}

/// Fused Q×T table of a trained fusion model; queries with no modality are masked.
pub fn qme_table(model: &FusionModel, test: &ScoreSet) -> Result<ScoreTable> {
    let samples = test.fusion_samples()?;
    let fused = fuse_all(model, &samples)?;
    let t = test.template_subjects.len();
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .zip(fused)
        .map(|(s, f)| {
            if (0..s.scores.num_modalities()).any(|j| s.scores.modality_present(j)) {
                f.fused
            } else {
                vec![f64::NAN; t]
            }
        })
        .collect();
    test.table_from_rows(&rows)
}

/// Artifacts of one full pipeline run.
pub struct PipelineRun {
    pub dataset: SynthDataset,
    pub qe: QualityEstimator,
    pub qe_report: QeTrainReport,
    pub model: FusionModel,
    pub fusion_report: FusionTrainReport,
    pub baselines: Baselines,
    pub train_scores: ScoreSet,
    pub test_scores: ScoreSet,
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineRun> {
    config.validate()?;
    let dataset = generate(&config.synth)?;
    let (qe, qe_report) = train_quality_estimator(&dataset, config)?;
    let (model, fusion_report) = train_qme(&dataset, Some(&qe), config, &config.fusion)?;
    let channels = config.channels_in_order()?;
    let train_scores = ScoreSet::build(&dataset.train, &channels, Some(&qe))?;
    let test_scores = ScoreSet::build(&dataset.test, &channels, Some(&qe))?;
    let baselines = Baselines::fit(&train_scores, &config.weighted_sum)?;
    Ok(PipelineRun {
        dataset,
        qe,
        qe_report,
        model,
        fusion_report,
        baselines,
        train_scores,
        test_scores,
    })
}

impl PipelineRun {
    pub fn table(&self, method: &Method) -> Result<ScoreTable> {
        match method {
            Method::Qme => qme_table(&self.model, &self.test_scores),
            m => baseline_table(m, &self.test_scores, &self.baselines),
        }
    }

    pub fn evaluate(&self, method: &Method, targets: &MetricTargets) -> Result<EvalReport> {
        evaluate(&method.name(), &self.table(method)?, targets)
    }

    pub fn compare(&self, targets: &MetricTargets) -> Result<Vec<EvalReport>> {
        Method::all(&self.model.modality_order)
            .iter()
            .map(|m| self.evaluate(m, targets))
            .collect()
    }

    /// Predicted query weights and ground-truth quality of the gating modality on the test split.
    pub fn quality_pairs(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for (i, w) in self.test_scores.weights.iter().enumerate() {
            if let (Some(w), Some(q)) = (w, self.dataset.test.quality_of(i, &self.qe.modality_id)) {
                predicted.push(*w);
                truth.push(q);
            }
        }
        Ok((predicted, truth))
    }
}

/// One row of the loss / QE / expert-count ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub score_loss: bool,
    pub quality_gating: bool,
    pub experts: usize,
}

impl AblationSetting {
    pub fn label(&self) -> String {
        format!(
            "{}_{}_z{}",
            if self.score_loss { "score" } else { "triplet" },
            if self.quality_gating { "qe" } else { "uniform" },
            self.experts
        )
    }

    pub fn apply(&self, base: &FusionConfig) -> FusionConfig {
        FusionConfig {
            experts: self.experts,
            gating: if self.quality_gating { Gating::Quality } else { Gating::Uniform },
            loss: if self.score_loss { LossKind::ScoreTriplet } else { LossKind::Triplet },
            ..base.clone()
        }
    }
}

/// The five-row grid: triplet/score loss at Z=1 and Z=2 without QE, then the full model.
pub const ABLATION_GRID: [AblationSetting; 5] = [
    AblationSetting { score_loss: false, quality_gating: false, experts: 1 },
    AblationSetting { score_loss: true, quality_gating: false, experts: 1 },
    AblationSetting { score_loss: false, quality_gating: false, experts: 2 },
    AblationSetting { score_loss: true, quality_gating: false, experts: 2 },
    AblationSetting { score_loss: true, quality_gating: true, experts: 2 },
];

/// Trains and evaluates one model per setting on the same data and QE.
pub fn run_ablation(
    dataset: &SynthDataset,
    qe: &QualityEstimator,
    config: &ExperimentConfig,
    settings: &[AblationSetting],
) -> Result<Vec<(AblationSetting, EvalReport)>> {
    let test = ScoreSet::build(&dataset.test, &config.channels_in_order()?, Some(qe))?;
    settings
        .iter()
        .map(|s| {
            let (model, _) = train_qme(dataset, Some(qe), config, &s.apply(&config.fusion))?;
            let table = qme_table(&model, &test)?;
            Ok((*s, evaluate(&s.label(), &table, &config.targets)?))
        })
        .collect()
}

/// Drops one modality from a random `fraction` of queries; returns the new
/// split and the indices of the masked queries.
pub fn mask_modality(split: &Split, modality_id: &str, fraction: f64, seed: u64) -> Result<(Split, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("mask fraction {fraction} outside [0,1]")));
    }
    let n = split.queries.len();
    let k = (n as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = idx.into_iter().take(k).collect();
    chosen.sort_unstable();
    let mut out = split.clone();
    for &i in &chosen {
        out.queries[i].features.remove(modality_id);
        out.queries[i].qe_features.remove(modality_id);
    }
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.synth.train_subjects = 12;
        c.synth.test_subjects = 10;
        c.synth.queries_per_subject = 3;
        c.qe.epochs = 2;
        c.fusion.epochs = 2;
        c.weighted_sum.epochs = 2;
        c
    }

    #[test]
    fn pipeline_runs_and_compares_every_method() {
        let cfg = tiny();
        let run = run_pipeline(&cfg).unwrap();
        let reports = run.compare(&cfg.targets).unwrap();
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(r.rank(1).unwrap() >= 0.0 && r.rank(1).unwrap() <= 1.0);
        }
    }

    #[test]
    fn frame_sampler_draws_requested_frames() {
        let cfg = tiny();
        let ds = generate(&cfg.synth).unwrap();
        let s = FrameSampler::new(&ds.train, cfg.channels_in_order().unwrap(), None, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = s.sample(0, &mut rng).unwrap();
        let b = s.sample(0, &mut rng).unwrap();
        assert_eq!(a.scores.values.dim(), (ds.train.gallery.len(), 2));
        assert_ne!(a.scores.values, b.scores.values);
        assert_eq!(s.sample_eval(0).unwrap().scores.values, s.sample_eval(0).unwrap().scores.values);
    }

    #[test]
    fn mask_modality_hits_requested_share() {
        let cfg = tiny();
        let ds = generate(&cfg.synth).unwrap();
        let (masked, idx) = mask_modality(&ds.test, "gait", 0.2, 3).unwrap();
        assert_eq!(idx.len(), 6);
        for (i, q) in masked.queries.iter().enumerate() {
            assert_eq!(q.has_modality("gait"), !idx.contains(&i));
        }
    }

    #[test]
    fn method_names_round_trip() {
        let mods = vec!["face".to_string(), "gait".to_string()];
        for m in Method::all(&mods) {
            assert_eq!(Method::parse(&m.name(), &mods).unwrap(), m);
        }
        assert!(Method::parse("svm", &mods).is_err());
    }
}
