//! Quality estimator trained from ranking-derived pseudo labels.
//!
//! Intermediate backbone features of each frame are reduced to per-channel
//! mean and standard deviation, and an encoder maps that 2d-vector to a
//! quality weight in (0, 1). Training targets come from how well the frame
//! feature ranks its own subject among the training subject centers.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{check_version, net_from_records, net_to_records, LayerRecord, FORMAT_VERSION};
use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, LrSchedule};
use crate::scores::similarity_scores;
use crate::types::{GalleryManifest, MetricKind};

/// Per-frame block×patch×channel features, stored as L×U×P×d.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateFeatures(pub Array4<f64>);

impl IntermediateFeatures {
    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }
}

/// Reduces each frame to `[mean_0..mean_d, std_0..std_d]` over blocks and patches.
///
/// Standard deviation is the population value, so a single block×patch gives 0.
pub fn reduce_features(features: &IntermediateFeatures) -> Result<Array2<f64>> {
    let (l, u, p, d) = features.0.dim();
    if l == 0 || u == 0 || p == 0 || d == 0 {
        return Err(Error::ShapeError(format!("intermediate features of shape {:?}", features.0.dim())));
    }
    let n = (u * p) as f64;
    let mut out = Array2::zeros((l, 2 * d));
    for (i, frame) in features.0.axis_iter(Axis(0)).enumerate() {
        let flat = frame.to_shape((u * p, d)).expect("contiguous reshape");
        let mean = flat.sum_axis(Axis(0)) / n;
        for c in 0..d {
            let var = flat.column(c).iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>() / n;
            out[[i, c]] = mean[c];
            out[[i, d + c]] = var.sqrt();
        }
    }
    Ok(out)
}

/// Frame-level and query-level quality weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityWeight {
    pub per_frame: Vec<f64>,
    pub query: f64,
}

/// One center feature per training subject.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGallery {
    pub subjects: Vec<String>,
    pub centers: Array2<f64>,
    pub metric: MetricKind,
}

impl TrainingGallery {
    /// Average-pools each subject's templates into a center feature.
    pub fn from_templates(gallery: &GalleryManifest, modality_id: &str, metric: MetricKind) -> Result<Self> {
        let feats = gallery
            .features
            .get(modality_id)
            .ok_or_else(|| Error::Invalid(format!("gallery has no features for {modality_id}")))?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in gallery.templates.iter().enumerate() {
            groups.entry(t.subject_id.as_str()).or_default().push(i);
        }
        let d = feats.ncols();
        let mut centers = Array2::zeros((groups.len(), d));
        let mut subjects = Vec::with_capacity(groups.len());
        for (k, (s, idx)) in groups.iter().enumerate() {
            let mut c = Array1::<f64>::zeros(d);
            for &i in idx {
                c += &feats.row(i);
            }
            centers.row_mut(k).assign(&(c / idx.len() as f64));
            subjects.push(s.to_string());
        }
        Ok(Self {
            subjects,
            centers,
            metric,
        })
    }

    pub fn subject_index(&self, subject: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s == subject)
    }
}

/// Rank of the true subject among all centers, 1 = best.
///
/// Centers tying with the true subject's similarity rank ahead of it.
pub fn compute_rank(query: ArrayView1<f64>, gallery: &TrainingGallery, true_subject: &str) -> Result<usize> {
    let truth = gallery
        .subject_index(true_subject)
        .ok_or_else(|| Error::UnknownSubject(true_subject.to_string()))?;
    let sims = similarity_scores(gallery.metric, query, gallery.centers.view())?;
    Ok(rank_from_similarities(sims.as_slice().expect("contiguous"), truth))
}

pub fn rank_from_similarities(sims: &[f64], truth: usize) -> usize {
    let target = sims[truth];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(k, &s)| k != truth && s >= target)
        .count()
}

/// Pseudo quality target `relu((delta - rank) / (delta - 1))`.
pub fn pseudo_quality_label(rank: usize, delta: f64) -> Result<f64> {
    if !(delta > 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if rank == 0 {
        return Err(Error::Invalid("ranks start at 1".into()));
    }
    Ok(((delta - rank as f64) / (delta - 1.0)).max(0.0))
}

/// Trained (frozen) quality estimator for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityEstimator {
    pub modality_id: String,
    pub delta: f64,
    pub net: DenseNet,
}

impl QualityEstimator {
    pub fn new(modality_id: impl Into<String>, delta: f64, net: DenseNet) -> Result<Self> {
        if !(delta > 1.0) {
            return Err(Error::InvalidDelta(delta));
        }
        Ok(Self {
            modality_id: modality_id.into(),
            delta,
            net,
        })
    }

    /// Untrained encoder `input -> hidden... -> 1` with relu hidden layers and sigmoid output.
    pub fn encoder(input_dim: usize, hidden: &[usize], seed: u64) -> Result<DenseNet> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Sigmoid);
        DenseNet::new(&dims, &acts, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Per-frame weights for reduced features (L×2d).
    pub fn predict_frames(&self, reduced: ArrayView2<f64>) -> Result<Vec<f64>> {
        if reduced.ncols() != self.input_dim() {
            return Err(Error::ShapeError(format!(
                "quality input width {} vs encoder {}",
                reduced.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.net.predict(reduced)?.column(0).to_vec())
    }

    pub fn predict_query_weight(&self, reduced: ArrayView2<f64>) -> Result<QualityWeight> {
        if reduced.nrows() == 0 {
            return Err(Error::EmptyQuery);
        }
        let per_frame = self.predict_frames(reduced)?;
        let query = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        Ok(QualityWeight { per_frame, query })
    }

    pub fn predict_from_intermediate(&self, features: &IntermediateFeatures) -> Result<QualityWeight> {
        self.predict_query_weight(reduce_features(features)?.view())
    }

    pub fn to_checkpoint(&self) -> QeCheckpoint {
        QeCheckpoint {
            format_version: FORMAT_VERSION,
            modality_id: self.modality_id.clone(),
            delta: self.delta,
            layers: net_to_records(&self.net),
        }
    }

    pub fn from_checkpoint(ckpt: &QeCheckpoint) -> Result<Self> {
        check_version(ckpt.format_version)?;
        Self::new(ckpt.modality_id.clone(), ckpt.delta, net_from_records(&ckpt.layers)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeCheckpoint {
    pub format_version: u32,
    pub modality_id: String,
    pub delta: f64,
    pub layers: Vec<LayerRecord>,
}

/// One training probe for the quality estimator.
#[derive(Debug, Clone)]
pub struct QeSample {
    pub subject_id: String,
    /// L×d frame features used for ranking.
    pub frame_features: Array2<f64>,
    /// L×2d reduced intermediate features fed to the encoder.
    pub reduced: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QeConfig {
    pub hidden: Vec<usize>,
    pub delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            delta: 3.0,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeTrainReport {
    /// Mean frame loss over the whole training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
}

/// Per-frame pseudo labels for every sample, in sample/frame order.
pub fn frame_labels(samples: &[QeSample], gallery: &TrainingGallery, delta: f64) -> Result<Vec<f64>> {
    let mut labels = Vec::new();
    for s in samples {
        for frame in s.frame_features.rows() {
            let r = compute_rank(frame, gallery, &s.subject_id)?;
            labels.push(pseudo_quality_label(r, delta)?);
        }
    }
    Ok(labels)
}

fn mse(net: &DenseNet, x: &Array2<f64>, y: &[f64]) -> Result<f64> {
    let out = net.predict(x.view())?;
    Ok(out.column(0).iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Trains a quality estimator on per-frame pseudo labels.
pub fn train_qe(
    modality_id: &str,
    samples: &[QeSample],
    gallery: &TrainingGallery,
    config: &QeConfig,
) -> Result<(QualityEstimator, QeTrainReport)> {
    if samples.is_empty() || samples.iter().all(|s| s.reduced.nrows() == 0) {
        return Err(Error::EmptyTrainingSet);
    }
    for s in samples {
        if s.reduced.nrows() != s.frame_features.nrows() {
            return Err(Error::ShapeError("reduced and frame features disagree on frame count".into()));
        }
    }
    let labels = frame_labels(samples, gallery, config.delta)?;
    let width = samples[0].reduced.ncols();
    let mut x = Array2::zeros((labels.len(), width));
    let mut row = 0;
    for s in samples {
        if s.reduced.ncols() != width {
            return Err(Error::ShapeError("inconsistent quality input width".into()));
        }
        for r in s.reduced.rows() {
            x.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let mut net = QualityEstimator::encoder(width, &config.hidden, config.seed)?;
    let batch = config.batch_size.max(1);
    let steps_per_epoch = labels.len().div_ceil(batch);
    let total = (steps_per_epoch * config.epochs).max(1);
    let schedule = LrSchedule::with_warmup_fraction(total, config.warmup_fraction, config.adam.lr, 0.0)?;
    let mut opt = AdamState::new(net.num_params(), config.adam, Some(schedule));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51_7E);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let initial_loss = mse(&net, &x, &labels)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let xb = x.select(Axis(0), idx);
            let cache = net.forward(xb.view())?;
            let n = idx.len() as f64;
            let grad_out = Array2::from_shape_fn((idx.len(), 1), |(i, _)| 2.0 * (cache.output()[[i, 0]] - labels[idx[i]]) / n);
            let (grads, _) = net.backward(&cache, grad_out.view())?;
            let mut params = net.flat_params();
            opt.step(&mut params, &grads.flatten())?;
            net.set_flat_params(&params)?;
        }
        let loss = mse(&net, &x, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        log::debug!("qe {modality_id} epoch {} loss {loss:.6}", epoch_losses.len() + 1);
        epoch_losses.push(loss);
    }
    let qe = QualityEstimator::new(modality_id, config.delta, net)?;
    Ok((qe, QeTrainReport { epoch_losses, initial_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_quality_label(1, 3.0).unwrap(), 1.0);
        assert_eq!(pseudo_quality_label(3, 3.0).unwrap(), 0.0);
        assert_eq!(pseudo_quality_label(7, 3.0).unwrap(), 0.0);
        assert_eq!(pseudo_quality_label(2, 3.0).unwrap(), 0.5);
        assert!((pseudo_quality_label(10, 20.0).unwrap() - 10.0 / 19.0).abs() < 1e-15);
        assert!(matches!(pseudo_quality_label(1, 1.0), Err(Error::InvalidDelta(_))));
    }

    fn gallery(centers: Array2<f64>) -> TrainingGallery {
        TrainingGallery {
            subjects: (0..centers.nrows()).map(|i| format!("s{i}")).collect(),
            centers,
            metric: MetricKind::Cosine,
        }
    }

    #[test]
    fn rank_examples() {
        let g = gallery(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(compute_rank(array![1.0, 0.0, 0.0].view(), &g, "s0").unwrap(), 1);
        let g2 = gallery(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(compute_rank(array![0.0, 1.0].view(), &g2, "s0").unwrap(), 2);
        assert!(matches!(
            compute_rank(array![0.0, 1.0].view(), &g2, "zz"),
            Err(Error::UnknownSubject(_))
        ));
        // a tie counts against the true subject
        let g3 = gallery(array![[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(compute_rank(array![1.0, 0.0].view(), &g3, "s0").unwrap(), 2);
    }

    #[test]
    fn reduce_constant_and_single_patch() {
        let c = IntermediateFeatures(Array4::from_elem((2, 3, 4, 5), 0.75));
        let r = reduce_features(&c).unwrap();
        assert_eq!(r.dim(), (2, 10));
        for row in r.rows() {
            assert!(row.iter().take(5).all(|&v| (v - 0.75).abs() < 1e-15));
            assert!(row.iter().skip(5).all(|&v| v.abs() < 1e-15));
        }
        let single = IntermediateFeatures(Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap());
        assert_eq!(reduce_features(&single).unwrap(), array![[1.0, -2.0, 3.0, 0.0, 0.0, 0.0]]);
    }

    #[test]
    fn query_weight_is_frame_mean() {
        let layers = vec![crate::nn::DenseLayer {
            weight: array![[1.0], [0.0]],
            bias: array![0.0],
            activation: Activation::Sigmoid,
        }];
        let qe = QualityEstimator::new("face", 3.0, DenseNet::from_layers(layers).unwrap()).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let x = array![[logit(0.2), 9.0], [logit(0.8), -4.0]];
        let w = qe.predict_query_weight(x.view()).unwrap();
        assert!((w.query - 0.5).abs() < 1e-12);
        let one = qe.predict_query_weight(x.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(one.query, one.per_frame[0]);
        assert!(matches!(qe.predict_query_weight(Array2::zeros((1, 3)).view()), Err(Error::ShapeError(_))));
    }
}
