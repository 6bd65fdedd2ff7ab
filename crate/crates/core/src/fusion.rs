//! Quality-guided mixture of score-fusion experts.
//!
//! Stacked modality scores (T×N per query) pass through a batch-norm layer,
//! then each expert maps every normalized template row (N scores) to one
//! fused score. The router turns the query's quality weight into expert
//! weights `p_z`, and the fused row is `sum_z p_z * S_z`.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{pairwise_triplet_loss_grad, score_triplet_loss_grad};
use crate::nn::checkpoint::{check_version, net_from_records, net_to_records, BatchNormRecord, LayerRecord, FORMAT_VERSION};
use crate::nn::{Activation, AdamConfig, AdamState, BatchNormState, DenseNet, LrSchedule, Mode};
use crate::quality::QualityEstimator;
use crate::types::{ConcatScores, ScoreLabels};

/// Quality weight substituted when the gating modality is unavailable.
pub const FALLBACK_QUALITY_WEIGHT: f64 = 0.5;

/// Keeps saturated sigmoid outputs inside the open unit interval.
const WEIGHT_EPS: f64 = 1e-9;

/// Expert weights for a quality weight `w`: `(1)` for one expert, `(w, 1 - w)` for two.
pub fn route(w: f64, experts: usize) -> Result<Vec<f64>> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::InvalidQualityWeight(w));
    }
    match experts {
        0 => Err(Error::Invalid("at least one expert is required".into())),
        1 => Ok(vec![1.0]),
        2 => Ok(vec![w, 1.0 - w]),
        z => Router::learned(z, &mut ChaCha8Rng::seed_from_u64(0)).route(Some(w)),
    }
}

/// Whether expert weights follow the quality estimator or stay uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    Quality,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Suppress non-match scores below 0, push match scores above the margin.
    ScoreTriplet,
    /// Relative margin between every match/non-match pair.
    Triplet,
}

/// Maps a quality weight to expert weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Router {
    Single,
    QualityPair,
    /// `softmax(weight * w + bias)` over Z > 2 experts.
    Learned { weight: Vec<f64>, bias: Vec<f64> },
    Uniform { experts: usize },
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl Router {
    pub fn new<R: Rng + ?Sized>(experts: usize, gating: Gating, rng: &mut R) -> Result<Self> {
        match (experts, gating) {
            (0, _) => Err(Error::Invalid("at least one expert is required".into())),
            (1, _) => Ok(Router::Single),
            (z, Gating::Uniform) => Ok(Router::Uniform { experts: z }),
            (2, Gating::Quality) => Ok(Router::QualityPair),
            (z, Gating::Quality) => Ok(Router::learned(z, rng)),
        }
    }

    fn learned<R: Rng + ?Sized>(experts: usize, rng: &mut R) -> Self {
        // spread slopes so experts start ordered by quality
        let weight = (0..experts)
            .map(|k| 2.0 * (1.0 - 2.0 * k as f64 / (experts - 1) as f64) + rng.random_range(-0.01..0.01))
            .collect();
        Router::Learned {
            weight,
            bias: vec![0.0; experts],
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Router::Single => 1,
            Router::QualityPair => 2,
            Router::Learned { weight, .. } => weight.len(),
            Router::Uniform { experts } => *experts,
        }
    }

    pub fn uses_quality(&self) -> bool {
        matches!(self, Router::QualityPair | Router::Learned { .. })
    }

    /// Expert weights; `w` is required only by quality-driven routers.
    pub fn route(&self, w: Option<f64>) -> Result<Vec<f64>> {
        let need = |w: Option<f64>| -> Result<f64> {
            let w = w.ok_or_else(|| Error::Invalid("quality weight required".into()))?;
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::InvalidQualityWeight(w));
            }
            Ok(w)
        };
        match self {
            Router::Single => Ok(vec![1.0]),
            Router::Uniform { experts } => Ok(vec![1.0 / *experts as f64; *experts]),
            Router::QualityPair => {
                let w = need(w)?;
                Ok(vec![w, 1.0 - w])
            }
            Router::Learned { weight, bias } => {
                let w = need(w)?;
                let logits: Vec<f64> = weight.iter().zip(bias).map(|(a, b)| a * w + b).collect();
                Ok(softmax(&logits))
            }
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Router::Learned { weight, bias } => weight.len() + bias.len(),
            _ => 0,
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            Router::Learned { weight, bias } => weight.iter().chain(bias).copied().collect(),
            _ => Vec::new(),
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        if let Router::Learned { weight, bias } = self {
            let z = weight.len();
            weight.copy_from_slice(&p[..z]);
            bias.copy_from_slice(&p[z..2 * z]);
        }
    }

    /// Gradient of the loss w.r.t. router parameters given `dL/dp`.
    fn backward(&self, w: Option<f64>, p: &[f64], dp: &[f64]) -> Vec<f64> {
        match self {
            Router::Learned { weight, .. } => {
                let w = w.unwrap_or(FALLBACK_QUALITY_WEIGHT);
                let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                let dlogit: Vec<f64> = p.iter().zip(dp).map(|(pk, dk)| pk * (dk - dot)).collect();
                let z = weight.len();
                let mut g = vec![0.0; 2 * z];
                for k in 0..z {
                    g[k] = dlogit[k] * w;
                    g[z + k] = dlogit[k];
                }
                g
            }
            _ => Vec::new(),
        }
    }
}

/// One query's fusion input.
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub scores: ConcatScores,
    pub labels: ScoreLabels,
    /// Query-level quality weight of the gating modality, if available.
    pub weight: Option<f64>,
}

/// Source of training queries for [`train_fusion`].
pub trait FusionData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A training draw of query `i` (may subsample frames).
    fn sample(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<FusionSample>;

    /// Deterministic view of query `i`, used for loss tracking.
    fn sample_eval(&self, i: usize) -> Result<FusionSample>;
}

impl FusionData for [FusionSample] {
    fn len(&self) -> usize {
        <[FusionSample]>::len(self)
    }

    fn sample(&self, i: usize, _rng: &mut ChaCha8Rng) -> Result<FusionSample> {
        Ok(self[i].clone())
    }

    fn sample_eval(&self, i: usize) -> Result<FusionSample> {
        Ok(self[i].clone())
    }
}

impl FusionData for Vec<FusionSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<FusionSample> {
        self.as_slice().sample(i, rng)
    }

    fn sample_eval(&self, i: usize) -> Result<FusionSample> {
        self.as_slice().sample_eval(i)
    }
}

/// Fused row plus the per-expert rows it was mixed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    pub fused: Vec<f64>,
    pub experts: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
    /// Quality weight actually used for routing.
    pub quality_weight: Option<f64>,
    /// Set when the gating modality was missing and the fallback weight was used.
    pub gating_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub experts: usize,
    pub hidden: Vec<usize>,
    pub gating: Gating,
    pub loss: LossKind,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            experts: 2,
            hidden: vec![16, 16],
            gating: Gating::Quality,
            loss: LossKind::ScoreTriplet,
            margin: 3.0,
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainReport {
    pub initial_loss: f64,
    /// Eval-mode training loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trained fusion model: norm layer, experts and router.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub modality_order: Vec<String>,
    pub gating_modality: String,
    pub margin: f64,
    pub norm: BatchNormState,
    pub experts: Vec<DenseNet>,
    pub router: Router,
}

/// Everything the backward pass needs from one batch forward.
struct BatchPass {
    loss: f64,
    grads: Vec<f64>,
    norm_after: BatchNormState,
}

impl FusionModel {
    pub fn new(
        modality_order: Vec<String>,
        gating_modality: impl Into<String>,
        config: &FusionConfig,
    ) -> Result<Self> {
        let n = modality_order.len();
        if n == 0 {
            return Err(Error::Invalid("fusion needs at least one modality".into()));
        }
        if !(config.margin > 0.0) {
            return Err(Error::Invalid(format!("margin must be positive, got {}", config.margin)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![n];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; config.hidden.len()];
        acts.push(Activation::Identity);
        let experts = (0..config.experts)
            .map(|_| DenseNet::new(&dims, &acts, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let router = Router::new(config.experts, config.gating, &mut rng)?;
        Ok(Self {
            modality_order,
            gating_modality: gating_modality.into(),
            margin: config.margin,
            norm: BatchNormState::new(n),
            experts,
            router,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_order.len()
    }

    fn check_order(&self, scores: &ConcatScores) -> Result<()> {
        if scores.modality_order != self.modality_order {
            return Err(Error::ModalityOrderMismatch(format!(
                "model {:?} vs input {:?}",
                self.modality_order, scores.modality_order
            )));
        }
        Ok(())
    }

    /// Flat parameters: norm scale, norm shift, each expert, router.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.norm.scale.iter().chain(self.norm.shift.iter()).copied().collect();
        for e in &self.experts {
            p.extend(e.flat_params());
        }
        p.extend(self.router.params());
        p
    }

    pub fn num_params(&self) -> usize {
        2 * self.norm.features() + self.experts.iter().map(DenseNet::num_params).sum::<usize>() + self.router.num_params()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::ShapeError(format!("{} parameters for {}", p.len(), self.num_params())));
        }
        let n = self.norm.features();
        self.norm.scale.assign(&ndarray::ArrayView1::from(&p[..n]));
        self.norm.shift.assign(&ndarray::ArrayView1::from(&p[n..2 * n]));
        let mut off = 2 * n;
        for e in &mut self.experts {
            let k = e.num_params();
            e.set_flat_params(&p[off..off + k])?;
            off += k;
        }
        self.router.set_params(&p[off..]);
        Ok(())
    }

    /// Norm scale/shift are exempt from weight decay.
    pub fn no_decay_mask(&self) -> Vec<bool> {
        let mut m = vec![true; 2 * self.norm.features()];
        m.resize(self.num_params(), false);
        m
    }

    fn gate_for(&self, w: Option<f64>) -> Result<(Vec<f64>, Option<f64>, bool)> {
        if !self.router.uses_quality() {
            return Ok((self.router.route(None)?, w, false));
        }
        match w {
            Some(w) => {
                let w = w.clamp(WEIGHT_EPS, 1.0 - WEIGHT_EPS);
                Ok((self.router.route(Some(w))?, Some(w), false))
            }
            None => Ok((
                self.router.route(Some(FALLBACK_QUALITY_WEIGHT))?,
                Some(FALLBACK_QUALITY_WEIGHT),
                true,
            )),
        }
    }

    /// Eval-mode fusion of one query's stacked scores.
    pub fn fuse(&self, scores: &ConcatScores, w: Option<f64>) -> Result<FusedScores> {
        self.check_order(scores)?;
        let (gate, quality_weight, gating_fallback) = self.gate_for(w)?;
        let (normed, _) = self.norm.apply_eval(scores.values.view(), Some(scores.mask.view()))?;
        let experts = self
            .experts
            .iter()
            .map(|e| Ok(e.predict(normed.view())?.column(0).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let t = scores.num_templates();
        let fused = (0..t)
            .map(|r| gate.iter().zip(&experts).map(|(p, s)| p * s[r]).sum())
            .collect();
        Ok(FusedScores {
            fused,
            experts,
            gate,
            quality_weight,
            gating_fallback,
        })
    }

    /// Eval-mode fusion of many queries at once.
    pub fn fuse_batch(&self, batch: &[(&ConcatScores, Option<f64>)]) -> Result<Vec<FusedScores>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.num_modalities();
        let rows: usize = batch.iter().map(|(s, _)| s.num_templates()).sum();
        let mut x = Array2::zeros((rows, n));
        let mut mask = Array2::from_elem((rows, n), false);
        let mut off = 0;
        for (s, _) in batch {
            self.check_order(s)?;
            let t = s.num_templates();
            x.slice_mut(ndarray::s![off..off + t, ..]).assign(&s.values);
            mask.slice_mut(ndarray::s![off..off + t, ..]).assign(&s.mask);
            off += t;
        }
        let (normed, _) = self.norm.apply_eval(x.view(), Some(mask.view()))?;
        let outs = self
            .experts
            .iter()
            .map(|e| e.predict(normed.view()))
            .collect::<Result<Vec<_>>>()?;
        let mut res = Vec::with_capacity(batch.len());
        let mut off = 0;
        for (s, w) in batch {
            let (gate, quality_weight, gating_fallback) = self.gate_for(*w)?;
            let t = s.num_templates();
            let experts: Vec<Vec<f64>> = outs.iter().map(|o| o.column(0).slice(ndarray::s![off..off + t]).to_vec()).collect();
            let fused = (0..t)
                .map(|r| gate.iter().zip(&experts).map(|(p, e)| p * e[r]).sum())
                .collect();
            res.push(FusedScores {
                fused,
                experts,
                gate,
                quality_weight,
                gating_fallback,
            });
            off += t;
        }
        Ok(res)
    }

    /// Full pipeline for one query: quality weight from the estimator, routing, fusion.
    ///
    /// `gating_features` are the reduced intermediate features (L×2d) of the
    /// gating modality; `None` falls back to a weight of 0.5 and flags it.
    pub fn infer(
        &self,
        qe: Option<&QualityEstimator>,
        scores: &ConcatScores,
        gating_features: Option<ndarray::ArrayView2<f64>>,
    ) -> Result<FusedScores> {
        let w = match (qe, gating_features) {
            (Some(qe), Some(f)) => Some(qe.predict_query_weight(f)?.query),
            _ => None,
        };
        self.fuse(scores, w)
    }

    /// Mean loss over `batch` and its gradient w.r.t. [`Self::flat_params`].
    pub fn loss_and_grad(&self, batch: &[FusionSample], mode: Mode, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        let pass = self.batch_pass(batch, mode, loss)?;
        Ok((pass.loss, pass.grads))
    }

    fn batch_pass(&self, batch: &[FusionSample], mode: Mode, loss_kind: LossKind) -> Result<BatchPass> {
        if batch.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let n = self.num_modalities();
        let rows: usize = batch.iter().map(|s| s.scores.num_templates()).sum();
        let mut x = Array2::zeros((rows, n));
        let mut mask = Array2::from_elem((rows, n), false);
        let mut offsets = Vec::with_capacity(batch.len());
        let mut off = 0;
        for s in batch {
            self.check_order(&s.scores)?;
            let t = s.scores.num_templates();
            x.slice_mut(ndarray::s![off..off + t, ..]).assign(&s.scores.values);
            mask.slice_mut(ndarray::s![off..off + t, ..]).assign(&s.scores.mask);
            offsets.push(off);
            off += t;
        }
        let mut norm = self.norm.clone();
        let (normed, norm_cache) = norm.apply(x.view(), Some(mask.view()), mode)?;
        let caches = self
            .experts
            .iter()
            .map(|e| e.forward(normed.view()))
            .collect::<Result<Vec<_>>>()?;
        let z = self.num_experts();
        let b = batch.len() as f64;
        let mut total = 0.0;
        let mut d_expert: Vec<Array2<f64>> = (0..z).map(|_| Array2::zeros((rows, 1))).collect();
        let mut router_grad = vec![0.0; self.router.num_params()];
        for (s, &off) in batch.iter().zip(&offsets) {
            let (gate, w, _) = self.gate_for(s.weight)?;
            let t = s.scores.num_templates();
            let fused: Vec<f64> = (0..t)
                .map(|r| (0..z).map(|k| gate[k] * caches[k].output()[[off + r, 0]]).sum())
                .collect();
            let (l, g) = match loss_kind {
                LossKind::ScoreTriplet => score_triplet_loss_grad(&fused, &s.labels, self.margin)?,
                LossKind::Triplet => pairwise_triplet_loss_grad(&fused, &s.labels, self.margin)?,
            };
            total += l / b;
            let mut dp = vec![0.0; z];
            for r in 0..t {
                let gr = g[r] / b;
                for k in 0..z {
                    d_expert[k][[off + r, 0]] = gate[k] * gr;
                    dp[k] += gr * caches[k].output()[[off + r, 0]];
                }
            }
            for (a, v) in router_grad.iter_mut().zip(self.router.backward(w, &gate, &dp)) {
                *a += v;
            }
        }
        let mut dnormed = Array2::<f64>::zeros((rows, n));
        let mut expert_grads = Vec::with_capacity(z);
        for (k, e) in self.experts.iter().enumerate() {
            let (g, dx) = e.backward(&caches[k], d_expert[k].view())?;
            dnormed += &dx;
            expert_grads.push(g.flatten());
        }
        let (bn_grads, _) = self.norm.backward(&norm_cache, dnormed.view())?;
        let mut grads: Vec<f64> = bn_grads.scale.iter().chain(bn_grads.shift.iter()).copied().collect();
        for g in expert_grads {
            grads.extend(g);
        }
        grads.extend(router_grad);
        Ok(BatchPass {
            loss: total,
            grads,
            norm_after: norm,
        })
    }

    pub fn to_checkpoint(&self) -> FusionCheckpoint {
        FusionCheckpoint {
            format_version: FORMAT_VERSION,
            norm: BatchNormRecord::from(&self.norm),
            experts: self.experts.iter().map(net_to_records).collect(),
            router: self.router.clone(),
            gating_modality: self.gating_modality.clone(),
            margin: self.margin,
            modality_order: self.modality_order.clone(),
        }
    }

    pub fn from_checkpoint(c: &FusionCheckpoint) -> Result<Self> {
        check_version(c.format_version)?;
        let experts = c.experts.iter().map(|l| net_from_records(l)).collect::<Result<Vec<_>>>()?;
        if experts.len() != c.router.num_experts() {
            return Err(Error::ShapeError("router and expert count disagree".into()));
        }
        let norm = BatchNormState::try_from(&c.norm)?;
        if norm.features() != c.modality_order.len() || experts.iter().any(|e| e.input_dim() != c.modality_order.len()) {
            return Err(Error::ModalityOrderMismatch("checkpoint widths vs modality order".into()));
        }
        Ok(Self {
            modality_order: c.modality_order.clone(),
            gating_modality: c.gating_modality.clone(),
            margin: c.margin,
            norm,
            experts,
            router: c.router.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionCheckpoint {
    pub format_version: u32,
    pub norm: BatchNormRecord,
    pub experts: Vec<Vec<LayerRecord>>,
    pub router: Router,
    pub gating_modality: String,
    pub margin: f64,
    pub modality_order: Vec<String>,
}

fn mean_eval_loss<D: FusionData + ?Sized>(model: &FusionModel, data: &D, idx: &[usize], loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let batch = chunk.iter().map(|&i| data.sample_eval(i)).collect::<Result<Vec<_>>>()?;
        let (l, _) = model.loss_and_grad(&batch, Mode::Eval, loss)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains a fusion model with Adam and a warm-up cosine schedule.
///
/// The norm layer runs in train mode during optimization. Queries without
/// any match template are skipped. Loss tracking uses eval mode on the
/// deterministic view of each query.
pub fn train_fusion<D: FusionData + ?Sized>(
    data: &D,
    modality_order: Vec<String>,
    gating_modality: &str,
    config: &FusionConfig,
) -> Result<(FusionModel, FusionTrainReport)> {
    let mut usable = Vec::new();
    for i in 0..data.len() {
        if data.sample_eval(i)?.labels.num_matches() > 0 {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut model = FusionModel::new(modality_order, gating_modality, config)?;
    let batch = config.batch_size.max(2);
    let steps_per_epoch = usable.len().div_ceil(batch);
    let total = (steps_per_epoch * config.epochs).max(1);
    let schedule = LrSchedule::with_warmup_fraction(total, config.warmup_fraction, config.adam.lr, 0.0)?;
    let mut opt = AdamState::new(model.num_params(), config.adam, Some(schedule)).with_no_decay(model.no_decay_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xF05E);
    let initial_loss = mean_eval_loss(&model, data, &usable, config.loss)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order = usable.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let samples = idx.iter().map(|&i| data.sample(i, &mut rng)).collect::<Result<Vec<_>>>()?;
            let pass = model.batch_pass(&samples, Mode::Train, config.loss)?;
            if !pass.loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            model.norm.running_mean = pass.norm_after.running_mean;
            model.norm.running_var = pass.norm_after.running_var;
            let mut params = model.flat_params();
            opt.step(&mut params, &pass.grads)?;
            model.set_flat_params(&params)?;
        }
        let l = mean_eval_loss(&model, data, &usable, config.loss)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        log::debug!("fusion epoch {} loss {l:.6}", epoch_losses.len() + 1);
        epoch_losses.push(l);
    }
    Ok((model, FusionTrainReport { initial_loss, epoch_losses }))
}

/// Scores of each expert and the fused row for a set of samples, in eval mode.
pub fn fuse_all(model: &FusionModel, samples: &[FusionSample]) -> Result<Vec<FusedScores>> {
    let refs: Vec<(&ConcatScores, Option<f64>)> = samples.iter().map(|s| (&s.scores, s.weight)).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(64) {
        out.extend(model.fuse_batch(chunk)?);
    }
    Ok(out)
}

/// Column means of the normalized input over a set of samples (diagnostic).
pub fn normalized_column_means(model: &FusionModel, samples: &[FusionSample]) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; model.num_modalities()];
    let mut count = 0usize;
    for s in samples {
        let (y, _) = model.norm.apply_eval(s.scores.values.view(), Some(s.scores.mask.view()))?;
        for (j, c) in y.axis_iter(Axis(1)).enumerate() {
            sums[j] += c.sum();
        }
        count += y.nrows();
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}
