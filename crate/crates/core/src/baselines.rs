//! Fixed-rule and weighted-sum score fusion baselines.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::score_triplet_loss_grad;
use crate::nn::{AdamConfig, AdamState};
use crate::types::{ConcatScores, ScoreLabels};

const STD_FLOOR: f64 = 1e-12;

fn present(row: &[Option<f64>]) -> Result<Vec<f64>> {
    let v: Vec<f64> = row.iter().flatten().copied().collect();
    if v.is_empty() {
        return Err(Error::AllModalitiesMissing);
    }
    Ok(v)
}

pub fn min_fusion(row: &[Option<f64>]) -> Result<f64> {
    Ok(present(row)?.into_iter().fold(f64::INFINITY, f64::min))
}

pub fn max_fusion(row: &[Option<f64>]) -> Result<f64> {
    Ok(present(row)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

pub fn mean_fusion(row: &[Option<f64>]) -> Result<f64> {
    let v = present(row)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Score statistics of one modality, fitted on a training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Sorted reference sample for rank-based equalization.
    pub reference: Vec<f64>,
}

impl ModalityStats {
    /// Fits moments and range on `pool`; `reference` becomes the RHE sample.
    pub fn fit(pool: &[f64], reference: &[f64]) -> Result<Self> {
        if pool.is_empty() || reference.is_empty() {
            return Err(Error::EmptyScoreSet);
        }
        let n = pool.len() as f64;
        let mean = pool.iter().sum::<f64>() / n;
        let var = pool.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let mut reference = reference.to_vec();
        reference.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            std: var.sqrt(),
            min: pool.iter().copied().fold(f64::INFINITY, f64::min),
            max: pool.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            reference,
        })
    }
}

/// Per-modality statistics for the normalization baselines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub modalities: BTreeMap<String, ModalityStats>,
}

impl NormalizationStats {
    fn get(&self, modality: &str) -> Result<&ModalityStats> {
        self.modalities
            .get(modality)
            .ok_or_else(|| Error::Invalid(format!("no normalization stats for {modality}")))
    }

    /// Fits every modality from (all scores, non-match scores) pools.
    pub fn fit(pools: &BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let modalities = pools
            .iter()
            .map(|(m, (all, nm))| Ok((m.clone(), ModalityStats::fit(all, nm)?)))
            .collect::<Result<_>>()?;
        Ok(Self { modalities })
    }
}

pub fn zscore_normalize(stats: &NormalizationStats, modality: &str, score: f64) -> Result<f64> {
    let s = stats.get(modality)?;
    Ok((score - s.mean) / s.std.max(STD_FLOOR))
}

pub fn minmax_normalize(stats: &NormalizationStats, modality: &str, score: f64) -> Result<f64> {
    let s = stats.get(modality)?;
    if s.max == s.min {
        return Ok(0.5);
    }
    Ok(((score - s.min) / (s.max - s.min)).clamp(0.0, 1.0))
}

/// Empirical CDF of the reference sample at `score`.
pub fn rhe_normalize(stats: &NormalizationStats, modality: &str, score: f64) -> Result<f64> {
    let s = stats.get(modality)?;
    let below = s.reference.partition_point(|&r| r <= score);
    Ok(below as f64 / s.reference.len() as f64)
}

/// A score normalization applied per modality before mean fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    ZScore,
    MinMax,
    Rhe,
}

impl Normalization {
    pub fn apply(self, stats: &NormalizationStats, modality: &str, score: f64) -> Result<f64> {
        match self {
            Normalization::ZScore => zscore_normalize(stats, modality, score),
            Normalization::MinMax => minmax_normalize(stats, modality, score),
            Normalization::Rhe => rhe_normalize(stats, modality, score),
        }
    }
}

/// Normalizes every present entry of a stacked score matrix.
pub fn normalize_concat(stats: &NormalizationStats, norm: Normalization, scores: &ConcatScores) -> Result<ConcatScores> {
    let mut values = scores.values.clone();
    for (j, m) in scores.modality_order.iter().enumerate() {
        for t in 0..scores.num_templates() {
            if scores.mask[[t, j]] {
                values[[t, j]] = norm.apply(stats, m, scores.values[[t, j]])?;
            }
        }
    }
    Ok(ConcatScores {
        modality_order: scores.modality_order.clone(),
        values,
        mask: scores.mask.clone(),
    })
}

/// Applies a row rule (min/max/mean/...) to every template row.
pub fn fuse_rows<F>(scores: &ConcatScores, rule: F) -> Result<Vec<f64>>
where
    F: Fn(&[Option<f64>]) -> Result<f64>,
{
    (0..scores.num_templates()).map(|t| rule(&scores.row(t))).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Convex combination of modality scores with softmax-parameterized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSum {
    pub logits: Vec<f64>,
}

impl WeightedSum {
    pub fn uniform(n: usize) -> Self {
        Self { logits: vec![0.0; n] }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn fuse(&self, row: &[Option<f64>]) -> Result<f64> {
        weighted_sum_fusion(&self.weights(), row)
    }
}

/// Weighted sum over present entries, weights renormalized over them.
pub fn weighted_sum_fusion(weights: &[f64], row: &[Option<f64>]) -> Result<f64> {
    if weights.len() != row.len() {
        return Err(Error::ShapeError(format!("{} weights for {} scores", weights.len(), row.len())));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for (w, s) in weights.iter().zip(row) {
        if let Some(s) = s {
            num += w * s;
            den += w;
            any = true;
        }
    }
    if !any {
        return Err(Error::AllModalitiesMissing);
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightedSumConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for WeightedSumConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            margin: 3.0,
            seed: 0,
        }
    }
}

/// Learns weighted-sum coefficients with the score triplet loss.
///
/// `data` holds per-query stacked scores (already normalized) and labels.
pub fn fit_weighted_sum(data: &[(ConcatScores, ScoreLabels)], config: &WeightedSumConfig) -> Result<WeightedSum> {
    let usable: Vec<usize> = (0..data.len()).filter(|&i| data[i].1.num_matches() > 0).collect();
    if usable.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = data[usable[0]].0.num_modalities();
    let mut model = WeightedSum::uniform(n);
    let mut opt = AdamState::new(
        n,
        AdamConfig {
            lr: config.lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        None,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = usable.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grad = vec![0.0; n];
            for &i in batch {
                let (scores, labels) = &data[i];
                let g = weighted_sum_grad(&model.logits, scores, labels, config.margin)?;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / batch.len() as f64;
                }
            }
            opt.step(&mut model.logits, &grad)?;
        }
    }
    Ok(model)
}

fn weighted_sum_grad(logits: &[f64], scores: &ConcatScores, labels: &ScoreLabels, margin: f64) -> Result<Vec<f64>> {
    let n = logits.len();
    if scores.num_modalities() != n {
        return Err(Error::ModalityOrderMismatch(format!(
            "{} modalities for {n} weights",
            scores.num_modalities()
        )));
    }
    let t = scores.num_templates();
    // per-template renormalized weights over present modalities
    let mut local = Array2::<f64>::zeros((t, n));
    let mut fused = vec![0.0; t];
    for r in 0..t {
        let idx: Vec<usize> = (0..n).filter(|&j| scores.mask[[r, j]]).collect();
        if idx.is_empty() {
            return Err(Error::AllModalitiesMissing);
        }
        let w = softmax(&idx.iter().map(|&j| logits[j]).collect::<Vec<_>>());
        for (k, &j) in idx.iter().enumerate() {
            local[[r, j]] = w[k];
            fused[r] += w[k] * scores.values[[r, j]];
        }
    }
    let (_, dfused) = score_triplet_loss_grad(&fused, labels, margin)?;
    let mut grad = vec![0.0; n];
    for r in 0..t {
        if dfused[r] == 0.0 {
            continue;
        }
        for j in 0..n {
            if scores.mask[[r, j]] {
                grad[j] += dfused[r] * local[[r, j]] * (scores.values[[r, j]] - fused[r]);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(pool: &[f64]) -> NormalizationStats {
        let mut modalities = BTreeMap::new();
        modalities.insert("m".to_string(), ModalityStats::fit(pool, pool).unwrap());
        NormalizationStats { modalities }
    }

    #[test]
    fn fixed_rules() {
        let row = [Some(0.2), Some(0.8)];
        assert_eq!(min_fusion(&row).unwrap(), 0.2);
        assert_eq!(max_fusion(&row).unwrap(), 0.8);
        assert_eq!(mean_fusion(&row).unwrap(), 0.5);
        let one = [None, Some(0.7)];
        for f in [min_fusion, max_fusion, mean_fusion] {
            assert_eq!(f(&one).unwrap(), 0.7);
            assert!(matches!(f(&[None, None]), Err(Error::AllModalitiesMissing)));
        }
    }

    #[test]
    fn zscore_examples() {
        let s = stats(&[1.0, 2.0, 3.0]);
        assert_eq!(zscore_normalize(&s, "m", 2.0).unwrap(), 0.0);
        assert!((zscore_normalize(&s, "m", 3.0).unwrap() - 1.224744871391589).abs() < 1e-12);
        let c = stats(&[4.0, 4.0]);
        assert_eq!(zscore_normalize(&c, "m", 4.0).unwrap(), 0.0);
        assert!(zscore_normalize(&s, "other", 1.0).is_err());
    }

    #[test]
    fn minmax_examples() {
        let s = stats(&[2.0, 6.0]);
        assert_eq!(minmax_normalize(&s, "m", 4.0).unwrap(), 0.5);
        assert_eq!(minmax_normalize(&s, "m", 1.0).unwrap(), 0.0);
        assert_eq!(minmax_normalize(&s, "m", 9.0).unwrap(), 1.0);
        assert_eq!(minmax_normalize(&stats(&[3.0]), "m", 9.0).unwrap(), 0.5);
    }

    #[test]
    fn rhe_examples() {
        let s = stats(&[0.4, 0.1, 0.3, 0.2]);
        assert_eq!(rhe_normalize(&s, "m", 0.25).unwrap(), 0.5);
        assert_eq!(rhe_normalize(&s, "m", 0.9).unwrap(), 1.0);
        assert_eq!(rhe_normalize(&s, "m", 0.0).unwrap(), 0.0);
        assert_eq!(rhe_normalize(&s, "m", 0.3).unwrap(), 0.75);
    }

    #[test]
    fn weighted_sum_examples() {
        assert_eq!(weighted_sum_fusion(&[0.5, 0.5], &[Some(0.2), Some(0.8)]).unwrap(), 0.5);
        assert_eq!(weighted_sum_fusion(&[1.0, 0.0], &[Some(0.37), Some(0.8)]).unwrap(), 0.37);
        assert!((weighted_sum_fusion(&[0.3, 0.7], &[None, Some(0.8)]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            weighted_sum_fusion(&[0.3, 0.7], &[None, None]),
            Err(Error::AllModalitiesMissing)
        ));
    }

    #[test]
    fn weighted_sum_gradient_matches_finite_differences() {
        let scores = ConcatScores {
            modality_order: vec!["a".into(), "b".into(), "c".into()],
            values: ndarray::array![[2.5, 1.0, 0.3], [0.4, -0.2, 0.9], [1.1, 0.7, -0.5], [0.2, 0.1, f64::NAN]],
            mask: ndarray::array![[true, true, true], [true, true, true], [true, true, true], [true, true, false]],
        };
        let labels = ScoreLabels {
            is_match: vec![true, false, false, false],
        };
        let logits = vec![0.3, -0.2, 0.1];
        let g = weighted_sum_grad(&logits, &scores, &labels, 3.0).unwrap();
        let loss = |l: &[f64]| {
            let m = WeightedSum { logits: l.to_vec() };
            let fused: Vec<f64> = (0..4).map(|t| m.fuse(&scores.row(t)).unwrap()).collect();
            crate::loss::score_triplet_loss(&fused, &labels, 3.0).unwrap()
        };
        let h = 1e-6;
        for k in 0..3 {
            let mut p = logits.clone();
            p[k] += h;
            let up = loss(&p);
            p[k] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "coord {k}: {fd} vs {}", g[k]);
        }
    }
}
