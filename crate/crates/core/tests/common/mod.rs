#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use qme_core::fusion::{FusionConfig, FusionModel, FusionSample, Gating, LossKind};
use qme_core::metrics::{
    best_match_rank, cmc, mean_average_precision, run_open_set_protocol, tar_at_far, OpenSetProtocol,
    ScoreTable,
};
use qme_core::nn::Mode;
use qme_core::quality::QualityEstimator;
use qme_core::types::{ConcatScores, ScoreLabels};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative error; below it f64 differences at h=1e-5 are roundoff.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub failed: usize,
    /// Coordinates whose +-h interval straddles a relu or hinge kink.
    pub skipped: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn merge(&mut self, o: GradCheck) {
        self.checked += o.checked;
        self.failed += o.failed;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
    }

    pub fn ok(&self) -> bool {
        self.failed == 0 && self.skipped * 10 <= self.checked + self.skipped
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// One-sided slopes disagreeing by more than this share mean a kink inside the step.
pub const KINK_RATIO: f64 = 2e-4;

/// Central differences against `analytic` until `need` smooth coordinates from `coords` are checked.
pub fn check_coords<F: FnMut(&[f64]) -> f64>(
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    need: usize,
    mut loss: F,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut p = params.to_vec();
    let base = loss(&p);
    for &i in coords {
        if out.checked == need {
            break;
        }
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = loss(&p);
        p[i] = orig - FD_STEP;
        let down = loss(&p);
        p[i] = orig;
        let fwd = (up - base) / FD_STEP;
        let bwd = (base - down) / FD_STEP;
        if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(FD_FLOOR) {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        out.checked += 1;
        out.worst = out.worst.max(e);
        if e > FD_TOL {
            out.failed += 1;
        }
    }
    out
}

fn pick(rng: &mut ChaCha8Rng, range: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = range.collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

/// Quality encoder under its frame-level squared error.
pub fn fd_check_qe(seed: u64, coords: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 64;
    let mut net = QualityEstimator::encoder(width, &[64, 32], seed).unwrap();
    let b = 12;
    let x = Array2::from_shape_fn((b, width), |_| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let cache = net.forward(x.view()).unwrap();
    let grad_out = Array2::from_shape_fn((b, 1), |(i, _)| 2.0 * (cache.output()[[i, 0]] - y[i]) / b as f64);
    let (grads, _) = net.backward(&cache, grad_out.view()).unwrap();
    let analytic = grads.flatten();
    let params = net.flat_params();
    let idx = pick(&mut rng, 0..params.len(), params.len());
    check_coords(&params, &analytic, &idx, coords, |p| {
        net.set_flat_params(p).unwrap();
        let o = net.predict(x.view()).unwrap();
        o.column(0).iter().zip(&y).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / b as f64
    })
}

/// Random fusion batch: `queries` rows of T templates over two modalities, a few masked.
pub fn random_fusion_batch(rng: &mut ChaCha8Rng, queries: usize, templates: usize) -> Vec<FusionSample> {
    let order = vec!["face".to_string(), "gait".to_string()];
    (0..queries)
        .map(|q| {
            let mut values = Array2::from_shape_fn((templates, 2), |_| rng.random_range(-1.0..1.0));
            let mut mask = Array2::from_elem((templates, 2), true);
            if q % 3 == 2 {
                values.column_mut(0).fill(f64::NAN);
                mask.column_mut(0).fill(false);
            }
            let is_match: Vec<bool> = (0..templates).map(|t| t < 2).collect();
            FusionSample {
                scores: ConcatScores {
                    modality_order: order.clone(),
                    values,
                    mask,
                },
                labels: ScoreLabels { is_match },
                weight: Some(rng.random_range(0.15..0.85)),
            }
        })
        .collect()
}

/// Each expert of a two-expert quality-gated model under `loss`, checked in train mode.
pub fn fd_check_experts(seed: u64, loss: LossKind, coords: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let cfg = FusionConfig {
        experts: 2,
        gating: Gating::Quality,
        loss,
        seed,
        ..FusionConfig::default()
    };
    let mut model = FusionModel::new(vec!["face".into(), "gait".into()], "face", &cfg).unwrap();
    let batch = random_fusion_batch(&mut rng, 6, 10);
    let (_, analytic) = model.loss_and_grad(&batch, Mode::Train, loss).unwrap();
    let params = model.flat_params();
    let mut off = 2 * model.num_modalities();
    let mut ranges = Vec::new();
    for e in &model.experts {
        ranges.push(off..off + e.num_params());
        off += e.num_params();
    }
    ranges
        .into_iter()
        .map(|r| {
            let idx = pick(&mut rng, r.clone(), r.len());
            check_coords(&params, &analytic, &idx, coords, |p| {
                model.set_flat_params(p).unwrap();
                model.loss_and_grad(&batch, Mode::Train, loss).unwrap().0
            })
        })
        .collect()
}

/// Random table with ties, masked entries and queries lacking matches.
pub fn random_table(rng: &mut ChaCha8Rng, min_subjects: usize) -> ScoreTable {
    let q = rng.random_range(1..=20);
    let t = rng.random_range(min_subjects.max(1)..=30);
    let subjects = rng.random_range(min_subjects.max(2)..=min_subjects.max(2) + 4);
    let name = |i: usize| format!("s{i}");
    let mut template_subjects: Vec<String> = (0..t).map(|i| name(i % subjects)).collect();
    template_subjects.shuffle(rng);
    let query_subjects: Vec<String> = (0..q).map(|_| name(rng.random_range(0..=subjects))).collect();
    let discrete = rng.random_bool(0.5);
    let values = Array2::from_shape_fn((q, t), |_| {
        if rng.random_bool(0.08) {
            f64::NAN
        } else if discrete {
            rng.random_range(0..5) as f64 / 4.0
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    ScoreTable::new(values, query_subjects, template_subjects).unwrap()
}

fn score(table: &ScoreTable, q: usize, t: usize) -> f64 {
    if table.mask[[q, t]] {
        table.values[[q, t]]
    } else {
        f64::NEG_INFINITY
    }
}

fn is_match(table: &ScoreTable, q: usize, t: usize) -> bool {
    table.query_subjects[q] == table.template_subjects[t]
}

/// Position of the first match after a full sort that puts non-matches first on ties.
pub fn oracle_rank(table: &ScoreTable, q: usize) -> Option<usize> {
    let n = table.template_subjects.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        score(table, q, b)
            .partial_cmp(&score(table, q, a))
            .unwrap()
            .then(is_match(table, q, a).cmp(&is_match(table, q, b)))
    });
    idx.iter().position(|&t| is_match(table, q, t)).map(|p| p + 1)
}

pub fn oracle_cmc(table: &ScoreTable, k: usize) -> (f64, usize) {
    let ranks: Vec<usize> = (0..table.num_queries()).filter_map(|q| oracle_rank(table, q)).collect();
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    let v = if ranks.is_empty() { 0.0 } else { hits as f64 / ranks.len() as f64 };
    (v, table.num_queries() - ranks.len())
}

/// AP from per-match pessimistic positions counted directly.
pub fn oracle_ap(table: &ScoreTable, q: usize) -> Option<f64> {
    let n = table.template_subjects.len();
    let matches: Vec<usize> = (0..n).filter(|&t| is_match(table, q, t)).collect();
    if matches.is_empty() {
        return None;
    }
    let mut terms: Vec<(usize, f64)> = matches
        .iter()
        .map(|&t| {
            let s = score(table, q, t);
            let mut pos = 1;
            let mut hits = 1;
            for u in 0..n {
                if u == t {
                    continue;
                }
                let su = score(table, q, u);
                let m = is_match(table, q, u);
                if su > s || (su == s && (!m || u < t)) {
                    pos += 1;
                    if m {
                        hits += 1;
                    }
                }
            }
            (pos, hits as f64 / pos as f64)
        })
        .collect();
    terms.sort_by_key(|x| x.0);
    Some(terms.iter().map(|x| x.1).sum::<f64>() / matches.len() as f64)
}

pub fn oracle_map(table: &ScoreTable) -> f64 {
    let aps: Vec<f64> = (0..table.num_queries()).filter_map(|q| oracle_ap(table, q)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Smallest observed score (or +inf) whose impostor acceptance is within `rate`, then the genuine hit rate.
pub fn oracle_threshold(genuine: &[f64], impostor: &[f64], rate: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &c in genuine.iter().chain(impostor) {
        let accepted = impostor.iter().filter(|&&s| s >= c).count();
        if accepted as f64 / impostor.len() as f64 <= rate && c < best {
            best = c;
        }
    }
    best
}

pub fn oracle_tar(table: &ScoreTable, far: f64) -> Option<(f64, f64)> {
    let (mut mat, mut nm) = (Vec::new(), Vec::new());
    for q in 0..table.num_queries() {
        for t in 0..table.template_subjects.len() {
            if table.mask[[q, t]] {
                if is_match(table, q, t) {
                    mat.push(table.values[[q, t]]);
                } else {
                    nm.push(table.values[[q, t]]);
                }
            }
        }
    }
    if mat.is_empty() || nm.is_empty() {
        return None;
    }
    let tau = oracle_threshold(&mat, &nm, far);
    Some((mat.iter().filter(|&&s| s >= tau).count() as f64 / mat.len() as f64, tau))
}

/// FNIR for one removed-subject set, from the full table.
pub fn oracle_fnir(table: &ScoreTable, removed: &BTreeSet<String>, fpir: f64) -> f64 {
    let kept: Vec<usize> = (0..table.template_subjects.len())
        .filter(|&t| !removed.contains(&table.template_subjects[t]))
        .collect();
    let gallery: BTreeSet<&String> = table.template_subjects.iter().collect();
    let (mut mated, mut non_mated) = (Vec::new(), Vec::new());
    for q in 0..table.num_queries() {
        let mut best = f64::NEG_INFINITY;
        let mut best_mat = f64::NEG_INFINITY;
        let mut best_nm = f64::NEG_INFINITY;
        let mut any = false;
        for &t in &kept {
            let s = score(table, q, t);
            best = best.max(s);
            if is_match(table, q, t) {
                any = true;
                best_mat = best_mat.max(s);
            } else {
                best_nm = best_nm.max(s);
            }
        }
        let subject = &table.query_subjects[q];
        if removed.contains(subject) {
            non_mated.push(best);
        } else if gallery.contains(subject) {
            mated.push((best, any && best_mat > best_nm));
        }
    }
    let m: Vec<f64> = mated.iter().map(|x| x.0).collect();
    let tau = oracle_threshold(&m, &non_mated, fpir);
    mated.iter().filter(|(s, ok)| !ok || *s < tau).count() as f64 / mated.len() as f64
}

#[derive(Debug, Default)]
pub struct OracleSweep {
    pub instances: usize,
    pub cmc_mismatch: usize,
    pub map_mismatch: usize,
    pub tar_mismatch: usize,
    pub fnir_mismatch: usize,
    pub fnir_instances: usize,
}

impl OracleSweep {
    pub fn ok(&self) -> bool {
        self.cmc_mismatch + self.map_mismatch + self.tar_mismatch + self.fnir_mismatch == 0
    }
}

/// Library metrics against the brute-force oracles on `n` random tables.
pub fn metric_oracle_sweep(seed: u64, n: usize) -> OracleSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleSweep::default();
    for i in 0..n {
        let table = random_table(&mut rng, if i % 2 == 0 { 5 } else { 2 });
        out.instances += 1;
        for q in 0..table.num_queries() {
            if best_match_rank(&table, q) != oracle_rank(&table, q) {
                out.cmc_mismatch += 1;
            }
        }
        for k in 1..=table.template_subjects.len() {
            let r = cmc(&table, k);
            if (r.value, r.excluded) != oracle_cmc(&table, k) {
                out.cmc_mismatch += 1;
            }
        }
        if mean_average_precision(&table).value != oracle_map(&table) {
            out.map_mismatch += 1;
        }
        let (mat, nm) = table.pooled_pairs();
        for far in [0.01, 0.1, 0.25, 0.5] {
            let lib = tar_at_far(&mat, &nm, far).ok().map(|p| (p.rate, p.tau));
            if lib != oracle_tar(&table, far) {
                out.tar_mismatch += 1;
            }
        }
        let subjects: BTreeSet<&String> = table.template_subjects.iter().collect();
        if subjects.len() >= 5 {
            let protocol = OpenSetProtocol {
                subsets: 3,
                non_mated_fraction: 0.2,
                seed: i as u64,
            };
            for fpir in [0.1, 0.3] {
                match run_open_set_protocol(&table, &protocol, fpir) {
                    Ok(r) => {
                        out.fnir_instances += 1;
                        for (removed, lib) in r.removed_subjects.iter().zip(&r.per_subset) {
                            let set: BTreeSet<String> = removed.iter().cloned().collect();
                            if *lib != oracle_fnir(&table, &set, fpir) {
                                out.fnir_mismatch += 1;
                            }
                        }
                    }
                    Err(_) => {
                        // no mated or non-mated probes in some subset
                    }
                }
            }
        }
    }
    out
}
