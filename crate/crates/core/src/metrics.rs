//! Closed-set, verification and open-set identification metrics.
//!
//! Ties are always resolved against the method under evaluation, and
//! thresholds are exact order statistics of the observed scores.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Q×T scores with subject labels on both axes.
///
/// Masked entries (`mask == false`) never count as pooled verification pairs
/// and rank below every present score.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub query_subjects: Vec<String>,
    pub template_subjects: Vec<String>,
}

impl ScoreTable {
    pub fn new(values: Array2<f64>, query_subjects: Vec<String>, template_subjects: Vec<String>) -> Result<Self> {
        let mask = values.mapv(|v| !v.is_nan());
        Self::with_mask(values, mask, query_subjects, template_subjects)
    }

    pub fn with_mask(
        values: Array2<f64>,
        mask: Array2<bool>,
        query_subjects: Vec<String>,
        template_subjects: Vec<String>,
    ) -> Result<Self> {
        let shape = (query_subjects.len(), template_subjects.len());
        if values.dim() != shape || mask.dim() != shape {
            return Err(Error::ShapeError(format!(
                "score table {:?} for {} queries x {} templates",
                values.dim(),
                shape.0,
                shape.1
            )));
        }
        Ok(Self {
            values,
            mask,
            query_subjects,
            template_subjects,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_subjects.len()
    }

    /// Score used for ranking: masked entries become -inf.
    fn rank_score(&self, q: usize, t: usize) -> f64 {
        if self.mask[[q, t]] {
            self.values[[q, t]]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn is_match(&self, q: usize, t: usize) -> bool {
        self.query_subjects[q] == self.template_subjects[t]
    }

    /// Pooled (match, non-match) scores over every present pair.
    pub fn pooled_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mat = Vec::new();
        let mut nm = Vec::new();
        for q in 0..self.num_queries() {
            for t in 0..self.template_subjects.len() {
                if !self.mask[[q, t]] {
                    continue;
                }
                if self.is_match(q, t) {
                    mat.push(self.values[[q, t]]);
                } else {
                    nm.push(self.values[[q, t]]);
                }
            }
        }
        (mat, nm)
    }

    /// Keeps only the listed template columns.
    pub fn select_templates(&self, keep: &[usize]) -> Self {
        Self {
            values: self.values.select(ndarray::Axis(1), keep),
            mask: self.mask.select(ndarray::Axis(1), keep),
            query_subjects: self.query_subjects.clone(),
            template_subjects: keep.iter().map(|&t| self.template_subjects[t].clone()).collect(),
        }
    }

    /// Keeps only the listed query rows.
    pub fn select_queries(&self, keep: &[usize]) -> Self {
        Self {
            values: self.values.select(ndarray::Axis(0), keep),
            mask: self.mask.select(ndarray::Axis(0), keep),
            query_subjects: keep.iter().map(|&q| self.query_subjects[q].clone()).collect(),
            template_subjects: self.template_subjects.clone(),
        }
    }
}

/// A rate together with the number of queries left out for lacking a match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub value: f64,
    pub excluded: usize,
}

/// 1-based rank of the best match template of query `q`, or `None` without matches.
///
/// Non-match templates tying the best match rank ahead of it.
pub fn best_match_rank(table: &ScoreTable, q: usize) -> Option<usize> {
    let t_count = table.template_subjects.len();
    let best = (0..t_count)
        .filter(|&t| table.is_match(q, t))
        .map(|t| table.rank_score(q, t))
        .max_by(f64::total_cmp)?;
    let ahead = (0..t_count)
        .filter(|&t| !table.is_match(q, t) && table.rank_score(q, t) >= best)
        .count();
    Some(1 + ahead)
}

/// Fraction of queries whose best match is within the top `k` templates.
pub fn cmc(table: &ScoreTable, k: usize) -> RateResult {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for q in 0..table.num_queries() {
        if let Some(r) = best_match_rank(table, q) {
            counted += 1;
            if r <= k {
                hits += 1;
            }
        }
    }
    let excluded = table.num_queries() - counted;
    let value = if counted == 0 { 0.0 } else { hits as f64 / counted as f64 };
    RateResult { value, excluded }
}

/// Average precision of one query, or `None` without matches.
pub fn average_precision(table: &ScoreTable, q: usize) -> Option<f64> {
    let t_count = table.template_subjects.len();
    let mut order: Vec<(f64, bool)> = (0..t_count).map(|t| (table.rank_score(q, t), table.is_match(q, t))).collect();
    let relevant = order.iter().filter(|(_, m)| *m).count();
    if relevant == 0 {
        return None;
    }
    // descending score; on ties non-matches first
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, (_, m)) in order.iter().enumerate() {
        if *m {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant as f64)
}

pub fn mean_average_precision(table: &ScoreTable) -> RateResult {
    let aps: Vec<f64> = (0..table.num_queries()).filter_map(|q| average_precision(table, q)).collect();
    let excluded = table.num_queries() - aps.len();
    let value = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    RateResult { value, excluded }
}

/// Verification operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    /// Achieved rate (TAR or FNIR).
    pub rate: f64,
    /// Decision threshold; scores `>= tau` are accepted. May be +inf.
    pub tau: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of ascending `s` that are `>= tau`.
fn count_at_least(s: &[f64], tau: f64) -> usize {
    s.len() - s.partition_point(|&x| x < tau)
}

/// Smallest threshold among the observed scores (or +inf) whose impostor
/// acceptance fraction does not exceed `rate`.
fn conservative_threshold(impostors: &[f64], others: &[f64], rate: f64) -> f64 {
    let imp = sorted(impostors);
    let n = imp.len() as f64;
    let mut candidates: Vec<f64> = impostors.iter().chain(others).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates
        .into_iter()
        .find(|&c| count_at_least(&imp, c) as f64 / n <= rate)
        .unwrap_or(f64::INFINITY)
}

/// True accept rate at the threshold admitting at most `far` of non-match scores.
pub fn tar_at_far(matches: &[f64], non_matches: &[f64], far: f64) -> Result<ThresholdPoint> {
    if matches.is_empty() || non_matches.is_empty() {
        return Err(Error::EmptyScoreSet);
    }
    let tau = conservative_threshold(non_matches, matches, far);
    let accepted = matches.iter().filter(|&&s| s >= tau).count();
    Ok(ThresholdPoint {
        rate: accepted as f64 / matches.len() as f64,
        tau,
    })
}

/// Search outcome of one probe against a gallery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Highest score over present templates (-inf when none).
    pub max_score: f64,
    /// Whether the top-ranked template belongs to the probe's subject.
    pub top1_correct: bool,
}

/// Max score and top-1 correctness for every query of the table.
///
/// Top-1 is correct only if the best match strictly beats every non-match.
pub fn probe_results(table: &ScoreTable) -> Vec<ProbeResult> {
    let t_count = table.template_subjects.len();
    (0..table.num_queries())
        .map(|q| {
            let mut best_mat = f64::NEG_INFINITY;
            let mut best_nm = f64::NEG_INFINITY;
            let mut any_match = false;
            for t in 0..t_count {
                let s = table.rank_score(q, t);
                if table.is_match(q, t) {
                    any_match = true;
                    best_mat = best_mat.max(s);
                } else {
                    best_nm = best_nm.max(s);
                }
            }
            ProbeResult {
                max_score: best_mat.max(best_nm),
                top1_correct: any_match && best_mat > best_nm,
            }
        })
        .collect()
}

/// False negative identification rate at the threshold admitting at most
/// `fpir` of non-mated probes.
///
/// A mated probe fails when its top-1 subject is wrong or its max score is
/// below the threshold.
pub fn fnir_at_fpir(mated: &[ProbeResult], non_mated: &[ProbeResult], fpir: f64) -> Result<ThresholdPoint> {
    if non_mated.is_empty() {
        return Err(Error::NoNonMatedProbes);
    }
    if mated.is_empty() {
        return Err(Error::EmptyScoreSet);
    }
    let nm: Vec<f64> = non_mated.iter().map(|p| p.max_score).collect();
    let m: Vec<f64> = mated.iter().map(|p| p.max_score).collect();
    let tau = conservative_threshold(&nm, &m, fpir);
    let misses = mated.iter().filter(|p| !p.top1_correct || p.max_score < tau).count();
    Ok(ThresholdPoint {
        rate: misses as f64 / mated.len() as f64,
        tau,
    })
}

/// Random non-mated subject lists for open-set search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenSetProtocol {
    pub subsets: usize,
    pub non_mated_fraction: f64,
    pub seed: u64,
}

impl Default for OpenSetProtocol {
    fn default() -> Self {
        Self {
            subsets: 10,
            non_mated_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetResult {
    pub fpir: f64,
    pub median: f64,
    /// Population standard deviation across subsets.
    pub std: f64,
    pub per_subset: Vec<f64>,
    pub removed_subjects: Vec<Vec<String>>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let s = sorted(values);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Average ranks (1-based), tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeError(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::EmptyScoreSet);
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Subjects removed from the gallery in each subset, deterministic in the seed.
pub fn non_mated_subsets(subjects: &[String], protocol: &OpenSetProtocol) -> Result<Vec<Vec<String>>> {
    if !(protocol.non_mated_fraction > 0.0 && protocol.non_mated_fraction < 1.0) || protocol.subsets == 0 {
        return Err(Error::Invalid("open-set protocol needs fraction in (0,1) and at least one subset".into()));
    }
    if subjects.len() < 5 {
        return Err(Error::DegenerateSplit(format!("{} gallery subjects, need at least 5", subjects.len())));
    }
    let remove = (subjects.len() as f64 * protocol.non_mated_fraction).round() as usize;
    if remove == 0 || remove >= subjects.len() {
        return Err(Error::DegenerateSplit(format!(
            "fraction {} of {} subjects removes {remove}",
            protocol.non_mated_fraction,
            subjects.len()
        )));
    }
    Ok((0..protocol.subsets)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
            rng.set_stream(k as u64);
            let mut s = subjects.to_vec();
            s.shuffle(&mut rng);
            let mut removed: Vec<String> = s.into_iter().take(remove).collect();
            removed.sort();
            removed
        })
        .collect())
}

/// FNIR@FPIR over random non-mated subsets: median and spread.
pub fn run_open_set_protocol(table: &ScoreTable, protocol: &OpenSetProtocol, fpir: f64) -> Result<OpenSetResult> {
    let subjects: Vec<String> = table
        .template_subjects
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let subsets = non_mated_subsets(&subjects, protocol)?;
    let mut per_subset = Vec::with_capacity(subsets.len());
    for removed in &subsets {
        let removed_set: BTreeSet<&str> = removed.iter().map(String::as_str).collect();
        let keep: Vec<usize> = (0..table.template_subjects.len())
            .filter(|&t| !removed_set.contains(table.template_subjects[t].as_str()))
            .collect();
        let sub = table.select_templates(&keep);
        let results = probe_results(&sub);
        let (mut mated, mut non_mated) = (Vec::new(), Vec::new());
        for (q, r) in results.into_iter().enumerate() {
            if removed_set.contains(table.query_subjects[q].as_str()) {
                non_mated.push(r);
            } else if subjects.binary_search(&table.query_subjects[q]).is_ok() {
                mated.push(r);
            }
        }
        per_subset.push(fnir_at_fpir(&mated, &non_mated, fpir)?.rate);
    }
    Ok(OpenSetResult {
        fpir,
        median: median(&per_subset),
        std: population_std(&per_subset),
        per_subset,
        removed_subjects: subsets,
    })
}
