//! Evaluation reports and plot data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    cmc, mean_average_precision, run_open_set_protocol, tar_at_far, OpenSetProtocol, ScoreTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarPoint {
    pub far: f64,
    pub tar: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnirPoint {
    pub fpir: f64,
    pub median: f64,
    pub std: f64,
}

/// Where match and non-match scores sit relative to the first TAR threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub match_mean: f64,
    pub non_match_mean: f64,
    pub non_match_p95: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub queries: usize,
    pub excluded_queries: usize,
    pub cmc: Vec<CmcPoint>,
    pub map: f64,
    pub tar: Vec<TarPoint>,
    pub fnir: Vec<FnirPoint>,
    pub distribution: ScoreDistribution,
}

/// Which operating points an [`EvalReport`] contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricTargets {
    pub cmc_ranks: Vec<usize>,
    pub far: Vec<f64>,
    pub fpir: Vec<f64>,
    pub open_set: OpenSetProtocol,
}

impl Default for MetricTargets {
    fn default() -> Self {
        Self {
            cmc_ranks: vec![1, 5, 10, 20],
            far: vec![0.01, 0.001],
            fpir: vec![0.01],
            open_set: OpenSetProtocol::default(),
        }
    }
}

impl MetricTargets {
    pub fn validate(&self) -> Result<()> {
        if self.cmc_ranks.is_empty() || self.far.is_empty() || self.cmc_ranks.contains(&0) {
            return Err(Error::Invalid("need at least one CMC rank (>=1) and one FAR".into()));
        }
        for &r in self.far.iter().chain(&self.fpir) {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Invalid(format!("target rate {r} outside (0,1)")));
            }
        }
        Ok(())
    }
}

/// Value at quantile `p` of ascending `s`, nearest-rank.
pub fn quantile(s: &[f64], p: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let k = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate(method: &str, table: &ScoreTable, targets: &MetricTargets) -> Result<EvalReport> {
    targets.validate()?;
    let cmc_points: Vec<CmcPoint> = targets
        .cmc_ranks
        .iter()
        .map(|&k| CmcPoint {
            rank: k,
            value: cmc(table, k).value,
        })
        .collect();
    let map = mean_average_precision(table);
    let (matches, mut non_matches) = table.pooled_pairs();
    let tar = targets
        .far
        .iter()
        .map(|&far| {
            let p = tar_at_far(&matches, &non_matches, far)?;
            Ok(TarPoint { far, tar: p.rate, tau: p.tau })
        })
        .collect::<Result<Vec<_>>>()?;
    let fnir = targets
        .fpir
        .iter()
        .map(|&fpir| {
            let r = run_open_set_protocol(table, &targets.open_set, fpir)?;
            Ok(FnirPoint {
                fpir,
                median: r.median,
                std: r.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    non_matches.sort_by(f64::total_cmp);
    Ok(EvalReport {
        method: method.to_string(),
        queries: table.num_queries(),
        excluded_queries: map.excluded,
        cmc: cmc_points,
        map: map.value,
        distribution: ScoreDistribution {
            match_mean: mean(&matches),
            non_match_mean: mean(&non_matches),
            non_match_p95: quantile(&non_matches, 0.95),
            tau: tar[0].tau,
        },
        tar,
        fnir,
    })
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.rank == k).map(|p| p.value)
    }

    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar.iter().find(|p| p.far == far).map(|p| p.tar)
    }

    /// Flat (name, value, std, params) rows.
    pub fn metric_rows(&self) -> Vec<(String, f64, Option<f64>, String)> {
        let mut rows = Vec::new();
        for p in &self.cmc {
            rows.push((format!("rank{}", p.rank), p.value, None, format!("k={}", p.rank)));
        }
        rows.push(("map".into(), self.map, None, String::new()));
        for p in &self.tar {
            rows.push(("tar".into(), p.tar, None, format!("far={}", p.far)));
            rows.push(("tau".into(), p.tau, None, format!("far={}", p.far)));
        }
        for p in &self.fnir {
            rows.push(("fnir".into(), p.median, Some(p.std), format!("fpir={}", p.fpir)));
        }
        let d = &self.distribution;
        rows.push(("match_mean".into(), d.match_mean, None, String::new()));
        rows.push(("non_match_mean".into(), d.non_match_mean, None, String::new()));
        rows.push(("non_match_p95".into(), d.non_match_p95, None, String::new()));
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "name", "value", "std", "params"])?;
        for (name, value, std, params) in self.metric_rows() {
            w.write_record([
                self.method.clone(),
                name,
                value.to_string(),
                std.map(|s| s.to_string()).unwrap_or_default(),
                params,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One comparison row per method: Rank1, mAP, TAR and FNIR at the first targets.
pub fn write_comparison<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "rank1",
        "map",
        "tar",
        "far",
        "fnir",
        "fnir_std",
        "fpir",
        "match_mean",
        "non_match_mean",
        "tau",
    ])?;
    for r in reports {
        let tar = r.tar.first();
        let fnir = r.fnir.first();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.method.clone(),
            opt(r.rank(1)),
            r.map.to_string(),
            opt(tar.map(|p| p.tar)),
            opt(tar.map(|p| p.far)),
            opt(fnir.map(|p| p.median)),
            opt(fnir.map(|p| p.std)),
            opt(fnir.map(|p| p.fpir)),
            r.distribution.match_mean.to_string(),
            r.distribution.non_match_mean.to_string(),
            r.distribution.tau.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins spanning the finite values; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Match and non-match histograms of a table as CSV rows (series, lo, hi, count).
pub fn write_score_histograms<W: Write>(method: &str, table: &ScoreTable, bins: usize, out: W) -> Result<()> {
    let (matches, non_matches) = table.pooled_pairs();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "series", "lo", "hi", "count"])?;
    for (series, values) in [("match", &matches), ("non_match", &non_matches)] {
        for b in histogram(values, bins) {
            w.write_record([method, series, &b.lo.to_string(), &b.hi.to_string(), &b.count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, f64::NAN], 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h[3].count, 1);
        assert_eq!(h[0].count, 2);
    }

    #[test]
    fn quantile_nearest_rank() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(quantile(&s, 0.95), 19.0);
        assert_eq!(quantile(&s, 1.0), 20.0);
        assert_eq!(quantile(&s, 0.0), 1.0);
    }

    #[test]
    fn report_on_perfect_table() {
        let subjects: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let values = ndarray::Array2::from_shape_fn((5, 5), |(q, t)| if q == t { 1.0 } else { 0.0 });
        let table = ScoreTable::new(values, subjects.clone(), subjects).unwrap();
        let r = evaluate("oracle", &table, &MetricTargets::default()).unwrap();
        assert_eq!(r.rank(1), Some(1.0));
        assert_eq!(r.map, 1.0);
        assert_eq!(r.tar_at(0.01), Some(1.0));
        assert_eq!(r.fnir[0].median, 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,name,value,std,params\n"));
        assert!(text.contains("oracle,rank1,1,,k=1"));
    }
}
