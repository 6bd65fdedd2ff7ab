use qme_core::experiment::ScoreSet;
use qme_core::metrics::{cmc, spearman};
use qme_core::synth::{generate, QualityModel, SynthConfig, SynthModality};
use qme_core::types::MetricKind;

fn modality(id: &str, kind: MetricKind, sigma: f64, degraded: f64) -> SynthModality {
    SynthModality {
        modality_id: id.into(),
        metric_kind: kind,
        feature_dim: 32,
        noise_sigma: sigma,
        kappa: None,
        degraded_fraction: degraded,
        missing_fraction: 0.0,
    }
}

#[test]
fn match_similarity_rises_with_quality() {
    let cfg = SynthConfig {
        train_subjects: 2,
        test_subjects: 100,
        queries_per_subject: 10,
        modalities: vec![modality("face", MetricKind::Cosine, 0.04, 0.5)],
        quality: QualityModel {
            kappa: 10.0,
            clean_range: (0.5, 1.0),
            degraded_range: (0.0, 0.5),
        },
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let set = ScoreSet::build(&ds.test, &cfg.channels(), None).unwrap();
    let m = &set.matrices[0];
    assert!(m.num_queries() >= 1000);
    let bins = 10;
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for q in 0..m.num_queries() {
        let quality = ds.test.quality_of(q, "face").unwrap();
        let row = m.row(q);
        let matches: Vec<f64> = (0..row.len())
            .filter(|&t| set.template_subjects[t] == set.query_subjects[q])
            .filter_map(|t| row[t])
            .collect();
        let b = ((quality * bins as f64) as usize).min(bins - 1);
        sums[b] += matches.iter().sum::<f64>() / matches.len() as f64;
        counts[b] += 1;
    }
    let (centers, means): (Vec<f64>, Vec<f64>) = (0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| ((b as f64 + 0.5) / bins as f64, sums[b] / counts[b] as f64))
        .unzip();
    assert!(centers.len() >= 8);
    let rho = spearman(&centers, &means).unwrap();
    assert!(rho >= 0.9, "binned spearman {rho}, means {means:?}");
}

#[test]
fn degraded_subset_loses_rank1() {
    let cfg = SynthConfig::default();
    let ds = generate(&cfg).unwrap();
    let set = ScoreSet::build(&ds.test, &cfg.channels(), None).unwrap();
    let face = set.single_table(0).unwrap();
    let (low, high): (Vec<usize>, Vec<usize>) =
        (0..ds.test.queries.len()).partition(|&q| ds.test.quality_of(q, "face").unwrap() < 0.5);
    assert!(!low.is_empty() && !high.is_empty());
    let r_low = cmc(&face.select_queries(&low), 1).value;
    let r_high = cmc(&face.select_queries(&high), 1).value;
    assert!(r_high - r_low >= 0.10, "clean {r_high} vs degraded {r_low}");
}

#[test]
fn full_quality_queries_are_identifiable() {
    let cfg = SynthConfig {
        train_subjects: 2,
        test_subjects: 20,
        modalities: vec![
            modality("face", MetricKind::Cosine, 0.05, 0.0),
            modality("gait", MetricKind::Euclidean, 0.05, 0.0),
        ],
        quality: QualityModel {
            clean_range: (1.0, 1.0),
            ..QualityModel::default()
        },
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let set = ScoreSet::build(&ds.test, &cfg.channels(), None).unwrap();
    for j in 0..2 {
        let r = cmc(&set.single_table(j).unwrap(), 1).value;
        assert!(r >= 0.95, "modality {j} rank-1 {r}");
    }
}

#[test]
fn zero_kappa_makes_quality_irrelevant() {
    let base = SynthConfig {
        train_subjects: 3,
        test_subjects: 4,
        patch_kappa: 0.0,
        quality: QualityModel {
            kappa: 0.0,
            ..QualityModel::default()
        },
        modalities: vec![
            modality("face", MetricKind::Cosine, 0.1, 0.5),
            SynthModality {
                kappa: Some(0.0),
                ..modality("gait", MetricKind::Euclidean, 0.1, 0.5)
            },
        ],
        ..SynthConfig::default()
    };
    let other = SynthConfig {
        quality: QualityModel {
            clean_range: (0.9, 1.0),
            degraded_range: (0.0, 0.05),
            kappa: 0.0,
        },
        ..base.clone()
    };
    let (a, b) = (generate(&base).unwrap(), generate(&other).unwrap());
    let qa: Vec<f64> = a.test.quality.iter().map(|r| r.quality_factor).collect();
    let qb: Vec<f64> = b.test.quality.iter().map(|r| r.quality_factor).collect();
    assert_ne!(qa, qb);
    for (x, y) in a.test.queries.iter().zip(&b.test.queries) {
        assert_eq!(x.features, y.features);
        assert_eq!(x.qe_features, y.qe_features);
    }
}
