use ndarray::Array2;
use proptest::prelude::*;
use qme_core::baselines::{max_fusion, mean_fusion, min_fusion};
use qme_core::fusion::{route, FusionConfig, FusionModel};
use qme_core::io::{read_score_matrix, write_score_matrix};
use qme_core::loss::{pairwise_triplet_loss_grad, score_triplet_loss, triplet_loss};
use qme_core::metrics::{cmc, mean_average_precision, spearman, tar_at_far, ScoreTable};
use qme_core::nn::{BatchNormState, Mode};
use qme_core::quality::pseudo_quality_label;
use qme_core::scores::{cosine_scores, euclidean_to_similarity};
use qme_core::types::{ConcatScores, ScoreLabels, ScoreMatrix};

fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n).prop_map(|mut v| {
        v[0] = true;
        v
    })
}

fn table_strategy() -> impl Strategy<Value = ScoreTable> {
    (1usize..8, 2usize..12).prop_flat_map(|(q, t)| {
        (
            prop::collection::vec(-2.0f64..2.0, q * t),
            prop::collection::vec(0usize..4, q),
            prop::collection::vec(0usize..4, t),
        )
            .prop_map(move |(v, qs, ts)| {
                let values = Array2::from_shape_vec((q, t), v).unwrap();
                let name = |i: &usize| format!("s{i}");
                ScoreTable::new(values, qs.iter().map(name).collect(), ts.iter().map(name).collect()).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn similarity_is_decreasing_into_unit_interval(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        let (sa, sb) = (euclidean_to_similarity(a).unwrap(), euclidean_to_similarity(b).unwrap());
        prop_assert!(sa > 0.0 && sa <= 1.0);
        if a < b {
            prop_assert!(sa > sb);
        }
    }

    #[test]
    fn cosine_scores_bounded(q in prop::collection::vec(-5.0f64..5.0, 4), g in prop::collection::vec(-5.0f64..5.0, 12)) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let gallery = Array2::from_shape_vec((3, 4), g).unwrap();
        prop_assume!(gallery.rows().into_iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let s = cosine_scores(ndarray::ArrayView1::from(&q), gallery.view()).unwrap();
        prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn route_pair_is_on_simplex(w in 1e-9f64..(1.0 - 1e-9)) {
        let p = route(w, 2).unwrap();
        prop_assert_eq!(p[0], w);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(route(w, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn pseudo_labels_bounded_and_non_increasing(rank in 1usize..50, delta in 1.01f64..20.0) {
        let a = pseudo_quality_label(rank, delta).unwrap();
        let b = pseudo_quality_label(rank + 1, delta).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
        prop_assert_eq!(pseudo_quality_label(1, delta).unwrap(), 1.0);
    }

    #[test]
    fn triplet_loss_is_hinge(d_ap in 0.0f64..5.0, d_an in 0.0f64..5.0, m in 0.0f64..3.0) {
        let l = triplet_loss(d_ap, d_an, m);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, d_ap - d_an + m <= 0.0);
    }

    #[test]
    fn score_loss_zero_iff_separated(
        (scores, labels) in (2usize..12).prop_flat_map(|n| (prop::collection::vec(-6.0f64..6.0, n), labels_strategy(n)))
    ) {
        let lab = ScoreLabels { is_match: labels.clone() };
        let l = score_triplet_loss(&scores, &lab, 3.0).unwrap();
        prop_assert!(l >= 0.0);
        let separated = scores.iter().zip(&labels).all(|(&s, &m)| if m { s >= 3.0 } else { s <= 0.0 });
        prop_assert_eq!(l == 0.0, separated);
        let (p, _) = pairwise_triplet_loss_grad(&scores, &lab, 3.0).unwrap();
        prop_assert!(p >= 0.0);
    }

    #[test]
    fn fixed_rules_are_ordered(row in prop::collection::vec(prop::option::of(-3.0f64..3.0), 1..5)) {
        prop_assume!(row.iter().any(Option::is_some));
        let (lo, mid, hi) = (min_fusion(&row).unwrap(), mean_fusion(&row).unwrap(), max_fusion(&row).unwrap());
        prop_assert!(lo <= mid + 1e-12 && mid <= hi + 1e-12);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(table in table_strategy()) {
        let t = table.template_subjects.len();
        let mut prev = 0.0;
        for k in 1..=t {
            let r = cmc(&table, k);
            prop_assert!(r.value >= prev && r.value <= 1.0);
            prev = r.value;
        }
        if cmc(&table, 1).excluded < table.num_queries() {
            prop_assert_eq!(prev, 1.0);
        }
        let m = mean_average_precision(&table).value;
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn tar_grows_with_far(table in table_strategy()) {
        let (mat, nm) = table.pooled_pairs();
        prop_assume!(!mat.is_empty() && !nm.is_empty());
        let mut prev = -1.0;
        for far in [0.001, 0.01, 0.1, 0.5, 0.99] {
            let p = tar_at_far(&mat, &nm, far).unwrap();
            let accepted = nm.iter().filter(|&&s| s >= p.tau).count() as f64 / nm.len() as f64;
            prop_assert!(accepted <= far);
            prop_assert!(p.rate >= prev);
            prev = p.rate;
        }
    }

    #[test]
    fn masked_entries_normalize_to_shift(
        x in prop::collection::vec(-3.0f64..3.0, 12),
        m in prop::collection::vec(any::<bool>(), 12),
    ) {
        let x = Array2::from_shape_vec((6, 2), x).unwrap();
        let mut mask = Array2::from_shape_vec((6, 2), m).unwrap();
        for j in 0..2 {
            mask[[0, j]] = true;
            mask[[1, j]] = true;
        }
        let mut bn = BatchNormState::new(2);
        bn.shift = ndarray::arr1(&[0.25, -0.5]);
        let (y, _) = bn.apply(x.view(), Some(mask.view()), Mode::Train).unwrap();
        for i in 0..6 {
            for j in 0..2 {
                if !mask[[i, j]] {
                    prop_assert_eq!(y[[i, j]], bn.shift[j]);
                }
            }
        }
    }

    #[test]
    fn fusion_commutes_with_template_order(
        v in prop::collection::vec(-1.0f64..1.0, 10),
        w in 0.05f64..0.95,
        shift in 1usize..5,
    ) {
        let model = FusionModel::new(vec!["a".into(), "b".into()], "a", &FusionConfig::default()).unwrap();
        let values = Array2::from_shape_vec((5, 2), v).unwrap();
        let scores = ConcatScores { modality_order: vec!["a".into(), "b".into()], values: values.clone(), mask: Array2::from_elem((5, 2), true) };
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let permuted = ConcatScores { values: values.select(ndarray::Axis(0), &perm), ..scores.clone() };
        let a = model.fuse(&scores, Some(w)).unwrap().fused;
        let b = model.fuse(&permuted, Some(w)).unwrap().fused;
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(b[i], a[p]);
        }
    }

    #[test]
    fn spearman_bounded(a in prop::collection::vec(-5.0f64..5.0, 3..20), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| (x * 7.0 + (i as u64 * seed) as f64).sin()).collect();
        let r = spearman(&a, &b).unwrap();
        prop_assert!(r.is_nan() || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn score_matrix_csv_round_trip(
        v in prop::collection::vec(prop::option::of(-1e3f64..1e3), 12),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let values = Array2::from_shape_vec((3, 4), v.iter().map(|x| x.unwrap_or(0.0)).collect()).unwrap();
        let mask = Array2::from_shape_vec((3, 4), v.iter().map(Option::is_some).collect()).unwrap();
        let m = ScoreMatrix::new(
            "face",
            (0..3).map(|i| format!("q{i}")).collect(),
            (0..4).map(|i| format!("g{i}")).collect(),
            values,
            mask.clone(),
        ).unwrap();
        let path = dir.path().join("s.csv");
        write_score_matrix(&path, &m).unwrap();
        let back = read_score_matrix(&path, "face").unwrap();
        prop_assert_eq!(&back.mask, &mask);
        for q in 0..3 {
            prop_assert_eq!(back.row(q), m.row(q));
        }
    }
}
