//! Score-space primitives: frame aggregation, similarity and score stacking.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::types::{l2_norm, ConcatScores, GalleryManifest, MetricKind, QueryRecord, ScoreMatrix};

/// Mean of the frame features of a query sequence.
pub fn aggregate_query_feature(frames: ArrayView2<f64>) -> Result<Array1<f64>> {
    if frames.nrows() == 0 {
        return Err(Error::EmptyQuery);
    }
    Ok(frames.sum_axis(Axis(0)) / frames.nrows() as f64)
}

/// Cosine similarity of `query` with every gallery row.
pub fn cosine_scores(query: ArrayView1<f64>, gallery: ArrayView2<f64>) -> Result<Array1<f64>> {
    if query.len() != gallery.ncols() {
        return Err(Error::ShapeError(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.ncols()
        )));
    }
    let qn = l2_norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNormFeature);
    }
    gallery
        .rows()
        .into_iter()
        .map(|g| {
            let gn = l2_norm(g);
            if gn == 0.0 {
                return Err(Error::ZeroNormFeature);
            }
            Ok((query.dot(&g) / (qn * gn)).clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Maps a Euclidean distance into a similarity in (0, 1].
pub fn euclidean_to_similarity(dist: f64) -> Result<f64> {
    if dist < 0.0 || dist.is_nan() {
        return Err(Error::NegativeDistance(dist));
    }
    Ok(1.0 / (1.0 + dist))
}

/// `1 / (1 + ||query - g||)` for every gallery row.
pub fn euclidean_scores(query: ArrayView1<f64>, gallery: ArrayView2<f64>) -> Result<Array1<f64>> {
    if query.len() != gallery.ncols() {
        return Err(Error::ShapeError(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.ncols()
        )));
    }
    gallery
        .rows()
        .into_iter()
        .map(|g| {
            let d = query
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            euclidean_to_similarity(d)
        })
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

pub fn similarity_scores(
    kind: MetricKind,
    query: ArrayView1<f64>,
    gallery: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    match kind {
        MetricKind::Cosine => cosine_scores(query, gallery),
        MetricKind::Euclidean => euclidean_scores(query, gallery),
    }
}

/// Scores every query against the gallery for one modality.
///
/// Queries lacking features for the modality get a fully masked row.
pub fn score_matrix(
    modality_id: &str,
    kind: MetricKind,
    queries: &[QueryRecord],
    gallery: &GalleryManifest,
) -> Result<ScoreMatrix> {
    let g = gallery
        .features
        .get(modality_id)
        .ok_or_else(|| Error::Invalid(format!("gallery has no features for {modality_id}")))?;
    let t = gallery.len();
    let mut values = Array2::from_elem((queries.len(), t), f64::NAN);
    let mut mask = Array2::from_elem((queries.len(), t), false);
    for (qi, q) in queries.iter().enumerate() {
        let Some(frames) = q.features.get(modality_id) else {
            continue;
        };
        let feat = aggregate_query_feature(frames.view())?;
        let row = similarity_scores(kind, feat.view(), g.view())?;
        values.row_mut(qi).assign(&row);
        mask.row_mut(qi).fill(true);
    }
    ScoreMatrix::new(
        modality_id,
        queries.iter().map(|q| q.query_id.clone()).collect(),
        gallery.template_ids(),
        values,
        mask,
    )
}

/// Stacks one query's rows from each modality into a T×N matrix.
///
/// Column order follows `matrices`. A modality that does not list the query
/// contributes a fully masked column.
pub fn build_concat_scores(matrices: &[&ScoreMatrix], query_id: &str) -> Result<ConcatScores> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::ShapeError("no score matrices".into()))?;
    if matrices.len() < 2 {
        return Err(Error::ShapeError("score fusion needs at least two modalities".into()));
    }
    let t = first.num_templates();
    for m in &matrices[1..] {
        if m.template_ids != first.template_ids {
            return Err(Error::TemplateOrderMismatch(format!(
                "{} vs {}",
                first.modality_id, m.modality_id
            )));
        }
    }
    let n = matrices.len();
    let mut values = Array2::from_elem((t, n), f64::NAN);
    let mut mask = Array2::from_elem((t, n), false);
    for (j, m) in matrices.iter().enumerate() {
        if let Some(qi) = m.query_index(query_id) {
            values.column_mut(j).assign(&m.values.row(qi));
            mask.column_mut(j).assign(&m.mask.row(qi));
        }
    }
    Ok(ConcatScores {
        modality_order: matrices.iter().map(|m| m.modality_id.clone()).collect(),
        values,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn aggregate_mean_of_rows() {
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(aggregate_query_feature(f.view()).unwrap(), array![2.0, 3.0]);
        let one = array![[5.0, 6.0]];
        assert_eq!(aggregate_query_feature(one.view()).unwrap(), array![5.0, 6.0]);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(aggregate_query_feature(empty.view()), Err(Error::EmptyQuery)));
    }

    #[test]
    fn cosine_trivial_cases() {
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cosine_scores(array![1.0, 0.0].view(), g.view()).unwrap(), array![1.0, 0.0]);
        let g1 = array![[1.0, 0.0]];
        assert_eq!(cosine_scores(array![2.0, 0.0].view(), g1.view()).unwrap(), array![1.0]);
        assert!(matches!(
            cosine_scores(array![0.0, 0.0].view(), g.view()),
            Err(Error::ZeroNormFeature)
        ));
        let gz = array![[0.0, 0.0]];
        assert!(matches!(
            cosine_scores(array![1.0, 0.0].view(), gz.view()),
            Err(Error::ZeroNormFeature)
        ));
    }

    #[test]
    fn euclidean_similarity_values() {
        assert_eq!(euclidean_to_similarity(0.0).unwrap(), 1.0);
        assert_eq!(euclidean_to_similarity(1.0).unwrap(), 0.5);
        assert_eq!(euclidean_to_similarity(3.0).unwrap(), 0.25);
        assert!(matches!(euclidean_to_similarity(-0.1), Err(Error::NegativeDistance(_))));
    }

    fn matrix(id: &str, templates: &[&str], rows: &[(&str, Vec<Option<f64>>)]) -> ScoreMatrix {
        let t = templates.len();
        let mut v = Array2::zeros((rows.len(), t));
        let mut m = Array2::from_elem((rows.len(), t), false);
        for (i, (_, r)) in rows.iter().enumerate() {
            for (j, x) in r.iter().enumerate() {
                if let Some(x) = x {
                    v[[i, j]] = *x;
                    m[[i, j]] = true;
                }
            }
        }
        ScoreMatrix::new(
            id,
            rows.iter().map(|(q, _)| q.to_string()).collect(),
            templates.iter().map(|s| s.to_string()).collect(),
            v,
            m,
        )
        .unwrap()
    }

    #[test]
    fn concat_column_order_and_mask() {
        let a = matrix("face", &["t0", "t1", "t2"], &[("q", vec![Some(0.1), Some(0.2), Some(0.3)])]);
        let b = matrix("gait", &["t0", "t1", "t2"], &[("q", vec![None, None, None])]);
        let c = build_concat_scores(&[&a, &b], "q").unwrap();
        assert_eq!(c.values.dim(), (3, 2));
        assert_eq!(c.modality_order, vec!["face", "gait"]);
        assert_eq!(c.column(0), vec![Some(0.1), Some(0.2), Some(0.3)]);
        assert!(!c.modality_present(1));
        assert_eq!(c.num_modalities(), 2);
    }

    #[test]
    fn concat_rejects_template_mismatch() {
        let a = matrix("face", &["t0", "t1"], &[("q", vec![Some(0.1), Some(0.2)])]);
        let b = matrix("gait", &["t1", "t0"], &[("q", vec![Some(0.1), Some(0.2)])]);
        assert!(matches!(
            build_concat_scores(&[&a, &b], "q"),
            Err(Error::TemplateOrderMismatch(_))
        ));
    }
}
