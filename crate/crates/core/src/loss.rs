//! Margin losses on fused score rows.

use crate::error::{Error, Result};
use crate::types::ScoreLabels;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn check_len(scores: &[f64], labels: &ScoreLabels) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeError(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Triplet loss on distances: `relu(d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    relu(d_ap - d_an + margin)
}

/// Score triplet loss of one query's fused row.
///
/// Mean of `relu(s)` over non-match templates plus mean of `relu(m - s)` over
/// match templates.
pub fn score_triplet_loss(scores: &[f64], labels: &ScoreLabels, margin: f64) -> Result<f64> {
    score_triplet_loss_grad(scores, labels, margin).map(|(l, _)| l)
}

/// [`score_triplet_loss`] together with its gradient w.r.t. `scores`.
pub fn score_triplet_loss_grad(scores: &[f64], labels: &ScoreLabels, margin: f64) -> Result<(f64, Vec<f64>)> {
    check_len(scores, labels)?;
    let n_mat = labels.num_matches();
    if n_mat == 0 {
        return Err(Error::NoMatchTemplates);
    }
    let n_nm = labels.len() - n_mat;
    let mut grad = vec![0.0; scores.len()];
    let mut nm_sum = 0.0;
    let mut mat_sum = 0.0;
    for (t, (&s, &is_match)) in scores.iter().zip(&labels.is_match).enumerate() {
        if is_match {
            let gap = margin - s;
            mat_sum += relu(gap);
            if gap > 0.0 {
                grad[t] = -1.0 / n_mat as f64;
            }
        } else {
            nm_sum += relu(s);
            if s > 0.0 {
                grad[t] = 1.0 / n_nm as f64;
            }
        }
    }
    let nm_term = if n_nm > 0 { nm_sum / n_nm as f64 } else { 0.0 };
    Ok((nm_term + mat_sum / n_mat as f64, grad))
}

/// Triplet loss over every (match, non-match) pair of a fused row.
///
/// Scores act as negated distances, so each pair contributes
/// `triplet_loss(-s_mat, -s_nm, m) = relu(s_nm - s_mat + m)`; the loss is the
/// mean over pairs. Returns the gradient w.r.t. `scores`.
pub fn pairwise_triplet_loss_grad(scores: &[f64], labels: &ScoreLabels, margin: f64) -> Result<(f64, Vec<f64>)> {
    check_len(scores, labels)?;
    let matches: Vec<usize> = labels.matches().collect();
    let non_matches: Vec<usize> = labels.non_matches().collect();
    if matches.is_empty() {
        return Err(Error::NoMatchTemplates);
    }
    let mut grad = vec![0.0; scores.len()];
    if non_matches.is_empty() {
        return Ok((0.0, grad));
    }
    let pairs = (matches.len() * non_matches.len()) as f64;
    let mut total = 0.0;
    for &p in &matches {
        for &n in &non_matches {
            let v = triplet_loss(-scores[p], -scores[n], margin);
            total += v;
            if v > 0.0 {
                grad[p] -= 1.0 / pairs;
                grad[n] += 1.0 / pairs;
            }
        }
    }
    Ok((total / pairs, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(m: &[bool]) -> ScoreLabels {
        ScoreLabels { is_match: m.to_vec() }
    }

    #[test]
    fn score_loss_examples() {
        let l = labels(&[true, false, false]);
        assert_eq!(score_triplet_loss(&[4.0, -1.0, -2.0], &l, 3.0).unwrap(), 0.0);
        assert_eq!(score_triplet_loss(&[2.0, 0.5, -1.0], &l, 3.0).unwrap(), 1.25);
        assert!(matches!(
            score_triplet_loss(&[0.0, 0.0], &labels(&[false, false]), 3.0),
            Err(Error::NoMatchTemplates)
        ));
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.5, 1.0, 0.3), 0.0);
        assert!((triplet_loss(1.0, 0.8, 0.3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_triplet_definition() {
        let l = labels(&[true, false, true, false]);
        let s = [1.0, 0.5, 3.0, -1.0];
        let (v, _) = pairwise_triplet_loss_grad(&s, &l, 1.0).unwrap();
        let expected = (triplet_loss(-1.0, -0.5, 1.0)
            + triplet_loss(-1.0, 1.0, 1.0)
            + triplet_loss(-3.0, -0.5, 1.0)
            + triplet_loss(-3.0, 1.0, 1.0))
            / 4.0;
        assert_eq!(v, expected);
    }
}
