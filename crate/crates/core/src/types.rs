//! Domain types shared across the crate.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a modality's backbone compares features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Cosine,
    Euclidean,
}

/// One biometric channel (face, gait, body, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityChannel {
    pub modality_id: String,
    pub metric_kind: MetricKind,
    pub feature_dim: usize,
}

impl ModalityChannel {
    pub fn new(modality_id: impl Into<String>, metric_kind: MetricKind, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be at least 1".into()));
        }
        Ok(Self {
            modality_id: modality_id.into(),
            metric_kind,
            feature_dim,
        })
    }
}

/// A probe sequence with its ground-truth subject.
///
/// `features` holds the L×d frame features per modality; a modality that is
/// absent for this probe simply has no entry. `qe_features` holds the reduced
/// intermediate statistics (L×2d) that feed the quality estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub subject_id: String,
    pub frame_count: usize,
    pub features: BTreeMap<String, Array2<f64>>,
    pub qe_features: BTreeMap<String, Array2<f64>>,
}

impl QueryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::EmptyQuery);
        }
        for (m, f) in self.features.iter().chain(self.qe_features.iter()) {
            if f.nrows() != self.frame_count {
                return Err(Error::ShapeError(format!(
                    "query {} modality {m}: {} rows for {} frames",
                    self.query_id,
                    f.nrows(),
                    self.frame_count
                )));
            }
        }
        Ok(())
    }

    pub fn has_modality(&self, modality_id: &str) -> bool {
        self.features.contains_key(modality_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub template_id: String,
    pub subject_id: String,
}

/// Enrolled subjects and their gallery templates.
///
/// Template order is shared by every modality's feature matrix and by every
/// score matrix computed against this gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryManifest {
    pub subjects: BTreeSet<String>,
    pub templates: Vec<TemplateEntry>,
    pub features: BTreeMap<String, Array2<f64>>,
}

impl GalleryManifest {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Invalid("gallery has no templates".into()));
        }
        for t in &self.templates {
            if !self.subjects.contains(&t.subject_id) {
                return Err(Error::UnknownSubject(t.subject_id.clone()));
            }
        }
        for (m, f) in &self.features {
            if f.nrows() != self.templates.len() {
                return Err(Error::ShapeError(format!(
                    "gallery modality {m}: {} rows for {} templates",
                    f.nrows(),
                    self.templates.len()
                )));
            }
        }
        Ok(())
    }

    pub fn template_ids(&self) -> Vec<String> {
        self.templates.iter().map(|t| t.template_id.clone()).collect()
    }

    pub fn template_subjects(&self) -> Vec<String> {
        self.templates.iter().map(|t| t.subject_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Query×template similarity scores of one modality.
///
/// Masked entries (`mask == false`) hold NaN and must never be read as scores.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub modality_id: String,
    pub query_ids: Vec<String>,
    pub template_ids: Vec<String>,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl ScoreMatrix {
    pub fn new(
        modality_id: impl Into<String>,
        query_ids: Vec<String>,
        template_ids: Vec<String>,
        values: Array2<f64>,
        mask: Array2<bool>,
    ) -> Result<Self> {
        let shape = (query_ids.len(), template_ids.len());
        if values.dim() != shape || mask.dim() != shape {
            return Err(Error::ShapeError(format!(
                "score matrix {:?}/{:?} for {} queries x {} templates",
                values.dim(),
                mask.dim(),
                shape.0,
                shape.1
            )));
        }
        let mut values = values;
        for (v, &present) in values.iter_mut().zip(mask.iter()) {
            if !present {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            modality_id: modality_id.into(),
            query_ids,
            template_ids,
            values,
            mask,
        })
    }

    pub fn query_index(&self, query_id: &str) -> Option<usize> {
        self.query_ids.iter().position(|q| q == query_id)
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn num_templates(&self) -> usize {
        self.template_ids.len()
    }

    /// Present scores of one query row, `None` where masked.
    pub fn row(&self, q: usize) -> Vec<Option<f64>> {
        self.values
            .row(q)
            .iter()
            .zip(self.mask.row(q).iter())
            .map(|(&v, &m)| m.then_some(v))
            .collect()
    }

    /// All present entries, row-major.
    pub fn present_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    }
}

/// Per-query T×N stack of modality scores, one column per modality.
#[derive(Debug, Clone)]
pub struct ConcatScores {
    pub modality_order: Vec<String>,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl ConcatScores {
    pub fn num_templates(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_modalities(&self) -> usize {
        self.values.ncols()
    }

    /// Column `j` as an optional score per template.
    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.values
            .column(j)
            .iter()
            .zip(self.mask.column(j).iter())
            .map(|(&v, &m)| m.then_some(v))
            .collect()
    }

    /// Template row `t` as an optional score per modality.
    pub fn row(&self, t: usize) -> Vec<Option<f64>> {
        self.values
            .row(t)
            .iter()
            .zip(self.mask.row(t).iter())
            .map(|(&v, &m)| m.then_some(v))
            .collect()
    }

    pub fn modality_present(&self, j: usize) -> bool {
        self.mask.column(j).iter().any(|&m| m)
    }
}

/// Match/non-match template labels of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreLabels {
    pub is_match: Vec<bool>,
}

impl ScoreLabels {
    pub fn from_subjects(query_subject: &str, template_subjects: &[String]) -> Self {
        Self {
            is_match: template_subjects.iter().map(|s| s == query_subject).collect(),
        }
    }

    pub fn matches(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_match.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn non_matches(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_match.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i)
    }

    pub fn num_matches(&self) -> usize {
        self.is_match.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.is_match.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_match.is_empty()
    }
}

pub(crate) fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
