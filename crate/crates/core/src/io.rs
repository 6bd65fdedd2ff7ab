//! On-disk formats for datasets, score matrices and quality tables.
//!
//! A split directory holds `manifest.json`, and per modality
//! `gallery_<m>.csv`, `frames_<m>.csv`, `qe_<m>.csv` and `scores_<m>.csv`,
//! plus `quality.csv`. Masked scores are written as `NA`. Floats use the
//! shortest round-trip representation, so parsing reproduces values exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::FORMAT_VERSION;
use crate::scores::score_matrix;
use crate::synth::{QualityRow, Split, SynthDataset};
use crate::types::{GalleryManifest, ModalityChannel, QueryRecord, ScoreMatrix, TemplateEntry};

pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: String,
    pub subject_id: String,
    pub frame_count: usize,
    /// Modalities with features for this query.
    pub modalities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub channels: Vec<ModalityChannel>,
    pub subjects: Vec<String>,
    pub templates: Vec<TemplateEntry>,
    pub queries: Vec<QueryEntry>,
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Writes `id, c0, c1, ...` rows.
fn write_rows<'a, I>(path: &Path, header: Vec<String>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (Vec<String>, ndarray::ArrayView1<'a, f64>)>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (keys, vals) in rows {
        let mut rec = keys;
        rec.extend(vals.iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn write_score_matrix(path: &Path, m: &ScoreMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["query_id".to_string()];
    header.extend(m.template_ids.iter().cloned());
    w.write_record(&header)?;
    for (q, qid) in m.query_ids.iter().enumerate() {
        let mut rec = vec![qid.clone()];
        rec.extend(m.row(q).into_iter().map(|v| v.map(fmt).unwrap_or_else(|| NA.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_matrix(path: &Path, modality_id: &str) -> Result<ScoreMatrix> {
    let (header, rows) = read_records(path)?;
    if header.get(0) != Some("query_id") {
        return Err(Error::Parse(format!("{}: first column must be query_id", path.display())));
    }
    let template_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let t = template_ids.len();
    let mut values = Array2::from_elem((rows.len(), t), f64::NAN);
    let mut mask = Array2::from_elem((rows.len(), t), false);
    let mut query_ids = Vec::with_capacity(rows.len());
    for (q, rec) in rows.iter().enumerate() {
        if rec.len() != t + 1 {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), q + 1, rec.len())));
        }
        query_ids.push(rec[0].to_string());
        for (j, field) in rec.iter().skip(1).enumerate() {
            if field.trim() != NA {
                values[[q, j]] = parse_f64(field)?;
                mask[[q, j]] = true;
            }
        }
    }
    ScoreMatrix::new(modality_id, query_ids, template_ids, values, mask)
}

pub fn write_quality_table(path: &Path, rows: &[QualityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_quality_table(path: &Path) -> Result<Vec<QualityRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn feature_header(keys: &[&str], prefix: &str, width: usize) -> Vec<String> {
    let mut h: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
    h.extend((0..width).map(|i| format!("{prefix}{i}")));
    h
}

/// Writes one split, including all-frame score matrices of every modality.
pub fn write_split(dir: &Path, split: &Split, channels: &[ModalityChannel]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SplitManifest {
        format_version: FORMAT_VERSION,
        channels: channels.to_vec(),
        subjects: split.gallery.subjects.iter().cloned().collect(),
        templates: split.gallery.templates.clone(),
        queries: split
            .queries
            .iter()
            .map(|q| QueryEntry {
                query_id: q.query_id.clone(),
                subject_id: q.subject_id.clone(),
                frame_count: q.frame_count,
                modalities: channels
                    .iter()
                    .filter(|c| q.has_modality(&c.modality_id))
                    .map(|c| c.modality_id.clone())
                    .collect(),
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for c in channels {
        let m = &c.modality_id;
        let g = split
            .gallery
            .features
            .get(m)
            .ok_or_else(|| Error::Invalid(format!("gallery has no features for {m}")))?;
        write_rows(
            &dir.join(format!("gallery_{m}.csv")),
            feature_header(&["template_id"], "f", c.feature_dim),
            split
                .gallery
                .templates
                .iter()
                .zip(g.rows())
                .map(|(t, r)| (vec![t.template_id.clone()], r)),
        )?;
        for (file, source, width) in [
            ("frames", true, c.feature_dim),
            ("qe", false, 2 * c.feature_dim),
        ] {
            let rows = split.queries.iter().flat_map(|q| {
                let mat = if source { q.features.get(m) } else { q.qe_features.get(m) };
                mat.into_iter().flat_map(move |a| {
                    a.rows()
                        .into_iter()
                        .enumerate()
                        .map(move |(f, r)| (vec![q.query_id.clone(), f.to_string()], r))
                })
            });
            write_rows(
                &dir.join(format!("{file}_{m}.csv")),
                feature_header(&["query_id", "frame"], if source { "f" } else { "r" }, width),
                rows,
            )?;
        }
        let scores = score_matrix(m, c.metric_kind, &split.queries, &split.gallery)?;
        write_score_matrix(&dir.join(format!("scores_{m}.csv")), &scores)?;
    }
    write_quality_table(&dir.join("quality.csv"), &split.quality)?;
    Ok(())
}

fn read_matrix_rows(path: &Path, keys: usize, width: usize) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let (_, rows) = read_records(path)?;
    rows.iter()
        .map(|rec| {
            if rec.len() != keys + width {
                return Err(Error::Parse(format!("{}: expected {} fields, got {}", path.display(), keys + width, rec.len())));
            }
            let k = rec.iter().take(keys).map(str::to_string).collect();
            let v = rec.iter().skip(keys).map(parse_f64).collect::<Result<Vec<_>>>()?;
            Ok((k, v))
        })
        .collect()
}

fn per_query_frames(
    path: &Path,
    width: usize,
    frame_counts: &BTreeMap<String, usize>,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (k, v) in read_matrix_rows(path, 2, width)? {
        let qid = &k[0];
        let l = *frame_counts
            .get(qid)
            .ok_or_else(|| Error::Parse(format!("{}: unknown query {qid}", path.display())))?;
        let f: usize = k[1].parse().map_err(|_| Error::Parse(format!("bad frame index {}", k[1])))?;
        if f >= l {
            return Err(Error::Parse(format!("{}: frame {f} out of range for {qid}", path.display())));
        }
        let a = out.entry(qid.clone()).or_insert_with(|| Array2::from_elem((l, width), f64::NAN));
        a.row_mut(f).assign(&ndarray::ArrayView1::from(&v));
    }
    if out.values().any(|a| a.iter().any(|v| v.is_nan())) {
        return Err(Error::Parse(format!("{}: missing frames", path.display())));
    }
    Ok(out)
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(Split, Vec<ModalityChannel>)> {
    let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    crate::nn::checkpoint::check_version(manifest.format_version)?;
    let frame_counts: BTreeMap<String, usize> = manifest
        .queries
        .iter()
        .map(|q| (q.query_id.clone(), q.frame_count))
        .collect();
    let mut gallery_features = BTreeMap::new();
    let mut frames = BTreeMap::new();
    let mut qe = BTreeMap::new();
    for c in &manifest.channels {
        let m = &c.modality_id;
        let rows = read_matrix_rows(&dir.join(format!("gallery_{m}.csv")), 1, c.feature_dim)?;
        if rows.len() != manifest.templates.len()
            || rows.iter().zip(&manifest.templates).any(|((k, _), t)| k[0] != t.template_id)
        {
            return Err(Error::TemplateOrderMismatch(format!("gallery_{m}.csv vs manifest")));
        }
        let mut g = Array2::zeros((rows.len(), c.feature_dim));
        for (i, (_, v)) in rows.iter().enumerate() {
            g.row_mut(i).assign(&ndarray::ArrayView1::from(v));
        }
        gallery_features.insert(m.clone(), g);
        frames.insert(m.clone(), per_query_frames(&dir.join(format!("frames_{m}.csv")), c.feature_dim, &frame_counts)?);
        qe.insert(m.clone(), per_query_frames(&dir.join(format!("qe_{m}.csv")), 2 * c.feature_dim, &frame_counts)?);
    }
    let queries = manifest
        .queries
        .iter()
        .map(|e| {
            let mut features = BTreeMap::new();
            let mut qe_features = BTreeMap::new();
            for m in &e.modalities {
                let f = frames
                    .get_mut(m)
                    .and_then(|x| x.remove(&e.query_id))
                    .ok_or_else(|| Error::Parse(format!("no {m} frames for {}", e.query_id)))?;
                features.insert(m.clone(), f);
                if let Some(r) = qe.get_mut(m).and_then(|x| x.remove(&e.query_id)) {
                    qe_features.insert(m.clone(), r);
                }
            }
            let q = QueryRecord {
                query_id: e.query_id.clone(),
                subject_id: e.subject_id.clone(),
                frame_count: e.frame_count,
                features,
                qe_features,
            };
            q.validate()?;
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery = GalleryManifest {
        subjects: manifest.subjects.iter().cloned().collect::<BTreeSet<_>>(),
        templates: manifest.templates.clone(),
        features: gallery_features,
    };
    gallery.validate()?;
    let quality = read_quality_table(&dir.join("quality.csv"))?;
    Ok((
        Split {
            gallery,
            queries,
            quality,
        },
        manifest.channels,
    ))
}

/// Writes `train/` and `test/` split directories under `dir`.
pub fn emit(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    write_split(&dir.join("train"), &dataset.train, &dataset.channels)?;
    write_split(&dir.join("test"), &dataset.test, &dataset.channels)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SynthDataset> {
    let (train, channels) = read_split(&dir.join("train"))?;
    let (test, test_channels) = read_split(&dir.join("test"))?;
    if channels != test_channels {
        return Err(Error::ModalityOrderMismatch("train and test channels differ".into()));
    }
    Ok(SynthDataset { channels, train, test })
}
