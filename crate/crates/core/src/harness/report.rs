//! CSV outputs. Floats are written in shortest round-trip form, so equal
//! runs produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::metrics::ConfusionMatrix;
use crate::autodiff::Tensor;
use crate::cluster::{ClusterReport, StyleCode};
use crate::error::{Error, Result};
use crate::synthdata::CLASS_NAMES;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!append).from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes serializable rows with a header, or appends them without one.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], append: bool) -> Result<()> {
    let append = append && path.exists();
    let mut w = writer(path, append)?;
    for r in rows {
        w.serialize(r)?;
    }
    finish(w, path)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `sample_id, cluster[, domain]`; the domain column only when provenance
/// is supplied (evaluation use).
pub fn write_assignments(path: &Path, assignments: &[usize], domains: Option<&[String]>) -> Result<()> {
    let mut w = writer(path, false)?;
    if domains.is_some() {
        w.write_record(["sample_id", "cluster", "domain"])?;
    } else {
        w.write_record(["sample_id", "cluster"])?;
    }
    for (i, &a) in assignments.iter().enumerate() {
        let mut rec = vec![i.to_string(), a.to_string()];
        if let Some(d) = domains {
            rec.push(d[i].clone());
        }
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// One row per image: `split, sample_id, cluster, c0..c7`.
pub fn write_codes(path: &Path, rows: &[(&str, usize, usize, StyleCode)]) -> Result<()> {
    let mut w = writer(path, false)?;
    let mut header = vec!["split".to_string(), "sample_id".into(), "cluster".into()];
    header.extend((0..crate::cluster::CODE_LEN).map(|j| format!("c{j}")));
    w.write_record(&header)?;
    for (split, i, k, code) in rows {
        let mut rec = vec![split.to_string(), i.to_string(), k.to_string()];
        rec.extend(code.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// Branch weights per sample: `sample_id, cluster, w0..w{K-1}`.
pub fn write_weights(path: &Path, weights: &Tensor, clusters: &[usize]) -> Result<()> {
    let k = weights.shape()[1];
    let mut w = writer(path, false)?;
    let mut header = vec!["sample_id".to_string(), "cluster".into()];
    header.extend((0..k).map(|j| format!("w{j}")));
    w.write_record(&header)?;
    for (i, row) in weights.data().chunks(k).enumerate() {
        let mut rec = vec![i.to_string(), clusters[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `cluster, <domain>…, total` per cluster, then a `purity` row.
pub fn write_cluster_report(path: &Path, r: &ClusterReport, domains: &[String]) -> Result<()> {
    let mut w = writer(path, false)?;
    let mut header = vec!["cluster".to_string()];
    header.extend(domains.iter().cloned());
    header.push("total".into());
    w.write_record(&header)?;
    for (k, row) in r.counts.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        rec.push(row.iter().sum::<usize>().to_string());
        w.write_record(&rec)?;
    }
    let mut last = vec!["purity".to_string()];
    last.extend(std::iter::repeat_n(String::new(), domains.len()));
    last.push(r.purity.to_string());
    w.write_record(&last)?;
    finish(w, path)
}

/// One evaluated (model, split, mode) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub split: String,
    pub mode: String,
    pub conf: ConfusionMatrix,
}

fn iou_header(prefix: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    h.extend(CLASS_NAMES.iter().map(|c| format!("iou_{c}")));
    h
}

/// `model, split, mode, miou, pixels, iou_<class>…`.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = writer(path, false)?;
    w.write_record(iou_header(&["model", "split", "mode", "miou", "pixels"]))?;
    for r in rows {
        let mut rec = vec![
            r.model.clone(),
            r.split.clone(),
            r.mode.clone(),
            r.conf.miou().to_string(),
            r.conf.total().to_string(),
        ];
        rec.extend(r.conf.iou().into_iter().map(cell));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// Per-image result of an online pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRow {
    pub image_id: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
    /// IoU per class; empty for classes absent from truth and prediction.
    pub iou: Vec<Option<f64>>,
}

/// `image_id, entropy_before, entropy_after, iou_<class>…` in stream order.
pub fn write_online(path: &Path, rows: &[OnlineRow]) -> Result<()> {
    let mut w = writer(path, false)?;
    w.write_record(iou_header(&["image_id", "entropy_before", "entropy_after"]))?;
    for r in rows {
        let mut rec = vec![
            r.image_id.to_string(),
            r.entropy_before.to_string(),
            r.entropy_after.to_string(),
        ];
        rec.extend(r.iou.iter().copied().map(cell));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `(model, split, mode, miou)` of every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, String, String, f64)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "metrics of a finished run".into(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let miou = get(3).parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad miou {:?}", get(3)),
        })?;
        out.push((get(0), get(1), get(2), miou));
    }
    Ok(out)
}
