//! CSV exports in the layouts of the metrics and cluster tables.

use std::fmt::Write as _;
use std::path::Path;

use super::cluster::CompositionRow;
use super::metrics::MetricBlock;
use crate::error::{Error, Result};
use crate::model::archive::write_atomic;

pub struct MetricRow<'a> {
    pub model: &'a str,
    pub dataset: &'a str,
    pub metrics: &'a MetricBlock,
}

/// `model,dataset,f1,top1,top3` with percentages at two decimals.
pub fn metrics_csv(rows: &[MetricRow<'_>]) -> String {
    let mut out = String::from("model,dataset,f1,top1,top3\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2}",
            r.model,
            r.dataset,
            100.0 * r.metrics.weighted_f1,
            100.0 * r.metrics.top1,
            100.0 * r.metrics.top3
        );
    }
    out
}

/// `cluster,label,percent`; clusters numbered from 1.
pub fn composition_csv(rows: &[CompositionRow], class_names: &[String]) -> String {
    let mut out = String::from("cluster,label,percent\n");
    for r in rows {
        let name = class_names.get(r.label).cloned().unwrap_or_else(|| r.label.to_string());
        let _ = writeln!(out, "{},{},{:.1}", r.cluster + 1, name, r.percent);
    }
    out
}

pub struct EmbeddingRow {
    pub xy: [f64; 2],
    pub label: usize,
    pub brain_id: u32,
    pub cluster: usize,
}

/// `x,y,label,brain_id,cluster`.
pub fn embedding_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("x,y,label,brain_id,cluster\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{},{},{}",
            r.xy[0],
            r.xy[1],
            r.label,
            r.brain_id,
            r.cluster + 1
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_atomic(path, text.as_bytes())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Rows of comma-separated logits; a non-numeric first line is a header.
pub fn parse_logits_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in data_lines(text) {
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && n == 1 => continue,
            Err(e) => return Err(Error::Format { entry: n, message: format!("bad logit row: {e}") }),
        }
    }
    if let Some(w) = rows.first().map(Vec::len) {
        if let Some(i) = rows.iter().position(|r| r.len() != w) {
            return Err(Error::Format { entry: i + 1, message: format!("expected {w} columns") });
        }
    }
    Ok(rows)
}

/// One integer label per line (first column); a non-numeric first line is a header.
pub fn parse_labels_csv(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (n, line) in data_lines(text) {
        let first = line.split(',').next().unwrap_or("").trim();
        match first.parse::<usize>() {
            Ok(v) => out.push(v),
            Err(_) if out.is_empty() && n == 1 => continue,
            Err(e) => return Err(Error::Format { entry: n, message: format!("bad label: {e}") }),
        }
    }
    Ok(out)
}
