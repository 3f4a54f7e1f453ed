//! Equal error rate and DET operating points over per-clip scores, plus
//! multi-seed aggregation. Scores follow the convention higher = more
//! bonafide; FRR is the fraction of bonafide below the threshold and FAR
//! the fraction of spoof at or above it.

use std::fs;
use std::path::Path;

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub family: String,
    pub split: String,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.score.is_finite() {
            return Err(Error::Numeric {
                site: format!("record {}", self.id),
                detail: "non-finite score".into(),
            });
        }
        Ok(())
    }
}

fn split_scores(records: &[EvalRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        r.validate()?;
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Validation(
            "EER needs at least one record of each class".into(),
        ));
    }
    Ok((bona, spoof))
}

/// Operating points (FAR, FRR, threshold) at every distinct score plus a
/// sentinel above the maximum. FAR is non-increasing and FRR non-decreasing
/// along increasing threshold.
fn staircase(bona: &[f64], spoof: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = bona.iter().chain(spoof).cloned().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    let nb = bona.len() as f64;
    let ns = spoof.len() as f64;
    for &th in &thresholds {
        let frr = bona.iter().filter(|&&s| s < th).count() as f64 / nb;
        let far = spoof.iter().filter(|&&s| s >= th).count() as f64 / ns;
        points.push((far, frr, th));
    }
    // beyond the largest score everything is rejected
    let top = thresholds.last().copied().unwrap_or(0.0);
    points.push((0.0, 1.0, top + 1.0));
    points
}

/// Equal error rate: sweep thresholds at all distinct scores and linearly
/// interpolate between the two adjacent operating points where FRR - FAR
/// changes sign. Returns (eer, crossing threshold).
pub fn compute_eer(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let (bona, spoof) = split_scores(records)?;
    let points = staircase(&bona, &spoof);
    for w in points.windows(2) {
        let (far0, frr0, th0) = w[0];
        let (far1, frr1, th1) = w[1];
        let d0 = frr0 - far0;
        let d1 = frr1 - far1;
        if d0 > 0.0 {
            continue; // crossing is earlier; first window with d0 <= 0 <= d1 wins
        }
        if d1 < 0.0 {
            continue;
        }
        // d0 <= 0 <= d1
        let denom = d1 - d0;
        if denom == 0.0 {
            return Ok((frr0, th0));
        }
        let t = -d0 / denom;
        let eer = frr0 + t * (frr1 - frr0);
        let threshold = th0 + t * (th1 - th0);
        return Ok((eer, threshold));
    }
    // diff is monotone from -1 to +1, so a crossing always exists
    unreachable!("FRR-FAR must change sign across the sweep");
}

/// DET operating points: the (FAR, FRR) staircase over all distinct scores.
pub fn det_points(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    let (bona, spoof) = split_scores(records)?;
    Ok(staircase(&bona, &spoof)
        .into_iter()
        .map(|(far, frr, _)| (far, frr))
        .collect())
}

/// Per-split mean and sample standard deviation (n-1 denominator) of EER
/// tables from independent seeds. Every seed must report the same split
/// names in the same order.
pub fn seed_aggregate(tables: &[Vec<(String, f64)>]) -> Result<Vec<(String, f64, f64)>> {
    if tables.len() < 2 {
        return Err(Error::Validation(format!(
            "seed aggregation needs at least 2 seeds, got {}",
            tables.len()
        )));
    }
    let names: Vec<&String> = tables[0].iter().map(|(n, _)| n).collect();
    for t in tables.iter().skip(1) {
        let other: Vec<&String> = t.iter().map(|(n, _)| n).collect();
        if other != names {
            return Err(Error::Validation(
                "seed tables have misaligned eval-set names".into(),
            ));
        }
    }
    let n = tables.len() as f64;
    let mut out = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let values: Vec<f64> = tables.iter().map(|t| t[i].1).collect();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        out.push(((*name).clone(), mean, var.sqrt()));
    }
    Ok(out)
}

// ── scores file I/O ──────────────────────────────────────────────────

pub const SCORES_HEADER: &str = "id,score,label,family,split";

pub fn write_scores(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.score,
            r.label.as_str(),
            r.family,
            r.split
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SCORES_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "scores file header {:?}, expected '{SCORES_HEADER}'",
                other
            )))
        }
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!("bad scores line '{line}'")));
        }
        let label = match parts[2] {
            "bonafide" => Label::Bonafide,
            "spoof" => Label::Spoof,
            other => return Err(Error::Format(format!("unknown label '{other}'"))),
        };
        records.push(EvalRecord {
            id: parts[0].to_string(),
            score: parts[1]
                .parse()
                .map_err(|e| Error::Format(format!("bad score '{}': {e}", parts[1])))?,
            label,
            family: parts[3].to_string(),
            split: parts[4].to_string(),
        });
    }
    Ok(records)
}

#[cfg(test)]
pub(crate) fn records_from(bona: &[f64], spoof: &[f64]) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (i, &s) in bona.iter().enumerate() {
        out.push(EvalRecord {
            id: format!("b{i}"),
            score: s,
            label: Label::Bonafide,
            family: "bona".into(),
            split: "test".into(),
        });
    }
    for (i, &s) in spoof.iter().enumerate() {
        out.push(EvalRecord {
            id: format!("s{i}"),
            score: s,
            label: Label::Spoof,
            family: "A01".into(),
            split: "test".into(),
        });
    }
    out
}
