//! ROC construction, AUC, TPR at fixed FPR, and export.
//!
//! Members are the positive class. Attack scores are "lower = member", so
//! the decision statistic is the negated score and a point at threshold
//! `θ` flags every sample with `−score ≥ θ`. Tied statistics enter the
//! curve together, which makes trapezoidal AUC equal to the Mann–Whitney
//! statistic with ties counted one half.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackScore;
use crate::error::{Error, Result};
use crate::schedule::Time;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Statistic cutoff (negated score); `+∞` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// ROC of `(score, is_member)` pairs.
pub fn roc_from_pairs(pairs: &[(f64, bool)]) -> Result<RocCurve> {
    let pos = pairs.iter().filter(|(_, m)| *m).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "ROC needs at least one member and one non-member",
        ));
    }
    if pairs.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores"));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.iter().map(|&(s, m)| (-s, m)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let stat = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == stat {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: stat,
        });
    }
    Ok(RocCurve { points })
}

pub fn roc_curve(scores: &[AttackScore]) -> Result<RocCurve> {
    let pairs: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.is_member)).collect();
    roc_from_pairs(&pairs)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Largest TPR among operating points with FPR ≤ `fpr_target`.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::invalid(format!(
            "FPR target must lie in (0, 1), got {fpr_target}"
        )));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

/// Per-method summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub method: String,
    pub t: f64,
    pub p: f64,
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub tpr_at_01pct_fpr: f64,
    pub n_members: usize,
    pub n_holdout: usize,
    pub total_queries: u64,
    pub wall_time_seconds: f64,
}

impl MetricsReport {
    /// Summarizes scores of a single method/time/norm combination.
    pub fn from_scores(scores: &[AttackScore], wall_time_seconds: f64) -> Result<Self> {
        let first = scores
            .first()
            .ok_or_else(|| Error::invalid("no scores to summarize"))?;
        if scores
            .iter()
            .any(|s| s.method != first.method || s.t != first.t || s.p != first.p)
        {
            return Err(Error::invalid("scores mix several methods or settings"));
        }
        let curve = roc_curve(scores)?;
        let n_members = scores.iter().filter(|s| s.is_member).count();
        Ok(Self {
            method: first.method.tag().to_string(),
            t: match first.t {
                Time::Step(t) => t as f64,
                Time::Continuous(t) => t,
            },
            p: first.p,
            auc: auc(&curve),
            tpr_at_1pct_fpr: tpr_at_fpr(&curve, 0.01)?,
            tpr_at_01pct_fpr: tpr_at_fpr(&curve, 0.001)?,
            n_members,
            n_holdout: scores.len() - n_members,
            total_queries: scores.iter().map(|s| s.queries).sum(),
            wall_time_seconds,
        })
    }
}

/// Lowest value shown on the log axes.
pub const LOG_FLOOR: f64 = 1e-4;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the curve as CSV (`fpr,tpr,threshold`) and as a log-log SVG.
pub fn log_roc_export(curve: &RocCurve, csv_path: &Path, svg_path: &Path) -> Result<()> {
    write_file(csv_path, &roc_csv(curve))?;
    write_file(svg_path, &roc_svg(curve))
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", p.fpr, p.tpr, p.threshold);
    }
    out
}

pub fn read_roc_csv(path: &Path) -> Result<RocCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("fpr,tpr,threshold") {
        return Err(Error::format(path, "header", "expected `fpr,tpr,threshold`"));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                path,
                format!("row {}", i + 1),
                "expected 3 columns",
            ));
        }
        let parse = |s: &str, name: &str| {
            s.parse::<f64>().map_err(|e| {
                Error::format(path, format!("row {} {name}", i + 1), e.to_string())
            })
        };
        points.push(RocPoint {
            fpr: parse(cols[0], "fpr")?,
            tpr: parse(cols[1], "tpr")?,
            threshold: parse(cols[2], "threshold")?,
        });
    }
    Ok(RocCurve { points })
}

const SVG_SIZE: f64 = 400.0;
const SVG_MARGIN: f64 = 40.0;

/// Pixel offset of a rate along a log axis spanning `[LOG_FLOOR, 1]`.
fn log_axis(v: f64) -> f64 {
    let span = -LOG_FLOOR.log10();
    let frac = (v.max(LOG_FLOOR).log10() + span) / span;
    frac * (SVG_SIZE - 2.0 * SVG_MARGIN)
}

fn svg_xy(p: &RocPoint) -> (f64, f64) {
    let x = SVG_MARGIN + log_axis(p.fpr);
    let y = SVG_SIZE - SVG_MARGIN - log_axis(p.tpr);
    (x, y)
}

pub fn roc_svg(curve: &RocCurve) -> String {
    let lo = SVG_MARGIN;
    let hi = SVG_SIZE - SVG_MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{lo}" y="{lo}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        w = hi - lo
    );
    let _ = writeln!(
        s,
        r#"<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{lo}" stroke="gray" stroke-dasharray="4 4"/>"#
    );
    for k in 0..=4 {
        let off = log_axis(10f64.powi(-k));
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="10" text-anchor="middle">1e-{k}</text>"#,
            x = lo + off,
            y = hi + 15.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="10" text-anchor="end">1e-{k}</text>"#,
            x = lo - 4.0,
            y = hi - off + 3.0
        );
    }
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| {
            let (x, y) = svg_xy(p);
            format!("{x:.4},{y:.4}")
        })
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">FPR</text>"#,
        x = SVG_SIZE / 2.0,
        y = SVG_SIZE - 5.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{y}" font-size="12" transform="rotate(-90 12 {y})" text-anchor="middle">TPR</text>"#,
        y = SVG_SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}
