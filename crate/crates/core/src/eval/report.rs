//! Plain-text tables, CSV breakdowns and JSON files for evaluation output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::runners::{ConditionSummary, ImpactTable, ItemRow, ReconstructionSummary, SweepPoint};
use crate::error::{Error, Result};

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub fn conditions_table(rows: &[ConditionSummary]) -> String {
    let mut out = format!(
        "{:<20} {:>6} {:>9} {:>9} {:>9} {:>9} {:>12}\n",
        "condition", "n", "success", "FVA", "MNAC", "desk-FID", "mean |dz|^2"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>9.3} {:>9} {:>9} {:>9} {:>12.4}",
            r.name,
            r.count,
            r.success_rate,
            opt(r.identity_preservation, 3),
            opt(r.attributes_changed, 3),
            opt(r.desk_fid, 3),
            r.mean_squared_displacement
        );
    }
    for r in rows {
        for n in &r.notices {
            let _ = writeln!(out, "note ({}): {n}", r.name);
        }
    }
    out
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut out = format!("{:>8} {:>9} {:>12} {:>9}\n", "lambda", "success", "mean |dz|^2", "FVA");
    for p in points {
        let _ = writeln!(
            out,
            "{:>8} {:>9.3} {:>12.4} {:>9}",
            p.lambda,
            p.summary.success_rate,
            p.summary.mean_squared_displacement,
            opt(p.summary.identity_preservation, 3)
        );
    }
    out
}

pub fn reconstruction_table(r: &ReconstructionSummary) -> String {
    let mut out = format!("{:>6} {:>9} {:>9} {:>9} {:>9}\n", "n", "MAE", "FVA", "MNAC", "desk-FID");
    let _ = writeln!(
        out,
        "{:>6} {:>9.4} {:>9} {:>9} {:>9}",
        r.count,
        r.mean_abs_error,
        opt(r.identity_preservation, 3),
        opt(r.attributes_changed, 3),
        opt(r.desk_fid, 3)
    );
    out
}

pub fn impact_text(t: &ImpactTable) -> String {
    let mut out = format!("{:<12}", "model");
    for c in &t.class_names {
        let _ = write!(out, " {c:>9}");
    }
    out.push('\n');
    for (m, name) in t.models.iter().enumerate() {
        let _ = write!(out, "{name:<12}");
        for v in &t.relative[m] {
            let _ = write!(out, " {:>9}", opt(*v, 2));
        }
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(out, "{:<12} {:<30} {:<30}", "model", "most impactful", "least impactful");
    for (m, name) in t.models.iter().enumerate() {
        let r = &t.ranking[m];
        let most = r.iter().take(3).cloned().collect::<Vec<_>>().join(", ");
        let least = r.iter().rev().take(3).cloned().collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "{name:<12} {most:<30} {least:<30}");
    }
    if !t.excluded.is_empty() {
        let _ = writeln!(out, "excluded: {}", t.excluded.join(", "));
    }
    out
}

pub fn items_csv(rows: &[ItemRow]) -> String {
    let mut out = String::from(
        "index,success,counter_prob,first_flip_step,squared_displacement,objective_decreased,identity_similarity,attributes_changed\n",
    );
    let o = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.success,
            r.counter_prob,
            o(r.first_flip_step.map(|v| v.to_string())),
            r.squared_displacement,
            r.objective_decreased,
            o(r.identity_similarity.map(|v| v.to_string())),
            o(r.attributes_changed.map(|v| v.to_string()))
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}
