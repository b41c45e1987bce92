use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{JaccardMatrix, KSensitivity};
use crate::error::{LabError, Result};
use crate::patcher::PatchGrid;
use crate::trainer::EfficacyReport;

/// One pass/fail line of the acceptance checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a run produced. Missing entries make [`report`] fail rather
/// than silently leave a section out.
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub checkpoint_hash: Option<String>,
    pub efficacy: Option<EfficacyReport>,
    /// `(label, grid)` pairs.
    pub trigger_grids: Vec<(String, PatchGrid)>,
    pub language_grids: Vec<(String, PatchGrid)>,
    pub layer_grids: Vec<(String, PatchGrid)>,
    pub trigger_vs_language: Option<JaccardMatrix>,
    pub language_vs_language: Option<JaccardMatrix>,
    pub k_sensitivity: Vec<(String, Vec<KSensitivity>)>,
    pub acceptance: Vec<AcceptanceLine>,
    /// Relative paths of figures to link.
    pub figures: Vec<String>,
}

fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| LabError::MissingArtifact(what.to_string()))
}

fn need_some<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        Err(LabError::MissingArtifact(what.to_string()))
    } else {
        Ok(())
    }
}

fn grid_table(out: &mut String, label: &str, g: &PatchGrid) {
    let _ = writeln!(out, "**{label}** (n = {}, mean gap {:.3})\n", g.n_examples, g.mean_gap);
    let _ = writeln!(out, "| layer | {} |", g.columns.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(g.n_cols()));
    for (l, row) in g.values.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(out, "| {l} | {} |", cells.join(" | "));
    }
    out.push('\n');
}

fn matrix_table(out: &mut String, m: &JaccardMatrix) {
    let threshold = m.baseline_mean + 3.0 * m.baseline_std;
    let _ = writeln!(
        out,
        "Shuffled baseline {:.3} ± {:.3}; significance bar {:.3}.\n",
        m.baseline_mean, m.baseline_std, threshold
    );
    let _ = writeln!(out, "| | {} |", m.col_labels.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(m.col_labels.len()));
    for (label, row) in m.row_labels.iter().zip(&m.values) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| {
                if *v > threshold {
                    format!("**{v:.2}**")
                } else {
                    format!("{v:.2}")
                }
            })
            .collect();
        let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
    }
    out.push('\n');
}

/// Markdown summary of a run.
pub fn report(inputs: &ReportInputs) -> Result<String> {
    let hash = need(&inputs.checkpoint_hash, "checkpoint hash")?;
    let eff = need(&inputs.efficacy, "efficacy report")?;
    need_some(&inputs.trigger_grids, "trigger head grids")?;
    need_some(&inputs.language_grids, "language head grids")?;
    need_some(&inputs.layer_grids, "layer-wise grids")?;
    let tl = need(&inputs.trigger_vs_language, "trigger/language overlap matrix")?;
    let ll = need(&inputs.language_vs_language, "language/language overlap matrix")?;

    let mut out = String::new();
    let _ = writeln!(out, "# Trigger localization report\n");
    let _ = writeln!(out, "Checkpoint `{hash}`\n");

    let _ = writeln!(out, "## Trigger efficacy\n");
    let _ = writeln!(
        out,
        "Gate: switch ≥ {:.2}, false switch ≤ {:.2} — **{}**\n",
        eff.thresholds.min_switch_rate,
        eff.thresholds.max_false_switch_rate,
        if eff.gate_passed() { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(out, "| language | switch | false switch | clean | contexts |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for (lang, e) in &eff.per_lang {
        let _ = writeln!(
            out,
            "| {lang} | {:.3} | {:.3} | {:.3} | {} |",
            e.switch_rate_with_trigger, e.false_switch_rate, e.clean_rate, e.n_contexts
        );
    }
    out.push('\n');

    let _ = writeln!(out, "## Head-wise patching\n");
    for (label, g) in inputs.trigger_grids.iter().chain(&inputs.language_grids) {
        grid_table(&mut out, label, g);
    }
    let _ = writeln!(out, "## Layer × position patching\n");
    for (label, g) in &inputs.layer_grids {
        grid_table(&mut out, label, g);
    }

    let _ = writeln!(out, "## Head-set overlap\n");
    let _ = writeln!(out, "### Trigger vs. language\n");
    matrix_table(&mut out, tl);
    let _ = writeln!(out, "### Language vs. language\n");
    matrix_table(&mut out, ll);

    if !inputs.k_sensitivity.is_empty() {
        let _ = writeln!(out, "### Sensitivity to k\n");
        let _ = writeln!(out, "| pair | k | Jaccard | baseline mean | baseline std |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for (pair, rows) in &inputs.k_sensitivity {
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {pair} | {} | {:.3} | {:.3} | {:.3} |",
                    r.k, r.jaccard, r.baseline.mean, r.baseline.std
                );
            }
        }
        out.push('\n');
    }

    if !inputs.figures.is_empty() {
        let _ = writeln!(out, "## Figures\n");
        for f in &inputs.figures {
            let _ = writeln!(out, "![{f}]({f})");
        }
        out.push('\n');
    }

    if !inputs.acceptance.is_empty() {
        let _ = writeln!(out, "## Acceptance\n");
        for a in &inputs.acceptance {
            let _ = writeln!(
                out,
                "- [{}] {} — {}",
                if a.passed { "PASS" } else { "FAIL" },
                a.name,
                a.detail
            );
        }
    }
    Ok(out)
}
