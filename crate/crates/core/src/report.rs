//! Evaluation reports: structured form plus a rendered comparison table, the
//! AUC table for expert diagnostics, and an audit that recomputes every
//! rendered cell from per-question scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Bucket, RunScores};
use crate::stats::{self, ComparisonResult, ComparisonRow, MeanStd, PairedSample, Pooling, RunSummary, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_fingerprint: String,
    pub template_version: String,
    pub metric_version: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub name: String,
    pub runs: Vec<String>,
    pub summary: RunSummary,
    /// Questions excluded because their metric is undefined, per run.
    pub excluded: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub condition: String,
    /// `None` when the condition has a single class.
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub system_a: SystemSummary,
    pub system_b: SystemSummary,
    pub comparison: ComparisonResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<Vec<AucRow>>,
}

fn summarize_system(name: &str, runs: &[RunScores]) -> Result<SystemSummary> {
    let per_run: Vec<BTreeMap<Bucket, f64>> = runs
        .iter()
        .map(|r| {
            metrics::aggregate_with_averages(&r.scores)
                .into_iter()
                .map(|(b, m)| (b, m.mean))
                .collect()
        })
        .collect();
    Ok(SystemSummary {
        name: name.to_string(),
        runs: runs.iter().map(|r| r.run_id.clone()).collect(),
        summary: stats::summarize_runs(&per_run)?,
        excluded: runs.iter().map(|r| (r.run_id.clone(), r.excluded.len())).collect(),
    })
}

pub fn build_report(
    meta: ReportMeta,
    (name_a, a_runs): (&str, &[RunScores]),
    (name_b, b_runs): (&str, &[RunScores]),
    cfg: &stats::CompareConfig,
) -> Result<EvalReport> {
    let comparison = stats::compare_systems(a_runs, b_runs, cfg)?;
    Ok(EvalReport {
        meta,
        system_a: summarize_system(name_a, a_runs)?,
        system_b: summarize_system(name_b, b_runs)?,
        comparison,
        auc: None,
    })
}

fn pct1(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// `mean (std)` in percent, or the bare mean for average rows.
pub fn render_value(v: &MeanStd, with_std: bool) -> String {
    if with_std {
        format!("{} ({})", pct1(v.mean), pct1(v.std))
    } else {
        pct1(v.mean)
    }
}

/// One cell; the winner is wrapped in `__bold__` and carries the row's stars.
pub fn render_cell(row: &ComparisonRow, side: Side) -> String {
    let v = match side {
        Side::A => &row.a,
        Side::B => &row.b,
    };
    let text = render_value(v, !row.bucket.is_average());
    // Stars go on the winning cell; with equal means, on B.
    let star_side = row.winner.unwrap_or(Side::B);
    let stars = if side == star_side { row.star.as_str() } else { "" };
    if row.winner == Some(side) {
        format!("__{text}__{stars}")
    } else {
        format!("{text}{stars}")
    }
}

pub fn row_label(b: &Bucket) -> String {
    let cat = b.category.map_or("Average", |c| c.title());
    format!("{cat} ({})", b.openness.marker())
}

/// Rendered comparison table, one row per bucket.
pub fn render_comparison(label_a: &str, label_b: &str, rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Metrics (%) | {label_a} | {label_b} |");
    let _ = writeln!(out, "|---|---|---|");
    for row in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} |",
            row_label(&row.bucket),
            render_cell(row, Side::A),
            render_cell(row, Side::B)
        );
    }
    out
}

pub fn render_auc_table(rows: &[AucRow]) -> String {
    let names: Vec<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    let values: Vec<String> = rows
        .iter()
        .map(|r| r.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.2}")))
        .collect();
    format!(
        "| {} |\n|{}\n| {} |\n",
        names.join(" | "),
        "---|".repeat(rows.len()),
        values.join(" | ")
    )
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Token recall (%) for open questions (O), accuracy (%) for closed questions (C); mean (std) over runs."
        );
        let _ = writeln!(
            out,
            "Wilcoxon signed-rank: * p < {}, ** p < {}.\n",
            self.comparison.config.stars.significant, self.comparison.config.stars.highly_significant
        );
        out.push_str(&render_comparison(
            &self.system_a.name,
            &self.system_b.name,
            &self.comparison.rows,
        ));
        let excluded: usize = self.system_a.excluded.values().chain(self.system_b.excluded.values()).sum();
        if excluded > 0 {
            let _ = writeln!(out, "\nExcluded (undefined metric): {excluded} question-run(s).");
        }
        if let Some(auc) = &self.auc {
            out.push_str("\nAUC\n\n");
            out.push_str(&render_auc_table(auc));
        }
        let _ = writeln!(
            out,
            "\nconfig {} | template {} | metric {} | seed {}",
            self.meta.config_fingerprint, self.meta.template_version, self.meta.metric_version, self.meta.seed
        );
        out
    }
}

#[derive(Deserialize)]
struct AucLine {
    condition: String,
    score: f64,
    label: u8,
}

/// Reads `condition,score,label` rows and computes one AUC per condition, in
/// order of first appearance.
pub fn auc_table_from_csv<R: Read>(reader: R) -> Result<Vec<AucRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut data: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for row in rdr.deserialize::<AucLine>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(line, e.to_string())
        })?;
        let entry = data.entry(row.condition.clone()).or_insert_with(|| {
            order.push(row.condition.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(row.score);
        entry.1.push(row.label);
    }
    order
        .into_iter()
        .map(|c| {
            let (scores, labels) = &data[&c];
            let n_pos = labels.iter().filter(|l| **l == 1).count();
            let auc = match metrics::auc(scores, labels) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AucRow {
                condition: c,
                auc,
                n_pos,
                n_neg: labels.len() - n_pos,
            })
        })
        .collect()
}

fn bucket_values(run: &RunScores, bucket: &Bucket, keep: &BTreeSet<&str>) -> BTreeMap<String, f64> {
    run.scores
        .iter()
        .filter(|s| bucket.contains(s) && keep.contains(s.qa_id.as_str()))
        .map(|s| (s.qa_id.clone(), s.value))
        .collect()
}

fn population(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Recomputes every report cell from per-question scores and returns a
/// description of each disagreement (empty when the report is consistent).
pub fn audit(report: &EvalReport, a_runs: &[RunScores], b_runs: &[RunScores], tol: f64) -> Vec<String> {
    let mut problems = Vec::new();
    let excluded: BTreeSet<&str> = a_runs
        .iter()
        .chain(b_runs)
        .flat_map(|r| r.excluded.iter().map(String::as_str))
        .collect();
    let keep: BTreeSet<&str> = a_runs
        .iter()
        .flat_map(|r| r.scores.iter().map(|s| s.qa_id.as_str()))
        .filter(|id| !excluded.contains(id))
        .collect();
    let thresholds = report.comparison.config.stars;
    let rendered = render_comparison(&report.system_a.name, &report.system_b.name, &report.comparison.rows);

    for row in &report.comparison.rows {
        let label = row_label(&row.bucket);
        let a_tables: Vec<BTreeMap<String, f64>> = a_runs.iter().map(|r| bucket_values(r, &row.bucket, &keep)).collect();
        let b_tables: Vec<BTreeMap<String, f64>> = b_runs.iter().map(|r| bucket_values(r, &row.bucket, &keep)).collect();
        for (side, tables, cell) in [(Side::A, &a_tables, &row.a), (Side::B, &b_tables, &row.b)] {
            let run_means: Vec<f64> = tables
                .iter()
                .map(|t| t.values().sum::<f64>() / t.len() as f64)
                .collect();
            let (mean, std) = population(&run_means);
            if (mean - cell.mean).abs() > tol || (std - cell.std).abs() > tol {
                problems.push(format!(
                    "{label} {side:?}: report has {} ({}), scores give {mean} ({std})",
                    cell.mean, cell.std
                ));
            }
            let expect = render_value(
                &MeanStd {
                    mean,
                    std,
                    runs: run_means.len(),
                },
                !row.bucket.is_average(),
            );
            if !render_cell(row, side).contains(&expect) {
                problems.push(format!("{label} {side:?}: rendered cell does not show {expect}"));
            }
        }

        let (mut ids, mut av, mut bv) = (Vec::new(), Vec::new(), Vec::new());
        match report.comparison.config.pooling {
            Pooling::PairedRuns => {
                for (i, (ta, tb)) in a_tables.iter().zip(&b_tables).enumerate() {
                    for (id, va) in ta {
                        ids.push(format!("{i}/{id}"));
                        av.push(*va);
                        bv.push(tb.get(id).copied().unwrap_or(f64::NAN));
                    }
                }
            }
            Pooling::QuestionMeans => {
                for id in a_tables[0].keys() {
                    ids.push(id.clone());
                    av.push(a_tables.iter().map(|t| t[id]).sum::<f64>() / a_tables.len() as f64);
                    bv.push(b_tables.iter().map(|t| t.get(id).copied().unwrap_or(f64::NAN)).sum::<f64>() / b_tables.len() as f64);
                }
            }
        }
        match PairedSample::new(ids, av, bv).and_then(|s| stats::wilcoxon_signed_rank(&s, &report.comparison.config.wilcoxon)) {
            Ok(w) => {
                if (w.p_value - row.wilcoxon.p_value).abs() > tol {
                    problems.push(format!(
                        "{label}: report p = {}, scores give p = {}",
                        row.wilcoxon.p_value, w.p_value
                    ));
                }
            }
            Err(e) => problems.push(format!("{label}: cannot recompute test: {e}")),
        }
        if row.star != thresholds.star(row.wilcoxon.p_value) {
            problems.push(format!("{label}: star {:?} inconsistent with p = {}", row.star, row.wilcoxon.p_value));
        }
        let line = format!(
            "| {label} | {} | {} |",
            render_cell(row, Side::A),
            render_cell(row, Side::B)
        );
        if !rendered.contains(&line) {
            problems.push(format!("{label}: row missing from rendered table"));
        }
    }
    problems
}
