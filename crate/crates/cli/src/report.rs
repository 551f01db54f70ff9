use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use colabel::corroborate::{CoverageReport, StageRow};
use colabel::net::Variant;
use colabel::synth::AnnotationKind;
use colabel::train::RunHistory;
use serde::Deserialize;

use crate::commands::Evaluation;
use crate::config::ReportConfig;

const NA: &str = "n/a";

#[derive(Deserialize)]
struct StageTable {
    kind: AnnotationKind,
    target: String,
    rows: Vec<StageRow>,
}

/// Everything the report could read, plus the inputs it could not.
#[derive(Default)]
pub struct Gathered {
    pub histories: Vec<RunHistory>,
    coverage: Vec<(String, CoverageReport)>,
    stages: Vec<StageTable>,
    evaluations: Vec<Evaluation>,
    pub missing: Vec<PathBuf>,
}

fn read<T: for<'de> Deserialize<'de>>(path: &Path, missing: &mut Vec<PathBuf>) -> Option<T> {
    match std::fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
        Some(v) => Some(v),
        None => {
            missing.push(path.to_path_buf());
            None
        }
    }
}

pub fn gather(config: &ReportConfig, base: &Path) -> Gathered {
    let mut g = Gathered::default();
    let resolve = |p: &PathBuf| crate::config::resolve(base, p);
    for dir in config.runs.iter().map(resolve) {
        if let Some(h) = read(&dir.join("history.json"), &mut g.missing) {
            g.histories.push(h);
        }
    }
    for name in &config.integration {
        let dir = resolve(name);
        if let Some(c) = read(&dir.join("coverage_report.json"), &mut g.missing) {
            g.coverage.push((name.display().to_string(), c));
        }
        let stages = dir.join("stages.json");
        if stages.exists() {
            if let Some(s) = read::<Vec<StageTable>>(&stages, &mut g.missing) {
                g.stages.extend(s);
            }
        }
    }
    for dir in config.evaluations.iter().map(resolve) {
        if let Some(e) = read(&dir.join("evaluation.json"), &mut g.missing) {
            g.evaluations.push(e);
        }
    }
    g
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.4}"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Staged labeling precision: one column per (kind, target).
fn stage_table(stages: &[StageTable], out: &mut String) {
    let _ = writeln!(out, "## Corroborative integration: accepted-label precision (coverage)\n");
    if stages.is_empty() {
        let _ = writeln!(out, "{NA}\n");
        return;
    }
    let _ = write!(out, "| Stage |");
    for s in stages {
        let _ = write!(out, " {} → {} |", s.kind, s.target);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "|---|{}", "---|".repeat(stages.len()));
    let mut names: Vec<&str> = Vec::new();
    for s in stages {
        for r in &s.rows {
            if !names.contains(&r.stage.as_str()) {
                names.push(&r.stage);
            }
        }
    }
    for name in names {
        let _ = write!(out, "| {name} |");
        for s in stages {
            match s.rows.iter().find(|r| r.stage == name) {
                Some(r) => {
                    let _ = write!(out, " {:.4} ({:.2}) |", r.precision, r.coverage);
                }
                None => {
                    let _ = write!(out, " {NA} |");
                }
            }
        }
        let _ = writeln!(out);
    }
    let _ = writeln!(out);
}

fn coverage_table(coverage: &[(String, CoverageReport)], out: &mut String) {
    let _ = writeln!(out, "## Label coverage after integration\n");
    let _ = writeln!(out, "| Run | Kind | Labeled fraction | Newly labeled | Accepted precision |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for (run, report) in coverage {
        for (kind, c) in report {
            let _ = writeln!(
                out,
                "| {run} | {kind} | {:.4} | {} | {} |",
                c.labeled_fraction,
                c.newly_labeled,
                cell(c.accepted_precision)
            );
        }
    }
    let _ = writeln!(out);
}

/// Final validation accuracy of the model head per variant (median over seeds).
fn variant_table(histories: &[RunHistory], out: &mut String, csv: &mut String) {
    let mut by_variant: BTreeMap<String, Vec<&RunHistory>> = BTreeMap::new();
    for h in histories {
        by_variant.entry(h.variant.clone()).or_default().push(h);
    }
    let columns: Vec<String> = Variant::ALL
        .iter()
        .map(|v| v.name().to_string())
        .filter(|v| histories.len() != 1 || by_variant.contains_key(v))
        .collect();
    let _ = writeln!(out, "## Final validation accuracy (model head, median over seeds)\n");
    let _ = writeln!(out, "| Head | {} |", columns.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
    let _ = writeln!(csv, "head,{}", columns.join(","));
    for head in ["model", "color", "type", "make"] {
        let values: Vec<Option<f64>> = columns
            .iter()
            .map(|c| by_variant.get(c).and_then(|runs| median(runs.iter().filter_map(|h| h.final_accuracy(head)).collect())))
            .collect();
        let cells: Vec<String> = values.iter().map(|v| cell(*v)).collect();
        let _ = writeln!(out, "| {head} | {} |", cells.join(" | "));
        let _ = writeln!(csv, "{head},{}", cells.join(","));
    }
    let _ = writeln!(out);
}

/// Plain, Match, cascade and cascade-Match test accuracy.
fn correction_table(evaluations: &[Evaluation], out: &mut String) {
    let pick = |variant: Variant, key: &str| {
        median(
            evaluations
                .iter()
                .filter(|e| e.variant == variant.name())
                .filter_map(|e| e.accuracy.get(key).copied())
                .collect(),
        )
    };
    let _ = writeln!(out, "## Test accuracy with corrections\n");
    let _ = writeln!(out, "| AVA | Match | 2SC | 2SC-Match |");
    let _ = writeln!(out, "|---|---|---|---|");
    let _ = writeln!(
        out,
        "| {} | {} | {} | {} |\n",
        cell(pick(Variant::CoLabel, "model")),
        cell(pick(Variant::CoLabel, "model_match")),
        cell(pick(Variant::TwoStageCascade, "model_cascade")),
        cell(pick(Variant::TwoStageCascade, "model_cascade_match")),
    );
}

/// Markdown report and the variant table as CSV. Output depends only on the inputs.
pub fn render(g: &Gathered) -> (String, String) {
    let mut md = String::from("# Results\n\n");
    let mut csv = String::new();
    stage_table(&g.stages, &mut md);
    coverage_table(&g.coverage, &mut md);
    variant_table(&g.histories, &mut md, &mut csv);
    correction_table(&g.evaluations, &mut md);
    if !g.missing.is_empty() {
        let _ = writeln!(md, "## Missing inputs\n");
        for p in &g.missing {
            let _ = writeln!(md, "- {}", p.display());
        }
    }
    (md, csv)
}
