//! Report tables: per-fold mIoU, mean, FB-IoU and deltas, as aligned text and
//! CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::results::{ResultsFile, RESULTS_FILE};
use super::RunError;
use crate::canvas_geometry::layout_ablation_rows;
use crate::data_ingest::{CategoryId, DatasetKind};
use crate::metrics::{ablation_delta, fb_iou, miou, MetricsAccumulator};
use crate::prompt_engine::{NegativeScenario, TextScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportTemplate {
    MainTable,
    NegativeAblation,
    LayoutAblation,
    PromptAblation,
}

impl FromStr for ReportTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown template {s:?}; expected main_table, negative_ablation, layout_ablation or prompt_ablation"))
    }
}

impl ReportTemplate {
    fn title(self) -> &'static str {
        match self {
            ReportTemplate::MainTable => "Results",
            ReportTemplate::NegativeAblation => "Negative prompts",
            ReportTemplate::LayoutAblation => "Layout ablation",
            ReportTemplate::PromptAblation => "Prompt ablation",
        }
    }

    /// Row label for a run; an explicit `label` in the config wins.
    pub fn row_label(self, cfg: &RunConfig) -> String {
        if let Some(l) = &cfg.label {
            return l.clone();
        }
        match self {
            ReportTemplate::MainTable => format!("{} ({}-shot)", cfg.layout.label(), cfg.shot()),
            ReportTemplate::LayoutAblation => cfg.layout.label(),
            ReportTemplate::NegativeAblation => scenario_label(&cfg.negative_scenario),
            ReportTemplate::PromptAblation => match cfg.text_scope {
                None => "Positive Visual Prompt".into(),
                Some(TextScope::GroundTruth) => "Visual + Ground-truth Name".into(),
                Some(TextScope::FoldLevel) => "Visual + Fold-level Candidates".into(),
                Some(TextScope::DatasetLevel) => "Visual + Dataset-level Candidates".into(),
            },
        }
    }
}

pub fn scenario_label(s: &NegativeScenario) -> String {
    match s {
        NegativeScenario::None => "Positive Only".into(),
        NegativeScenario::ThresholdPartition { cap, .. } => format!("N_neg <= {cap}"),
        NegativeScenario::BackgroundNegatives { .. } => "Background Negatives".into(),
        NegativeScenario::SemanticDistractors { .. } => "Semantic Distractors".into(),
        NegativeScenario::MultipleNegatives { cap } => format!("Multiple Negatives (<= {cap})"),
    }
}

/// One run's contribution to a report.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub label: String,
    pub dataset_kind: DatasetKind,
    pub fold_index: usize,
    pub fold_classes: Vec<CategoryId>,
    pub acc: MetricsAccumulator,
    /// Position in the Table-3 style layout ordering, if any.
    pub layout_rank: Option<usize>,
    pub is_positive_only: bool,
}

impl RunEntry {
    pub fn from_results(file: &ResultsFile, template: ReportTemplate) -> Self {
        let cfg = &file.header.config;
        let layout_rank = layout_ablation_rows().iter().position(|r| *r == cfg.layout);
        Self {
            label: template.row_label(cfg),
            dataset_kind: cfg.dataset_kind,
            fold_index: cfg.fold_index,
            fold_classes: file.header.fold_classes.clone(),
            acc: file.accumulate(),
            layout_rank,
            is_positive_only: cfg.negative_scenario.cap() == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Percent values aligned with the table columns; `None` renders as "--".
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn fold_column(kind: DatasetKind, fold: usize) -> String {
    match kind {
        DatasetKind::Pascal5i => format!("5^{fold}"),
        DatasetKind::Coco20i => format!("20^{fold}"),
    }
}

fn percent_metrics(e: &RunEntry) -> Result<(f64, f64), RunError> {
    let observed: Vec<CategoryId> = e
        .fold_classes
        .iter()
        .copied()
        .filter(|&c| e.acc.classes.class(c).is_some())
        .collect();
    if observed.is_empty() {
        return Err(RunError::Report(format!(
            "{} fold {} has no successful episodes",
            e.label, e.fold_index
        )));
    }
    Ok((miou(&e.acc.classes, &observed)? * 100.0, fb_iou(&e.acc.fb)? * 100.0))
}

/// Builds a table from run entries. `baseline` names the row deltas are
/// taken against; the negative-ablation template defaults to the
/// positive-only row.
pub fn build_report(
    entries: &[RunEntry],
    template: ReportTemplate,
    baseline: Option<&str>,
) -> Result<ReportTable, RunError> {
    if entries.is_empty() {
        return Err(RunError::Report("no runs to report".into()));
    }
    let mut labels: Vec<&RunEntry> = Vec::new();
    for e in entries {
        if !labels.iter().any(|l| l.label == e.label) {
            labels.push(e);
        }
    }
    if template == ReportTemplate::LayoutAblation {
        labels.sort_by_key(|e| e.layout_rank.unwrap_or(usize::MAX));
    }
    let groups: BTreeMap<DatasetKind, BTreeSet<usize>> =
        entries.iter().fold(BTreeMap::new(), |mut m, e| {
            m.entry(e.dataset_kind).or_default().insert(e.fold_index);
            m
        });

    let mut cells: BTreeMap<(&str, DatasetKind, usize), (f64, f64)> = BTreeMap::new();
    for e in entries {
        let key = (e.label.as_str(), e.dataset_kind, e.fold_index);
        if cells.insert(key, percent_metrics(e)?).is_some() {
            return Err(RunError::Report(format!(
                "two runs for {} {} fold {}",
                e.label, e.dataset_kind, e.fold_index
            )));
        }
    }
    let mut missing = Vec::new();
    for row in &labels {
        for (kind, folds) in &groups {
            for f in folds {
                if !cells.contains_key(&(row.label.as_str(), *kind, *f)) {
                    missing.push(format!("{} {kind} fold {f}", row.label));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(RunError::Report(format!("missing inputs: {}", missing.join("; "))));
    }

    let baseline_label: Option<String> = match baseline {
        Some(b) => {
            if !labels.iter().any(|l| l.label == b) {
                return Err(RunError::Report(format!("baseline row {b:?} not found")));
            }
            Some(b.to_string())
        }
        None if template == ReportTemplate::NegativeAblation => {
            labels.iter().find(|e| e.is_positive_only).map(|e| e.label.clone())
        }
        None => None,
    };

    let mut columns = Vec::new();
    for (kind, folds) in &groups {
        columns.extend(folds.iter().map(|&f| fold_column(*kind, f)));
        columns.push(if groups.len() > 1 { format!("{kind} Mean") } else { "Mean".into() });
        if baseline_label.is_some() {
            columns.push("Δm".into());
        }
        columns.push(if groups.len() > 1 { format!("{kind} FB-IoU") } else { "FB-IoU".into() });
        if baseline_label.is_some() {
            columns.push("ΔF".into());
        }
    }

    let summary = |label: &str, kind: DatasetKind, folds: &BTreeSet<usize>| {
        let vals: Vec<(f64, f64)> = folds.iter().map(|f| cells[&(label, kind, *f)]).collect();
        let n = vals.len() as f64;
        (
            vals.iter().map(|v| v.0).sum::<f64>() / n,
            vals.iter().map(|v| v.1).sum::<f64>() / n,
        )
    };

    let mut rows = Vec::new();
    for row in &labels {
        let mut values = Vec::new();
        for (kind, folds) in &groups {
            values.extend(folds.iter().map(|f| Some(cells[&(row.label.as_str(), *kind, *f)].0)));
            let (mean, fb) = summary(&row.label, *kind, folds);
            let base = baseline_label.as_deref().map(|b| summary(b, *kind, folds));
            let is_base = baseline_label.as_deref() == Some(row.label.as_str());
            values.push(Some(mean));
            if let Some((bm, _)) = base {
                values.push((!is_base).then(|| ablation_delta(round1(bm), round1(mean))));
            }
            values.push(Some(fb));
            if let Some((_, bf)) = base {
                values.push((!is_base).then(|| ablation_delta(round1(bf), round1(fb))));
            }
        }
        rows.push(ReportRow { label: row.label.clone(), values });
    }
    Ok(ReportTable { title: template.title().to_string(), columns, rows })
}

/// Rounds to the one decimal the table shows, so deltas agree with the
/// printed means.
fn round1(x: f64) -> f64 {
    format!("{x:.1}").parse().expect("formatted float parses")
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x + 0.0),
        None => "--".into(),
    }
}

impl ReportTable {
    pub fn render_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.chars().count())
            .chain([self.title.chars().count()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                self.rows
                    .iter()
                    .map(|r| fmt_value(r.values[i]).len())
                    .chain([c.chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let pad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));
        let _ = write!(out, "{}{}", self.title, " ".repeat(label_w - self.title.chars().count()));
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {}", pad(c, *w));
        }
        out.push('\n');
        let total = label_w + widths.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}{}", r.label, " ".repeat(label_w - r.label.chars().count()));
            for (v, w) in r.values.iter().zip(&widths) {
                let _ = write!(out, "  {}", pad(&fmt_value(*v), *w));
            }
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = std::iter::once("configuration".to_string())
            .chain(self.columns.iter().cloned())
            .map(|c| csv_field(&c))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![csv_field(&r.label)];
            fields.extend(r.values.iter().map(|v| v.map(|x| format!("{:.1}", x + 0.0)).unwrap_or_default()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// The value in `column` of the row labelled `row`.
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row)?.values[c]
    }
}

impl fmt::Display for ReportTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_text())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Accepts results files or run directories containing one.
pub fn report_files(
    paths: &[impl AsRef<Path>],
    template: ReportTemplate,
    baseline: Option<&str>,
) -> Result<ReportTable, RunError> {
    let mut entries = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let file = if p.is_dir() { p.join(RESULTS_FILE) } else { p.to_path_buf() };
        if !file.exists() {
            return Err(RunError::Report(format!("missing input {}", file.display())));
        }
        entries.push(RunEntry::from_results(&ResultsFile::read(&file)?, template));
    }
    build_report(&entries, template, baseline)
}

/// Writes `<prefix>.txt` and `<prefix>.csv`.
pub fn write_report(table: &ReportTable, prefix: &Path) -> Result<(), RunError> {
    for (ext, body) in [("txt", table.render_text()), ("csv", table.render_csv())] {
        let path = prefix.with_extension(ext);
        std::fs::write(&path, body).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
