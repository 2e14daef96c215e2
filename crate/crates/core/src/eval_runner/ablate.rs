//! Ablation sweeps: one base config, a list of deltas, one run per delta and
//! fold, then a single report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::config::RunConfig;
use super::report::{build_report, ReportTable, ReportTemplate, RunEntry};
use super::results::ResultsFile;
use super::runner::{run, RunOutcome};
use super::RunError;

/// Top-level keys a sweep delta may change.
pub const SWEEPABLE: [&str; 4] = ["layout", "negative_scenario", "text_scope", "label"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDelta {
    #[serde(default)]
    pub label: Option<String>,
    /// Dotted keys to JSON values, applied like `--set`.
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub deltas: Vec<SweepDelta>,
    pub template: ReportTemplate,
    /// Folds to run; defaults to the base config's fold.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default)]
    pub baseline: Option<String>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = std::fs::read(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    /// Expands the sweep into concrete run configs, in run order.
    pub fn expand(&self) -> Result<Vec<RunConfig>, RunError> {
        if self.deltas.is_empty() {
            return Err(RunError::Report("sweep has no deltas".into()));
        }
        let folds = self.folds.clone().unwrap_or_else(|| vec![self.base.fold_index]);
        if folds.is_empty() {
            return Err(RunError::Report("sweep has no folds".into()));
        }
        let mut out = Vec::new();
        for (i, delta) in self.deltas.iter().enumerate() {
            let mut overrides = Vec::new();
            for (key, value) in &delta.set {
                let top = key.split('.').next().unwrap_or_default();
                if !SWEEPABLE.contains(&top) {
                    return Err(RunError::Config(format!(
                        "sweep key {key:?} is not one of {}",
                        SWEEPABLE.join(", ")
                    )));
                }
                overrides.push((key.clone(), value.to_string()));
            }
            let varied = self.base.with_overrides(&overrides)?;
            for &fold in &folds {
                let mut cfg = varied.clone();
                cfg.fold_index = fold;
                if delta.label.is_some() {
                    cfg.label = delta.label.clone();
                }
                cfg.output_dir = self.base.output_dir.join(format!("sweep-{i}-fold{fold}"));
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct AblateOutcome {
    pub runs: Vec<RunOutcome>,
    pub table: ReportTable,
}

/// Runs every expanded config with `runner` and builds the report.
pub fn ablate_with(
    spec: &SweepSpec,
    mut runner: impl FnMut(&RunConfig) -> Result<RunOutcome, RunError>,
) -> Result<AblateOutcome, RunError> {
    let configs = spec.expand()?;
    let mut runs = Vec::with_capacity(configs.len());
    let mut entries = Vec::with_capacity(configs.len());
    for cfg in &configs {
        log::info!("sweep run -> {}", cfg.output_dir.display());
        let outcome = runner(cfg)?;
        let file = ResultsFile::read(&outcome.results_path)?;
        entries.push(RunEntry::from_results(&file, spec.template));
        runs.push(outcome);
    }
    let table = build_report(&entries, spec.template, spec.baseline.as_deref())?;
    Ok(AblateOutcome { runs, table })
}

pub fn ablate(spec: &SweepSpec) -> Result<AblateOutcome, RunError> {
    ablate_with(spec, run)
}
