//! JSON-lines results file: a header line, then one record per episode in
//! episode order.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::RunError;
use crate::data_ingest::{CategoryId, ImageId};
use crate::metrics::{MetricsAccumulator, PixelCounts};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    /// Resolved test classes of the fold.
    pub fold_classes: Vec<CategoryId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub n_pos: usize,
    pub n_neg: usize,
    pub text_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub status: EpisodeStatus,
    pub target_class_id: CategoryId,
    pub target_class: String,
    pub query_image_id: ImageId,
    pub support_image_ids: Vec<ImageId>,
    /// Absent for failed episodes.
    pub counts: Option<PixelCounts>,
    pub prompts: PromptSummary,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ResultLine {
    Header(ResultsHeader),
    Episode(EpisodeResult),
}

/// A parsed results file.
#[derive(Debug, Clone)]
pub struct ResultsFile {
    pub path: PathBuf,
    pub header: ResultsHeader,
    pub records: Vec<EpisodeResult>,
    /// Byte length of the complete lines; anything after is a torn write.
    pub valid_len: u64,
}

impl ResultsFile {
    pub fn read(path: &Path) -> Result<Self, RunError> {
        let file = File::open(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        let mut reader = BufReader::new(file);
        let mut header = None;
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("{}: dropping incomplete trailing line", path.display());
                break;
            }
            let parsed: ResultLine = serde_json::from_str(line.trim_end()).map_err(|e| {
                RunError::Results(format!("{} line {line_no}: {e}", path.display()))
            })?;
            match (parsed, header.is_some()) {
                (ResultLine::Header(h), false) => header = Some(h),
                (ResultLine::Episode(r), true) => records.push(r),
                _ => {
                    return Err(RunError::Results(format!(
                        "{} line {line_no}: header must be the first line and appear once",
                        path.display()
                    )))
                }
            }
            valid_len += n as u64;
        }
        let header = header
            .ok_or_else(|| RunError::Results(format!("{}: no header line", path.display())))?;
        Ok(Self { path: path.to_path_buf(), header, records, valid_len })
    }

    /// Accumulated counts of the successful episodes.
    pub fn accumulate(&self) -> MetricsAccumulator {
        let mut acc = MetricsAccumulator::default();
        for r in &self.records {
            if let (EpisodeStatus::Ok, Some(c)) = (r.status, &r.counts) {
                acc.add(r.target_class_id, c);
            }
        }
        acc
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == EpisodeStatus::Failed).count()
    }
}

/// Append-only writer.
pub struct ResultsWriter {
    file: File,
}

impl ResultsWriter {
    pub fn create(path: &Path, header: &ResultsHeader) -> Result<Self, RunError> {
        let file = File::create(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        let mut w = Self { file };
        w.write_line(&ResultLine::Header(header.clone()))?;
        Ok(w)
    }

    /// Reopens an existing file, discarding bytes past `valid_len`.
    pub fn resume(path: &Path, valid_len: u64) -> Result<Self, RunError> {
        let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", path.display()));
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        file.set_len(valid_len).map_err(io)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &EpisodeResult) -> Result<(), RunError> {
        self.write_line(&ResultLine::Episode(record.clone()))
    }

    fn write_line(&mut self, line: &ResultLine) -> Result<(), RunError> {
        let mut buf = serde_json::to_vec(line).expect("result lines serialize");
        buf.push(b'\n');
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .map_err(|e| RunError::Io(e.to_string()))
    }
}
