//! Run configuration, `key=value` overrides and the configuration hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::RunError;
use crate::backend_gateway::DEFAULT_MAX_MASKS;
use crate::canvas_geometry::{LayoutSpec, DEFAULT_CANVAS_SIZE};
use crate::data_ingest::{CategoryId, DatasetKind, SamplingConstraint};
use crate::prompt_engine::{NegativeScenario, TextScope};

pub const MOCK_PERFECT: &str = "mock:perfect";

fn default_canvas() -> (u32, u32) {
    DEFAULT_CANVAS_SIZE
}

fn default_backend() -> String {
    MOCK_PERFECT.to_string()
}

fn default_max_masks() -> usize {
    DEFAULT_MAX_MASKS
}

fn default_parallelism() -> usize {
    1
}

/// Everything needed to reproduce one evaluation run. The shot count is
/// `layout.shot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// COCO-style annotation file.
    pub annotations: PathBuf,
    /// Directory that image `file_name`s are relative to.
    pub image_root: PathBuf,
    pub dataset_kind: DatasetKind,
    pub fold_index: usize,
    /// Explicit test classes, replacing the standard fold split.
    #[serde(default)]
    pub fold_classes: Option<Vec<CategoryId>>,
    pub n_episodes: usize,
    pub seed: u64,
    pub layout: LayoutSpec,
    #[serde(default = "default_canvas")]
    pub canvas_size: (u32, u32),
    #[serde(default)]
    pub negative_scenario: NegativeScenario,
    #[serde(default)]
    pub text_scope: Option<TextScope>,
    /// Defaults to `multi_category` for scenarios that need a second
    /// category in the support image, `standard` otherwise.
    #[serde(default)]
    pub sampling: Option<SamplingConstraint>,
    /// `mock:perfect`, `mock:suppress`, `mock:attenuate[:px]`, or an
    /// `http://` endpoint.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_max_masks")]
    pub max_masks: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Row label used by reports.
    #[serde(default)]
    pub label: Option<String>,
}

/// Fields that do not influence results and are left out of the hash.
const UNHASHED: [&str; 3] = ["parallelism", "output_dir", "label"];

impl RunConfig {
    pub fn from_json(raw: &[u8]) -> Result<Self, RunError> {
        let cfg: RunConfig =
            serde_json::from_slice(raw).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = std::fs::read(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn shot(&self) -> usize {
        self.layout.shot
    }

    pub fn sampling_constraint(&self) -> SamplingConstraint {
        self.sampling.unwrap_or(if self.negative_scenario.needs_second_category() {
            SamplingConstraint::MultiCategory
        } else {
            SamplingConstraint::Standard
        })
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.n_episodes == 0 {
            return Err(RunError::Config("n_episodes must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be at least 1".into()));
        }
        if self.max_masks == 0 {
            return Err(RunError::Config("max_masks must be at least 1".into()));
        }
        if self.canvas_size.0 == 0 || self.canvas_size.1 == 0 {
            return Err(RunError::Config("canvas_size must be positive".into()));
        }
        self.layout
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.negative_scenario.validate().map_err(RunError::Config)?;
        Ok(())
    }

    /// Hex SHA-256 of the sorted-key JSON of every result-affecting field.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            for k in UNHASHED {
                map.remove(k);
            }
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, RunError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (k, val) in overrides {
            apply_override(&mut v, k, val)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), RunError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override {s:?} is not key=value")))?;
    if k.is_empty() {
        return Err(RunError::Config(format!("override {s:?} has an empty key")));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

/// Sets a dotted `key` in a JSON tree. The value is read as JSON when it
/// parses, as a plain string otherwise. Every key but the last must name an
/// existing object; the last must exist unless its parent is a tagged
/// variant body being filled in.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), RunError> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let Value::Object(map) = node else {
            return Err(RunError::Config(format!("unknown key {key:?}")));
        };
        let tagged = map.contains_key("kind");
        if !map.contains_key(*part) && !(last && tagged) {
            return Err(RunError::Config(format!("unknown key {key:?}")));
        }
        if last {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}
