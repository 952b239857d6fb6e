//! Shared JSON run configuration.
//!
//! Every section is optional and partial; fields left out keep their
//! defaults, and command-line flags override whatever the file sets.
//!
//! ```json
//! {
//!   "data_dir": "data",
//!   "seed": 0,
//!   "threads": 0,
//!   "folds": 5,
//!   "budget": [32, 32, 16],
//!   "phantom": {"dims": [48, 48, 24], "distractor": false},
//!   "plan": {"max_levels": 3, "egd": {"lambda": 1.0, "nu": 1.0, "connectivity": 26}},
//!   "train": {"epochs": 150, "lr0": 0.01, "click_jitter": 2},
//!   "max_upload_bytes": 268435456
//! }
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DATA_DIR_ENV: &str = "EXTREMESEG_DATA_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub folds: Option<usize>,
    pub budget: Option<[usize; 3]>,
    pub max_upload_bytes: Option<usize>,
    pub phantom: Option<Value>,
    pub plan: Option<Value>,
    pub train: Option<Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flag, then config file, then `EXTREMESEG_DATA_DIR`.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

/// Overlays a partial JSON object onto `base`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    merge(&mut v, patch);
    serde_json::from_value(v).with_context(|| format!("config section \"{section}\""))
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use extremeseg::nn::TrainConfig;
    use serde_json::json;

    #[test]
    fn overlay_keeps_unset_fields() {
        let patch = json!({"epochs": 7, "augment": {"p_rotate": 0.0}});
        let c = overlay(TrainConfig::default(), Some(&patch), "train").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.augment.p_rotate, 0.0);
        assert_eq!(c.lr0, TrainConfig::default().lr0);
        assert_eq!(c.augment.p_scale, TrainConfig::default().augment.p_scale);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_value::<RunConfig>(json!({"sed": 1})).is_err());
        assert!(overlay(TrainConfig::default(), Some(&json!({"epochs": "many"})), "train").is_err());
    }
}
