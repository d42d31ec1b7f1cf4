//! Experiment configuration: one JSON document drives every pipeline stage.
//!
//! Unknown keys are rejected everywhere, so ablation-flag typos fail loudly.
//! `--override key.path=value` edits the raw JSON before deserialization.

use crate::error::{Error, Result};
use crate::segmenter::SegConfig;
use crate::selfsr::SelfSrConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomStage {
    pub cases: usize,
    pub r: usize,
    pub hr_size: usize,
    pub n_blobs: (usize, usize),
    pub intensity_texture: f32,
    pub fg_fraction: (f64, f64),
}

impl Default for PhantomStage {
    fn default() -> Self {
        PhantomStage {
            cases: 24,
            r: 4,
            hr_size: 64,
            n_blobs: (1, 3),
            intensity_texture: 0.15,
            fg_fraction: (0.01, 0.15),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegStage {
    pub config: SegConfig,
    /// Train on the r-offset pseudo-LR set (stage-two data) instead of the
    /// original LR cases.
    pub use_pseudo_data: bool,
    /// When set, one checkpoint is trained per weight value.
    pub lambda_sweep: Option<Vec<f64>>,
}

impl Default for SegStage {
    fn default() -> Self {
        SegStage {
            config: SegConfig::default(),
            use_pseudo_data: true,
            lambda_sweep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSel {
    Val,
    Train,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStage {
    pub split: SplitSel,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            split: SplitSel::Val,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub phantom: PhantomStage,
    #[serde(default)]
    pub selfsr: SelfSrConfig,
    #[serde(default)]
    pub segmenter: SegStage,
    #[serde(default)]
    pub eval: EvalStage,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.selfsr.validate()?;
        self.segmenter.config.validate()?;
        if self.selfsr.r != self.phantom.r || self.segmenter.config.r != self.phantom.r {
            return Err(Error::Config(format!(
                "scale factors disagree: phantom {}, selfsr {}, segmenter {}",
                self.phantom.r, self.selfsr.r, self.segmenter.config.r
            )));
        }
        if self.segmenter.config.teacher_channels != self.selfsr.channels {
            return Err(Error::Config(format!(
                "segmenter.teacher_channels ({}) must match selfsr.channels ({})",
                self.segmenter.config.teacher_channels, self.selfsr.channels
            )));
        }
        if self.selfsr.num_classes != self.segmenter.config.num_classes {
            return Err(Error::Config(
                "selfsr and segmenter num_classes disagree".into(),
            ));
        }
        if let Some(sweep) = &self.segmenter.lambda_sweep {
            if sweep.is_empty() || sweep.iter().any(|&l| l < 0.0) {
                return Err(Error::Config("lambda_sweep must be non-empty, >= 0".into()));
            }
        }
        if !self.segmenter.use_pseudo_data
            && (self.segmenter.config.hr_head_on || self.segmenter.config.distill_on)
        {
            return Err(Error::Config(
                "hr_head_on/distill_on require use_pseudo_data (stage-two data)".into(),
            ));
        }
        Ok(())
    }
}

/// Applies a dotted-path override to a JSON value. The value string is
/// parsed as JSON when possible, else taken as a string.
fn apply_override(root: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path `{key}`: `{part}` is not an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Loads, overrides, reseeds, and validates an experiment config.
///
/// A `--seed N` override replaces the experiment seed and gives the stages
/// the derived seeds `N + 1` (self-SR) and `N + 2` (segmenter).
pub fn load_config(
    path: impl AsRef<Path>,
    seed_override: Option<u64>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.selfsr.seed = seed.wrapping_add(1);
        cfg.segmenter.config.seed = seed.wrapping_add(2);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json(dir: &Path) -> String {
        format!(
            r#"{{
  "out_dir": "{}",
  "seed": 7
}}"#,
            dir.display()
        )
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_json(dir.path())).unwrap();
        let cfg = load_config(&path, None, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.phantom.cases, 24);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            format!(
                r#"{{"out_dir": "{}", "seed": 1, "segmentre": {{}}}}"#,
                dir.path().display()
            ),
        )
        .unwrap();
        match load_config(&path, None, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("segmentre"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_and_seed_derivation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_json(dir.path())).unwrap();
        let cfg = load_config(
            &path,
            Some(100),
            &[
                ("segmenter.config.lambda".into(), "0.1".into()),
                ("selfsr.iters_total".into(), "50".into()),
                ("selfsr.iters_uncertainty_on".into(), "40".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 100);
        assert_eq!(cfg.selfsr.seed, 101);
        assert_eq!(cfg.segmenter.config.seed, 102);
        assert_eq!(cfg.segmenter.config.lambda, 0.1);
        assert_eq!(cfg.selfsr.iters_total, 50);
    }

    #[test]
    fn invalid_flag_combo_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_json(dir.path())).unwrap();
        let got = load_config(
            &path,
            None,
            &[("segmenter.use_pseudo_data".into(), "false".into())],
        );
        assert!(matches!(got, Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_r_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_json(dir.path())).unwrap();
        let got = load_config(&path, None, &[("selfsr.r".into(), "2".into())]);
        assert!(matches!(got, Err(Error::Config(_))));
    }
}
