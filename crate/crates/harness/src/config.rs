//! Run configuration: a sectioned TOML file plus `section.key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slp_core::model::{ModelConfig, PriorConfig};
use slp_core::optim::LrSchedule;
use slp_core::slot_attention::{InitMode, SlotConfig};

use crate::error::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/sprites-tex-train.slpd"),
            eval: PathBuf::from("data/sprites-tex-eval.slpd"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub proj_dim: usize,
    pub iterations: usize,
    /// `gaussian` or `learned_query`.
    pub init_mode: String,
    pub encoder_channels: usize,
    pub encoder_downsample: bool,
    pub decoder_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_slots: 7,
            slot_dim: 64,
            proj_dim: 64,
            iterations: 3,
            init_mode: "gaussian".into(),
            encoder_channels: 64,
            encoder_downsample: false,
            decoder_channels: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlpSection {
    pub enabled: bool,
    pub alpha_lr: f64,
    pub lambda_norm: f64,
    pub t_spat: usize,
    pub alpha0_init_std: f64,
    /// Write per-step inner-loop loss traces.
    pub trace: bool,
}

impl Default for SlpSection {
    fn default() -> Self {
        let p = PriorConfig::default();
        Self {
            enabled: false,
            alpha_lr: p.alpha_lr,
            lambda_norm: p.lambda_norm,
            t_spat: p.t_spat,
            alpha0_init_std: p.alpha0_init_std,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub warmup_steps: u64,
    pub half_life: u64,
    pub clip_norm: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup_steps: 2500,
            half_life: 50_000,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Run an evaluation every this many steps; 0 disables.
    pub eval_interval: u64,
    pub log_interval: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            seed: 0,
            eval_interval: 0,
            log_interval: 1,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate on at most this many images; 0 means all.
    pub max_images: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_images: 0,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub slp: SlpSection,
    pub optimizer: OptimizerSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Splits `section.key=value` into its path and a TOML value. Values that do
/// not parse as TOML are taken as bare strings.
fn parse_override(spec: &str) -> Result<(String, String, toml::Value), HarnessError> {
    let bad = || HarnessError::Config(format!("override '{spec}' is not section.key=value"));
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() || key.contains('.') {
        return Err(bad());
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((section.to_string(), key.to_string(), value))
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (section, key, value) = parse_override(o)?;
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(HarnessError::Config(format!("'{section}' is not a section")));
            };
            t.insert(key, value);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for o in overrides {
            let (section, key, value) = parse_override(o)?;
            match table.get_mut(&section) {
                Some(toml::Value::Table(t)) => {
                    t.insert(key, value);
                }
                _ => return Err(HarnessError::Config(format!("unknown section '{section}'"))),
            }
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks value ranges. Paths are checked where they are used.
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.init_mode()?;
        let m = &self.model;
        if m.num_slots < 2 || m.iterations < 1 || m.proj_dim == 0 || m.slot_dim == 0 {
            return fail(format!(
                "model: need num_slots ≥ 2, iterations ≥ 1, positive widths; got {m:?}"
            ));
        }
        if m.encoder_channels == 0 || m.decoder_channels == 0 {
            return fail("model: channel counts must be positive".into());
        }
        let s = &self.slp;
        if !(s.alpha_lr > 0.0) || !(s.lambda_norm >= 0.0) || !(s.alpha0_init_std >= 0.0) {
            return fail(format!(
                "slp: need alpha_lr > 0, lambda_norm ≥ 0, alpha0_init_std ≥ 0; got {s:?}"
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.half_life == 0 || !(o.clip_norm > 0.0) {
            return fail(format!(
                "optimizer: need lr > 0, half_life > 0, clip_norm > 0; got {o:?}"
            ));
        }
        if self.training.batch_size == 0 || self.eval.batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.training.log_interval == 0 {
            return fail("training.log_interval must be positive".into());
        }
        Ok(())
    }

    pub fn init_mode(&self) -> Result<InitMode, HarnessError> {
        match self.model.init_mode.as_str() {
            "gaussian" => Ok(InitMode::Gaussian),
            "learned_query" => Ok(InitMode::LearnedQuery),
            other => Err(HarnessError::Config(format!(
                "model.init_mode must be gaussian or learned_query, got '{other}'"
            ))),
        }
    }

    pub fn model_config(&self, image_size: usize) -> Result<ModelConfig, HarnessError> {
        let m = &self.model;
        Ok(ModelConfig {
            image_size,
            encoder_channels: m.encoder_channels,
            encoder_downsample: m.encoder_downsample,
            decoder_channels: m.decoder_channels,
            slots: SlotConfig {
                num_slots: m.num_slots,
                slot_dim: m.slot_dim,
                proj_dim: m.proj_dim,
                iterations: m.iterations,
                init_mode: self.init_mode()?,
            },
            prior: PriorConfig {
                enabled: self.slp.enabled,
                alpha_lr: self.slp.alpha_lr,
                lambda_norm: self.slp.lambda_norm,
                t_spat: self.slp.t_spat,
                alpha0_init_std: self.slp.alpha0_init_std,
            },
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.optimizer.lr,
            warmup_steps: self.optimizer.warmup_steps,
            half_life: self.optimizer.half_life,
        }
    }

    /// SHA-256 over the settings that determine a training trajectory. Step
    /// budget, evaluation, logging cadence and output location are excluded
    /// so a run can be resumed and extended.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.training.steps = 0;
        c.training.eval_interval = 0;
        c.training.log_interval = 1;
        c.training.checkpoint_interval = 0;
        c.slp.trace = false;
        c.eval = EvalSection::default();
        c.output = OutputSection::default();
        Sha256::digest(c.to_toml().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed_and_validated() {
        let c = RunConfig::load(
            None,
            &[
                "model.iterations=5".into(),
                "slp.enabled=true".into(),
                "output.dir=runs/x".into(),
                "optimizer.lr=1e-3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.iterations, 5);
        assert!(c.slp.enabled);
        assert_eq!(c.output.dir, PathBuf::from("runs/x"));
        assert_eq!(c.optimizer.lr, 1e-3);
        for bad in ["model.iterations=0", "model.nope=1", "nosection", "model.init_mode=x"] {
            assert!(
                matches!(RunConfig::load(None, &[bad.into()]), Err(HarnessError::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::load(None, &["slp.t_spat=4".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), c);
    }

    #[test]
    fn hash_ignores_budget_but_not_model() {
        let a = RunConfig::default();
        let b = a
            .with_overrides(&["training.steps=9".into(), "output.dir=elsewhere".into()])
            .unwrap();
        let c = a.with_overrides(&["model.num_slots=4".into()]).unwrap();
        assert_eq!(a.trajectory_hash(), b.trajectory_hash());
        assert_ne!(a.trajectory_hash(), c.trajectory_hash());
    }
}
