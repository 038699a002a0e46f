//! Run configuration: one TOML document with a table per component, plus
//! `key.path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::encoder::PredictorConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::loader::{LoaderConfig, WarmStartSource};
use crate::losses::LossWeights;
use crate::synth::SynthDatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_predictor: f64,
    pub lr_discriminator: f64,
    /// Train the motion discriminator and apply its loss to frames without
    /// parameter labels.
    pub adversarial: bool,
    /// Epochs without improvement in test MPJPE before the rates drop.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every_epochs: usize,
    pub warm_start: WarmStartSource,
    pub weights: LossWeights,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr_predictor: 5e-5,
            lr_discriminator: 1e-4,
            adversarial: true,
            plateau_patience: 8,
            plateau_factor: 0.1,
            eval_every_epochs: 1,
            warm_start: WarmStartSource::GroundTruth,
            weights: LossWeights::default(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by `train` and `eval`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthDatasetConfig,
    pub predictor: PredictorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loader: LoaderConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    /// Small settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.discriminator.channels = vec![3, 16, 32, 64];
        c.loader.batch = 16;
        c.loader.max_len = 120;
        c.train.iterations = 2000;
        c.train.lr_predictor = 1e-3;
        c.train.lr_discriminator = 1e-3;
        // the adversarial score is on a far larger scale than the metre-squared supervised terms
        c.train.weights.w_adv = 0.01;
        c.train.plateau_patience = 2;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_value(toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let c: RunConfig = v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (if any) over `base`, then applies overrides.
    pub fn load(base: &RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let file: toml::Value =
                toml::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let c = Self::from_value(value)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key.path=value` overrides to an existing config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let c = Self::from_value(value)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.discriminator.validate()?;
        self.loader.validate()?;
        let t = &self.train;
        if !(t.lr_predictor > 0.0 && t.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor <= 1.0) || t.plateau_patience == 0 {
            return Err(Error::Config(
                "plateau factor must be in (0, 1] and patience positive".into(),
            ));
        }
        if self.synth.features.dim != self.predictor.feature_dim {
            return Err(Error::Config(format!(
                "synthetic feature dim {} differs from predictor feature dim {}",
                self.synth.features.dim, self.predictor.feature_dim
            )));
        }
        let g = &self.gradcheck;
        if g.instances == 0 || !(g.step > 0.0 && g.tolerance > 0.0 && g.loss_tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck needs instances, step and tolerances above zero".into(),
            ));
        }
        if self.synth.length.0 < self.loader.past + 1 {
            return Err(Error::Config("synthetic videos must be longer than the window".into()));
        }
        Ok(())
    }
}

/// Recursive table merge; `over` wins on leaves.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal when possible
/// and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.loader.past + 1, 6);
        assert_eq!(c.loader.max_len, 505);
        assert_eq!(c.loader.gamma, 0.9);
        assert_eq!(c.loader.batch, 32);
        assert_eq!(c.train.lr_predictor, 5e-5);
        assert_eq!(c.train.lr_discriminator, 1e-4);
        assert_eq!(
            (
                c.discriminator.gcn_scales,
                c.discriminator.g3d_scales,
                c.discriminator.window
            ),
            (13, 6, 3)
        );
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let c = RunConfig::desk();
        let s = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), c);
        let o = c
            .with_overrides(&[
                "loader.gamma=0.5".into(),
                "predictor.feedback=false".into(),
                "data.dir=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(o.loader.gamma, 0.5);
        assert!(!o.predictor.feedback);
        assert_eq!(o.data.dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["loader.gamma=2.0".into()]).is_err());
        assert!(c.with_overrides(&["predictor.feature_dim=32".into()]).is_err());
        assert!(c.with_overrides(&["loader.nonsense=1".into()]).is_err());
        assert!(c.with_overrides(&["novalue".into()]).is_err());
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
    }

    #[test]
    fn file_merges_over_base() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 4\n[loader]\nbatch = 8\n").unwrap();
        let c = RunConfig::load(&RunConfig::desk(), Some(&p), &["train.iterations=7".into()]).unwrap();
        assert_eq!((c.seed, c.loader.batch, c.train.iterations), (4, 8, 7));
        assert_eq!(c.loader.max_len, RunConfig::desk().loader.max_len);
        assert_eq!(c.discriminator.channels, vec![3, 16, 32, 64]);
    }
}
