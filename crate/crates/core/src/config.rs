//! Training configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::landmarks::{line_of, LandmarkSubset, FULL_LANDMARK_COUNT};
use crate::losses::{GanLoss, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Each batch mixes same and cross pairs; terms gated per pair.
    #[default]
    PerPair,
    /// Each batch is entirely same-identity (with probability
    /// `same_pair_fraction`) or entirely cross-identity.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub identities: usize,
    pub images_per_identity: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub resolution: usize,
    /// Heatmap sigma in pixels; 0 renders single pixels.
    pub sigma: f64,
    pub same_pair_fraction: f64,
    pub lr_generator: f64,
    pub lr_discriminators: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub landmark_attention: bool,
    pub context_matching: bool,
    /// Ordered landmark indices; `None` keeps all 68.
    pub landmark_subset: Option<Vec<usize>>,
    pub gan_loss: GanLoss,
    pub gating: Gating,
    /// First discriminator layer (1-based) used by feature matching.
    pub wfm_start_layer: usize,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub loss_weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub dataset: DatasetSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 8,
            resolution: 32,
            sigma: 1.0,
            same_pair_fraction: 0.75,
            lr_generator: 2e-4,
            lr_discriminators: 2e-6,
            beta1: 0.5,
            beta2: 0.999,
            landmark_attention: true,
            context_matching: true,
            landmark_subset: None,
            gan_loss: GanLoss::Standard,
            gating: Gating::PerPair,
            wfm_start_layer: 1,
            checkpoint_every: 0,
            sample_every: 0,
            loss_weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            dataset: DatasetSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                what: "config".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0) || !(self.lr_discriminators >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive (generator {}, discriminators {})",
                self.lr_generator, self.lr_discriminators
            )));
        }
        if !(0.0..=1.0).contains(&self.same_pair_fraction) {
            return Err(Error::Config(format!(
                "same_pair_fraction {} outside [0, 1]",
                self.same_pair_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.discriminator.layers < 2 {
            return Err(Error::Config("discriminator needs at least 2 layers".into()));
        }
        let factor = (1usize << (self.discriminator.layers - 1)).max(4);
        if self.resolution < 8 || self.resolution % factor != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be >= 8 and divisible by {factor}",
                self.resolution
            )));
        }
        if self.wfm_start_layer == 0 || self.wfm_start_layer > self.discriminator.layers {
            return Err(Error::Config(format!(
                "wfm_start_layer {} outside 1..={}",
                self.wfm_start_layer, self.discriminator.layers
            )));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.subset()?;
        Ok(())
    }

    pub fn subset(&self) -> Result<Option<LandmarkSubset>> {
        self.landmark_subset
            .as_ref()
            .map(|idx| LandmarkSubset::new(idx.clone()))
            .transpose()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_subset
            .as_ref()
            .map_or(FULL_LANDMARK_COUNT, |s| s.len())
    }

    /// Hash of everything that shapes the training trajectory; run length
    /// and output cadence are excluded so a run can be resumed with a
    /// larger step budget.
    pub fn hash(&self) -> Result<String> {
        let mut core = self.clone();
        core.steps = 0;
        core.checkpoint_every = 0;
        core.sample_every = 0;
        let text = core.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Applies `key=value` overrides, value parsed as a TOML literal (bare
    /// strings accepted). Dotted keys address nested tables.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc: toml::Value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_literal(raw);
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` does not address a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                slot = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text, Path::new("<overrides>"))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_generator, 2e-4);
        assert_eq!(c.lr_discriminators, 2e-6);
        assert_eq!(c.same_pair_fraction, 0.75);
        let w = c.loss_weights;
        assert_eq!((w.app, w.lm, w.wfm, w.recon), (1.0, 1.0, 1.0, 5.0));
        assert_eq!(c.generator.iterations, 3);
        assert_eq!(c.generator.attention_kernel, 3);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text, Path::new("c")).unwrap(), c);
        let bad = format!("{text}\nmystery = 1\n");
        assert!(TrainConfig::from_toml(&bad, Path::new("c")).is_err());
        let err = TrainConfig::from_toml("seed = 1\n[generator]\nwidth = 3\n", Path::new("c")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.lr_generator = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss_weights.wfm = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.landmark_subset = Some(vec![1, 1]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.steps = 5;
        b.checkpoint_every = 3;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 9;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default()
            .with_overrides([("seed", "42"), ("generator.iterations", "1"), ("gan_loss", "as_printed")])
            .unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.generator.iterations, 1);
        assert_eq!(c.gan_loss, GanLoss::AsPrinted);
        assert!(TrainConfig::default().with_overrides([("nope", "1")]).is_err());
    }
}
