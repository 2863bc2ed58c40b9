//! Run configuration: one JSON document, overridable by flags and `FAKEMAP_SEED`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fakemap::evaluate::EvalOptions;
use fakemap::robustness::DegradationKind;
use fakemap::texturegen::DatasetConfig;
use fakemap::training::TrainConfig;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::failure::{Failure, Kind};

pub const SEED_ENV: &str = "FAKEMAP_SEED";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub generator: DatasetConfig,
    /// Seed of the stratified train/val/test split; the run seed when absent.
    pub split_seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            generator: DatasetConfig {
                count_real: 100,
                count_fake: 100,
                ..DatasetConfig::default()
            },
            split_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub runs: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { runs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustSection {
    pub kind: DegradationKind,
    /// Parameter grid; the kind's default grid when absent.
    pub grid: Option<Vec<f64>>,
    /// Fakes shown in the disorganization grid.
    pub disorganize_samples: usize,
}

impl Default for RobustSection {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Lowres,
            grid: None,
            disorganize_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(deserialize_with = "over_desk_defaults")]
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub cluster: ClusterSection,
    pub robust: RobustSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output: None,
            manifest: None,
            checkpoint: None,
            dataset: DatasetSection::default(),
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
            cluster: ClusterSection::default(),
            robust: RobustSection::default(),
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Fields missing from the `train` section keep their desk-scale values.
fn over_desk_defaults<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(TrainConfig::desk()).map_err(D::Error::custom)?;
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(Kind::Config, format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::new(Kind::Config, format!("invalid config {}: {e}", path.display())).into())
    }

    /// Applies `FAKEMAP_SEED` over the configured seed; an explicit flag wins over both.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> anyhow::Result<u64> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Failure::new(Kind::Config, format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        if let Some(s) = flag {
            self.seed = Some(s);
        }
        let seed = self.seed.unwrap_or(0);
        self.seed = Some(seed);
        self.dataset.generator.seed = seed;
        self.dataset.split_seed.get_or_insert(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn output_dir(&self) -> anyhow::Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Failure::new(Kind::Config, "an output directory is required (--out)").into())
    }

    pub fn manifest_path(&self) -> anyhow::Result<&Path> {
        let p = self
            .manifest
            .as_deref()
            .ok_or_else(|| Failure::new(Kind::Config, "a dataset is required (--data)"))?;
        if !fakemap::dataset::manifest_path(p).exists() {
            return Err(Failure::new(Kind::Data, format!("no manifest at {}", p.display())).into());
        }
        Ok(p)
    }

    pub fn checkpoint_path(&self) -> anyhow::Result<&Path> {
        let p = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| Failure::new(Kind::Config, "a checkpoint is required (--checkpoint)"))?;
        if !p.join(fakemap::locator::SIDECAR_FILE).exists() {
            return Err(Failure::new(Kind::Data, format!("no checkpoint at {}", p.display())).into());
        }
        Ok(p)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let checks = [
            self.dataset.generator.validate(),
            self.train.validate(),
            self.train.augment.validate(),
        ];
        for c in checks {
            c.map_err(|e| Failure::new(Kind::Config, e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.eval.cutoff) || !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Failure::new(Kind::Config, "eval cutoff and threshold must lie in [0, 1]").into());
        }
        if self.cluster.runs == 0 {
            return Err(Failure::new(Kind::Config, "cluster runs must be >= 1").into());
        }
        Ok(())
    }

    pub fn digest(&self) -> anyhow::Result<String> {
        let text = serde_json::to_string(self).context("serializing config")?;
        Ok(fakemap::locator::hex_digest(text.as_bytes()))
    }
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_digest: String,
    pub manifest_digest: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub config: &'a RunConfig,
}

pub fn write_run_record(dir: &Path, command: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest_digest = match &cfg.manifest {
        Some(m) if fakemap::dataset::manifest_path(m).exists() => Some(fakemap::dataset::manifest_digest(m)?),
        _ => None,
    };
    let checkpoint_digest = match &cfg.checkpoint {
        Some(c) => fakemap::LocatorNetwork::load(c).ok().map(|(_, meta)| meta.weights_sha256),
        None => None,
    };
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_digest: cfg.digest()?,
        manifest_digest,
        checkpoint_digest,
        config: cfg,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fakemap::training::Backbone;

    #[test]
    fn partial_train_section_keeps_desk_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3, "loss": {"cls_weight": 0.5}}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.input_size, 64);
        assert_eq!(cfg.train.backbone, Backbone::Compact);
        assert_eq!(cfg.train.loss.cls_weight, 0.5);
        assert_eq!(cfg.train.loss.map_loss, TrainConfig::desk().loss.map_loss);
    }

    #[test]
    fn unknown_top_level_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn flag_seed_wins_and_propagates() {
        let mut cfg = RunConfig { seed: Some(3), ..RunConfig::default() };
        assert_eq!(cfg.resolve_seed(Some(8)).unwrap(), 8);
        assert_eq!(cfg.train.seed, 8);
        assert_eq!(cfg.dataset.generator.seed, 8);
        assert_eq!(cfg.dataset.split_seed, Some(8));
    }
}
