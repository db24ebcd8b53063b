//! Run configuration: one TOML file that fixes every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::losses::LossConfig;
use crate::pipeline::{Model, ModelConfig, PipelineError, TrainConfig};
use crate::synth::{generate_sequence, DataError, SceneSpec, Sequence};
use crate::transformer::AttentionConfig;
use crate::xrpn::XRpnConfig;

/// Overrides `train.seed` and `data.scene.seed` when set.
pub const SEED_ENV: &str = "CXTRACK_SEED";

/// TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{SEED_ENV}={0:?} is not an integer in 0..={MAX_SEED}")]
    Seed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Sequence `i` is generated with seed `scene.seed + i`.
    pub sequences: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 32,
            scene: SceneSpec::pedestrian_like(0),
        }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<Vec<Sequence>, DataError> {
        (0..self.sequences as u64)
            .map(|i| {
                generate_sequence(&SceneSpec {
                    seed: self.scene.seed.wrapping_add(i),
                    ..self.scene.clone()
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub transformer: AttentionConfig,
    pub xrpn: XRpnConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            transformer: self.transformer.clone(),
            xrpn: self.xrpn.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.model().validate().map_err(|e| invalid(e.to_string()))?;
        self.loss.validate().map_err(invalid)?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.data.scene.validate().map_err(|e| invalid(e.to_string()))?;
        for (key, seed) in [("train.seed", self.train.seed), ("data.scene.seed", self.data.scene.seed)] {
            if seed > MAX_SEED {
                return Err(invalid(format!("{key} = {seed} exceeds {MAX_SEED}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies a seed override given as text (normally the environment value).
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .ok()
                .filter(|&s| s <= MAX_SEED)
                .ok_or_else(|| ConfigError::Seed(v.to_string()))?;
            self.train.seed = seed;
            self.data.scene.seed = seed;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        let v = std::env::var(SEED_ENV).ok();
        self.override_seed(v.as_deref())
    }
}

/// The config that produced a checkpoint is stored next to it.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_model(ckpt: &Path, model: &Model, run: &RunConfig) -> Result<(), PipelineError> {
    checkpoint::save(ckpt, &model.store)?;
    run.save(&sidecar_path(ckpt)).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Loads a checkpoint with `run` if given, else with its sidecar config.
pub fn load_model(ckpt: &Path, run: Option<&RunConfig>) -> Result<(Model, RunConfig), PipelineError> {
    let run = match run {
        Some(r) => r.clone(),
        None => RunConfig::load(&sidecar_path(ckpt)).map_err(|e| PipelineError::Config(e.to_string()))?,
    };
    let model = Model::from_tensors(&run.model(), checkpoint::load(ckpt)?)?;
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Rigidity;
    use crate::transformer::Variant;
    use crate::xrpn::Switch;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn edited_tree_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.transformer.variant = Variant::Gated;
        cfg.transformer.dropout = 0.123456789;
        cfg.xrpn.center_embedding = Switch::Off;
        cfg.xrpn.sigma_learnable = true;
        cfg.loss.rigidity = Rigidity::Rigid;
        cfg.loss.gamma2 = Some(3.25);
        cfg.train.lr = 1.0 / 3.0 * 1e-3;
        cfg.train.context = Switch::Off;
        cfg.data.scene = SceneSpec::car_like(77);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 5\n[xrpn]\ncenter_embedding = \"off\"\n", Path::new("x")).unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.xrpn.center_embedding, Switch::Off);
        assert_eq!(cfg.transformer, AttentionConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nstepz = 5\n", Path::new("x")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            RunConfig::from_toml("[nonsense]\n", Path::new("x")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlr = -1.0\n", Path::new("x")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[transformer]\nwidth = 16\n", Path::new("x")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(None).unwrap();
        assert_eq!(cfg.train.seed, 0);
        cfg.override_seed(Some("42")).unwrap();
        assert_eq!((cfg.train.seed, cfg.data.scene.seed), (42, 42));
        assert!(cfg.override_seed(Some("-3")).is_err());
    }

    #[test]
    fn data_sequences_use_consecutive_seeds() {
        let d = DataConfig {
            sequences: 2,
            scene: SceneSpec {
                frames: 3,
                ..SceneSpec::pedestrian_like(10)
            },
        };
        let seqs = d.generate().unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1], generate_sequence(&SceneSpec { seed: 11, ..d.scene.clone() }).unwrap());
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("/a/model.ckpt")), PathBuf::from("/a/model.ckpt.toml"));
    }
}
