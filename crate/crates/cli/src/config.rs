use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use knolling::controller::PipelineConfig;
use knolling::gem::GemTrainConfig;
use knolling::knoll::KnollTrainConfig;
use knolling::perception::PerceptionConfig;
use knolling::scene::{GripperSpec, SceneGenConfig};
use knolling::util::config_digest;

/// Everything one invocation reads. Every section is optional in the file;
/// missing keys take the defaults printed by `knolling config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes for data generation, knolling training and pipeline runs.
    pub scenes: usize,
    pub train_ratio: f64,
    pub scene: SceneGenConfig,
    pub perception: PerceptionConfig,
    pub gripper: GripperSpec,
    pub gem: GemTrainConfig,
    pub knoll: KnollTrainConfig,
    pub pipeline: PipelineConfig,
    pub paths: Paths,
}

/// Inputs read by later commands. Unset entries resolve inside `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub gem_weights: Option<PathBuf>,
    pub knoll_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 6600,
            train_ratio: knolling::dataset::DEFAULT_TRAIN_RATIO,
            scene: SceneGenConfig::default(),
            perception: PerceptionConfig::default(),
            gripper: GripperSpec::default(),
            gem: GemTrainConfig::default(),
            knoll: KnollTrainConfig::default(),
            pipeline: PipelineConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(n) = o.scenes {
            cfg.scenes = n;
            cfg.knoll.scenes = n;
        }
        if let Some(e) = o.epochs {
            cfg.gem.epochs = e;
            cfg.knoll.pretrain_epochs = e;
            cfg.knoll.finetune_epochs = e;
        }
        if let Some(lr) = o.lr {
            cfg.gem.lr = lr;
            cfg.knoll.pretrain_lr = lr;
            cfg.knoll.finetune_lr = lr;
        }
        // Sub-seeds follow the run seed so `--seed` changes everything at once.
        cfg.gem.seed = knolling::util::derive_seed(cfg.seed, &[0x6E]);
        cfg.knoll.seed = knolling::util::derive_seed(cfg.seed, &[0x7A]);
        cfg.pipeline.gripper = cfg.gripper;
        cfg.pipeline.perception = cfg.perception;
        cfg.pipeline.layout = cfg.knoll.layout.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.scenes > 0, "scenes must be positive");
        anyhow::ensure!(
            self.train_ratio > 0.0 && self.train_ratio < 1.0,
            "train_ratio must lie in (0, 1)"
        );
        self.scene.validate()?;
        self.perception.validate().map_err(anyhow::Error::msg)?;
        self.gripper.validate()?;
        self.gem.validate()?;
        self.knoll.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}
