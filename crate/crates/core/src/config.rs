//! Run configuration: one TOML-serializable struct covering data generation,
//! both training stages, and evaluation, plus the named profiles shipped with
//! the tool. A run's resolved config is written next to its outputs and its
//! hash is embedded in every checkpoint, so artifacts can always be traced to
//! the exact settings that produced them.

use crate::error::{Error, Result};
use crate::layoutgen::{LayoutModelConfig, LayoutTrainConfig};
use crate::paintnet::{MaskStrategy, PaintModelConfig, PaintTrainConfig};
use crate::rng::fnv1a;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset root; `train/`, `val/`, `test/` live underneath.
    pub root: String,
    /// Square canvas for synthetic rendering; must equal the paint canvas.
    pub canvas: usize,
    pub things_min: usize,
    pub things_max: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Layouts sampled per scene for Max IoU @ k.
    pub k: usize,
    pub workers: usize,
    /// Test images painted per arm for the toy Fréchet score.
    pub fid_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    /// Steps between mid-training checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub layout_model: LayoutModelConfig,
    pub layout_train: LayoutTrainConfig,
    pub paint_model: PaintModelConfig,
    pub paint_train_base: PaintTrainConfig,
    pub paint_train_adapters: PaintTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Minutes-scale profile over the synthetic grammar.
    pub fn desk() -> Self {
        RunConfig {
            profile: "desk".into(),
            seed: 0,
            checkpoint_every: 500,
            data: DataConfig {
                root: "data/synth".into(),
                canvas: 32,
                things_min: 1,
                things_max: 6,
                train: 2000,
                val: 200,
                test: 200,
            },
            layout_model: LayoutModelConfig {
                width: 128,
                blocks: 2,
                heads: 4,
                ff_hidden: 256,
                ..LayoutModelConfig::default()
            },
            layout_train: LayoutTrainConfig { steps: 3000, batch_size: 16, lr: 1e-3, seed: 0 },
            paint_model: PaintModelConfig {
                canvas: 32,
                c0: 16,
                c1: 32,
                heads: 4,
                temb_dim: 32,
                t_max: 50,
                ..PaintModelConfig::default()
            },
            paint_train_base: PaintTrainConfig {
                steps: 600,
                batch_size: 4,
                lr: 1e-3,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            paint_train_adapters: PaintTrainConfig {
                steps: 600,
                batch_size: 4,
                lr: 1e-3,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            eval: EvalConfig { k: 5, workers: 1, fid_samples: 16 },
        }
    }

    /// Documentation profile carrying the full-scale hyperparameters
    /// (learning rates, batch sizes, iteration counts, T=1000). Not sized
    /// for desk hardware.
    pub fn paper() -> Self {
        RunConfig {
            profile: "paper".into(),
            seed: 0,
            checkpoint_every: 10_000,
            data: DataConfig {
                root: "data/coco".into(),
                canvas: 64,
                things_min: 1,
                things_max: 6,
                train: 0,
                val: 0,
                test: 0,
            },
            layout_model: LayoutModelConfig { t_max: 1000, ..LayoutModelConfig::default() },
            layout_train: LayoutTrainConfig {
                steps: 400_000,
                batch_size: 64,
                lr: 1e-5,
                seed: 0,
            },
            paint_model: PaintModelConfig { canvas: 64, t_max: 1000, ..PaintModelConfig::default() },
            paint_train_base: PaintTrainConfig {
                steps: 102_000,
                batch_size: 8,
                lr: 5e-5,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            paint_train_adapters: PaintTrainConfig {
                steps: 102_000,
                batch_size: 8,
                lr: 5e-5,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            eval: EvalConfig { k: 5, workers: 1, fid_samples: 64 },
        }
    }

    /// Seconds-scale profile for integration tests.
    pub fn smoke() -> Self {
        RunConfig {
            profile: "smoke".into(),
            seed: 0,
            checkpoint_every: 10,
            data: DataConfig {
                root: "data/smoke".into(),
                canvas: 16,
                things_min: 1,
                things_max: 2,
                train: 8,
                val: 2,
                test: 2,
            },
            layout_model: LayoutModelConfig {
                width: 64,
                blocks: 2,
                heads: 4,
                ff_hidden: 128,
                fourier_freqs: 4,
                feature_dim: 32,
                t_max: 5,
                ..LayoutModelConfig::default()
            },
            layout_train: LayoutTrainConfig { steps: 30, batch_size: 4, lr: 1e-3, seed: 0 },
            paint_model: PaintModelConfig {
                canvas: 16,
                c0: 16,
                c1: 32,
                heads: 4,
                temb_dim: 32,
                feature_dim: 32,
                fourier_freqs: 4,
                t_max: 5,
                ..PaintModelConfig::default()
            },
            paint_train_base: PaintTrainConfig {
                steps: 20,
                batch_size: 2,
                lr: 1e-3,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            paint_train_adapters: PaintTrainConfig {
                steps: 20,
                batch_size: 2,
                lr: 1e-3,
                seed: 0,
                strategy: MaskStrategy::Instance,
            },
            eval: EvalConfig { k: 2, workers: 2, fid_samples: 4 },
        }
    }

    pub fn named_profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile {other:?}; available: desk, paper, smoke"
            ))),
        }
    }

    /// Applies one master seed to the run and every training section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.layout_train.seed = seed;
        self.paint_train_base.seed = seed;
        self.paint_train_adapters.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.paint_model.validate()?;
        if self.layout_model.width % 2 != 0 || self.layout_model.width % self.layout_model.heads != 0
        {
            return Err(Error::InvalidArgument(format!(
                "layout width {} must be even and divide into {} heads",
                self.layout_model.width, self.layout_model.heads
            )));
        }
        if self.data.canvas != self.paint_model.canvas {
            return Err(Error::InvalidArgument(format!(
                "data canvas {} must equal paint canvas {}",
                self.data.canvas, self.paint_model.canvas
            )));
        }
        if self.data.things_min < 1 || self.data.things_min > self.data.things_max {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= things_min ({}) <= things_max ({})",
                self.data.things_min, self.data.things_max
            )));
        }
        if self.eval.k == 0 || self.eval.workers == 0 {
            return Err(Error::InvalidArgument(
                "eval.k and eval.workers must be positive".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding; field order is fixed by the
    /// struct, so equal configs always hash equal.
    pub fn hash(&self) -> u64 {
        fnv1a(&serde_json::to_vec(self).expect("run config serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::schema(path.display(), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("config does not serialize: {e}")))?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
