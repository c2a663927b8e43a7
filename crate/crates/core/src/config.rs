//! Experiment configuration: a TOML file merged over a named preset.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::container::sha256_hex;
use crate::detector::{TrainConfig, TrainingSpec};
use crate::error::{Error, Result};
use crate::eval::THRESHOLDS;
use crate::pipeline::SceneSetup;
use crate::render::{PoseJitter, Sensor};
use crate::scenarios::{generate_split, SceneSpec};
use crate::texture::{MaskLayout, TextureGeometry};
use crate::v2e::V2eConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("preset must be \"desk\" or \"paper\", got {other:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenesConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Rendered frames per sequence.
    pub frames: usize,
    pub frame_interval_us: u64,
    /// Pose-jittered instances of each test scene used for evaluation.
    pub eval_replicates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Trained parameters; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    pub data: TrainingSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Seed of the random baseline texture.
    pub random_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub out_dir: PathBuf,
    pub sensor: Sensor,
    pub texture: TextureGeometry,
    /// Texture-map rectangles of each body region; derived from the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_layout: Option<MaskLayout>,
    pub scenes: ScenesConfig,
    pub jitter: PoseJitter,
    pub v2e: V2eConfig,
    pub detector: DetectorConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = ExperimentConfig {
            preset,
            out_dir: PathBuf::from("out"),
            sensor: Sensor { width: 64, height: 64 },
            texture: TextureGeometry { grid: 10, size: 60 },
            mask_layout: None,
            scenes: ScenesConfig {
                train: 47,
                test: 13,
                seed: 1,
                frames: 4,
                frame_interval_us: 20_000,
                eval_replicates: 4,
            },
            jitter: PoseJitter::default(),
            v2e: V2eConfig::default(),
            detector: DetectorConfig {
                params: None,
                data: TrainingSpec::default(),
                train: TrainConfig::default(),
            },
            attack: AttackConfig {
                iterations: 2_000,
                lr: DESK_LR,
                ..AttackConfig::default()
            },
            eval: EvalConfig {
                thresholds: THRESHOLDS.to_vec(),
                random_seed: 7,
            },
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => ExperimentConfig {
                sensor: Sensor { width: 304, height: 240 },
                texture: TextureGeometry { grid: 10, size: 1020 },
                attack: AttackConfig::default(),
                ..desk
            },
        }
    }

    /// Parses `text` and merges it over the preset named by `preset`, else by
    /// the file's own `preset` key, else the desk preset.
    pub fn from_toml_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let named = match (preset, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::Config("preset must be a string".into())),
            (None, None) => Preset::Desk,
        };
        let base = toml::to_string(&Self::preset(named)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged: toml::Table = base.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::String(named.to_string()));
        let cfg: ExperimentConfig = toml::from_str(&merged.to_string()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, preset)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.detector.params {
            if p.is_relative() {
                cfg.detector.params = Some(dir.join(p));
            }
        }
        if let Some(p) = &cfg.detector.params {
            if !p.exists() {
                return Err(Error::Config(format!("detector.params: {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Sensor::new(self.sensor.width, self.sensor.height)?;
        TextureGeometry::new(self.texture.grid, self.texture.size)?;
        self.layout().validate(self.texture.size)?;
        self.v2e.validate()?;
        self.attack.validate()?;
        let s = &self.scenes;
        if s.train == 0 || s.test == 0 {
            return Err(Error::Config("scenes.train and scenes.test must be >= 1".into()));
        }
        if s.frames < 2 || s.frame_interval_us == 0 || s.eval_replicates == 0 {
            return Err(Error::Config(
                "scenes.frames must be >= 2 and scenes.frame_interval_us, scenes.eval_replicates >= 1".into(),
            ));
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("eval.thresholds must lie in (0, 1), got {t}")));
        }
        if self.eval.thresholds.is_empty() {
            return Err(Error::Config("eval.thresholds is empty".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> MaskLayout {
        self.mask_layout.unwrap_or_else(|| MaskLayout::standard(self.texture))
    }

    pub fn setup(&self) -> SceneSetup {
        let mut setup = SceneSetup::with_layout(self.sensor, self.texture, self.layout(), self.v2e);
        setup.jitter = self.jitter;
        setup.frame_interval_us = self.scenes.frame_interval_us;
        setup
    }

    pub fn scenes(&self) -> Result<Vec<SceneSpec>> {
        generate_split(self.scenes.train, self.scenes.test, self.scenes.seed, self.scenes.frames)
    }

    /// Canonical TOML of the fully merged config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// Tuned for the desk scale, where the run is ~6x shorter than the default.
pub const DESK_LR: f64 = 0.05;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
