use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use super::losses::KlMode;
use super::schedule::{LossWeights, TrainSchedule, Window};
use super::TrainError;
use crate::augment::AugConfig;
use crate::field::{Aabb, ModelKind};
use crate::guidance::EnsembleConfig;
use crate::render::CameraConfig;

pub const PRESETS: [&str; 5] = [
    "168_explicit",
    "168_implicit",
    "224_explicit",
    "224_implicit",
    "224_ensemble",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// `toy` or the base URL of a guidance server.
    pub endpoint: String,
    pub primary_model: String,
    pub secondary_model: Option<String>,
    /// Target image size for the toy provider; defaults to the render size.
    pub toy_resolution: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            endpoint: "toy".into(),
            primary_model: "vit-b-32".into(),
            secondary_model: None,
            toy_resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub prompt: String,
    pub model: ModelKind,
    /// Final voxel budget after progressive scaling.
    pub target_voxels: usize,
    pub bounds: Aabb,
    pub seed: u64,
    /// Opacity per march step of the freshly initialised field.
    pub alpha_init: f64,
    /// March step as a fraction of the smallest voxel edge.
    pub step_scale: f64,
    pub poses_per_iter: usize,
    /// Write `ckpt_{iter:06}.voxf` every this many iterations (0 disables).
    pub snapshot_every: u64,
    pub kl_mode: KlMode,
    pub camera: CameraConfig,
    pub augment: AugConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub guidance: GuidanceConfig,
    pub optimizer: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("224_explicit").expect("built-in preset")
    }
}

fn cube(n: usize) -> usize {
    n * n * n
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        let (res, model) = match name {
            "168_explicit" => (168, ModelKind::Explicit),
            "168_implicit" => (168, ModelKind::Implicit),
            "224_explicit" | "224_ensemble" => (224, ModelKind::Explicit),
            "224_implicit" => (224, ModelKind::Implicit),
            other => {
                return Err(TrainError::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        let schedule = if res == 168 { TrainSchedule::res168() } else { TrainSchedule::res224() };
        let target_voxels = match (res, model) {
            (168, ModelKind::Explicit) => cube(140),
            _ => cube(160),
        };
        let mut weights = match model {
            ModelKind::Explicit => LossWeights::explicit(),
            ModelKind::Implicit => LossWeights::implicit(),
        };
        let mut guidance = GuidanceConfig {
            primary_model: if res == 168 { "vit-b-16" } else { "vit-b-32" }.into(),
            ..GuidanceConfig::default()
        };
        let mut augment = AugConfig::default();
        if name == "224_ensemble" {
            weights.lambda_clip2 = 0.5;
            guidance.secondary_model = Some("vit-l-14".into());
        }
        if name == "224_ensemble" || model == ModelKind::Implicit {
            augment.n_diff = 4;
        }
        Ok(Self {
            prompt: String::new(),
            model,
            target_voxels,
            bounds: Aabb::default(),
            seed: 0,
            alpha_init: 1e-3,
            step_scale: 0.5,
            poses_per_iter: 1,
            snapshot_every: 1000,
            kl_mode: KlMode::Mean,
            camera: CameraConfig {
                height: res,
                width: res,
                ..CameraConfig::default()
            },
            augment,
            weights,
            schedule,
            guidance,
            optimizer: AdamConfig::default(),
        })
    }

    /// Parses TOML. An optional top-level `preset` key selects the base
    /// values; every other key overrides it. Unknown keys are collected and
    /// reported together.
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        let base = match user.remove("preset") {
            Some(toml::Value::String(p)) => Self::preset(&p)?,
            Some(other) => return Err(TrainError::Config(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| TrainError::Config(e.to_string()))?;
        merge(&mut merged, user);

        let mut unknown = Vec::new();
        let de = toml::Value::Table(merged);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(TrainError::UnknownKeys(unknown));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.target_voxels < 8 << self.schedule.scaling_milestones.len() {
            return Err(TrainError::Config(format!(
                "target_voxels {} too small for {} scaling milestones",
                self.target_voxels,
                self.schedule.scaling_milestones.len()
            )));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(TrainError::Config(format!("alpha_init {} outside (0, 1)", self.alpha_init)));
        }
        if !(self.step_scale > 0.0) {
            return Err(TrainError::Config(format!("step_scale {} must be positive", self.step_scale)));
        }
        if self.poses_per_iter == 0 {
            return Err(TrainError::Config("poses_per_iter must be at least 1".into()));
        }
        if self.camera.height == 0 || self.camera.width == 0 {
            return Err(TrainError::Config("camera image size must be non-zero".into()));
        }
        if self.camera.radius <= self.bounds.bounding_radius() {
            return Err(TrainError::Config(format!(
                "camera radius {} is inside the scene bounds",
                self.camera.radius
            )));
        }
        Ok(())
    }

    /// Turns off one augmentation stage or gated loss term by name.
    pub fn ablate(&mut self, what: &str) -> Result<(), TrainError> {
        match what {
            "no-diffaug" => self.augment.diffaug_enabled = false,
            "no-backaug" => self.augment.backaug_enabled = false,
            "no-perspaug" => self.augment.perspaug_enabled = false,
            "no-augs" => {
                self.augment.diffaug_enabled = false;
                self.augment.backaug_enabled = false;
                self.augment.perspaug_enabled = false;
            }
            "no-kl" => self.schedule.kl_window = Window::new(0, 0),
            "no-tv" => self.schedule.tv_window = Window::new(0, 0),
            "no-ensemble" => self.guidance.secondary_model = None,
            other => {
                return Err(TrainError::Config(format!(
                    "unknown ablation {other:?} (expected no-diffaug, no-backaug, no-perspaug, \
                     no-augs, no-kl, no-tv or no-ensemble)"
                )))
            }
        }
        Ok(())
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            primary_model: self.guidance.primary_model.clone(),
            secondary_model: self.guidance.secondary_model.clone(),
            lambda_clip2: self.weights.lambda_clip2,
            secondary_window: self.schedule.ensemble_window,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

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
