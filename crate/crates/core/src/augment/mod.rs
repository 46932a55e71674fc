//! Image augmentations applied between rendering and guidance scoring.
//!
//! Stages run in a fixed order: DiffAug on the premultiplied render and its
//! alpha, background compositing, then perspective warps. Each stage turns
//! every incoming image into `n` variants, so one render yields
//! `n_diff * n_back * n_persp` images. Variant draws come from RNG streams
//! keyed by `(seed, iteration, variant)`.

mod background;
mod diffaug;
mod perspective;

pub use background::{
    background_augment, fourier_texture, gaussian_blur, BackgroundKind, BackgroundParams,
};
pub use diffaug::{diff_augment, DiffAugParams};
pub use perspective::{homography, perspective_augment, PerspParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::RenderOutput;
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Real, TensorError, Var};

pub const PERSPECTIVE_FILL: [f64; 3] = [1.0; 3];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub diffaug_enabled: bool,
    pub backaug_enabled: bool,
    pub perspaug_enabled: bool,
    pub n_diff: usize,
    pub n_back: usize,
    pub n_persp: usize,
    pub persp_distortion: f64,
    pub persp_probability: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            diffaug_enabled: true,
            backaug_enabled: true,
            perspaug_enabled: true,
            n_diff: 8,
            n_back: 8,
            n_persp: 1,
            persp_distortion: 0.6,
            persp_probability: 1.0,
        }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        Self {
            diffaug_enabled: false,
            backaug_enabled: false,
            perspaug_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.n_diff == 0 || self.n_back == 0 || self.n_persp == 0 {
            return Err(AugmentError::Config("variant counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.persp_distortion) {
            return Err(AugmentError::Config(format!(
                "persp_distortion {} outside [0, 1]",
                self.persp_distortion
            )));
        }
        if !(0.0..=1.0).contains(&self.persp_probability) {
            return Err(AugmentError::Config(format!(
                "persp_probability {} outside [0, 1]",
                self.persp_probability
            )));
        }
        Ok(())
    }

    fn counts(&self) -> [usize; 3] {
        [
            if self.diffaug_enabled { self.n_diff } else { 1 },
            if self.backaug_enabled { self.n_back } else { 1 },
            if self.perspaug_enabled { self.n_persp } else { 1 },
        ]
    }

    /// Images produced per rendered view.
    pub fn batch_size(&self) -> usize {
        self.counts().iter().product()
    }
}

/// Every random draw the pipeline makes for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPlan {
    pub diff: Option<Vec<DiffAugParams>>,
    pub back: Vec<BackgroundParams>,
    pub persp: Option<Vec<PerspParams>>,
}

impl AugPlan {
    pub fn sample(
        config: &AugConfig,
        n_images: usize,
        h: usize,
        w: usize,
        seed: u64,
        iteration: u64,
    ) -> Self {
        let [nd, nb, np] = config.counts();
        let diff = config.diffaug_enabled.then(|| {
            (0..n_images * nd)
                .map(|i| {
                    DiffAugParams::sample(&mut rng::stream(seed, iteration, Stream::DiffAug, i as u64), h, w)
                })
                .collect()
        });
        let back = (0..n_images * nd * nb)
            .map(|i| {
                if config.backaug_enabled {
                    BackgroundParams::sample(&mut rng::stream(seed, iteration, Stream::BackAug, i as u64))
                } else {
                    BackgroundParams::white()
                }
            })
            .collect();
        let persp = config.perspaug_enabled.then(|| {
            (0..n_images * nd * nb * np)
                .map(|i| {
                    PerspParams::sample(
                        &mut rng::stream(seed, iteration, Stream::PerspAug, i as u64),
                        h,
                        w,
                        config.persp_distortion,
                        config.persp_probability,
                    )
                })
                .collect()
        });
        Self { diff, back, persp }
    }
}

/// Stacks renders into `rgb: [N, H, W, 3]` and `alpha: [N, H, W]`.
pub fn stack_renders<F: Real>(g: &mut Graph<F>, renders: &[RenderOutput]) -> Result<(Var, Var), TensorError> {
    let mut rgbs = Vec::with_capacity(renders.len());
    let mut alphas = Vec::with_capacity(renders.len());
    for r in renders {
        rgbs.push(g.reshape(r.rgb, [1, r.height, r.width, 3])?);
        let t = g.reshape(r.trans_final, [1, r.height, r.width])?;
        alphas.push(g.rsub_scalar(1.0, t)?);
    }
    let rgb = if rgbs.len() == 1 { rgbs[0] } else { g.concat(&rgbs, 0)? };
    let alpha = if alphas.len() == 1 { alphas[0] } else { g.concat(&alphas, 0)? };
    Ok((rgb, alpha))
}

/// Runs the three stages with the draws in `plan`. `rgb` is premultiplied
/// `[N, H, W, 3]`, `alpha` is `[N, H, W]`. Output is
/// `[N * n_diff * n_back * n_persp, H, W, 3]`, ordered input-major.
pub fn apply_plan<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    alpha: Var,
    plan: &AugPlan,
) -> Result<Var, AugmentError> {
    let n = g.shape(rgb)[0];
    let fan = |from: usize, to: usize| -> Vec<usize> { (0..to).map(|i| i / (to / from)).collect() };

    let (rgb, alpha) = match &plan.diff {
        Some(params) => diff_augment(g, rgb, alpha, &fan(n, params.len()), params)?,
        None => (rgb, alpha),
    };
    let m = g.shape(rgb)[0];
    let composed = background_augment(g, rgb, alpha, &fan(m, plan.back.len()), &plan.back)?;
    let out = match &plan.persp {
        Some(params) => {
            let k = g.shape(composed)[0];
            perspective_augment(g, composed, &fan(k, params.len()), params, PERSPECTIVE_FILL)?
        }
        None => composed,
    };
    Ok(out)
}

/// Samples this iteration's draws and applies the pipeline.
pub fn augment_pipeline<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    alpha: Var,
    config: &AugConfig,
    seed: u64,
    iteration: u64,
) -> Result<Var, AugmentError> {
    config.validate()?;
    let s = g.shape(rgb).to_vec();
    let plan = AugPlan::sample(config, s[0], s[1], s[2], seed, iteration);
    apply_plan(g, rgb, alpha, &plan)
}
