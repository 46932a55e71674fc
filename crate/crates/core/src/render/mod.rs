//! Differentiable ray marching through a bound field.
//!
//! Every pixel casts one ray through its centre. Rays are clipped to the
//! scene bounds and sampled at a fixed spacing; all samples of all rays are
//! queried in one batch and then scattered into a padded `[rays, K]` layout
//! so the transmittance is a single exclusive cumulative product.

mod camera;

pub use camera::{sample_pose, Camera, CameraConfig, CameraPose};

use std::path::{Path, PathBuf};
use std::rc::Rc;

use thiserror::Error;

use crate::field::{BoundField, FieldError, VoxelField};
use crate::rng;
use crate::tensor::{GATHER_ZERO, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate camera pose: {0}")]
    Pose(String),
    #[error("step size {0} must be positive and finite")]
    Step(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image export failed: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Offset of the first sample along each ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    /// Start exactly at the bounds entry point.
    Off,
    /// Uniform in `[0, step)` per ray, keyed by `(seed, iteration, pixel)`.
    Seeded { seed: u64, iteration: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub step: f64,
    pub jitter: Jitter,
}

impl RenderOptions {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            jitter: Jitter::Off,
        }
    }
}

/// Premultiplied image and background visibility of one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[H, W, 3]`, black background.
    pub rgb: Var,
    /// `[H, W]`, transmittance left after the last sample.
    pub trans_final: Var,
    /// Scalar mean of `trans_final`.
    pub mean_trans: Var,
    pub samples_per_ray: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

/// Sample positions for every pixel of a pose, in row-major pixel order.
pub struct RaySamples {
    pub points: Vec<[f64; 3]>,
    /// `offsets[r]..offsets[r + 1]` indexes ray `r`'s samples in `points`.
    pub offsets: Vec<usize>,
}

impl RaySamples {
    pub fn max_per_ray(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

pub fn march(field: &BoundField, pose: &CameraPose, opts: &RenderOptions) -> Result<RaySamples, RenderError> {
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(RenderError::Step(opts.step));
    }
    let bounds = field.spec.bounds;
    if pose.radius <= bounds.bounding_radius() {
        return Err(RenderError::Pose(format!(
            "radius {} does not clear the scene bounds (bounding radius {:.4})",
            pose.radius,
            bounds.bounding_radius()
        )));
    }
    let cam = Camera::new(pose)?;
    let mut points = Vec::new();
    let mut offsets = Vec::with_capacity(cam.height * cam.width + 1);
    offsets.push(0);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let dir = cam.ray_dir(row, col);
            if let Some((t0, t1)) = bounds.intersect(cam.origin, dir) {
                let shift = match opts.jitter {
                    Jitter::Off => 0.0,
                    Jitter::Seeded { seed, iteration } => {
                        rng::ray_jitter(seed, iteration, (row * cam.width + col) as u64) * opts.step
                    }
                };
                let mut k = 0usize;
                loop {
                    let t = t0 + shift + k as f64 * opts.step;
                    if t > t1 {
                        break;
                    }
                    points.push([0, 1, 2].map(|i| cam.origin[i] + t * dir[i]));
                    k += 1;
                }
            }
            offsets.push(points.len());
        }
    }
    Ok(RaySamples { points, offsets })
}

/// Renders one view of `field` per the quadrature rule
/// `C = sum_i T_i alpha_i c_i`, `T_i = prod_{j<i} (1 - alpha_j)`.
pub fn render<F: Real>(
    g: &mut Graph<F>,
    field: &BoundField,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    let samples = march(field, pose, opts)?;
    let (h, w) = (pose.height, pose.width);
    let rays = h * w;
    let k = samples.max_per_ray();
    let (alpha, color) = field.query(g, &samples.points, opts.step)?;

    let mut a_idx = vec![GATHER_ZERO; rays * k];
    let mut c_idx = vec![GATHER_ZERO; rays * k * 3];
    for r in 0..rays {
        for (j, p) in (samples.offsets[r]..samples.offsets[r + 1]).enumerate() {
            a_idx[r * k + j] = p as u32;
            for ch in 0..3 {
                c_idx[(r * k + j) * 3 + ch] = (p * 3 + ch) as u32;
            }
        }
    }
    let alpha_pad = g.gather(alpha, Rc::new(a_idx), [rays, k])?;
    let color_pad = g.gather(color, Rc::new(c_idx), [rays, k, 3])?;

    let survive = g.rsub_scalar(1.0, alpha_pad)?;
    let ones = g.constant(Tensor::ones([rays, 1]));
    let survive = g.concat(&[survive, ones], 1)?;
    let trans = g.exclusive_cumprod(survive)?;
    let t_i = g.narrow(trans, 1, 0, k)?;
    let t_last = g.narrow(trans, 1, k, 1)?;

    let weights = g.mul(t_i, alpha_pad)?;
    let weights = g.reshape(weights, [rays, k, 1])?;
    let contrib = g.mul(weights, color_pad)?;
    let rgb = g.sum_axis(contrib, 1, false)?;
    let rgb = g.reshape(rgb, [h, w, 3])?;
    let trans_final = g.reshape(t_last, [h, w])?;
    let mean_trans = g.mean(trans_final)?;

    let samples_per_ray = samples
        .offsets
        .windows(2)
        .map(|w| (w[1] - w[0]) as u32)
        .collect();
    Ok(RenderOutput {
        rgb,
        trans_final,
        mean_trans,
        samples_per_ray,
        height: h,
        width: w,
    })
}

/// `rgb + trans_final * background`. Accepts a single view (`[H, W, 3]` with
/// `[H, W]`) or a batch (`[B, H, W, 3]` with `[B, H, W]`); the background
/// must have the same shape as `rgb`.
pub fn composite<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    trans_final: Var,
    background: Var,
) -> Result<Var, RenderError> {
    let rs = g.shape(rgb).to_vec();
    let ts = g.shape(trans_final).to_vec();
    let bs = g.shape(background).to_vec();
    if rs != bs || rs.last() != Some(&3) || ts[..] != rs[..rs.len() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "composite",
            lhs: rs,
            rhs: if ts[..] != bs[..bs.len().saturating_sub(1)] { ts } else { bs },
        }
        .into());
    }
    let mut tshape = ts;
    tshape.push(1);
    let t = g.reshape(trans_final, tshape)?;
    let behind = g.mul(t, background)?;
    Ok(g.add(rgb, behind)?)
}

/// Renders `field` over a white background without building gradients.
/// Returns an `[H, W, 3]` image.
pub fn render_white<F: Real>(
    field: &VoxelField<F>,
    pose: &CameraPose,
    step: f64,
) -> Result<Tensor<F>, RenderError> {
    let mut g = Graph::new();
    let bound = field.bind(&mut g)?;
    let out = render(&mut g, &bound, pose, &RenderOptions::new(step))?;
    let white = g.constant(Tensor::ones([pose.height, pose.width, 3]));
    let img = composite(&mut g, out.rgb, out.trans_final, white)?;
    Ok(g.value(img).clone())
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]` as 8-bit RGB.
pub fn write_png<F: Real>(path: &Path, image: &Tensor<F>) -> Result<(), RenderError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(RenderError::Image(format!("expected [H, W, 3], got {shape:?}")));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(shape[1] as u32, shape[0] as u32, bytes)
        .ok_or_else(|| RenderError::Image("buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RenderError::Image(e.to_string()))
}

/// Renders `n_views` equispaced azimuths to `dir/view_000.png`, ...
pub fn export_turntable<F: Real>(
    field: &VoxelField<F>,
    camera: &CameraConfig,
    n_views: usize,
    step: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>, RenderError> {
    std::fs::create_dir_all(dir)?;
    camera
        .turntable(n_views)
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let img = render_white(field, pose, step)?;
            let path = dir.join(format!("view_{i:03}.png"));
            write_png(&path, &img)?;
            Ok(path)
        })
        .collect()
}
