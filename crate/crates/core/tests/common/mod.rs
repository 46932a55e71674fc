//! Independent scalar reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxclip::augment::AugConfig;
use voxclip::field::{Aabb, ExplicitField, GridSpec, VoxelField};
use voxclip::render::CameraPose;
use voxclip::tensor::Tensor;
use voxclip::train::{RunConfig, TrainSchedule, Window};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trilinear read of channel `c` of a `[C, Nx, Ny, Nz]` grid at continuous
/// vertex coordinates; zero outside the grid.
pub fn trilinear(data: &[f64], res: [usize; 3], c: usize, u: [f64; 3]) -> f64 {
    let [nx, ny, nz] = res;
    for i in 0..3 {
        if u[i] < -1e-9 || u[i] > (res[i] - 1) as f64 + 1e-9 {
            return 0.0;
        }
    }
    let base = c * nx * ny * nz;
    let mut acc = 0.0;
    let i0: [usize; 3] = std::array::from_fn(|i| (u[i].max(0.0).floor() as usize).min(res[i] - 2));
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let ix = [i0[0] + dx, i0[1] + dy, i0[2] + dz];
                let w: f64 = (0..3)
                    .map(|i| {
                        let f = u[i] - i0[i] as f64;
                        if [dx, dy, dz][i] == 1 {
                            f
                        } else {
                            1.0 - f
                        }
                    })
                    .product();
                acc += w * data[base + (ix[0] * ny + ix[1]) * nz + ix[2]];
            }
        }
    }
    acc
}

fn norm(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Camera origin and per-pixel unit ray direction, written out from the
/// pinhole model without reusing the library's camera.
pub fn pixel_ray(pose: &CameraPose, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
    let (el, az) = (pose.elevation.to_radians(), pose.azimuth.to_radians());
    let o = [
        pose.radius * el.cos() * az.cos(),
        pose.radius * el.cos() * az.sin(),
        pose.radius * el.sin(),
    ];
    let f = norm([-o[0], -o[1], -o[2]]);
    // right = f x z
    let r = norm([f[1], -f[0], 0.0]);
    let u = [
        r[1] * f[2] - r[2] * f[1],
        r[2] * f[0] - r[0] * f[2],
        r[0] * f[1] - r[1] * f[0],
    ];
    let focal = pose.height as f64 / 2.0 / (pose.vertical_fov.to_radians() / 2.0).tan();
    let x = (col as f64 + 0.5 - pose.width as f64 / 2.0) / focal;
    let y = (pose.height as f64 / 2.0 - row as f64 - 0.5) / focal;
    (o, norm([0, 1, 2].map(|i| f[i] + x * r[i] + y * u[i])))
}

fn slab(b: &Aabb, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let a = (b.min[i] - o[i]) / d[i];
        let c = (b.max[i] - o[i]) / d[i];
        lo = lo.max(a.min(c));
        hi = hi.min(a.max(c));
    }
    (hi > lo).then_some((lo, hi))
}

/// Per-pixel loop renderer. Returns premultiplied rgb `[H*W*3]` and final
/// transmittance `[H*W]`; `shift(pixel)` is the first-sample offset.
pub fn brute_render(
    field: &ExplicitField<f64>,
    pose: &CameraPose,
    step: f64,
    shift: impl Fn(usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let spec = field.spec;
    let res = spec.resolution;
    let ext = spec.bounds.extent();
    let bias = field.act_bias.data()[0];
    let mut rgb = vec![0.0; pose.height * pose.width * 3];
    let mut trans = vec![1.0; pose.height * pose.width];
    for row in 0..pose.height {
        for col in 0..pose.width {
            let p = row * pose.width + col;
            let (o, d) = pixel_ray(pose, row, col);
            let Some((t0, t1)) = slab(&spec.bounds, o, d) else { continue };
            let mut t_acc = 1.0;
            let mut k = 0;
            loop {
                let t = t0 + shift(p) + k as f64 * step;
                if t > t1 {
                    break;
                }
                k += 1;
                let x = [0, 1, 2].map(|i| o[i] + t * d[i]);
                let u = [0, 1, 2].map(|i| (x[i] - spec.bounds.min[i]) / ext[i] * (res[i] - 1) as f64);
                let inside = (0..3).all(|i| u[i] >= -1e-9 && u[i] <= (res[i] - 1) as f64 + 1e-9);
                if !inside {
                    continue;
                }
                let raw = trilinear(field.density.data(), res, 0, u);
                let alpha = 1.0 - (-softplus(raw + bias) * step).exp();
                for c in 0..3 {
                    let col = sigmoid(trilinear(field.color.data(), res, c, u));
                    rgb[p * 3 + c] += t_acc * alpha * col;
                }
                t_acc *= 1.0 - alpha;
            }
            trans[p] = t_acc;
        }
    }
    (rgb, trans)
}

pub fn random_explicit(n: usize, seed: u64) -> ExplicitField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::with_resolution(Aabb::default(), [n; 3], n * n * n).unwrap();
    let mut f = ExplicitField::<f64>::new(spec, 0.05, spec.default_step());
    for x in f.density.data_mut() {
        *x = rng.gen_range(-3.0..3.0);
    }
    for x in f.color.data_mut() {
        *x = rng.gen_range(-2.0..2.0);
    }
    f
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    -10.0 * mse.log10()
}

/// Small explicit run against the toy provider: `n`^3 voxels, `res`^2 images,
/// a single resolution stage and all windows closed.
pub fn toy_config(n: usize, res: usize, iters: u64) -> RunConfig {
    let mut c = RunConfig::preset("224_explicit").unwrap();
    c.prompt = "a glossy red sphere".into();
    c.target_voxels = n * n * n;
    c.camera.height = res;
    c.camera.width = res;
    c.snapshot_every = 0;
    c.schedule = TrainSchedule {
        total_iters: iters,
        tv_window: Window::new(0, 0),
        kl_window: Window::new(0, 0),
        ensemble_window: Window::new(0, 0),
        scaling_milestones: vec![],
    };
    c.augment = AugConfig::disabled();
    c
}

pub fn as_f64(field: &VoxelField<f32>) -> VoxelField<f64> {
    field.cast()
}
