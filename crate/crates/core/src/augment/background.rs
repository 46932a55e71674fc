use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundKind {
    Checkerboard { square: usize, colors: [[f64; 3]; 2] },
    /// Low-frequency random spectrum; the seed drives phases and magnitudes.
    Fourier { seed: u64 },
    /// Per-pixel `N(0.5, 0.2^2)`, clamped.
    Noise { seed: u64 },
    Solid([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundParams {
    pub kind: BackgroundKind,
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
}

impl BackgroundParams {
    pub fn white() -> Self {
        Self {
            kind: BackgroundKind::Solid([1.0; 3]),
            blur_sigma: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => BackgroundKind::Checkerboard {
                square: [4, 8, 16][rng.gen_range(0..3)],
                colors: [rng.gen(), rng.gen()],
            },
            1 => BackgroundKind::Fourier { seed: rng.gen() },
            _ => BackgroundKind::Noise { seed: rng.gen() },
        };
        Self {
            kind,
            blur_sigma: rng.gen_range(0.0..10.0),
        }
    }

    /// The `[H, W, 3]` background image, blurred.
    pub fn generate(&self, h: usize, w: usize) -> Vec<f64> {
        let img = match self.kind {
            BackgroundKind::Checkerboard { square, colors } => {
                let mut v = Vec::with_capacity(h * w * 3);
                for r in 0..h {
                    for c in 0..w {
                        v.extend_from_slice(&colors[(r / square + c / square) % 2]);
                    }
                }
                v
            }
            BackgroundKind::Fourier { seed } => fourier_texture(h, w, seed),
            BackgroundKind::Noise { seed } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::<f64>::new(0.5, 0.2).expect("valid normal");
                (0..h * w * 3).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)).collect()
            }
            BackgroundKind::Solid(c) => c.repeat(h * w),
        };
        gaussian_blur(&img, h, w, self.blur_sigma)
    }
}

/// Random-phase spectrum with magnitude `1 / (1 + f^2)`, inverse transformed
/// and min-max normalised per channel.
pub fn fourier_texture(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_inverse(w);
    let col_fft = planner.plan_fft_inverse(h);
    let freq = |k: usize, n: usize| {
        let k = k as f64;
        if k > n as f64 / 2.0 {
            k - n as f64
        } else {
            k
        }
    };
    let mut out = vec![0.0; h * w * 3];
    for ch in 0..3 {
        let mut spec: Vec<Complex<f64>> = (0..h * w)
            .map(|i| {
                let (fy, fx) = (freq(i / w, h), freq(i % w, w));
                let amp = 1.0 / (1.0 + fx * fx + fy * fy);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                Complex::from_polar(amp, phase)
            })
            .collect();
        spec[0] = Complex::new(0.0, 0.0);
        for row in spec.chunks_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = spec[r * w + c];
            }
            col_fft.process(&mut col);
            for r in 0..h {
                spec[r * w + c] = col[r];
            }
        }
        let (lo, hi) = spec
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z.re), hi.max(z.re)));
        let range = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
        for (i, z) in spec.iter().enumerate() {
            out[i * 3 + ch] = (z.re - lo) / range;
        }
    }
    out
}

/// Separable Gaussian blur of an `[H, W, 3]` image with edge clamping.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                for (k, &wt) in kernel.iter().enumerate() {
                    let off = k as i64 - radius;
                    let (rr, cc) = if horizontal {
                        (r, (c as i64 + off).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((r as i64 + off).clamp(0, h as i64 - 1) as usize, c)
                    };
                    let base = (rr * w + cc) * 3;
                    for ch in 0..3 {
                        acc[ch] += wt * src[base + ch];
                    }
                }
                dst[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&acc);
            }
        }
        dst
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

/// Composites variant `i` of `rgb: [B, H, W, 3]` (premultiplied) over
/// `backgrounds[i]`, reading input image `src[i]` with transmittance
/// `1 - alpha`. Returns the clamped `[N, H, W, 3]` batch.
pub fn background_augment<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    alpha: Var,
    src: &[usize],
    backgrounds: &[BackgroundParams],
) -> Result<Var, TensorError> {
    let shape = g.shape(rgb).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let n = backgrounds.len();
    let plane = h * w;
    let bg: Vec<F> = backgrounds
        .iter()
        .flat_map(|b| b.generate(h, w))
        .map(F::of)
        .collect();
    let bg = g.constant(Tensor::new([n, h, w, 3], bg)?);

    let rgb_idx: Vec<u32> = src
        .iter()
        .flat_map(|&s| (0..plane * 3).map(move |k| (s * plane * 3 + k) as u32))
        .collect();
    let a_idx: Vec<u32> = src
        .iter()
        .flat_map(|&s| (0..plane).map(move |k| (s * plane + k) as u32))
        .collect();
    let x = g.gather(rgb, Rc::new(rgb_idx), [n, h, w, 3])?;
    let a = g.gather(alpha, Rc::new(a_idx), [n, h, w, 1])?;
    let t = g.rsub_scalar(1.0, a)?;
    let behind = g.mul(t, bg)?;
    let out = g.add(x, behind)?;
    g.clamp(out, 0.0, 1.0)
}
