use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Corner displacements in pixels, ordered top-left, top-right,
/// bottom-right, bottom-left, as `(dx, dy)`. `None` leaves the image as is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspParams {
    pub offsets: Option<[[f64; 2]; 4]>,
}

fn corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (x1, y1) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
}

fn is_convex(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Projective map sending each `from[i]` to `to[i]`.
pub fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (from[i], to[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    m.iter().all(|x| x.is_finite()).then_some(m)
}

impl PerspParams {
    pub fn identity() -> Self {
        Self { offsets: None }
    }

    /// With probability `probability`, displaces every corner by up to
    /// `distortion * (W/2, H/2)`, redrawing until the quad stays convex.
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, distortion: f64, probability: f64) -> Self {
        if !(rng.gen::<f64>() < probability) || distortion <= 0.0 {
            return Self::identity();
        }
        let (mx, my) = (distortion * w as f64 / 2.0, distortion * h as f64 / 2.0);
        let base = corners(h, w);
        for _ in 0..100 {
            let offsets: [[f64; 2]; 4] =
                std::array::from_fn(|_| [rng.gen_range(-mx..=mx), rng.gen_range(-my..=my)]);
            let quad: [[f64; 2]; 4] =
                std::array::from_fn(|i| [base[i][0] + offsets[i][0], base[i][1] + offsets[i][1]]);
            if is_convex(&quad) && homography(&quad, &base).is_some() {
                return Self { offsets: Some(offsets) };
            }
        }
        Self::identity()
    }

    /// For each output pixel centre, the source position `(x, y)` it reads.
    pub fn source_coords(&self, h: usize, w: usize) -> Vec<[f64; 2]> {
        let grid = || (0..h).flat_map(move |r| (0..w).map(move |c| [c as f64, r as f64]));
        let Some(off) = self.offsets else {
            return grid().collect();
        };
        let base = corners(h, w);
        let quad: [[f64; 2]; 4] =
            std::array::from_fn(|i| [base[i][0] + off[i][0], base[i][1] + off[i][1]]);
        // the displaced corners show what used to be at the original corners
        let m = homography(&quad, &base).expect("validated when sampled");
        grid()
            .map(|[x, y]| {
                let p = m * Vector3::new(x, y, 1.0);
                let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
                [snap(p[0] / p[2]), snap(p[1] / p[2])]
            })
            .collect()
    }
}

/// Warps variant `i` from input image `src[i]` of `rgb: [B, H, W, 3]`.
/// Output pixels that read outside the frame blend toward `fill`.
pub fn perspective_augment<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    src: &[usize],
    params: &[PerspParams],
    fill: [f64; 3],
) -> Result<Var, TensorError> {
    let shape = g.shape(rgb).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let n = params.len();
    let coords: Vec<[f64; 2]> = params.iter().flat_map(|p| p.source_coords(h, w)).collect();
    let warped = g.bilinear(rgb, src, (h, w), &coords)?;

    // how much of each output pixel's bilinear footprint lands in-frame
    let mut missing = Vec::with_capacity(n * h * w * 3);
    for &[x, y] in &coords {
        let cov = |t: f64, n: usize| {
            let f = t.floor();
            let fr = t - f;
            let inside = |i: f64| (i >= 0.0 && i <= (n - 1) as f64) as u8 as f64;
            (1.0 - fr) * inside(f) + fr * inside(f + 1.0)
        };
        let m = 1.0 - cov(x, w) * cov(y, h);
        missing.extend(fill.iter().map(|&c| F::of(m * c)));
    }
    if missing.iter().all(|m| *m == F::zero()) {
        return g.clamp(warped, 0.0, 1.0);
    }
    let fill = g.constant(Tensor::new([n, h, w, 3], missing)?);
    let out = g.add(warped, fill)?;
    g.clamp(out, 0.0, 1.0)
}
