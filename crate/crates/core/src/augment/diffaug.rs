use std::rc::Rc;

use rand::Rng;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var, GATHER_ZERO};

/// Random draws for one DiffAug variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffAugParams {
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    /// Integer shift in pixels, `(rows, cols)`.
    pub translate: (i64, i64),
    /// Top-left corner and side of the cutout square, if any.
    pub cutout: Option<(i64, i64, usize)>,
}

impl DiffAugParams {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            saturation: 1.0,
            contrast: 1.0,
            translate: (0, 0),
            cutout: None,
        }
    }

    pub fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let brightness = rng.gen_range(-0.5..0.5);
        let saturation = rng.gen_range(0.0..2.0);
        let contrast = rng.gen_range(0.5..1.5);
        let (sh, sw) = ((h / 8) as i64, (w / 8) as i64);
        let translate = (rng.gen_range(-sh..=sh), rng.gen_range(-sw..=sw));
        let side = h / 2;
        // cutout centre anywhere in the frame, so the square may be clipped
        let cy = rng.gen_range(0..h as i64);
        let cx = rng.gen_range(0..w as i64);
        let half = (side / 2) as i64;
        Self {
            brightness,
            saturation,
            contrast,
            translate,
            cutout: (side > 0).then_some((cy - half, cx - half, side)),
        }
    }

    /// Source pixel for output pixel `(r, c)`, or `None` if it is vacated by
    /// the shift or covered by the cutout.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> Option<usize> {
        let (r, c) = (r as i64, c as i64);
        if let Some((top, left, side)) = self.cutout {
            let side = side as i64;
            if r >= top && r < top + side && c >= left && c < left + side {
                return None;
            }
        }
        let (sr, sc) = (r - self.translate.0, c - self.translate.1);
        (sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64).then(|| sr as usize * w + sc as usize)
    }
}

/// Applies one variant per entry of `params` to `rgb: [B, H, W, 3]` and
/// `alpha: [B, H, W]`; variant `i` reads input image `src[i]`.
pub fn diff_augment<F: Real>(
    g: &mut Graph<F>,
    rgb: Var,
    alpha: Var,
    src: &[usize],
    params: &[DiffAugParams],
) -> Result<(Var, Var), TensorError> {
    let shape = g.shape(rgb).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let n = params.len();
    let plane = h * w;
    let per_variant = |f: fn(&DiffAugParams) -> f64| {
        Tensor::from_fn([n, 1, 1, 1], |i| F::of(f(&params[i])))
    };

    let mut rep = Vec::with_capacity(n * plane * 3);
    for &s in src {
        rep.extend((0..plane * 3).map(|k| (s * plane * 3 + k) as u32));
    }
    let mut x = g.gather(rgb, Rc::new(rep), [n, h, w, 3])?;

    let b = g.constant(per_variant(|p| p.brightness));
    x = g.add(x, b)?;

    let s = g.constant(per_variant(|p| p.saturation));
    let m = g.mean_axis(x, 3, true)?;
    let d = g.sub(x, m)?;
    let d = g.mul(d, s)?;
    x = g.add(d, m)?;

    let c = g.constant(per_variant(|p| p.contrast));
    let flat = g.reshape(x, [n, plane * 3])?;
    let m = g.mean_axis(flat, 1, true)?;
    let m = g.reshape(m, [n, 1, 1, 1])?;
    let d = g.sub(x, m)?;
    let d = g.mul(d, c)?;
    x = g.add(d, m)?;

    let mut rgb_idx = Vec::with_capacity(n * plane * 3);
    let mut a_idx = Vec::with_capacity(n * plane);
    for (i, p) in params.iter().enumerate() {
        for r in 0..h {
            for col in 0..w {
                match p.source(r, col, h, w) {
                    Some(q) => {
                        a_idx.push((src[i] * plane + q) as u32);
                        rgb_idx.extend((0..3).map(|ch| ((i * plane + q) * 3 + ch) as u32));
                    }
                    None => {
                        a_idx.push(GATHER_ZERO);
                        rgb_idx.extend([GATHER_ZERO; 3]);
                    }
                }
            }
        }
    }
    let x = g.gather(x, Rc::new(rgb_idx), [n, h, w, 3])?;
    let a = g.gather(alpha, Rc::new(a_idx), [n, h, w])?;
    Ok((g.clamp(x, 0.0, 1.0)?, a))
}
