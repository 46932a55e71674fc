use super::{GuidanceError, GuidanceProvider, GuidanceResponse, ImageBatch, TextEmbedding};
use crate::rng;

pub const TOY_EMBED_DIM: usize = 64;

/// Disk radius of [`ToyProvider::with_disk_prompts`] targets, as a fraction of
/// the image size.
pub const TOY_DISK_RADIUS: f64 = 0.18;

/// Bilinear resize as a sparse linear map: output pixel `o` reads
/// `sum_k w_k * input[idx_k]`. Pixel centres are at half-integers, edges clamp.
#[derive(Debug, Clone)]
pub struct Resize {
    taps: Vec<[(usize, f64); 4]>,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl Resize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let axis = |o: usize, n_in: usize, n_out: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for r in 0..out_hw.0 {
            let (r0, r1, fr) = axis(r, in_hw.0, out_hw.0);
            for c in 0..out_hw.1 {
                let (c0, c1, fc) = axis(c, in_hw.1, out_hw.1);
                let w = in_hw.1;
                taps.push([
                    (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
                    (r0 * w + c1, (1.0 - fr) * fc),
                    (r1 * w + c0, fr * (1.0 - fc)),
                    (r1 * w + c1, fr * fc),
                ]);
            }
        }
        Self { taps, in_hw, out_hw }
    }

    /// `[H, W, 3]` in, `[h, w, 3]` out.
    pub fn forward(&self, img: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.taps.len() * 3];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, wt) in taps {
                for ch in 0..3 {
                    out[o * 3 + ch] += wt * img[i * 3 + ch];
                }
            }
        }
        out
    }

    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_hw.0 * self.in_hw.1 * 3];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, wt) in taps {
                for ch in 0..3 {
                    out[i * 3 + ch] += wt * grad[o * 3 + ch];
                }
            }
        }
        out
    }
}

/// In-process stand-in for an image-text model.
///
/// Each registered prompt owns a target image and a one-hot text vector. An
/// image's score against a text vector is `1 - 2 * mse(resize(image), target)`
/// for the target whose prompt vector best matches, so it spans `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ToyProvider {
    model_id: String,
    resolution: (usize, usize),
    prompts: Vec<String>,
    targets: Vec<Vec<f64>>,
    max_batch: Option<usize>,
}

/// Antialiased disk of radius `radius * size` centred in a white square.
pub fn disk_target(size: usize, radius: f64, color: [f64; 3]) -> Vec<f64> {
    const SS: usize = 4;
    let c = size as f64 / 2.0;
    let r = radius * size as f64;
    let mut img = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let y = row as f64 + (sy as f64 + 0.5) / SS as f64 - c;
                    let x = col as f64 + (sx as f64 + 0.5) / SS as f64 - c;
                    if x * x + y * y <= r * r {
                        cover += 1.0;
                    }
                }
            }
            let a = cover / (SS * SS) as f64;
            img.extend(color.iter().map(|&k| a * k + (1.0 - a)));
        }
    }
    img
}

/// Deterministic colour for a prompt, kept away from white.
pub fn prompt_color(prompt: &str) -> [f64; 3] {
    let h = rng::mix(0x70f, &prompt.bytes().map(u64::from).collect::<Vec<_>>());
    [0, 1, 2].map(|i| 0.1 + 0.6 * ((h >> (i * 16)) & 0xffff) as f64 / 65535.0)
}

impl ToyProvider {
    pub fn new(model_id: impl Into<String>, resolution: (usize, usize)) -> Self {
        Self {
            model_id: model_id.into(),
            resolution,
            prompts: Vec::new(),
            targets: Vec::new(),
            max_batch: None,
        }
    }

    /// One disk target per prompt, coloured by [`prompt_color`].
    pub fn with_disk_prompts(resolution: usize, prompts: &[&str]) -> Self {
        Self::disk_prompts_for("toy", resolution, prompts)
    }

    pub fn disk_prompts_for(model_id: &str, resolution: usize, prompts: &[&str]) -> Self {
        let mut p = Self::new(model_id, (resolution, resolution));
        for prompt in prompts {
            p = p
                .with_target(prompt, disk_target(resolution, TOY_DISK_RADIUS, prompt_color(prompt)))
                .expect("disk target has the provider resolution");
        }
        p
    }

    pub fn with_target(mut self, prompt: &str, target: Vec<f64>) -> Result<Self, GuidanceError> {
        let (h, w) = self.resolution;
        if target.len() != h * w * 3 {
            return Err(GuidanceError::Config(format!(
                "target has {} values, expected {h}x{w}x3",
                target.len()
            )));
        }
        if self.prompts.len() == TOY_EMBED_DIM {
            return Err(GuidanceError::Config(format!("toy provider holds at most {TOY_EMBED_DIM} prompts")));
        }
        self.prompts.push(prompt.to_string());
        self.targets.push(target);
        Ok(self)
    }

    pub fn with_max_batch(mut self, max: usize) -> Self {
        self.max_batch = Some(max);
        self
    }

    pub fn target(&self, prompt: &str) -> Option<&[f64]> {
        let i = self.prompts.iter().position(|p| p == prompt)?;
        Some(&self.targets[i])
    }

    fn target_for(&self, text: &TextEmbedding) -> Result<&[f64], GuidanceError> {
        let best = (0..self.targets.len())
            .max_by(|&a, &b| text.vector[a].total_cmp(&text.vector[b]).then(b.cmp(&a)))
            .ok_or_else(|| GuidanceError::Config("toy provider has no targets".into()))?;
        Ok(&self.targets[best])
    }
}

impl GuidanceProvider for ToyProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_batch(&self) -> Option<usize> {
        self.max_batch
    }

    fn text_embed(&self, prompt: &str) -> Result<TextEmbedding, GuidanceError> {
        if prompt.is_empty() {
            return Err(GuidanceError::EmptyPrompt);
        }
        let mut vector = vec![0.0; TOY_EMBED_DIM];
        match self.prompts.iter().position(|p| p == prompt) {
            Some(i) => vector[i] = 1.0,
            None => {
                let bytes: Vec<u64> = prompt.bytes().map(u64::from).collect();
                for (k, v) in vector.iter_mut().enumerate() {
                    let h = rng::mix(k as u64, &bytes);
                    *v = (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                }
                let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                vector.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(TextEmbedding {
            model_id: self.model_id.clone(),
            vector,
        })
    }

    fn score_with_grad(
        &self,
        images: &ImageBatch,
        text: &TextEmbedding,
    ) -> Result<GuidanceResponse, GuidanceError> {
        images.check(self.max_batch)?;
        if text.vector.len() != TOY_EMBED_DIM {
            return Err(GuidanceError::Protocol(format!(
                "text vector has dimension {}, expected {TOY_EMBED_DIM}",
                text.vector.len()
            )));
        }
        let target = self.target_for(text)?;
        let [b, h, w, _] = images.shape;
        let resize = Resize::new((h, w), self.resolution);
        let n = (self.resolution.0 * self.resolution.1 * 3) as f64;
        let mut scores = Vec::with_capacity(b);
        let mut grads = Vec::with_capacity(images.data.len());
        for img in images.data.chunks(h * w * 3) {
            let small = resize.forward(img);
            let diff: Vec<f64> = small.iter().zip(target).map(|(a, t)| a - t).collect();
            let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
            scores.push(1.0 - 2.0 * mse);
            let d_small: Vec<f64> = diff.iter().map(|d| -4.0 * d / n).collect();
            grads.extend(resize.adjoint(&d_small));
        }
        Ok(GuidanceResponse {
            scores,
            grads,
            shape: images.shape,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_adjoint() {
        let r = Resize::new((3, 4), (3, 4));
        let img: Vec<f64> = (0..36).map(|i| i as f64).collect();
        assert_eq!(r.forward(&img), img);
        // <R x, y> == <x, R^T y>
        let r = Resize::new((5, 7), (3, 3));
        let x: Vec<f64> = (0..105).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..27).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = r.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(r.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn score_endpoints() {
        let p = ToyProvider::new("toy", (2, 2)).with_target("black", vec![0.0; 12]).unwrap();
        let t = p.text_embed("black").unwrap();
        let same = ImageBatch::new([1, 2, 2, 3], vec![0.0; 12]).unwrap();
        let far = ImageBatch::new([1, 2, 2, 3], vec![1.0; 12]).unwrap();
        let r = p.score_with_grad(&same, &t).unwrap();
        assert_eq!(r.scores[0], 1.0);
        assert!(r.grads.iter().all(|&g| g == 0.0));
        assert_eq!(p.score_with_grad(&far, &t).unwrap().scores[0], -1.0);
    }

    #[test]
    fn disk_is_white_outside() {
        let d = disk_target(16, 0.3, [0.2, 0.3, 0.4]);
        assert_eq!(&d[..3], &[1.0, 1.0, 1.0]);
        let centre = (8 * 16 + 8) * 3;
        assert!((d[centre] - 0.2).abs() < 1e-12);
    }
}
