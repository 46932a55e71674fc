//! Optimizable voxel scene: explicit density/color grids, or MLPs evaluated
//! over a fixed positional-encoding grid.
//!
//! Density is post-activated: raw values are trilinearly interpolated first,
//! then shifted by the shared `act_bias` and passed through softplus, and the
//! result is turned into a per-sample opacity `1 - exp(-sigma * delta)`.

mod checkpoint;
mod encoding;
mod grid;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_VERSION, MAGIC};
pub use encoding::{positional_encode, PE_BANDS, PE_CHANNELS};
pub use grid::{Aabb, GridSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error("cannot shrink grid from {from} to {to} voxels")]
    Shrink { from: usize, to: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    NotCheckpoint,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensors do not match a {kind} model: {detail}")]
    KindMismatch { kind: ModelKind, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Explicit,
    Implicit,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Explicit => "explicit",
            ModelKind::Implicit => "implicit",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(ModelKind::Explicit),
            "implicit" => Ok(ModelKind::Implicit),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Softplus shift giving opacity `alpha` per step of length `delta` when the
/// raw density is zero.
pub fn initial_act_bias(alpha: f64, delta: f64) -> f64 {
    let sigma = -(1.0 - alpha).ln() / delta;
    // inverse softplus
    sigma.exp_m1().ln()
}

pub const HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[in, out]`
    pub weight: Tensor<F>,
    /// `[out]`
    pub bias: Tensor<F>,
}

/// Three affine layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
}

impl<F: Real> Mlp<F> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Linear {
                    weight: Tensor::from_fn([w[0], w[1]], |_| F::of(rng.gen_range(-bound..bound))),
                    bias: Tensor::zeros([w[1]]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeroed(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros([w[0], w[1]]),
                bias: Tensor::zeros([w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.numel())
    }

    fn forward(&self, g: &mut Graph<F>, input: Var, params: &[Var]) -> Result<Var, TensorError> {
        let mut h = input;
        let n = self.layers.len();
        for (i, pair) in params.chunks(2).enumerate() {
            let z = g.matmul(h, pair[0])?;
            h = g.add(z, pair[1])?;
            if i + 1 < n {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitField<F> {
    pub spec: GridSpec,
    /// Raw pre-activation density, `[1, Nx, Ny, Nz]`.
    pub density: Tensor<F>,
    /// Raw pre-sigmoid color, `[3, Nx, Ny, Nz]`.
    pub color: Tensor<F>,
    /// Shared softplus shift, scalar.
    pub act_bias: Tensor<F>,
}

impl<F: Real> ExplicitField<F> {
    /// Zero raw density and color (mid-gray) with `act_bias` chosen so every
    /// sample starts at opacity `alpha_init` for step length `delta`.
    pub fn new(spec: GridSpec, alpha_init: f64, delta: f64) -> Self {
        Self {
            density: Tensor::zeros(spec.grid_shape(1)),
            color: Tensor::zeros(spec.grid_shape(3)),
            act_bias: Tensor::scalar(F::of(initial_act_bias(alpha_init, delta))),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitField<F> {
    pub spec: GridSpec,
    /// Fixed encoding of every vertex, `[Nx * Ny * Nz, 63]`.
    pub pe_grid: Tensor<F>,
    pub density_mlp: Mlp<F>,
    pub color_mlp: Mlp<F>,
    pub act_bias: Tensor<F>,
}

/// Encodes every vertex of `spec` in storage order.
pub fn build_pe_grid<F: Real>(spec: &GridSpec) -> Tensor<F> {
    let mut data = Vec::with_capacity(spec.vertex_count() * PE_CHANNELS);
    for v in spec.vertices() {
        data.extend(positional_encode(spec.vertex_normalized(v)).iter().map(|&x| F::of(x)));
    }
    Tensor::new([spec.vertex_count(), PE_CHANNELS], data).expect("pe grid shape")
}

impl<F: Real> ImplicitField<F> {
    pub fn new(spec: GridSpec, alpha_init: f64, delta: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0, Stream::Init, 0);
        Self {
            pe_grid: build_pe_grid(&spec),
            density_mlp: Mlp::new(&[PE_CHANNELS, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], &mut rng),
            color_mlp: Mlp::new(&[PE_CHANNELS, HIDDEN_WIDTH, HIDDEN_WIDTH, 3], &mut rng),
            act_bias: Tensor::scalar(F::of(initial_act_bias(alpha_init, delta))),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelField<F> {
    Explicit(ExplicitField<F>),
    Implicit(ImplicitField<F>),
}

/// Graph handles for one optimization step.
#[derive(Debug, Clone)]
pub struct BoundField {
    pub spec: GridSpec,
    /// Raw density grid `[1, Nx, Ny, Nz]` (materialized for implicit fields).
    pub density: Var,
    /// Raw color grid `[3, Nx, Ny, Nz]`.
    pub color: Var,
    pub act_bias: Var,
    /// Trainable leaves, in [`VoxelField::params`] order.
    pub params: Vec<Var>,
}

impl<F: Real> VoxelField<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            VoxelField::Explicit(_) => ModelKind::Explicit,
            VoxelField::Implicit(_) => ModelKind::Implicit,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        match self {
            VoxelField::Explicit(f) => &f.spec,
            VoxelField::Implicit(f) => &f.spec,
        }
    }

    /// Names of the trainable tensors in their fixed order.
    pub fn param_names(kind: ModelKind) -> Vec<String> {
        match kind {
            ModelKind::Explicit => vec!["density".into(), "color".into(), "act_bias".into()],
            ModelKind::Implicit => {
                let mut names = vec!["act_bias".to_string()];
                for mlp in ["density_mlp", "color_mlp"] {
                    for layer in 0..3 {
                        names.push(format!("{mlp}.{layer}.weight"));
                        names.push(format!("{mlp}.{layer}.bias"));
                    }
                }
                names
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let names = Self::param_names(self.kind());
        let tensors: Vec<&Tensor<F>> = match self {
            VoxelField::Explicit(f) => vec![&f.density, &f.color, &f.act_bias],
            VoxelField::Implicit(f) => {
                let mut v = vec![&f.act_bias];
                for mlp in [&f.density_mlp, &f.color_mlp] {
                    for l in &mlp.layers {
                        v.push(&l.weight);
                        v.push(&l.bias);
                    }
                }
                v
            }
        };
        names.into_iter().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let names = Self::param_names(self.kind());
        let tensors: Vec<&mut Tensor<F>> = match self {
            VoxelField::Explicit(f) => vec![&mut f.density, &mut f.color, &mut f.act_bias],
            VoxelField::Implicit(f) => {
                let mut v = vec![&mut f.act_bias];
                for mlp in [&mut f.density_mlp, &mut f.color_mlp] {
                    for l in mlp.layers.iter_mut() {
                        v.push(&mut l.weight);
                        v.push(&mut l.bias);
                    }
                }
                v
            }
        };
        names.into_iter().zip(tensors).collect()
    }

    /// Puts the trainable tensors on `g` and, for implicit fields, runs both
    /// MLPs over the whole encoding grid.
    pub fn bind(&self, g: &mut Graph<F>) -> Result<BoundField, FieldError> {
        let params: Vec<Var> = self.params().into_iter().map(|(_, t)| g.param(t.clone())).collect();
        self.bind_with(g, params)
    }

    /// Like [`bind`](Self::bind) but with caller-supplied leaves, one per
    /// entry of [`params`](Self::params) and of the same shapes.
    pub fn bind_with(&self, g: &mut Graph<F>, params: Vec<Var>) -> Result<BoundField, FieldError> {
        let own = self.params();
        if params.len() != own.len() || own.iter().zip(&params).any(|((_, t), &v)| t.shape() != g.shape(v)) {
            return Err(FieldError::InvalidSpec("bound leaves do not match the field parameters".into()));
        }
        let spec = *self.spec();
        match self {
            VoxelField::Explicit(_) => Ok(BoundField {
                spec,
                density: params[0],
                color: params[1],
                act_bias: params[2],
                params,
            }),
            VoxelField::Implicit(f) => {
                let (density, color) = materialize_with(f, g, &params)?;
                Ok(BoundField {
                    spec,
                    density,
                    color,
                    act_bias: params[0],
                    params,
                })
            }
        }
    }

    /// Doubles (or otherwise grows) the grid. Explicit grids are trilinearly
    /// resampled; implicit fields only rebuild their encoding grid. Returns
    /// the names of parameters whose shape changed.
    pub fn progressive_scale(&mut self, new_spec: GridSpec) -> Result<Vec<String>, FieldError> {
        let old = *self.spec();
        if new_spec.vertex_count() < old.vertex_count() {
            return Err(FieldError::Shrink {
                from: old.vertex_count(),
                to: new_spec.vertex_count(),
            });
        }
        match self {
            VoxelField::Explicit(f) => {
                f.density = resample_grid(&f.density, &old, &new_spec)?;
                f.color = resample_grid(&f.color, &old, &new_spec)?;
                f.spec = new_spec;
                Ok(vec!["density".into(), "color".into()])
            }
            VoxelField::Implicit(f) => {
                f.pe_grid = build_pe_grid(&new_spec);
                f.spec = new_spec;
                Ok(Vec::new())
            }
        }
    }

    pub fn cast<G: Real>(&self) -> VoxelField<G> {
        match self {
            VoxelField::Explicit(f) => VoxelField::Explicit(ExplicitField {
                spec: f.spec,
                density: f.density.cast(),
                color: f.color.cast(),
                act_bias: f.act_bias.cast(),
            }),
            VoxelField::Implicit(f) => {
                let cast_mlp = |m: &Mlp<F>| Mlp {
                    layers: m
                        .layers
                        .iter()
                        .map(|l| Linear {
                            weight: l.weight.cast(),
                            bias: l.bias.cast(),
                        })
                        .collect(),
                };
                VoxelField::Implicit(ImplicitField {
                    spec: f.spec,
                    pe_grid: f.pe_grid.cast(),
                    density_mlp: cast_mlp(&f.density_mlp),
                    color_mlp: cast_mlp(&f.color_mlp),
                    act_bias: f.act_bias.cast(),
                })
            }
        }
    }
}

fn materialize_with<F: Real>(
    f: &ImplicitField<F>,
    g: &mut Graph<F>,
    params: &[Var],
) -> Result<(Var, Var), FieldError> {
    let pe = g.constant(f.pe_grid.clone());
    let d = f.density_mlp.forward(g, pe, &params[1..7])?;
    let c = f.color_mlp.forward(g, pe, &params[7..13])?;
    let density = g.reshape(d, f.spec.grid_shape(1))?;
    let ct = g.transpose(c)?;
    let color = g.reshape(ct, f.spec.grid_shape(3))?;
    Ok((density, color))
}

impl<F: Real> ImplicitField<F> {
    /// Evaluates both MLPs at every vertex, giving the raw density and color
    /// grids the renderer interpolates.
    pub fn materialize(&self) -> Result<(Tensor<F>, Tensor<F>), FieldError> {
        let mut g = Graph::new();
        let field = VoxelField::Implicit(self.clone());
        let params: Vec<Var> = field.params().into_iter().map(|(_, t)| g.constant(t.clone())).collect();
        let (d, c) = materialize_with(self, &mut g, &params)?;
        Ok((g.value(d).clone(), g.value(c).clone()))
    }
}

/// Trilinear resample of a `[C, ...]` grid from `old` onto the vertices of `new`.
pub fn resample_grid<F: Real>(
    grid: &Tensor<F>,
    old: &GridSpec,
    new: &GridSpec,
) -> Result<Tensor<F>, FieldError> {
    let channels = grid.shape()[0];
    let coords: Vec<[f64; 3]> = new
        .vertices()
        .map(|v| {
            let idx = old.world_to_index(new.vertex_world(v));
            let hi = old.resolution.map(|n| (n - 1) as f64);
            [0, 1, 2].map(|i| idx[i].clamp(0.0, hi[i]))
        })
        .collect();
    let mut g = Graph::new();
    let src = g.constant(grid.clone());
    let pc = g.trilinear(src, &coords)?; // [P, C]
    let t = g.transpose(pc)?;
    let out = g.reshape(t, new.grid_shape(channels))?;
    Ok(g.value(out).clone())
}

impl BoundField {
    pub fn world_coords(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.spec.world_to_index(p)).collect()
    }

    /// Post-activated opacity and sigmoid color at world points.
    ///
    /// Returns `alpha: [P]` and `color: [P, 3]`. Points outside the bounds
    /// are empty space (alpha = 0).
    pub fn query<F: Real>(
        &self,
        g: &mut Graph<F>,
        points: &[[f64; 3]],
        delta: f64,
    ) -> Result<(Var, Var), FieldError> {
        if !(delta > 0.0) {
            return Err(FieldError::InvalidSpec(format!("step length {delta} must be positive")));
        }
        let coords = self.world_coords(points);
        let n = points.len();
        let raw = g.trilinear(self.density, &coords)?;
        let raw = g.reshape(raw, [n])?;
        let alpha = self.alpha_from_raw(g, raw, delta)?;
        let inside: Vec<F> = coords
            .iter()
            .map(|u| {
                let ok = (0..3).all(|i| {
                    u[i] >= -1e-9 && u[i] <= (self.spec.resolution[i] - 1) as f64 + 1e-9
                });
                if ok {
                    F::one()
                } else {
                    F::zero()
                }
            })
            .collect();
        let alpha = if inside.iter().all(|x| *x == F::one()) {
            alpha
        } else {
            let mask = g.constant(Tensor::new([n], inside)?);
            g.mul(alpha, mask)?
        };
        let raw_c = g.trilinear(self.color, &coords)?;
        let color = g.sigmoid(raw_c)?;
        Ok((alpha, color))
    }

    /// `1 - exp(-softplus(raw + act_bias) * delta)`, elementwise.
    pub fn alpha_from_raw<F: Real>(
        &self,
        g: &mut Graph<F>,
        raw: Var,
        delta: f64,
    ) -> Result<Var, TensorError> {
        let shifted = g.add(raw, self.act_bias)?;
        let sigma = g.softplus(shifted)?;
        let neg = g.mul_scalar(sigma, -delta)?;
        let trans = g.exp(neg)?;
        g.rsub_scalar(1.0, trans)
    }

    /// Post-activated opacity at every grid vertex, `[1, Nx, Ny, Nz]`.
    pub fn vertex_alpha<F: Real>(&self, g: &mut Graph<F>, delta: f64) -> Result<Var, TensorError> {
        self.alpha_from_raw(g, self.density, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::with_resolution(Aabb::default(), [n; 3], n * n * n).unwrap()
    }

    #[test]
    fn initial_bias_gives_requested_alpha() {
        let b = initial_act_bias(1e-3, 0.04);
        let sigma = (b.exp()).ln_1p();
        let alpha = 1.0 - (-sigma * 0.04).exp();
        assert!((alpha - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn very_negative_density_is_empty() {
        let mut f = ExplicitField::<f64>::new(spec(3), 1e-3, 0.1);
        f.density = Tensor::full(f.spec.grid_shape(1), -40.0);
        f.act_bias = Tensor::scalar(0.0);
        let field = VoxelField::Explicit(f);
        let mut g = Graph::new();
        let b = field.bind(&mut g).unwrap();
        let (a, _) = b.query(&mut g, &[[0.1, 0.2, 0.3]], 0.5).unwrap();
        assert!(g.value(a).data()[0].abs() < 1e-12);
    }

    #[test]
    fn alpha_closed_form() {
        // softplus(raw) = 1 when raw = ln(e - 1)
        let mut f = ExplicitField::<f64>::new(spec(3), 1e-3, 0.1);
        f.density = Tensor::full(f.spec.grid_shape(1), (1f64.exp() - 1.0).ln());
        f.act_bias = Tensor::scalar(0.0);
        let field = VoxelField::Explicit(f);
        let mut g = Graph::new();
        let b = field.bind(&mut g).unwrap();
        let (a, c) = b.query(&mut g, &[[0.0, 0.0, 0.0], [0.7, -0.2, 1.0]], 0.5).unwrap();
        for &x in g.value(a).data() {
            assert!((x - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
            assert!((x - 0.39347).abs() < 1e-5);
        }
        // raw color 0 -> gray
        assert!(g.value(c).data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn outside_points_are_empty() {
        let field = VoxelField::Explicit(ExplicitField::<f64>::new(spec(3), 0.5, 0.1));
        let mut g = Graph::new();
        let b = field.bind(&mut g).unwrap();
        let (a, _) = b.query(&mut g, &[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 0.1).unwrap();
        let v = g.value(a).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_mlp_materializes_uniform_zero() {
        let mut f = ImplicitField::<f64>::new(spec(4), 1e-3, 0.1, 0);
        f.density_mlp = Mlp::zeroed(&[PE_CHANNELS, HIDDEN_WIDTH, HIDDEN_WIDTH, 1]);
        f.color_mlp = Mlp::zeroed(&[PE_CHANNELS, HIDDEN_WIDTH, HIDDEN_WIDTH, 3]);
        let (d, c) = f.materialize().unwrap();
        assert_eq!(d.shape(), &[1, 4, 4, 4]);
        assert_eq!(c.shape(), &[3, 4, 4, 4]);
        assert!(d.data().iter().chain(c.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn shrinking_is_rejected() {
        let mut field = VoxelField::Explicit(ExplicitField::<f32>::new(spec(6), 1e-3, 0.1));
        assert!(matches!(
            field.progressive_scale(spec(4)),
            Err(FieldError::Shrink { .. })
        ));
    }

    #[test]
    fn constant_grid_resamples_to_constant() {
        let mut f = ExplicitField::<f64>::new(spec(3), 1e-3, 0.1);
        f.density = Tensor::full(f.spec.grid_shape(1), 0.75);
        f.color = Tensor::full(f.spec.grid_shape(3), -0.25);
        let mut field = VoxelField::Explicit(f);
        field.progressive_scale(spec(7)).unwrap();
        let VoxelField::Explicit(f) = &field else { unreachable!() };
        assert_eq!(f.density.shape(), &[1, 7, 7, 7]);
        assert!(f.density.data().iter().all(|&x| (x - 0.75).abs() < 1e-15));
        assert!(f.color.data().iter().all(|&x| (x + 0.25).abs() < 1e-15));
    }

    #[test]
    fn implicit_scaling_keeps_weights() {
        let mut field = VoxelField::Implicit(ImplicitField::<f32>::new(spec(3), 1e-3, 0.1, 4));
        let before: Vec<Tensor<f32>> = field.params().into_iter().map(|(_, t)| t.clone()).collect();
        let changed = field.progressive_scale(spec(5)).unwrap();
        assert!(changed.is_empty());
        let after: Vec<Tensor<f32>> = field.params().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
        let VoxelField::Implicit(f) = &field else { unreachable!() };
        assert_eq!(f.pe_grid.shape(), &[125, 63]);
    }
}
