use std::rc::Rc;

use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    AddScalar(f64),
    MulScalar(f64),
    Clamp(f64, f64),
    MinScalar(f64),
}

/// Precomputed trilinear cell for one query point.
#[derive(Debug, Clone, Copy)]
struct TriCell {
    base: [usize; 3],
    frac: [f64; 3],
    valid: bool,
}

/// Precomputed bilinear footprint for one output pixel.
#[derive(Debug, Clone, Copy)]
struct BiCell {
    // (row, col) of the top-left neighbour; may be -1 when partially outside
    base: [i64; 2],
    frac: [f64; 2],
}

enum Op<F> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Sum(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    ExclusiveCumprod(Var),
    Trilinear {
        grid: Var,
        cells: Vec<TriCell>,
    },
    Bilinear {
        image: Var,
        src: Vec<usize>,
        cells: Vec<BiCell>,
    },
    Gather {
        a: Var,
        index: Rc<Vec<u32>>,
    },
    External {
        a: Var,
        grad: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Sentinel in [`Graph::gather`] index maps producing a zero output.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Append-only record of primitive applications.
///
/// The graph is never consumed by [`Graph::gradients`]; the same record may be
/// differentiated any number of times, with respect to any root.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    kink_trace: Option<u64>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + nd - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index of a broadcast together with both input indices.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fnv_mix(hash: u64, value: u64) -> u64 {
    (hash ^ value).wrapping_mul(0x0000_0100_0000_01b3)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_trace: None,
        }
    }

    /// Enables recording of which side of every non-smooth point each element
    /// lands on. Used by the finite-difference oracle to detect kinks.
    pub fn trace_kinks(&mut self) {
        self.kink_trace = Some(0xcbf2_9ce4_8422_2325);
    }

    /// Hash of the branch taken by every clamp/min/relu element so far.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kink_trace
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise binary (numpy broadcasting) ------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let out_shape =
            broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
        if let BinaryKind::Div = kind {
            if let Some(z) = vb.data().iter().find(|x| x.is_zero()) {
                return Err(TensorError::Domain {
                    op: "div",
                    value: z.f64(),
                });
            }
        }
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (da, db) = (va.data(), vb.data());
        let data: Vec<F> = if va.shape() == vb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 && out_shape == va.shape() {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else if da.len() == 1 && out_shape == vb.shape() {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let mut out = vec![F::zero(); out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise division; any zero in the denominator is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ---- elementwise unary ---------------------------------------------

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let input = &self.node(a).value;
        if let UnaryKind::Log = kind {
            if let Some(bad) = input.data().iter().find(|x| **x <= F::zero() || x.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    value: bad.f64(),
                });
            }
        }
        if let UnaryKind::Clamp(lo, hi) = kind {
            if !(lo <= hi) {
                return Err(TensorError::Invalid {
                    op: "clamp",
                    msg: format!("lower bound {lo} exceeds upper bound {hi}"),
                });
            }
        }
        let data: Vec<F> = match kind {
            UnaryKind::Neg => input.data().iter().map(|&x| -x).collect(),
            UnaryKind::Exp => input.data().iter().map(|&x| x.exp()).collect(),
            UnaryKind::Log => input.data().iter().map(|&x| x.ln()).collect(),
            UnaryKind::Sigmoid => input
                .data()
                .iter()
                .map(|&x| F::of(sigmoid(x.f64())))
                .collect(),
            UnaryKind::Softplus => input
                .data()
                .iter()
                .map(|&x| F::of(softplus(x.f64())))
                .collect(),
            UnaryKind::Relu => input
                .data()
                .iter()
                .map(|&x| if x >= F::zero() { x } else { F::zero() })
                .collect(),
            UnaryKind::AddScalar(c) => {
                let c = F::of(c);
                input.data().iter().map(|&x| x + c).collect()
            }
            UnaryKind::MulScalar(c) => {
                let c = F::of(c);
                input.data().iter().map(|&x| x * c).collect()
            }
            UnaryKind::Clamp(lo, hi) => {
                let (lo, hi) = (F::of(lo), F::of(hi));
                input.data().iter().map(|&x| x.max(lo).min(hi)).collect()
            }
            UnaryKind::MinScalar(c) => {
                let c = F::of(c);
                input.data().iter().map(|&x| x.min(c)).collect()
            }
        };
        let mut trace = self.kink_trace;
        if let Some(mut h) = trace {
            let region = |x: F| -> u64 {
                match kind {
                    UnaryKind::Relu => (x >= F::zero()) as u64,
                    UnaryKind::Clamp(lo, hi) => {
                        if x < F::of(lo) {
                            0
                        } else if x < F::of(hi) {
                            1
                        } else {
                            2
                        }
                    }
                    UnaryKind::MinScalar(c) => (x < F::of(c)) as u64,
                    _ => 0,
                }
            };
            if matches!(
                kind,
                UnaryKind::Relu | UnaryKind::Clamp(..) | UnaryKind::MinScalar(_)
            ) {
                for &x in input.data() {
                    h = fnv_mix(h, region(x));
                }
                trace = Some(h);
            }
        }
        let value = Tensor::new(input.shape().to_vec(), data)?;
        self.kink_trace = trace;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary { kind, a }, rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; non-positive inputs are an error, so callers clamp first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 1 (right derivative).
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MulScalar(c), a)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    /// Clamp into `[lo, hi]`. Gradient passes for `lo <= x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// `min(x, c)`. Gradient passes for `x < c` only.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MinScalar(c), a)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self.shape(a).get(axis).ok_or_else(|| TensorError::Invalid {
            op: "mean_axis",
            msg: format!("axis {axis} out of range"),
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_axis",
                msg: "empty axis".into(),
            });
        }
        let s = self.sum_axis(a, axis, keepdim)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    // ---- linear algebra and layout --------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x.is_zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Exclusive cumulative product along the last axis:
    /// `[a, b, c] -> [1, a, ab]`.
    pub fn exclusive_cumprod(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "exclusive_cumprod",
            msg: "scalar input".into(),
        })?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        if n > 0 {
            for (row_in, row_out) in src.chunks(n).zip(out.chunks_mut(n)) {
                let mut acc = F::one();
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = acc;
                    acc = acc * x;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ExclusiveCumprod(a), rg))
    }

    // ---- gathers ---------------------------------------------------------

    /// Trilinear interpolation of a `[C, Nx, Ny, Nz]` grid at continuous
    /// index-space coordinates, producing `[P, C]`.
    ///
    /// Coordinates are constants (no gradient). Points outside
    /// `[0, N - 1]` on any axis (beyond a 1e-9 tolerance) read as zero.
    pub fn trilinear(&mut self, grid: Var, coords: &[[f64; 3]]) -> Result<Var> {
        let shape = self.shape(grid).to_vec();
        if shape.len() != 4 || shape[1..].iter().any(|&n| n == 0) {
            return Err(TensorError::Invalid {
                op: "trilinear",
                msg: format!("expected a [C, Nx, Ny, Nz] grid, got {shape:?}"),
            });
        }
        let (c, dims) = (shape[0], [shape[1], shape[2], shape[3]]);
        const TOL: f64 = 1e-9;
        let cells: Vec<TriCell> = coords
            .iter()
            .map(|p| {
                let mut cell = TriCell {
                    base: [0; 3],
                    frac: [0.0; 3],
                    valid: true,
                };
                for ax in 0..3 {
                    let hi = (dims[ax] - 1) as f64;
                    let u = p[ax];
                    if !(u >= -TOL && u <= hi + TOL) {
                        cell.valid = false;
                        return cell;
                    }
                    let u = u.clamp(0.0, hi);
                    if dims[ax] == 1 {
                        continue;
                    }
                    let b = (u.floor() as usize).min(dims[ax] - 2);
                    cell.base[ax] = b;
                    cell.frac[ax] = u - b as f64;
                }
                cell
            })
            .collect();
        let g = self.value(grid).data();
        let vol = dims[0] * dims[1] * dims[2];
        let mut out = vec![F::zero(); coords.len() * c];
        for (p, cell) in cells.iter().enumerate() {
            if !cell.valid {
                continue;
            }
            for_each_corner(cell, dims, |idx, w| {
                let w = F::of(w);
                for ch in 0..c {
                    out[p * c + ch] = out[p * c + ch] + w * g[ch * vol + idx];
                }
            });
        }
        let rg = self.rg(grid);
        Ok(self.push(
            Tensor::new([coords.len(), c], out)?,
            Op::Trilinear { grid, cells },
            rg,
        ))
    }

    /// Bilinear resampling of a `[B, H, W, C]` image batch.
    ///
    /// Output image `i` reads from input image `src[i]` at the pixel-space
    /// coordinates `coords[i * Ho * Wo + r * Wo + c] = (x, y)`, where pixel
    /// `(row, col)` has its centre at `(col, row)`. Neighbours outside the
    /// frame contribute zero. Output is `[src.len(), Ho, Wo, C]`.
    pub fn bilinear(
        &mut self,
        image: Var,
        src: &[usize],
        out_hw: (usize, usize),
        coords: &[[f64; 2]],
    ) -> Result<Var> {
        let shape = self.shape(image).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid {
                op: "bilinear",
                msg: format!("expected [B, H, W, C], got {shape:?}"),
            });
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = out_hw;
        if coords.len() != src.len() * ho * wo {
            return Err(TensorError::Invalid {
                op: "bilinear",
                msg: format!(
                    "{} coordinates for {} outputs of {ho}x{wo}",
                    coords.len(),
                    src.len()
                ),
            });
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= b) {
            return Err(TensorError::Invalid {
                op: "bilinear",
                msg: format!("source image {bad} out of range for batch {b}"),
            });
        }
        let cells: Vec<BiCell> = coords
            .iter()
            .map(|&[x, y]| {
                let (fx, fy) = (x.floor(), y.floor());
                BiCell {
                    base: [fy as i64, fx as i64],
                    frac: [y - fy, x - fx],
                }
            })
            .collect();
        let d = self.value(image).data();
        let mut out = vec![F::zero(); cells.len() * c];
        let per = ho * wo;
        for (i, cell) in cells.iter().enumerate() {
            let s = src[i / per];
            for_each_bilinear(cell, h, w, |r, col, wt| {
                let wt = F::of(wt);
                let base = ((s * h + r) * w + col) * c;
                for ch in 0..c {
                    out[i * c + ch] = out[i * c + ch] + wt * d[base + ch];
                }
            });
        }
        let rg = self.rg(image);
        Ok(self.push(
            Tensor::new([src.len(), ho, wo, c], out)?,
            Op::Bilinear {
                image,
                src: src.to_vec(),
                cells,
            },
            rg,
        ))
    }

    /// `out[i] = a.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<u32>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::DataLength {
                shape,
                len: index.len(),
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for &ix in index.iter() {
            if ix == GATHER_ZERO {
                out.push(F::zero());
            } else {
                let v = *d.get(ix as usize).ok_or_else(|| TensorError::Invalid {
                    op: "gather",
                    msg: format!("index {ix} out of range for {} elements", d.len()),
                })?;
                out.push(v);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { a, index }, rg))
    }

    /// A scalar whose value and vector-Jacobian product come from outside the
    /// graph: the forward value is `value`, and the backward pass adds
    /// `upstream * grad` to `a`.
    pub fn external(&mut self, a: Var, value: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "external",
                lhs: self.shape(a).to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(value), Op::External { a, grad }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode gradients of the scalar `root` with respect to `params`.
    ///
    /// Params the root does not depend on get zero gradients. Gradients of
    /// nodes with several consumers accumulate by summation.
    pub fn gradients(&self, root: Var, params: &[Var]) -> Result<Vec<Tensor<F>>> {
        self.gradients_seeded(&[(root, None)], params)
    }

    /// Like [`Graph::gradients`] but for a sum of roots, each optionally
    /// seeded with an explicit cotangent of its own shape.
    pub fn gradients_seeded(
        &self,
        roots: &[(Var, Option<Vec<F>>)],
        params: &[Var],
    ) -> Result<Vec<Tensor<F>>> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (root, seed) in roots {
            let n = self.value(*root).numel();
            let seed = match seed {
                Some(s) if s.len() == n => s.clone(),
                Some(s) => {
                    return Err(TensorError::ShapeMismatch {
                        op: "gradients",
                        lhs: self.shape(*root).to_vec(),
                        rhs: vec![s.len()],
                    })
                }
                None if n == 1 => vec![F::one()],
                None => return Err(TensorError::NotScalar(self.shape(*root).to_vec())),
            };
            accumulate(&mut grads, root.0, &seed);
            top = top.max(root.0);
        }
        for id in (0..=top).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(params
            .iter()
            .map(|p| {
                let v = self.value(*p);
                match &grads[p.0] {
                    Some(g) => Tensor::new(v.shape().to_vec(), g.clone()).expect("grad shape"),
                    None => Tensor::zeros(v.shape().to_vec()),
                }
            })
            .collect())
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => self.backward_binary(*kind, *a, *b, g, grads),
            Op::Unary { kind, a } => {
                if !self.rg(*a) {
                    return;
                }
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga = grad_buf(grads, a.0, x.len());
                match *kind {
                    UnaryKind::Neg => zip_acc(ga, g, |gi| -gi),
                    UnaryKind::Exp => {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + g[i] * y[i];
                        }
                    }
                    UnaryKind::Log => {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + g[i] / x[i];
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + g[i] * y[i] * (F::one() - y[i]);
                        }
                    }
                    UnaryKind::Softplus => {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + g[i] * F::of(sigmoid(x[i].f64()));
                        }
                    }
                    UnaryKind::Relu => {
                        for i in 0..ga.len() {
                            if x[i] >= F::zero() {
                                ga[i] = ga[i] + g[i];
                            }
                        }
                    }
                    UnaryKind::AddScalar(_) => zip_acc(ga, g, |gi| gi),
                    UnaryKind::MulScalar(c) => {
                        let c = F::of(c);
                        zip_acc(ga, g, |gi| gi * c)
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        let (lo, hi) = (F::of(lo), F::of(hi));
                        for i in 0..ga.len() {
                            if x[i] >= lo && x[i] < hi {
                                ga[i] = ga[i] + g[i];
                            }
                        }
                    }
                    UnaryKind::MinScalar(c) => {
                        let c = F::of(c);
                        for i in 0..ga.len() {
                            if x[i] < c {
                                ga[i] = ga[i] + g[i];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let ga = grad_buf(grads, a.0, self.value(*a).numel());
                    let g0 = g[0];
                    for v in ga.iter_mut() {
                        *v = *v + g0;
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                if self.rg(*a) {
                    let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                    let ga = grad_buf(grads, a.0, outer * n * inner);
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    // dA = G B^T
                    let ga = grad_buf(grads, a.0, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + grow[j] * brow[j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let gb = grad_buf(grads, b.0, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x.is_zero() {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d = *d + x * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    let ga = grad_buf(grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(grads, a.0, g);
                }
            }
            Op::Narrow { a, axis, start } => {
                if self.rg(*a) {
                    let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                    let len = node.value.shape()[*axis];
                    let ga = grad_buf(grads, a.0, outer * n * inner);
                    for o in 0..outer {
                        let dst = &mut ga[(o * n + start) * inner..(o * n + start + len) * inner];
                        let srcg = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(srcg) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.rg(p) {
                        let gp = grad_buf(grads, p.0, outer * n * inner);
                        for o in 0..outer {
                            let srcg = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gp[o * n * inner..(o + 1) * n * inner];
                            for (d, &s) in dst.iter_mut().zip(srcg) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::ExclusiveCumprod(a) => {
                if self.rg(*a) {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let ga = grad_buf(grads, a.0, x.len());
                    if n == 0 {
                        return;
                    }
                    // d/dx_j = y_j * S_j with S_{n-1} = 0, S_j = g_{j+1} + x_{j+1} S_{j+1}
                    for r in 0..x.len() / n {
                        let off = r * n;
                        let mut s = F::zero();
                        for j in (0..n).rev() {
                            ga[off + j] = ga[off + j] + y[off + j] * s;
                            s = g[off + j] + x[off + j] * s;
                        }
                    }
                }
            }
            Op::Trilinear { grid, cells } => {
                if self.rg(*grid) {
                    let shape = self.shape(*grid);
                    let (c, dims) = (shape[0], [shape[1], shape[2], shape[3]]);
                    let vol = dims[0] * dims[1] * dims[2];
                    let gg = grad_buf(grads, grid.0, c * vol);
                    for (p, cell) in cells.iter().enumerate() {
                        if !cell.valid {
                            continue;
                        }
                        for_each_corner(cell, dims, |idx, w| {
                            let w = F::of(w);
                            for ch in 0..c {
                                gg[ch * vol + idx] = gg[ch * vol + idx] + w * g[p * c + ch];
                            }
                        });
                    }
                }
            }
            Op::Bilinear { image, src, cells } => {
                if self.rg(*image) {
                    let shape = self.shape(*image);
                    let (h, w, c) = (shape[1], shape[2], shape[3]);
                    let out_shape = node.value.shape();
                    let per = out_shape[1] * out_shape[2];
                    let gi = grad_buf(grads, image.0, self.value(*image).numel());
                    for (i, cell) in cells.iter().enumerate() {
                        let s = src[i / per];
                        for_each_bilinear(cell, h, w, |r, col, wt| {
                            let wt = F::of(wt);
                            let base = ((s * h + r) * w + col) * c;
                            for ch in 0..c {
                                gi[base + ch] = gi[base + ch] + wt * g[i * c + ch];
                            }
                        });
                    }
                }
            }
            Op::Gather { a, index } => {
                if self.rg(*a) {
                    let ga = grad_buf(grads, a.0, self.value(*a).numel());
                    for (i, &ix) in index.iter().enumerate() {
                        if ix != GATHER_ZERO {
                            ga[ix as usize] = ga[ix as usize] + g[i];
                        }
                    }
                }
            }
            Op::External { a, grad } => {
                if self.rg(*a) {
                    let g0 = g[0];
                    let ga = grad_buf(grads, a.0, grad.len());
                    for (d, &e) in ga.iter_mut().zip(grad) {
                        *d = *d + g0 * e;
                    }
                }
            }
        }
    }

    fn backward_binary(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape()).expect("checked in forward");
        let sa = broadcast_strides(va.shape(), &out_shape);
        let sb = broadcast_strides(vb.shape(), &out_shape);
        let (da, db) = (va.data(), vb.data());
        let same = va.shape() == vb.shape();
        // partials of the output w.r.t. each input, given (x, y)
        let pa = |_x: F, y: F| match kind {
            BinaryKind::Add | BinaryKind::Sub => F::one(),
            BinaryKind::Mul => y,
            BinaryKind::Div => F::one() / y,
        };
        let pb = |x: F, y: F| match kind {
            BinaryKind::Add => F::one(),
            BinaryKind::Sub => -F::one(),
            BinaryKind::Mul => x,
            BinaryKind::Div => -x / (y * y),
        };
        if self.rg(a) {
            let ga = grad_buf(grads, a.0, da.len());
            if same {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * pa(da[i], db[i]);
                }
            } else {
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                    ga[ia] = ga[ia] + g[o] * pa(da[ia], db[ib]);
                });
            }
        }
        if self.rg(b) {
            let gb = grad_buf(grads, b.0, db.len());
            if same {
                for i in 0..g.len() {
                    gb[i] = gb[i] + g[i] * pb(da[i], db[i]);
                }
            } else {
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                    gb[ib] = gb[ib] + g[o] * pb(da[ia], db[ib]);
                });
            }
        }
    }
}

fn grad_buf<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, len: usize) -> &mut Vec<F> {
    grads[id].get_or_insert_with(|| vec![F::zero(); len])
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, g: &[F]) {
    let buf = grad_buf(grads, id, g.len());
    for (d, &s) in buf.iter_mut().zip(g) {
        *d = *d + s;
    }
}

fn zip_acc<F: Real>(ga: &mut [F], g: &[F], f: impl Fn(F) -> F) {
    for i in 0..ga.len() {
        ga[i] = ga[i] + f(g[i]);
    }
}

#[inline]
fn for_each_corner(cell: &TriCell, dims: [usize; 3], mut f: impl FnMut(usize, f64)) {
    let [fx, fy, fz] = cell.frac;
    let [bx, by, bz] = cell.base;
    for dx in 0..2 {
        let wx = if dx == 0 { 1.0 - fx } else { fx };
        if wx == 0.0 || bx + dx >= dims[0] {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            if wy == 0.0 || by + dy >= dims[1] {
                continue;
            }
            for dz in 0..2 {
                let wz = if dz == 0 { 1.0 - fz } else { fz };
                if wz == 0.0 || bz + dz >= dims[2] {
                    continue;
                }
                let idx = ((bx + dx) * dims[1] + (by + dy)) * dims[2] + (bz + dz);
                f(idx, wx * wy * wz);
            }
        }
    }
}

#[inline]
fn for_each_bilinear(cell: &BiCell, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
    let [r0, c0] = cell.base;
    let [fy, fx] = cell.frac;
    for dr in 0..2i64 {
        let r = r0 + dr;
        let wr = if dr == 0 { 1.0 - fy } else { fy };
        if r < 0 || r >= h as i64 || wr == 0.0 {
            continue;
        }
        for dc in 0..2i64 {
            let c = c0 + dc;
            let wc = if dc == 0 { 1.0 - fx } else { fx };
            if c < 0 || c >= w as i64 || wc == 0.0 {
                continue;
            }
            f(r as usize, c as usize, wr * wc);
        }
    }
}
