//! Central finite-difference oracle for checking analytic gradients.

use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central difference half-step.
    pub eps: f64,
    /// Added to the denominator of the relative error.
    pub floor: f64,
    /// Restrict the check to these flat indices of `x`.
    pub indices: Option<Vec<usize>>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-12,
            indices: None,
        }
    }
}

impl FdOptions {
    pub fn eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_indices(mut self, indices: Vec<usize>) -> Self {
        self.indices = Some(indices);
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    /// max over checked components of |a - c| / (|a| + |c| + floor);
    /// infinite when any component is NaN.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components whose +eps and -eps evaluations took different branches of
    /// a clamp/min/relu; they are not differentiable there and are skipped.
    pub skipped: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the analytic gradient of the scalar `f(x)` against central
/// differences, component by component.
///
/// `f` builds its computation on a fresh graph each call, receiving `x` as a
/// trainable leaf.
pub fn finite_diff_check<Fun>(f: Fun, x: &Tensor<f64>, opts: &FdOptions) -> Result<FdReport>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |value: Tensor<f64>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new();
        g.trace_kinks();
        let v = g.param(value);
        let y = f(&mut g, v)?;
        Ok((g.item(y), g.kink_signature()))
    };

    let analytic = {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = f(&mut g, v)?;
        g.gradients(y, &[v])?.remove(0)
    };

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.numel()).collect(),
    };
    let mut report = FdReport::default();
    for i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.eps;
        let (fp, kp) = eval(plus)?;
        let (fm, km) = eval(minus)?;
        if kp != km {
            report.skipped.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * opts.eps);
        let a = analytic.data()[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + opts.floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
    }
    Ok(report)
}
