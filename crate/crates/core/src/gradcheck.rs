//! Central finite-difference checks for graph-built scalar functions.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it audits.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Max-norm relative error: `max|a - n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(DENOM_FLOOR, f64::max);
    diff / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub checks: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.rel_error < tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Largest error among checks whose name starts with `prefix`.
    pub fn group_max(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Numeric gradient of `f` with respect to each entry of `inputs[which]`.
pub fn numeric_gradient(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Tensor> {
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(inputs[which].shape().to_vec(), out)
}

/// Compares backward-pass gradients against central differences for every
/// named input. `build` must return a scalar node. Perturbations run in
/// parallel; results do not depend on the thread count.
pub fn check<F>(named: &[(String, Tensor)], step: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let inputs: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };
    let jobs: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let numeric = jobs
        .par_iter()
        .map_init(
            || inputs.clone(),
            |work, &(i, j)| {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + step;
                let plus = eval(work);
                work[i].data_mut()[j] = orig - step;
                let minus = eval(work);
                work[i].data_mut()[j] = orig;
                Ok((plus? - minus?) / (2.0 * step))
            },
        )
        .collect::<Result<Vec<f64>>>()?;

    let mut checks = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (i, (name, t)) in named.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t);
        let n = &numeric[offset..offset + t.len()];
        offset += t.len();
        checks.push(TensorCheck {
            name: name.clone(),
            entries: t.len(),
            rel_error: relative_error(analytic.data(), n),
        });
    }
    Ok(GradReport { checks })
}
