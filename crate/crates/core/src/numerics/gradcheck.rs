//! Central-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor, chosen
    /// with `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Replay the base point's `stop_gradient` outputs during the
    /// perturbed evaluations, so the differences only see the
    /// differentiable subgraph.
    pub freeze_detached: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords_per_param: None,
            seed: 0,
            freeze_detached: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, params: &[Tensor], frozen: Option<&[Tensor]>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = match frozen {
        Some(vals) => Graph::with_frozen_detached(vals.to_vec()),
        None => Graph::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidArgument("gradient check needs a scalar function".into()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` and returns the worst
/// relative error.
pub fn finite_diff_check<F>(params: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {}",
            opts.step
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let frozen = opts.freeze_detached.then(|| g.detached_values().to_vec());

    let mut rng = Rng::derive(opts.seed, "gradcheck", 0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let base = params[pi].data()[c];
            work[pi].data_mut()[c] = base + opts.step;
            let plus = eval_scalar(&f, &work, frozen.as_deref())?;
            work[pi].data_mut()[c] = base - opts.step;
            let minus = eval_scalar(&f, &work, frozen.as_deref())?;
            work[pi].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordError {
                    param: pi,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
