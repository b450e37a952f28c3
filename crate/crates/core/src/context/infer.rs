use std::collections::BTreeMap;

use crate::context::GroupId;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Var};
use crate::params::{Bound, Linear, ParamId, ParamStore};

pub const DEFAULT_EMA_LAMBDA: f64 = 0.99;

/// Average of the given rows of `source` (every patch of every member
/// image), as a `[1 × d]` token.
///
/// All member images contribute the same number of patches, so this is
/// the mean over images of each image's patch mean.
pub fn infer_context_mean(g: &mut Graph, source: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Empty("context group has no member patches".into()));
    }
    let members = g.gather_rows(source, rows)?;
    let mean = g.mean_axes(members, &[0])?;
    let d = g.value(mean).len();
    g.reshape(mean, &[1, d])
}

/// `b + W·t_mean`, optionally cutting the gradient into `t_mean`.
pub fn apply_linear_head(
    g: &mut Graph,
    p: &Bound,
    t_mean: Var,
    head: &Linear,
    detach: bool,
) -> Result<Var> {
    let input = if detach { g.stop_gradient(t_mean)? } else { t_mean };
    head.apply(g, p, input)
}

/// Trainable token per training group.
#[derive(Clone, Debug)]
pub struct OracleTable {
    pub table: ParamId,
    pub rows: BTreeMap<GroupId, usize>,
}

impl OracleTable {
    pub fn new(store: &mut ParamStore, groups: &[GroupId], dim: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("oracle context needs at least one training group".into()));
        }
        let rows: BTreeMap<GroupId, usize> = groups.iter().enumerate().map(|(i, g)| (*g, i)).collect();
        if rows.len() != groups.len() {
            return Err(Error::Config("duplicate training group ids".into()));
        }
        let table = store.add_zeros("context.oracle", &[groups.len(), dim], false);
        Ok(Self { table, rows })
    }
}

pub fn oracle_lookup(g: &mut Graph, p: &Bound, table: &OracleTable, group: GroupId) -> Result<Var> {
    let row = *table.rows.get(&group).ok_or(Error::UnknownContext(group.0))?;
    g.gather_rows(p[table.table], &[row])
}

/// Per-group moving averages of batch patch means.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub lambda: f64,
    pub values: BTreeMap<GroupId, Vec<f64>>,
}

impl EmaState {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            values: BTreeMap::new(),
        })
    }

    pub fn get(&self, group: GroupId) -> Option<&[f64]> {
        self.values.get(&group).map(Vec::as_slice)
    }

    /// `state ← λ·state + (1−λ)·batch_mean`; an absent state starts at
    /// `batch_mean`.
    pub fn update(&mut self, group: GroupId, batch_mean: &[f64]) -> Result<()> {
        let next = ema_update(self.get(group), batch_mean, self.lambda)?;
        self.values.insert(group, next);
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "ema lambda must lie in (0, 1), got {lambda}"
        )))
    }
}

pub fn ema_update(state: Option<&[f64]>, batch_mean: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    match state {
        None => Ok(batch_mean.to_vec()),
        Some(s) if s.len() != batch_mean.len() => Err(Error::shape(
            "ema_update",
            format!("state {} vs mean {}", s.len(), batch_mean.len()),
        )),
        Some(s) => Ok(s
            .iter()
            .zip(batch_mean)
            .map(|(s, m)| lambda * s + (1.0 - lambda) * m)
            .collect()),
    }
}

/// Perceptron with two residual ReLU hidden layers and a linear output.
#[derive(Clone, Copy, Debug)]
pub struct SetMlp {
    pub hidden: [Linear; 2],
    pub out: Linear,
}

impl SetMlp {
    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.apply(g, p, h)?;
            let z = g.relu(z)?;
            h = g.add(h, z)?;
        }
        self.out.apply(g, p, h)
    }
}

/// `ρ(Σ φ(t_i))` over a set of patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct DeepSets {
    pub phi: SetMlp,
    pub rho: SetMlp,
}

impl DeepSets {
    /// Random hidden layers; `ρ`'s output layer starts at zero so the
    /// initial context token is zero.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Result<Self> {
        let mlp = |store: &mut ParamStore, part: &str, zero_out: bool| -> Result<SetMlp> {
            let hidden = [
                Linear::new(store, &format!("{name}.{part}.hidden0"), dim, dim, seed)?,
                Linear::new(store, &format!("{name}.{part}.hidden1"), dim, dim, seed)?,
            ];
            let out = if zero_out {
                Linear::zeros(store, &format!("{name}.{part}.out"), dim, dim)
            } else {
                Linear::new(store, &format!("{name}.{part}.out"), dim, dim, seed)?
            };
            Ok(SetMlp { hidden, out })
        };
        let phi = mlp(store, "phi", false)?;
        let rho = mlp(store, "rho", true)?;
        Ok(Self { phi, rho })
    }
}

pub fn deep_sets_infer(
    g: &mut Graph,
    p: &Bound,
    net: &DeepSets,
    source: Var,
    rows: &[usize],
    detach: bool,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Empty("context group has no member patches".into()));
    }
    let members = g.gather_rows(source, rows)?;
    let members = if detach { g.stop_gradient(members)? } else { members };
    let encoded = net.phi.apply(g, p, members)?;
    let pooled = g.sum_axes(encoded, &[0])?;
    let d = g.value(pooled).len();
    let pooled = g.reshape(pooled, &[1, d])?;
    net.rho.apply(g, p, pooled)
}

/// `k` draws with replacement from `pool`, deterministic in `seed`.
pub fn sample_context_patches(pool: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample at least one context patch".into()));
    }
    if pool.is_empty() {
        return Err(Error::Empty("no patches to sample context from".into()));
    }
    let mut rng = Rng::derive(seed, "context_patches", pool.len() as u64);
    Ok((0..k).map(|_| pool[rng.below(pool.len())]).collect())
}
