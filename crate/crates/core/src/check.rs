//! Finite-difference suites over every differentiable operation and over
//! the full model for every context kind.

use std::time::Instant;

use serde::Serialize;

use crate::context::{ContextKind, ContextViT, ForwardOptions, GroupId, GroupedBatch, Inference, KIND_NAMES};
use crate::error::Result;
use crate::numerics::{derive_seed, finite_diff_check, randn_seeded, GradCheckOptions, Graph, Rng, Tensor, Var};
use crate::params::Bound;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub seconds: f64,
}

/// The toy configuration used for full-model checks.
pub fn grad_check_config() -> ViTConfig {
    ViTConfig {
        image_h: 16,
        image_w: 16,
        channels: 3,
        patch: 4,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 4,
    }
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = randn_seeded(g.value(x).shape(), derive_seed(seed, "weights", 0), 1.0)?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn randn(shape: &[usize], seed: u64, label: &str) -> Result<Tensor> {
    randn_seeded(shape, derive_seed(seed, label, 0), 1.0)
}

/// Pushes values at least `margin` away from zero, keeping signs.
fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v += margin.copysign(*v));
    t
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases(seed: u64) -> Result<Vec<OpCase>> {
    let s = seed;
    let mut cases: Vec<OpCase> = Vec::new();
    cases.push((
        "matmul",
        vec![randn(&[3, 4], s, "a")?, randn(&[4, 5], s, "b")?],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "linear",
        vec![randn(&[2, 3, 4], s, "x")?, randn(&[4, 5], s, "w")?, randn(&[5], s, "b")?],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "add_sub_mul",
        vec![randn(&[3, 3], s, "a")?, randn(&[3, 3], s, "b")?],
        Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let y = g.mul(a, b)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "add_row_scale",
        vec![randn(&[4, 3], s, "x")?, randn(&[3], s, "r")?],
        Box::new(move |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.scale(y, -1.7)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "gelu",
        vec![randn(&[5, 4], s, "x")?],
        Box::new(move |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "relu",
        vec![away_from_zero(randn(&[5, 4], s, "x")?, 0.01)],
        Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, s)
        }),
    ));
    for axis in 0..2 {
        cases.push((
            if axis == 0 { "softmax_axis0" } else { "softmax_axis1" },
            vec![randn(&[4, 5], s, "x")?],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, s)
            }),
        ));
    }
    cases.push((
        "layer_norm",
        vec![randn(&[4, 6], s, "x")?, randn(&[6], s, "gain")?, randn(&[6], s, "bias")?],
        Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "mean_sum_axes",
        vec![randn(&[2, 3, 4], s, "x")?],
        Box::new(move |g, v| {
            let a = g.mean_axes(v[0], &[1])?;
            let b = g.sum_axes(v[0], &[0, 2])?;
            let a = weighted_sum(g, a, s)?;
            let b = weighted_sum(g, b, s ^ 1)?;
            g.add(a, b)
        }),
    ));
    cases.push((
        "stop_gradient",
        vec![randn(&[3, 4], s, "x")?, randn(&[4, 4], s, "w")?],
        Box::new(move |g, v| {
            let d = g.stop_gradient(v[0])?;
            let h = g.matmul(d, v[1])?;
            let y = g.mul(h, v[0])?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "reshape_gather_concat",
        vec![randn(&[6, 2], s, "x")?, randn(&[2, 3], s, "y")?],
        Box::new(move |g, v| {
            let r = g.reshape(v[0], &[4, 3])?;
            let c = g.concat_rows(&[r, v[1]])?;
            let y = g.gather_rows(c, &[5, 0, 0, 3, 4])?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "attention",
        vec![randn(&[2 * 3, 3 * 4], s, "qkv")?],
        Box::new(move |g, v| {
            let y = g.attention(v[0], 2, 3, 2)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![randn(&[5, 4], s, "logits")?],
        Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 1, 1, 2])),
    ));
    Ok(cases)
}

/// Checks every differentiable operation on small random inputs.
pub fn op_suite(opts: &GradCheckOptions, tolerance: f64) -> Result<Vec<CheckResult>> {
    op_cases(opts.seed)?
        .into_iter()
        .map(|(name, params, f)| {
            let start = Instant::now();
            let r = finite_diff_check(&params, opts, f)?;
            Ok(CheckResult {
                name: format!("op:{name}"),
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.max_rel_error < tolerance,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Two groups of two images each on the toy configuration.
pub fn grad_check_batch(cfg: &ViTConfig, seed: u64) -> Result<GroupedBatch> {
    let groups = vec![GroupId(0), GroupId(1), GroupId(0), GroupId(1)];
    let mut rng = Rng::derive(seed, "grad_check_images", 0);
    let data = (0..groups.len() * cfg.image_len()).map(|_| rng.uniform()).collect();
    let images = Tensor::new(vec![groups.len(), cfg.image_h, cfg.image_w, cfg.channels], data)?;
    GroupedBatch::new(images, vec![0, 1, 2, 3], groups)
}

/// Every context kind, each layerwise-capable one also in layerwise form.
pub fn all_kinds() -> Vec<ContextKind> {
    let mut out: Vec<ContextKind> = KIND_NAMES.iter().filter_map(|n| n.parse().ok()).collect();
    for k in out.clone() {
        if k.is_pooled() && !k.layerwise {
            if let Ok(lw) = ContextKind::new(k.inference, true) {
                if !out.contains(&lw) {
                    out.push(lw);
                }
            }
        }
    }
    out.into_iter()
        .map(|k| match k.inference {
            // A handful of sampled patches keeps the check fast.
            Inference::InContextPatches { .. } => k.with_context_patches(4),
            _ => k,
        })
        .collect()
}

/// Cross-entropy gradient of a randomized toy model of `kind` against
/// central differences, over every parameter tensor.
pub fn model_check(kind: ContextKind, opts: &GradCheckOptions) -> Result<crate::numerics::GradCheckReport> {
    let cfg = grad_check_config();
    let mut model = ContextViT::new(cfg.clone(), kind, &[GroupId(0), GroupId(1)], opts.seed)?;
    // Zero-initialized heads and positions would leave paths untested.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.entry(id).name.clone();
        let shape = model.params.get(id).shape().to_vec();
        let noise = randn_seeded(&shape, derive_seed(opts.seed, &name, 7), 0.3)?;
        let t = model.params.get_mut(id);
        let base = t.clone();
        for (v, (b, n)) in t.data_mut().iter_mut().zip(base.data().iter().zip(noise.data())) {
            *v = b + n;
        }
    }
    let batch = grad_check_batch(&cfg, opts.seed)?;
    let params: Vec<Tensor> = model.params.entries().iter().map(|e| e.value.clone()).collect();
    let fwd = ForwardOptions {
        seed: opts.seed,
        ..ForwardOptions::default()
    };
    finite_diff_check(&params, opts, |g, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let out = model.forward(g, &bound, &batch, &fwd)?;
        g.cross_entropy(out.logits, &batch.labels)
    })
}

/// Full-model checks for every kind in [`all_kinds`].
pub fn model_suite(opts: &GradCheckOptions, tolerance: f64) -> Result<Vec<CheckResult>> {
    all_kinds()
        .into_iter()
        .map(|kind| {
            let start = Instant::now();
            let r = model_check(kind, opts)?;
            Ok(CheckResult {
                name: format!("model:{kind}"),
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.max_rel_error < tolerance,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
