//! Accuracy metrics, the context-kind ablation grid, the evaluation
//! batch-size sweep and context-token analysis.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::context::{ContextKind, ContextViT, ForwardOptions, GroupId};
use crate::data::{sequential_batches, DatasetSplit, Split};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Graph, Rng, Tensor};
use crate::train::{argmax, fine_tune, TrainConfig};
use crate::vit::ViTConfig;

/// Accuracy on one split, overall and per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub count: usize,
    pub accuracy: f64,
    pub per_group: BTreeMap<u64, f64>,
    pub worst_group: f64,
}

/// Builds [`SplitMetrics`] from predicted classes.
pub fn metrics_from_predictions(split: &str, labels: &[usize], groups: &[GroupId], preds: &[usize]) -> Result<SplitMetrics> {
    if labels.is_empty() {
        return Err(Error::Empty(format!("split {split} has no examples")));
    }
    if labels.len() != preds.len() || labels.len() != groups.len() {
        return Err(Error::shape("metrics", "labels, groups and predictions differ in length"));
    }
    let mut tally: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for ((&y, &p), g) in labels.iter().zip(preds).zip(groups) {
        let t = tally.entry(g.0).or_default();
        t.1 += 1;
        if y == p {
            t.0 += 1;
            correct += 1;
        }
    }
    let per_group: BTreeMap<u64, f64> = tally.into_iter().map(|(g, (c, n))| (g, c as f64 / n as f64)).collect();
    let worst_group = per_group.values().copied().fold(f64::INFINITY, f64::min);
    Ok(SplitMetrics {
        split: split.to_string(),
        count: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        per_group,
        worst_group,
    })
}

/// Predicted classes for a split, evaluated in consecutive batches of
/// `batch_size`. Each batch infers its own context from its own members.
pub fn predict_split(model: &ContextViT, split: &Split, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(split.len());
    for (b, batch) in sequential_batches(split, batch_size)?.enumerate() {
        let (_, logits) = model.predict(&batch, derive_seed(0, "eval_batch", b as u64))?;
        let (rows, cols) = logits.as_matrix_dims();
        preds.extend((0..rows).map(|r| argmax(&logits.data()[r * cols..(r + 1) * cols])));
    }
    Ok(preds)
}

pub fn evaluate_split(model: &ContextViT, split: &Split, batch_size: usize) -> Result<SplitMetrics> {
    let preds = predict_split(model, split, batch_size)?;
    metrics_from_predictions(&split.name, &split.labels, &split.groups, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub splits: Vec<SplitMetrics>,
    /// In-distribution test accuracy minus held-out-group accuracy.
    pub ood_gap: f64,
}

impl MetricsReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn accuracy(&self, name: &str) -> f64 {
        self.split(name).map_or(f64::NAN, |s| s.accuracy)
    }
}

/// Metrics on val, id_test and ood_test.
pub fn compute_metrics(model: &ContextViT, data: &DatasetSplit, batch_size: usize) -> Result<MetricsReport> {
    let splits = [&data.val, &data.id_test, &data.ood_test]
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| evaluate_split(model, s, batch_size))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport { splits, ood_gap: f64::NAN };
    report.ood_gap = report.accuracy("id_test") - report.accuracy("ood_test");
    Ok(report)
}

/// Row order of the ablation table; kinds not listed follow in input order.
pub const ABLATION_ORDER: &[&str] = &[
    "none",
    "mean",
    "mean_linear",
    "mean_linear_detach",
    "layerwise_mean_linear_detach",
    "deep_sets",
    "deep_sets_detach",
];

/// One training run of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub kind: String,
    pub seed: u64,
    pub ood_accuracy: f64,
    pub id_accuracy: f64,
    pub wall_seconds: f64,
    /// Set when the run failed; accuracies are then NaN.
    pub error: Option<String>,
}

/// Per-kind aggregate over seeds (medians of the successful runs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: String,
    pub ood_accuracy: f64,
    pub id_accuracy: f64,
    pub ood_std: f64,
    pub wall_seconds: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn row(&self, kind: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Orders kind names as in [`ABLATION_ORDER`], others after in input order.
pub fn ablation_order(kinds: &[ContextKind]) -> Vec<ContextKind> {
    let rank = |k: &ContextKind| {
        let name = k.to_string();
        ABLATION_ORDER.iter().position(|n| *n == name).unwrap_or(ABLATION_ORDER.len())
    };
    let mut out = kinds.to_vec();
    out.sort_by_key(rank);
    out
}

/// Trains every kind for every seed (model seed = data-independent run
/// seed, shared across kinds) and aggregates per kind. Failed runs are
/// recorded and the table is still produced.
pub fn run_ablation(
    data: &DatasetSplit,
    vit: &ViTConfig,
    train: &TrainConfig,
    kinds: &[ContextKind],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    if kinds.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("ablation needs at least one kind and one seed".into()));
    }
    let groups = data.spec.train_group_ids();
    let mut table = AblationTable::default();
    for kind in ablation_order(kinds) {
        let name = kind.to_string();
        let mut ood = Vec::new();
        let mut id = Vec::new();
        let mut secs = Vec::new();
        let mut failed = 0;
        for &seed in seeds {
            let start = Instant::now();
            let cfg = TrainConfig { seed, ..train.clone() };
            let outcome = ContextViT::new(vit.clone(), kind, &groups, seed).and_then(|mut model| {
                fine_tune(&mut model, data, &cfg)?;
                compute_metrics(&model, data, cfg.eval_batch_size)
            });
            let run = match outcome {
                Ok(m) => AblationRun {
                    kind: name.clone(),
                    seed,
                    ood_accuracy: m.accuracy("ood_test"),
                    id_accuracy: m.accuracy("id_test"),
                    wall_seconds: start.elapsed().as_secs_f64(),
                    error: None,
                },
                Err(e) => {
                    failed += 1;
                    AblationRun {
                        kind: name.clone(),
                        seed,
                        ood_accuracy: f64::NAN,
                        id_accuracy: f64::NAN,
                        wall_seconds: start.elapsed().as_secs_f64(),
                        error: Some(e.to_string()),
                    }
                }
            };
            ood.push(run.ood_accuracy);
            id.push(run.id_accuracy);
            secs.push(run.wall_seconds);
            on_run(&run);
            table.runs.push(run);
        }
        table.rows.push(AblationRow {
            kind: name,
            ood_accuracy: median(&ood),
            id_accuracy: median(&id),
            ood_std: std_dev(&ood),
            wall_seconds: median(&secs),
            runs: seeds.len(),
            failed,
        });
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub metrics: SplitMetrics,
}

/// Re-evaluates `split` with context inferred from batches of each size.
/// A size of 1 pools only the image's own patches.
pub fn batch_size_sweep(model: &ContextViT, split: &Split, sizes: &[usize]) -> Result<Vec<SweepPoint>> {
    if let Some(bad) = sizes.iter().find(|&&s| s < 1) {
        return Err(Error::InvalidArgument(format!("evaluation batch size {bad} must be at least 1")));
    }
    sizes
        .iter()
        .map(|&batch_size| {
            Ok(SweepPoint {
                batch_size,
                metrics: evaluate_split(model, split, batch_size)?,
            })
        })
        .collect()
}

/// Context tokens gathered for analysis, one per (batch, group) occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTokens {
    pub layer: usize,
    pub groups: Vec<GroupId>,
    /// `[M × d]`.
    pub tokens: Tensor,
}

/// Draws `batches_per_group` batches of `batch_size` members of each group
/// in `split` (with replacement across batches) and records the context
/// token of the chosen layer.
pub fn collect_context_tokens(
    model: &ContextViT,
    split: &Split,
    layer: usize,
    batches_per_group: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ContextTokens> {
    if !model.kind.has_context_slot() {
        return Err(Error::InvalidArgument(format!("kind {} has no context token", model.kind)));
    }
    let layers = if model.kind.layerwise { model.config.depth } else { 1 };
    if layer >= layers {
        return Err(Error::InvalidArgument(format!("kind {} has no context token at layer {layer}", model.kind)));
    }
    if batch_size == 0 || batches_per_group == 0 {
        return Err(Error::InvalidArgument("batch size and batch count must be positive".into()));
    }
    let d = model.config.dim;
    let mut groups = Vec::new();
    let mut rows = Vec::new();
    for gid in split.group_ids() {
        let mut members = split.members(gid);
        let mut rng = Rng::derive(seed, "context_tokens", gid.0);
        for b in 0..batches_per_group {
            rng.shuffle(&mut members);
            let take = batch_size.min(members.len());
            let batch = split.batch(&members[..take]);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, |_| false);
            let opts = ForwardOptions {
                seed: derive_seed(seed, "context_tokens_fwd", b as u64),
                ..ForwardOptions::default()
            };
            let out = model.forward(&mut g, &p, &batch, &opts)?;
            rows.push(g.value(out.context_tokens[layer]).data()[..d].to_vec());
            groups.push(gid);
        }
    }
    Ok(ContextTokens {
        layer,
        groups,
        tokens: Tensor::from_rows(&rows)?,
    })
}

/// Principal component analysis of `[M × d]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit-norm axes, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Projections `[M × k]`.
    pub projections: Tensor,
    /// Fraction of total variance explained by each kept component.
    pub explained_ratio: Vec<f64>,
    /// Kept components whose variance is numerically zero.
    pub zero_variance: usize,
}

impl Pca {
    pub fn explained(&self, k: usize) -> f64 {
        self.explained_ratio.iter().take(k).sum()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues (descending) and matching unit eigenvectors.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigen", format!("{} values for {n}x{n}", a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

/// Projects mean-centered rows onto the top `k` principal axes. Each axis
/// is signed so its first nonzero loading is positive.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    let (m, d) = x.as_matrix_dims();
    if x.shape().len() != 2 || m < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs an [M x d] matrix with M >= 2, got {:?}", x.shape())));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={d}")));
    }
    let data = x.data();
    let mean: Vec<f64> = (0..d).map(|j| (0..m).map(|i| data[i * d + j]).sum::<f64>() / m as f64).collect();
    let centered: Vec<f64> = (0..m * d).map(|idx| data[idx] - mean[idx % d]).collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (m - 1) as f64);
    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut components: Vec<Vec<f64>> = vectors.into_iter().take(k).collect();
    for c in &mut components {
        if let Some(first) = c.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    let eigenvalues: Vec<f64> = values.iter().take(k).map(|v| v.max(0.0)).collect();
    let explained_ratio = eigenvalues
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let zero_variance = eigenvalues.iter().filter(|&&v| v <= tol).count();
    let mut proj = Vec::with_capacity(m * k);
    for row in centered.chunks_exact(d) {
        for c in &components {
            proj.push(row.iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        projections: Tensor::new(vec![m, k], proj)?,
        explained_ratio,
        zero_variance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationFlag {
    Finite,
    /// Zero within-group spread with distinct centroids.
    Infinite,
    /// Zero spread everywhere (0/0).
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub ratio: f64,
    pub between: f64,
    pub within: f64,
    pub flag: SeparationFlag,
}

/// Between-group centroid variance over mean within-group variance
/// (both summed over dimensions, around the grand mean of centroids).
pub fn separation_score(tokens: &Tensor, groups: &[GroupId]) -> Result<Separation> {
    let (m, d) = tokens.as_matrix_dims();
    if groups.len() != m {
        return Err(Error::shape("separation_score", format!("{} groups for {m} tokens", groups.len())));
    }
    let partition = crate::context::group_partition(groups);
    if partition.num_groups() < 2 {
        return Err(Error::InvalidArgument("separation needs at least two groups".into()));
    }
    let data = tokens.data();
    let mut centroids = Vec::new();
    let mut within = 0.0;
    for (gid, members) in partition.groups() {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!("group {gid} has fewer than two tokens")));
        }
        let c: Vec<f64> = (0..d)
            .map(|j| members.iter().map(|&i| data[i * d + j]).sum::<f64>() / members.len() as f64)
            .collect();
        let var: f64 = members
            .iter()
            .map(|&i| (0..d).map(|j| (data[i * d + j] - c[j]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (members.len() - 1) as f64;
        within += var;
        centroids.push(c);
    }
    within /= centroids.len() as f64;
    let grand: Vec<f64> = (0..d).map(|j| centroids.iter().map(|c| c[j]).sum::<f64>() / centroids.len() as f64).collect();
    let between = centroids
        .iter()
        .map(|c| c.iter().zip(&grand).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (centroids.len() - 1) as f64;
    let tiny = 1e-300;
    let (ratio, flag) = match (within <= tiny, between <= tiny) {
        (true, true) => (f64::NAN, SeparationFlag::Degenerate),
        (true, false) => (f64::INFINITY, SeparationFlag::Infinite),
        _ => (between / within, SeparationFlag::Finite),
    };
    Ok(Separation {
        ratio,
        between,
        within,
        flag,
    })
}
