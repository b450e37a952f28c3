//! The conditioned transformer: slot 0 holds CLS, slot 1 the context
//! token, slots 2.. the position-embedded patch tokens.

use crate::context::infer::{
    apply_linear_head, deep_sets_infer, infer_context_mean, oracle_lookup, sample_context_patches,
    DeepSets, EmaState, OracleTable,
};
use crate::context::{ContextKind, GroupId, GroupedBatch, Inference};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Graph, Tensor, Var};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::vit::{patchify_batch, vit_forward, Backbone, ViTConfig};

/// Parameters of the context-inference networks. Heads and deep-sets
/// networks exist for every layer even when only layer 0 is used.
#[derive(Clone, Debug, Default)]
pub struct ContextParams {
    pub oracle: Option<OracleTable>,
    pub heads: Vec<Linear>,
    pub deep_sets: Vec<DeepSets>,
}

#[derive(Clone, Debug)]
pub struct ContextViT {
    pub config: ViTConfig,
    pub kind: ContextKind,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub context: ContextParams,
    pub head: Linear,
    pub ema: Option<EmaState>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Seed for the in-context patch sampler.
    pub seed: u64,
    /// Replace every pooled context input with a constant of equal value.
    /// Used to compare against the detached forward pass.
    pub freeze_pooled: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub logits: Var,
    /// Tokens processed per image.
    pub seq_len: usize,
    /// Groups of the batch in first-occurrence order.
    pub groups: Vec<GroupId>,
    /// Context tokens `[groups × d]` per conditioned layer; entry 0 is the
    /// input-level token.
    pub context_tokens: Vec<Var>,
    /// Detached batch means per group, for the moving-average update.
    pub batch_means: Vec<(GroupId, Vec<f64>)>,
}

impl ContextViT {
    /// Builds a freshly initialized model. `train_groups` sizes the oracle
    /// token table.
    pub fn new(config: ViTConfig, kind: ContextKind, train_groups: &[GroupId], seed: u64) -> Result<Self> {
        config.validate()?;
        kind.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &config, seed)?;
        let d = config.dim;
        let mut context = ContextParams::default();
        match kind.inference {
            Inference::Oracle => {
                context.oracle = Some(OracleTable::new(&mut params, train_groups, d)?);
            }
            Inference::MeanLinear { .. } | Inference::Ema { .. } => {
                context.heads = (0..config.depth)
                    .map(|l| Linear::zeros(&mut params, &format!("context.heads.{l}"), d, d))
                    .collect();
            }
            Inference::DeepSets { .. } => {
                context.deep_sets = (0..config.depth)
                    .map(|l| {
                        DeepSets::new(
                            &mut params,
                            &format!("context.deep_sets.{l}"),
                            d,
                            derive_seed(seed, "deep_sets", l as u64),
                        )
                    })
                    .collect::<Result<_>>()?;
            }
            Inference::None | Inference::Mean | Inference::InContextPatches { .. } => {}
        }
        let head = Linear::new(&mut params, "head", d, config.num_classes, seed)?;
        let ema = match kind.inference {
            Inference::Ema { lambda } => Some(EmaState::new(lambda)?),
            _ => None,
        };
        Ok(Self {
            config,
            kind,
            params,
            backbone,
            context,
            head,
            ema,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &GroupedBatch, opts: &ForwardOptions) -> Result<ForwardOutput> {
        contextvit_forward(g, p, self, batch, opts)
    }

    /// Folds the batch means of a training step into the moving averages.
    pub fn commit_ema(&mut self, out: &ForwardOutput) -> Result<()> {
        if let Some(ema) = &mut self.ema {
            for (group, mean) in &out.batch_means {
                ema.update(*group, mean)?;
            }
        }
        Ok(())
    }

    pub fn is_backbone_param(&self, id: ParamId) -> bool {
        self.params.entry(id).name.starts_with("backbone.")
    }

    pub fn is_head_param(&self, id: ParamId) -> bool {
        id == self.head.weight || id == self.head.bias
    }

    /// Evaluation-mode logits and embeddings as plain tensors.
    pub fn predict(&self, batch: &GroupedBatch, seed: u64) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let out = self.forward(
            &mut g,
            &p,
            batch,
            &ForwardOptions {
                seed,
                ..ForwardOptions::default()
            },
        )?;
        Ok((g.value(out.embedding).clone(), g.value(out.logits).clone()))
    }
}

/// Forward pass over a grouped batch.
///
/// Context tokens are inferred per group from the members present in
/// this batch. Layer-0 tokens pool the patch embeddings before the
/// position embedding is added. With `layerwise`, the context slot is
/// overwritten after each layer by the next layer's head applied to that
/// layer's hidden patch tokens; the transformer's own slot-1 output is
/// dropped.
pub fn contextvit_forward(
    g: &mut Graph,
    p: &Bound,
    model: &ContextViT,
    batch: &GroupedBatch,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let groups = batch.partition.group_ids();
    match model.kind.inference {
        Inference::None => {
            let out = vit_forward(g, p, cfg, &model.backbone, &model.head, &batch.images)?;
            Ok(ForwardOutput {
                embedding: out.embedding,
                logits: out.logits,
                seq_len: out.seq_len,
                groups,
                context_tokens: Vec::new(),
                batch_means: Vec::new(),
            })
        }
        Inference::InContextPatches { k } => in_context_forward(g, p, model, batch, k, opts.seed),
        _ => token_forward(g, p, model, batch, opts),
    }
}

fn token_forward(
    g: &mut Graph,
    p: &Bound,
    model: &ContextViT,
    batch: &GroupedBatch,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (b, n, d) = (batch.len(), cfg.num_patches(), cfg.dim);
    let seq = n + 2;
    let part = &batch.partition;
    let ngroups = part.num_groups();

    let patches = g.constant(patchify_batch(&batch.images, cfg)?);
    let tokens = model.backbone.embed_patches(g, p, patches)?;

    let mut batch_means = Vec::new();
    let rows_at = |offset: usize, stride: usize, members: &[usize]| -> Vec<usize> {
        members
            .iter()
            .flat_map(|&i| (0..n).map(move |j| i * stride + offset + j))
            .collect()
    };

    let ctx0 = infer_tokens(g, p, model, batch, 0, tokens, |m| rows_at(0, n, m), opts, &mut batch_means)?;
    let with_pos = model.backbone.add_positions(g, p, tokens, b)?;
    let all = g.concat_rows(&[p[model.backbone.cls_token], ctx0, with_pos])?;
    let idx: Vec<usize> = (0..b)
        .flat_map(|i| {
            [0, 1 + part.slot_of(i)]
                .into_iter()
                .chain((0..n).map(move |j| 1 + ngroups + i * n + j))
        })
        .collect();
    let x = g.gather_rows(all, &idx)?;

    let mut context_tokens = vec![ctx0];
    let depth = cfg.depth;
    let layerwise = model.kind.layerwise;
    let overwrite: Vec<usize> = (0..b * seq)
        .map(|r| if r % seq == 1 { b * seq + part.slot_of(r / seq) } else { r })
        .collect();
    let x = model.backbone.run_layers(g, p, x, b, seq, cfg.heads, |l, g, x| {
        // The slot written after the last layer never reaches the CLS read-out.
        if !layerwise || l + 1 >= depth {
            return Ok(x);
        }
        let mut unused = Vec::new();
        let ctx = infer_tokens(g, p, model, batch, l + 1, x, |m| rows_at(2, seq, m), opts, &mut unused)?;
        context_tokens.push(ctx);
        let stacked = g.concat_rows(&[x, ctx])?;
        g.gather_rows(stacked, &overwrite)
    })?;
    let embedding = model.backbone.read_out(g, p, x, b, seq)?;
    let logits = model.head.apply(g, p, embedding)?;
    debug_assert_eq!(g.value(context_tokens[0]).shape(), &[ngroups, d]);
    Ok(ForwardOutput {
        embedding,
        logits,
        seq_len: seq,
        groups: part.group_ids(),
        context_tokens,
        batch_means,
    })
}

/// One token per group of `batch`, stacked `[groups × d]`.
#[allow(clippy::too_many_arguments)]
fn infer_tokens(
    g: &mut Graph,
    p: &Bound,
    model: &ContextViT,
    batch: &GroupedBatch,
    layer: usize,
    source: Var,
    member_rows: impl Fn(&[usize]) -> Vec<usize>,
    opts: &ForwardOptions,
    batch_means: &mut Vec<(GroupId, Vec<f64>)>,
) -> Result<Var> {
    let ctx = &model.context;
    let pooled = |g: &mut Graph, rows: &[usize]| -> Result<Var> {
        let m = infer_context_mean(g, source, rows)?;
        if opts.freeze_pooled {
            let v = g.value(m).clone();
            Ok(g.constant(v))
        } else {
            Ok(m)
        }
    };
    let mut out = Vec::with_capacity(batch.partition.num_groups());
    for (group, members) in batch.partition.groups() {
        let token = match model.kind.inference {
            Inference::Oracle => {
                let table = ctx.oracle.as_ref().ok_or_else(|| Error::Config("missing oracle table".into()))?;
                oracle_lookup(g, p, table, group)?
            }
            Inference::Mean => pooled(g, &member_rows(members))?,
            Inference::MeanLinear { detach } => {
                let m = pooled(g, &member_rows(members))?;
                apply_linear_head(g, p, m, &ctx.heads[layer], detach)?
            }
            Inference::Ema { lambda } => {
                let m = pooled(g, &member_rows(members))?;
                let m = g.stop_gradient(m)?;
                batch_means.push((group, g.value(m).data().to_vec()));
                let state = model.ema.as_ref().and_then(|e| e.get(group));
                let smoothed = match state {
                    Some(s) => {
                        let s = g.constant(Tensor::new(vec![1, s.len()], s.to_vec())?);
                        let s = g.scale(s, lambda)?;
                        let fresh = g.scale(m, 1.0 - lambda)?;
                        g.add(s, fresh)?
                    }
                    None => m,
                };
                ctx.heads[0].apply(g, p, smoothed)?
            }
            Inference::DeepSets { detach } => {
                let rows = member_rows(members);
                if opts.freeze_pooled {
                    let members = g.gather_rows(source, &rows)?;
                    let v = g.value(members).clone();
                    let frozen = g.constant(v);
                    let all: Vec<usize> = (0..rows.len()).collect();
                    deep_sets_infer(g, p, &ctx.deep_sets[layer], frozen, &all, false)?
                } else {
                    deep_sets_infer(g, p, &ctx.deep_sets[layer], source, &rows, detach)?
                }
            }
            Inference::None | Inference::InContextPatches { .. } => {
                return Err(Error::Config(format!("{} has no context token", model.kind)))
            }
        };
        out.push(token);
    }
    g.concat_rows(&out)
}

fn in_context_forward(
    g: &mut Graph,
    p: &Bound,
    model: &ContextViT,
    batch: &GroupedBatch,
    k: usize,
    seed: u64,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (b, n) = (batch.len(), cfg.num_patches());
    let seq = n + 1 + k;
    let part = &batch.partition;
    let patches = g.constant(patchify_batch(&batch.images, cfg)?);
    let tokens = model.backbone.embed_patches(g, p, patches)?;
    let with_pos = model.backbone.add_positions(g, p, tokens, b)?;
    let all = g.concat_rows(&[p[model.backbone.cls_token], with_pos, tokens])?;
    let raw_base = 1 + b * n;
    let mut sampled = Vec::with_capacity(part.num_groups());
    for (slot, (_, members)) in part.groups().enumerate() {
        let pool: Vec<usize> = members
            .iter()
            .flat_map(|&i| (0..n).map(move |j| raw_base + i * n + j))
            .collect();
        sampled.push(sample_context_patches(&pool, k, derive_seed(seed, "in_context", slot as u64))?);
    }
    let idx: Vec<usize> = (0..b)
        .flat_map(|i| {
            std::iter::once(0)
                .chain((0..n).map(move |j| 1 + i * n + j))
                .chain(sampled[part.slot_of(i)].iter().copied())
        })
        .collect();
    let x = g.gather_rows(all, &idx)?;
    let x = model.backbone.run_layers(g, p, x, b, seq, cfg.heads, |_, _, x| Ok(x))?;
    let embedding = model.backbone.read_out(g, p, x, b, seq)?;
    let logits = model.head.apply(g, p, embedding)?;
    Ok(ForwardOutput {
        embedding,
        logits,
        seq_len: seq,
        groups: part.group_ids(),
        context_tokens: Vec::new(),
        batch_means: Vec::new(),
    })
}
