//! Plain vision transformer: patch embedding, CLS token, learned 1D
//! position embeddings and a stack of pre-norm transformer layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, Linear, Norm, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch: 4,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 8,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Splits an `[H×W×C]` image into non-overlapping patches.
///
/// Row `i` is the `i`-th patch in row-major grid order, flattened as
/// (row, column, channel).
pub fn patchify(image: &[f64], h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is not divisible by patch {patch}"
        )));
    }
    if image.len() != h * w * c {
        return Err(Error::shape(
            "patchify",
            format!("{} values for {h}x{w}x{c}", image.len()),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for y in py * patch..(py + 1) * patch {
                let start = (y * w + px * patch) * c;
                out.extend_from_slice(&image[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Patch matrices of several images stacked into `[B·N × P]`.
pub fn patchify_batch(images: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let len = cfg.image_len();
    if !images.len().is_multiple_of(len) || images.is_empty() {
        return Err(Error::shape(
            "patchify_batch",
            format!("{:?} for image size {len}", images.shape()),
        ));
    }
    let mut data = Vec::with_capacity(images.len());
    for img in images.data().chunks_exact(len) {
        let p = patchify(img, cfg.image_h, cfg.image_w, cfg.channels, cfg.patch)?;
        data.extend(p.into_data());
    }
    let rows = data.len() / cfg.patch_dim();
    Tensor::new(vec![rows, cfg.patch_dim()], data)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub norm1: Norm,
    pub qkv: QkvProjection,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Fused query/key/value projection `[d → 3d]`.
///
/// Only queries and values carry a bias. A key bias adds the same amount to
/// every logit of a query's softmax, so it never changes the output and its
/// gradient is identically zero.
#[derive(Clone, Copy, Debug)]
pub struct QkvProjection {
    pub weight: ParamId,
    /// `[b_q, b_v]`, length `2d`.
    pub bias: ParamId,
}

impl QkvProjection {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, seed: u64) -> Result<Self> {
        let std = (2.0 / (4 * d) as f64).sqrt();
        let weight = store.add_normal(&format!("{name}.weight"), &[d, 3 * d], std, seed, true)?;
        let bias = store.add_zeros(&format!("{name}.bias"), &[2 * d], false);
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.linear(x, p[self.weight], None)?;
        let d2 = g.value(p[self.bias]).len();
        let d = d2 / 2;
        // Scatter [b_q, b_v] into [b_q, 0, b_v].
        let mut scatter = Tensor::zeros(&[d2, 3 * d]);
        for i in 0..d {
            scatter.data_mut()[i * 3 * d + i] = 1.0;
            scatter.data_mut()[(d + i) * 3 * d + 2 * d + i] = 1.0;
        }
        let scatter = g.constant(scatter);
        let b = g.reshape(p[self.bias], &[1, d2])?;
        let b = g.matmul(b, scatter)?;
        let b = g.reshape(b, &[3 * d])?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub norm: Norm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_embed = Linear::new(store, "backbone.patch_embed", cfg.patch_dim(), d, seed)?;
        let cls_token = store.add_normal("backbone.cls_token", &[1, d], 0.02, seed, false)?;
        let pos_embed = store.add_zeros("backbone.pos_embed", &[cfg.num_patches(), d], true);
        let hidden = cfg.mlp_hidden();
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = |part: &str| format!("backbone.layers.{l}.{part}");
            layers.push(LayerParams {
                norm1: Norm::new(store, &name("norm1"), d),
                qkv: QkvProjection::new(store, &name("qkv"), d, seed)?,
                proj: Linear::new(store, &name("proj"), d, d, seed)?,
                norm2: Norm::new(store, &name("norm2"), d),
                fc1: Linear::new(store, &name("fc1"), d, hidden, seed)?,
                fc2: Linear::new(store, &name("fc2"), hidden, d, seed)?,
            });
        }
        let norm = Norm::new(store, "backbone.norm", d);
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            norm,
        })
    }

    /// Projects patch rows `[R × P]` to tokens `[R × d]`.
    pub fn embed_patches(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        self.patch_embed.apply(g, p, patches)
    }

    /// Adds the position embedding to `batch` stacked `[N × d]` token blocks.
    pub fn add_positions(&self, g: &mut Graph, p: &Bound, tokens: Var, batch: usize) -> Result<Var> {
        let n = g.value(p[self.pos_embed]).shape()[0];
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(p[self.pos_embed], &idx)?;
        g.add(tokens, pos)
    }

    /// Runs every layer; `after_layer(l, g, x)` may rewrite the hidden
    /// state between layers.
    pub fn run_layers<F>(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mut after_layer: F,
    ) -> Result<Var>
    where
        F: FnMut(usize, &mut Graph, Var) -> Result<Var>,
    {
        for (l, layer) in self.layers.iter().enumerate() {
            x = transformer_layer(g, p, layer, x, batch, seq, heads)?;
            x = after_layer(l, g, x)?;
        }
        Ok(x)
    }

    /// Final norm of the CLS slot of every sequence: `[batch × d]`.
    pub fn read_out(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = g.gather_rows(x, &idx)?;
        self.norm.apply(g, p, cls, LN_EPS)
    }
}

/// Multi-head self-attention sublayer on `batch` sequences of length `seq`.
pub fn attention(
    g: &mut Graph,
    p: &Bound,
    layer: &LayerParams,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let qkv = layer.qkv.apply(g, p, x)?;
    let mixed = g.attention(qkv, batch, seq, heads)?;
    layer.proj.apply(g, p, mixed)
}

/// Pre-norm block: `x + attn(norm(x))`, then `+ ffn(norm(·))`.
pub fn transformer_layer(
    g: &mut Graph,
    p: &Bound,
    layer: &LayerParams,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let h = layer.norm1.apply(g, p, x, LN_EPS)?;
    let a = attention(g, p, layer, h, batch, seq, heads)?;
    let x = g.add(x, a)?;
    let h = layer.norm2.apply(g, p, x, LN_EPS)?;
    let h = layer.fc1.apply(g, p, h)?;
    let h = g.gelu(h)?;
    let f = layer.fc2.apply(g, p, h)?;
    g.add(x, f)
}

/// `[t_CLS, t_1 + pos_1, …, t_N + pos_N]` for every image in the batch,
/// stacked into `[batch·(N+1) × d]`.
pub fn embed_and_assemble(
    g: &mut Graph,
    p: &Bound,
    backbone: &Backbone,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let tokens = backbone.embed_patches(g, p, patches)?;
    let with_pos = backbone.add_positions(g, p, tokens, batch)?;
    let n = g.value(with_pos).as_matrix_dims().0 / batch;
    let all = g.concat_rows(&[p[backbone.cls_token], with_pos])?;
    let idx: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
        .collect();
    g.gather_rows(all, &idx)
}

/// Output of a plain forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VitOutput {
    /// Normalized CLS embeddings `[batch × d]`.
    pub embedding: Var,
    /// Classifier logits `[batch × classes]`.
    pub logits: Var,
    pub seq_len: usize,
}

/// Baseline forward pass over a stack of `[H×W×C]` images.
pub fn vit_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ViTConfig,
    backbone: &Backbone,
    head: &Linear,
    images: &Tensor,
) -> Result<VitOutput> {
    let patches = patchify_batch(images, cfg)?;
    let batch = patches.as_matrix_dims().0 / cfg.num_patches();
    let patches = g.constant(patches);
    let x = embed_and_assemble(g, p, backbone, patches, batch)?;
    let seq = cfg.num_patches() + 1;
    let x = backbone.run_layers(g, p, x, batch, seq, cfg.heads, |_, _, x| Ok(x))?;
    let embedding = backbone.read_out(g, p, x, batch, seq)?;
    let logits = head.apply(g, p, embedding)?;
    Ok(VitOutput {
        embedding,
        logits,
        seq_len: seq,
    })
}
