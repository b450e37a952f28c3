//! What detaching the pooled context input does to backbone gradients.
//!
//! With detach, the backbone gradient equals the one obtained when the
//! pooled input is swapped for a constant of the same value. Without it,
//! an extra path runs from the context head back into the patch embedding.

use contextvit::context::{ContextViT, ForwardOptions, GroupId, GroupedBatch};
use contextvit::numerics::{derive_seed, randn_seeded, Graph, Rng, Tensor};
use contextvit::vit::ViTConfig;

fn backbone_grads(model: &ContextViT, batch: &GroupedBatch, freeze_pooled: bool) -> contextvit::Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let opts = ForwardOptions {
        freeze_pooled,
        ..ForwardOptions::default()
    };
    let out = model.forward(&mut g, &p, batch, &opts)?;
    let loss = g.cross_entropy(out.logits, &batch.labels)?;
    let grads = g.backward(loss)?;
    Ok(model
        .params
        .ids()
        .filter(|&id| model.is_backbone_param(id))
        .map(|id| grads.get_or_zeros(p[id]))
        .collect())
}

fn main() -> contextvit::Result<()> {
    let cfg = ViTConfig {
        image_h: 16,
        image_w: 16,
        dim: 16,
        depth: 2,
        heads: 2,
        num_classes: 4,
        ..ViTConfig::default()
    };
    let groups = vec![GroupId(0), GroupId(1), GroupId(0), GroupId(1)];
    let mut rng = Rng::new(1);
    let pixels = (0..groups.len() * cfg.image_len()).map(|_| rng.uniform()).collect();
    let images = Tensor::new(vec![groups.len(), cfg.image_h, cfg.image_w, cfg.channels], pixels)?;
    let batch = GroupedBatch::new(images, vec![0, 1, 2, 3], groups)?;

    for name in ["mean_linear", "mean_linear_detach"] {
        let mut model = ContextViT::new(cfg.clone(), name.parse()?, &[GroupId(0), GroupId(1)], 2)?;
        // Fresh context heads are zero; give every tensor some weight.
        for id in model.params.ids().collect::<Vec<_>>() {
            let entry = model.params.entry(id);
            let noise = randn_seeded(entry.value.shape(), derive_seed(2, &entry.name, 0), 0.3)?;
            *model.params.get_mut(id) = noise;
        }
        let live = backbone_grads(&model, &batch, false)?;
        let frozen = backbone_grads(&model, &batch, true)?;
        let diff = live.iter().zip(&frozen).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
        println!("{name:20} max |grad - grad with constant context input| = {diff:.3e}");
    }
    Ok(())
}
