//! Layerwise context: one inference head per layer, each refreshing the
//! context slot from the previous layer's patch tokens.

use contextvit::context::{ContextViT, ForwardOptions, GroupId, GroupedBatch};
use contextvit::numerics::{derive_seed, randn_seeded, Graph, Rng, Tensor};
use contextvit::vit::ViTConfig;

fn main() -> contextvit::Result<()> {
    let cfg = ViTConfig {
        dim: 16,
        depth: 3,
        heads: 2,
        num_classes: 4,
        ..ViTConfig::default()
    };
    let groups = vec![GroupId(3), GroupId(3), GroupId(5)];
    let mut rng = Rng::new(4);
    let pixels = (0..groups.len() * cfg.image_len()).map(|_| rng.uniform()).collect();
    let images = Tensor::new(vec![groups.len(), cfg.image_h, cfg.image_w, cfg.channels], pixels)?;
    let batch = GroupedBatch::new(images, vec![0, 1, 2], groups)?;

    let mut flat = ContextViT::new(cfg.clone(), "mean_linear_detach".parse()?, &[GroupId(3)], 7)?;
    for id in flat.params.ids().collect::<Vec<_>>() {
        let entry = flat.params.entry(id);
        let noise = randn_seeded(entry.value.shape(), derive_seed(7, &entry.name, 0), 0.2)?;
        *flat.params.get_mut(id) = noise;
    }
    let mut layerwise = flat.clone();
    layerwise.kind = "layerwise_mean_linear_detach".parse()?;

    for model in [&flat, &layerwise] {
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default())?;
        println!("{}: {} context token layer(s)", model.kind, out.context_tokens.len());
        for (l, &t) in out.context_tokens.iter().enumerate() {
            let norm = g.value(t).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("  layer {l}: token norm over {} groups {norm:.4}", out.groups.len());
        }
        println!("  logits row 0: {:?}", g.value(out.logits).row(0));
    }
    Ok(())
}
