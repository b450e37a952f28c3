#![allow(dead_code)]

use contextvit::context::{ContextKind, ContextViT, GroupId, GroupedBatch};
use contextvit::numerics::{derive_seed, randn_seeded, Rng, Tensor};
use contextvit::vit::ViTConfig;

pub fn toy_config() -> ViTConfig {
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

pub fn gids(v: &[u64]) -> Vec<GroupId> {
    v.iter().copied().map(GroupId).collect()
}

pub fn random_batch(cfg: &ViTConfig, groups: &[u64], seed: u64) -> GroupedBatch {
    let b = groups.len();
    let mut rng = Rng::new(seed);
    let len = cfg.image_len();
    let mut data = Vec::with_capacity(b * len);
    for &gid in groups {
        // A per-group offset so groups are distinguishable.
        let offset = (gid as f64 * 0.37).sin();
        data.extend((0..len).map(|_| rng.uniform() + offset));
    }
    let images = Tensor::new(vec![b, cfg.image_h, cfg.image_w, cfg.channels], data).unwrap();
    let labels = (0..b).map(|i| i % cfg.num_classes).collect();
    GroupedBatch::new(images, labels, gids(groups)).unwrap()
}

/// Replaces every parameter with seeded noise so no path is inert.
pub fn randomize(model: &mut ContextViT, seed: u64, scale: f64) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.entry(id).name.clone();
        let shape = model.params.get(id).shape().to_vec();
        let t = randn_seeded(&shape, derive_seed(seed, &name, 1), scale).unwrap();
        *model.params.get_mut(id) = t;
    }
}

pub fn toy_model(kind: &str, train_groups: &[u64], seed: u64) -> ContextViT {
    let kind: ContextKind = kind.parse().unwrap();
    ContextViT::new(toy_config(), kind, &gids(train_groups), seed).unwrap()
}

/// Rearranges the patch grid of each image by `perm` (new slot i takes old patch perm[i]).
pub fn permute_patches(batch: &GroupedBatch, cfg: &ViTConfig, perm: &[usize]) -> GroupedBatch {
    let (h, w, c, p) = (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch);
    let gw = w / p;
    let len = cfg.image_len();
    let mut data = batch.images.data().to_vec();
    for (img_new, img_old) in data.chunks_exact_mut(len).zip(batch.images.data().chunks_exact(len)) {
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / gw, dst % gw);
            let (sy, sx) = (src / gw, src % gw);
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        let di = ((dy * p + y) * w + dx * p + x) * c + ch;
                        let si = ((sy * p + y) * w + sx * p + x) * c + ch;
                        img_new[di] = img_old[si];
                    }
                }
            }
        }
    }
    let _ = h;
    GroupedBatch::new(
        Tensor::new(batch.images.shape().to_vec(), data).unwrap(),
        batch.labels.clone(),
        batch.groups.clone(),
    )
    .unwrap()
}
