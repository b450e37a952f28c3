mod common;

use common::*;
use contextvit::context::{
    apply_linear_head, deep_sets_infer, oracle_lookup, ContextKind, ContextViT, DeepSets,
    ForwardOptions, GroupId, Inference, OracleTable,
};
use contextvit::numerics::{Graph, Tensor};
use contextvit::params::{Linear, ParamStore};
use contextvit::vit::vit_forward;
use contextvit::Error;

const AMORTIZED: &[&str] = &[
    "mean",
    "mean_linear",
    "mean_linear_detach",
    "layerwise_mean_linear_detach",
    "layerwise_mean",
    "deep_sets",
    "deep_sets_detach",
    "layerwise_deep_sets_detach",
    "ema",
];

fn forward_tokens(model: &ContextViT, batch: &contextvit::context::GroupedBatch) -> Vec<(GroupId, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let out = model.forward(&mut g, &p, batch, &ForwardOptions::default()).unwrap();
    let d = model.config.dim;
    let mut per_group: Vec<(GroupId, Vec<Vec<f64>>)> = out
        .groups
        .iter()
        .enumerate()
        .map(|(slot, gid)| {
            let layers = out
                .context_tokens
                .iter()
                .map(|&t| g.value(t).data()[slot * d..(slot + 1) * d].to_vec())
                .collect();
            (*gid, layers)
        })
        .collect();
    per_group.sort_by_key(|(g, _)| *g);
    per_group
}

fn max_token_diff(a: &[(GroupId, Vec<Vec<f64>>)], b: &[(GroupId, Vec<Vec<f64>>)]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for ((ga, la), (gb, lb)) in a.iter().zip(b) {
        assert_eq!(ga, gb);
        assert_eq!(la.len(), lb.len());
        for (x, y) in la.iter().zip(lb) {
            for (u, v) in x.iter().zip(y) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    worst
}

#[test]
fn sequence_lengths() {
    let cfg = toy_config();
    let batch = random_batch(&cfg, &[1, 1, 2], 1);
    for (name, expected) in [("none", 17), ("mean_linear_detach", 18), ("oracle", 18)] {
        let model = toy_model(name, &[1, 2], 3);
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
        assert_eq!(out.seq_len, expected, "{name}");
        assert_eq!(g.value(out.logits).shape(), &[3, 4]);
    }
    let kind = ContextKind::new(Inference::InContextPatches { k: 5 }, false).unwrap();
    let model = ContextViT::new(cfg.clone(), kind, &gids(&[1, 2]), 3).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
    assert_eq!(out.seq_len, 16 + 1 + 5);
}

#[test]
fn none_kind_matches_plain_vit_bitwise() {
    let cfg = toy_config();
    let mut model = toy_model("none", &[1], 5);
    randomize(&mut model, 5, 0.2);
    let batch = random_batch(&cfg, &[1, 2, 2, 3], 8);
    let (_, logits) = model.predict(&batch, 0).unwrap();

    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let plain = vit_forward(&mut g, &p, &cfg, &model.backbone, &model.head, &batch.images).unwrap();
    assert_eq!(g.value(plain.logits), &logits);

    // One image at a time gives the same rows.
    for i in 0..batch.len() {
        let single = batch.select(&[i]).unwrap();
        let (_, l) = model.predict(&single, 0).unwrap();
        assert_eq!(l.data(), logits.row(i));
    }
}

#[test]
fn identical_images_give_identical_logits() {
    let cfg = toy_config();
    let mut model = toy_model("none", &[1], 2);
    randomize(&mut model, 2, 0.2);
    let b = random_batch(&cfg, &[1], 4);
    let twice = b.select(&[0, 0]).unwrap();
    let (_, l) = model.predict(&twice, 0).unwrap();
    assert_eq!(l.row(0), l.row(1));
}

#[test]
fn same_group_shares_layer0_token() {
    let cfg = toy_config();
    let mut model = toy_model("mean_linear_detach", &[1, 2], 6);
    randomize(&mut model, 6, 0.3);
    let batch = random_batch(&cfg, &[1, 2, 1, 2, 1], 9);
    let tokens = forward_tokens(&model, &batch);
    assert_eq!(tokens.len(), 2);
    let (a, b) = (&tokens[0].1[0], &tokens[1].1[0]);
    assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6));

    // Every image of group 1 sees the same slot-1 input: swapping which
    // group-1 members are present does not change the shared token.
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
    assert_eq!(g.value(out.context_tokens[0]).shape(), &[2, 16]);
}

#[test]
fn permutation_invariance_of_inferred_tokens() {
    let cfg = toy_config();
    let batch = random_batch(&cfg, &[4, 5, 4, 4, 5, 6], 12);
    let image_perm = [3, 4, 0, 5, 2, 1];
    let mut patch_perm: Vec<usize> = (0..cfg.num_patches()).collect();
    patch_perm.reverse();
    patch_perm.swap(0, 7);

    for name in AMORTIZED {
        let mut model = toy_model(name, &[4, 5], 21);
        randomize(&mut model, 21, 0.3);
        let base = forward_tokens(&model, &batch);

        let shuffled = batch.select(&image_perm).unwrap();
        let diff = max_token_diff(&base, &forward_tokens(&model, &shuffled));
        assert!(diff < 1e-12, "{name} image order: {diff}");

        // Layer-0 pooling happens before position embeddings, so it is
        // invariant to patch order for any parameters.
        let moved = permute_patches(&batch, &cfg, &patch_perm);
        let moved_tokens = forward_tokens(&model, &moved);
        let l0 = |t: &[(GroupId, Vec<Vec<f64>>)]| -> Vec<(GroupId, Vec<Vec<f64>>)> {
            t.iter().map(|(g, l)| (*g, vec![l[0].clone()])).collect()
        };
        let diff = max_token_diff(&l0(&base), &l0(&moved_tokens));
        assert!(diff < 1e-12, "{name} patch order at layer 0: {diff}");

        // Deeper tokens are invariant when positions carry no information.
        let pos = model.backbone.pos_embed;
        let shape = model.params.get(pos).shape().to_vec();
        *model.params.get_mut(pos) = Tensor::zeros(&shape);
        let base = forward_tokens(&model, &batch);
        let diff = max_token_diff(&base, &forward_tokens(&model, &moved));
        assert!(diff < 1e-12, "{name} patch order, all layers: {diff}");
    }
}

fn backbone_grads(model: &ContextViT, batch: &contextvit::context::GroupedBatch, freeze: bool) -> Vec<Tensor> {
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let opts = ForwardOptions {
        freeze_pooled: freeze,
        ..ForwardOptions::default()
    };
    let out = model.forward(&mut g, &p, batch, &opts).unwrap();
    let loss = g.cross_entropy(out.logits, &batch.labels).unwrap();
    let grads = g.backward(loss).unwrap();
    model
        .params
        .ids()
        .filter(|&id| model.is_backbone_param(id))
        .map(|id| grads.get_or_zeros(p[id]))
        .collect()
}

#[test]
fn detach_is_exact_graph_surgery() {
    let cfg = toy_config();
    let batch = random_batch(&cfg, &[1, 2, 1, 2], 30);
    for name in ["mean_linear_detach", "layerwise_mean_linear_detach", "deep_sets_detach"] {
        let mut model = toy_model(name, &[1, 2], 31);
        randomize(&mut model, 31, 0.3);
        assert_eq!(backbone_grads(&model, &batch, false), backbone_grads(&model, &batch, true), "{name}");
    }
    for name in ["mean_linear", "layerwise_mean_linear", "deep_sets", "mean"] {
        let mut model = toy_model(name, &[1, 2], 31);
        randomize(&mut model, 31, 0.3);
        assert_ne!(backbone_grads(&model, &batch, false), backbone_grads(&model, &batch, true), "{name}");
    }
}

#[test]
fn oracle_fails_on_unseen_groups_amortized_kinds_do_not() {
    let cfg = toy_config();
    let unseen = random_batch(&cfg, &[99, 99], 40);
    let oracle = toy_model("oracle", &[1, 2], 41);
    match oracle.predict(&unseen, 0) {
        Err(Error::UnknownContext(99)) => {}
        other => panic!("expected unknown context, got {other:?}"),
    }
    assert!(oracle.predict(&random_batch(&cfg, &[1, 2], 42), 0).is_ok());

    let single = random_batch(&cfg, &[77], 43);
    for name in AMORTIZED.iter().chain(&["in_context_patches"]) {
        let model = toy_model(name, &[1, 2], 44);
        let (emb, logits) = model.predict(&unseen, 0).unwrap();
        assert_eq!(emb.shape(), &[2, 16], "{name}");
        assert_eq!(logits.shape(), &[2, 4]);
        let (_, l1) = model.predict(&single, 0).unwrap();
        assert_eq!(l1.shape(), &[1, 4], "{name}");
    }
}

#[test]
fn layerwise_heads_isolated_when_disabled() {
    let cfg = toy_config();
    let batch = random_batch(&cfg, &[1, 2, 1], 50);
    let mut flat = toy_model("mean_linear_detach", &[1, 2], 51);
    randomize(&mut flat, 51, 0.3);
    let mut g = Graph::new();
    let p = flat.params.bind_all(&mut g);
    let out = flat.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
    let loss = g.cross_entropy(out.logits, &batch.labels).unwrap();
    let grads = g.backward(loss).unwrap();
    for head in &flat.context.heads[1..] {
        assert!(grads.get(p[head.weight]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(p[head.bias]).unwrap().data().iter().all(|&v| v == 0.0));
    }
    let h0 = grads.get(p[flat.context.heads[0].weight]).unwrap();
    assert!(h0.data().iter().any(|&v| v != 0.0));

    // Same parameters, layerwise on: outputs change, shapes do not.
    let mut deep = flat.clone();
    deep.kind = "layerwise_mean_linear_detach".parse().unwrap();
    let (_, a) = flat.predict(&batch, 0).unwrap();
    let (_, b) = deep.predict(&batch, 0).unwrap();
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a, b);
}

#[test]
fn linear_head_examples() {
    let d = 3;
    let mut store = ParamStore::new();
    let head = Linear::zeros(&mut store, "h", d, d);
    *store.get_mut(head.weight) = Tensor::eye(d);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let m = g.param(Tensor::new(vec![1, d], vec![1.0, -2.0, 0.5]).unwrap());
    let t = apply_linear_head(&mut g, &p, m, &head, true).unwrap();
    assert_eq!(g.value(t).data(), &[1.0, -2.0, 0.5]);

    let mut store = ParamStore::new();
    let head = Linear::zeros(&mut store, "h", d, d);
    *store.get_mut(head.bias) = Tensor::new(vec![d], vec![4.0, 5.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let m = g.param(Tensor::new(vec![1, d], vec![9.0, 9.0, 9.0]).unwrap());
    let t = apply_linear_head(&mut g, &p, m, &head, false).unwrap();
    assert_eq!(g.value(t).data(), &[4.0, 5.0, 6.0]);
}

#[test]
fn detached_head_sends_nothing_to_patch_projection() {
    let cfg = toy_config();
    let batch = random_batch(&cfg, &[1, 1, 2], 60);
    for (name, expect_zero) in [("mean_linear_detach", true), ("mean_linear", false)] {
        let mut model = toy_model(name, &[1, 2], 61);
        randomize(&mut model, 61, 0.3);
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
        // Loss depending only on the context tokens.
        let loss = g.sum(out.context_tokens[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.get_or_zeros(p[model.backbone.patch_embed.weight]);
        let all_zero = gw.data().iter().all(|&v| v == 0.0);
        assert_eq!(all_zero, expect_zero, "{name}");
    }
}

#[test]
fn oracle_lookup_examples() {
    let mut store = ParamStore::new();
    let table = OracleTable::new(&mut store, &gids(&[3, 8]), 2).unwrap();
    *store.get_mut(table.table) = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let t = oracle_lookup(&mut g, &p, &table, GroupId(8)).unwrap();
    assert_eq!(g.value(t).data(), &[3.0, 4.0]);
    assert!(matches!(
        oracle_lookup(&mut g, &p, &table, GroupId(5)),
        Err(Error::UnknownContext(5))
    ));

    // Loss increasing in t_c[0]: a descent step lowers the stored entry.
    let loss = g.sum(t).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(p[table.table]).unwrap();
    let lr = 0.1;
    let before = store.get(table.table).data()[2];
    let after = before - lr * gt.data()[2];
    assert!(after < before);
    assert_eq!(gt.data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn deep_sets_examples() {
    let d = 4;
    let mut store = ParamStore::new();
    let net = DeepSets::new(&mut store, "ds", d, 3).unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..d).map(|j| ((i * d + j) as f64).cos()).collect()).collect();
    let src = Tensor::from_rows(&rows).unwrap();

    // Fresh init: ρ's output layer is zero, so the token is zero.
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let s = g.constant(src.clone());
    let t = deep_sets_infer(&mut g, &p, &net, s, &[0, 1, 2, 3, 4], false).unwrap();
    assert!(g.value(t).data().iter().all(|&v| v == 0.0));

    // Randomize, then check set symmetry and sum linearity.
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = contextvit::numerics::randn_seeded(&shape, 100 + id.index() as u64, 0.4).unwrap();
    }
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let s = g.constant(src.clone());
    let a = deep_sets_infer(&mut g, &p, &net, s, &[0, 1, 2, 3, 4], false).unwrap();
    let b = deep_sets_infer(&mut g, &p, &net, s, &[4, 2, 0, 3, 1], false).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);

    // ρ = identity (zero hidden weights and biases, identity output) exposes the pooled sum.
    let ident = |store: &mut ParamStore, mlp: &contextvit::context::SetMlp| {
        for l in &mlp.hidden {
            *store.get_mut(l.weight) = Tensor::zeros(&[d, d]);
            *store.get_mut(l.bias) = Tensor::zeros(&[d]);
        }
        *store.get_mut(mlp.out.weight) = Tensor::eye(d);
        *store.get_mut(mlp.out.bias) = Tensor::zeros(&[d]);
    };
    ident(&mut store, &net.rho);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let s = g.constant(src);
    let once = deep_sets_infer(&mut g, &p, &net, s, &[0, 1, 2], false).unwrap();
    let twice = deep_sets_infer(&mut g, &p, &net, s, &[0, 1, 2, 0, 1, 2], false).unwrap();
    for (x, y) in g.value(once).data().iter().zip(g.value(twice).data()) {
        assert!((2.0 * x - y).abs() < 1e-12);
    }

    // φ identity and ρ linear-zero: zero output.
    ident(&mut store, &net.phi);
    *store.get_mut(net.rho.out.weight) = Tensor::zeros(&[d, d]);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let s = g.constant(Tensor::full(&[3, d], 1.5));
    let t = deep_sets_infer(&mut g, &p, &net, s, &[0, 1, 2], false).unwrap();
    assert!(g.value(t).data().iter().all(|&v| v == 0.0));
    assert!(deep_sets_infer(&mut g, &p, &net, s, &[], false).is_err());
}

#[test]
fn ema_state_updates_and_feeds_the_head() {
    let cfg = toy_config();
    let mut model = toy_model("ema", &[1, 2], 70);
    randomize(&mut model, 70, 0.3);
    let batch = random_batch(&cfg, &[1, 1, 2], 71);
    let mut g = Graph::new();
    let p = model.params.bind_all(&mut g);
    let out = model.forward(&mut g, &p, &batch, &ForwardOptions::default()).unwrap();
    assert_eq!(out.batch_means.len(), 2);
    let (_, before) = model.predict(&batch, 0).unwrap();
    model.commit_ema(&out).unwrap();
    let ema = model.ema.as_ref().unwrap();
    assert_eq!(ema.get(GroupId(1)).unwrap(), out.batch_means[0].1.as_slice());
    // With a state present the token mixes it with the fresh batch mean;
    // at a fixed batch the state equals the mean, so nothing changes.
    let (_, after) = model.predict(&batch, 0).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-12);
    let other = random_batch(&cfg, &[1, 2], 72);
    let (_, x) = model.predict(&other, 0).unwrap();
    assert!(x.is_finite());
}
