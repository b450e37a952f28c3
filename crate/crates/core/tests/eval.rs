mod common;

use common::*;
use contextvit::config::RunConfig;
use contextvit::context::{ContextViT, GroupId};
use contextvit::data::{generate_dataset, SyntheticShiftSpec};
use contextvit::eval::{
    batch_size_sweep, collect_context_tokens, compute_metrics, pca_project, run_ablation, separation_score,
    SeparationFlag,
};
use contextvit::numerics::{randn_seeded, Tensor};
use contextvit::train::{fine_tune, TrainConfig};
use contextvit::vit::ViTConfig;
use proptest::prelude::*;

fn eight_class_toy() -> ViTConfig {
    ViTConfig {
        num_classes: 8,
        ..toy_config()
    }
}

fn small_spec() -> SyntheticShiftSpec {
    SyntheticShiftSpec {
        train_groups: 4,
        ood_groups: 2,
        images_per_group: 32,
        ..SyntheticShiftSpec::default()
    }
}

#[test]
fn metrics_are_deterministic() {
    let data = generate_dataset(&small_spec(), 1).unwrap();
    let mut model = ContextViT::new(
        eight_class_toy(),
        "mean_linear_detach".parse().unwrap(),
        &data.spec.train_group_ids(),
        2,
    )
    .unwrap();
    randomize(&mut model, 2, 0.2);
    let a = compute_metrics(&model, &data, 16).unwrap();
    let b = compute_metrics(&model, &data, 16).unwrap();
    assert_eq!(a, b);
    let ood = a.split("ood_test").unwrap();
    let worst = ood.per_group.values().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(ood.worst_group, worst);
    assert_eq!(a.ood_gap, a.accuracy("id_test") - a.accuracy("ood_test"));
}

#[test]
fn sweep_covers_every_size_for_every_kind() {
    let data = generate_dataset(&small_spec(), 3).unwrap();
    for name in ["none", "mean_linear_detach", "layerwise_mean_linear_detach", "deep_sets_detach", "in_context_patches"] {
        let model = ContextViT::new(eight_class_toy(), name.parse().unwrap(), &data.spec.train_group_ids(), 4).unwrap();
        let points = batch_size_sweep(&model, &data.ood_test, &[1, 8, 64]).unwrap();
        assert_eq!(points.len(), 3);
        for p in &points {
            assert_eq!(p.metrics.count, data.ood_test.len(), "{name} at {}", p.batch_size);
        }
    }
    let model = ContextViT::new(eight_class_toy(), "mean".parse().unwrap(), &data.spec.train_group_ids(), 4).unwrap();
    assert!(batch_size_sweep(&model, &data.ood_test, &[0]).is_err());
}

#[test]
fn ablation_table_shape_and_none_row() {
    let data = generate_dataset(&small_spec(), 5).unwrap();
    let train = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let kinds: Vec<_> = ["mean_linear_detach", "none"].iter().map(|k| k.parse().unwrap()).collect();
    let table = run_ablation(&data, &eight_class_toy(), &train, &kinds, &[0, 1], |_| {}).unwrap();
    assert_eq!(table.runs.len(), 4);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].kind, "none");

    // The none row is an ordinary training run.
    let mut plain = ContextViT::new(eight_class_toy(), kinds[1], &data.spec.train_group_ids(), 1).unwrap();
    fine_tune(&mut plain, &data, &TrainConfig { seed: 1, ..train }).unwrap();
    let m = compute_metrics(&plain, &data, train.eval_batch_size).unwrap();
    let run = table.runs.iter().find(|r| r.kind == "none" && r.seed == 1).unwrap();
    assert_eq!(run.ood_accuracy, m.accuracy("ood_test"));
}

#[test]
fn trained_context_model_at_small_batches() {
    let cfg = RunConfig::parse("", &["epochs=10".into()]).unwrap();
    let data = generate_dataset(&cfg.spec(), cfg.data_seed).unwrap();
    let groups = data.spec.train_group_ids();
    let train = |kind: &str| {
        let mut m = ContextViT::new(cfg.vit(), kind.parse().unwrap(), &groups, 0).unwrap();
        fine_tune(&mut m, &data, &cfg.train()).unwrap();
        m
    };
    let none = train("none");
    let ctx = train("mean_linear_detach");
    let base = compute_metrics(&none, &data, 64).unwrap().accuracy("ood_test");
    let sweep = batch_size_sweep(&ctx, &data.ood_test, &[1, 8, 64]).unwrap();
    let acc: Vec<f64> = sweep.iter().map(|p| p.metrics.accuracy).collect();
    assert!(acc[0] > base, "size 1 {:.3} vs none {base:.3}", acc[0]);
    // Monotone or flat within two points.
    assert!(acc[1] >= acc[0] - 0.02 && acc[2] >= acc[1] - 0.02, "{acc:?}");

    let tokens = collect_context_tokens(&ctx, &data.ood_test, 0, 10, 16, 0).unwrap();
    let sep = separation_score(&tokens.tokens, &tokens.groups).unwrap();
    assert!(sep.ratio > 1.0, "{sep:?}");
}

#[test]
fn pca_examples() {
    // Collinear points: one component carries everything.
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let pca = pca_project(&Tensor::from_rows(&rows).unwrap(), 2).unwrap();
    assert!((pca.explained(1) - 1.0).abs() < 1e-12);
    assert_eq!(pca.zero_variance, 1);
}

#[test]
fn separation_flags_on_constructed_tokens() {
    let g = |v: &[u64]| v.iter().copied().map(GroupId).collect::<Vec<_>>();
    let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![0.0, 3.0]]).unwrap();
    assert_eq!(separation_score(&t, &g(&[1, 1, 2, 2])).unwrap().flag, SeparationFlag::Infinite);
    let t = Tensor::full(&[4, 2], 0.5);
    assert_eq!(separation_score(&t, &g(&[1, 1, 2, 2])).unwrap().flag, SeparationFlag::Degenerate);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_orthonormal_centered_and_exact(m in 3usize..20, d in 1usize..7, seed in 0u64..10_000) {
        let x = randn_seeded(&[m, d], seed, 1.0).unwrap();
        let pca = pca_project(&x, d).unwrap();
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot(a, b) - target).abs() < 1e-9);
            }
        }
        let proj = pca.projections.data();
        for c in 0..d {
            let mean: f64 = (0..m).map(|r| proj[r * d + c]).sum::<f64>() / m as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        // Full-rank reconstruction recovers the data.
        for r in 0..m {
            for j in 0..d {
                let back = pca.mean[j] + (0..d).map(|c| proj[r * d + c] * pca.components[c][j]).sum::<f64>();
                prop_assert!((back - x.data()[r * d + j]).abs() < 1e-9);
            }
        }
        let total: f64 = pca.explained_ratio.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}
