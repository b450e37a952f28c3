//! Context tokens of a trained model, one per (batch, group), projected on
//! their two leading principal axes. Prints a per-group summary and writes
//! the projections as CSV to stdout when `--csv` is given.

use contextvit::config::RunConfig;
use contextvit::context::ContextViT;
use contextvit::data::generate_dataset;
use contextvit::eval::{collect_context_tokens, pca_project, separation_score};
use contextvit::train::fine_tune;

fn main() -> contextvit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let csv = args.iter().any(|a| a == "--csv");
    let mut overrides = vec!["epochs=8".to_string(), "images_per_group=96".to_string()];
    overrides.extend(args.into_iter().filter(|a| a != "--csv"));
    let cfg = RunConfig::parse("", &overrides)?;
    let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
    let mut model = ContextViT::new(cfg.vit(), cfg.context_kind()?, &data.spec.train_group_ids(), cfg.seed)?;
    fine_tune(&mut model, &data, &cfg.train())?;

    let t = collect_context_tokens(&model, &data.ood_test, cfg.export_layer, 20, cfg.export_batch_size, cfg.seed)?;
    let pca = pca_project(&t.tokens, 2)?;
    let sep = separation_score(&t.tokens, &t.groups)?;
    let proj = pca.projections.data();
    if csv {
        println!("group,pc1,pc2");
        for (i, g) in t.groups.iter().enumerate() {
            println!("{},{},{}", g.0, proj[2 * i], proj[2 * i + 1]);
        }
        return Ok(());
    }
    println!("explained variance {:.1}% + {:.1}%", 100.0 * pca.explained_ratio[0], 100.0 * pca.explained_ratio[1]);
    println!("separation ratio {:.2} ({:?})", sep.ratio, sep.flag);
    for g in data.ood_test.group_ids() {
        let pts: Vec<usize> = (0..t.groups.len()).filter(|&i| t.groups[i] == g).collect();
        let mean = |c: usize| pts.iter().map(|&i| proj[2 * i + c]).sum::<f64>() / pts.len() as f64;
        println!("group {:2}: centroid ({:+.4}, {:+.4})", g.0, mean(0), mean(1));
    }
    Ok(())
}
