//! Every context kind trained for several seeds; median held-out-group
//! accuracy per kind.
//!
//! The defaults take a few minutes. For the full grid:
//! `cargo run --release --example ablation_grid -- epochs=30 images_per_group=160 ablation_seeds=0,1,2`

use contextvit::config::RunConfig;
use contextvit::data::generate_dataset;
use contextvit::eval::run_ablation;

fn main() -> contextvit::Result<()> {
    let mut overrides = vec![
        "epochs=6".to_string(),
        "images_per_group=64".to_string(),
        "ablation_seeds=0".to_string(),
    ];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::parse("", &overrides)?;
    let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
    let table = run_ablation(
        &data,
        &cfg.vit(),
        &cfg.train(),
        &cfg.ablation_kind_list()?,
        &cfg.ablation_seed_list()?,
        |r| eprintln!("  {} seed {} ood {:.3}", r.kind, r.seed, r.ood_accuracy),
    )?;
    println!("{:32} {:>8} {:>8} {:>8}", "kind", "ood", "id", "ood sd");
    for r in &table.rows {
        println!("{:32} {:8.3} {:8.3} {:8.3}", r.kind, r.ood_accuracy, r.id_accuracy, r.ood_std);
    }
    Ok(())
}
