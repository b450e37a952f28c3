//! Context inferred at test time for groups never seen in training, next
//! to a per-group lookup table that can only serve known groups.
//!
//! `cargo run --release --example test_time_adaptation -- epochs=12`

use contextvit::config::RunConfig;
use contextvit::context::ContextViT;
use contextvit::data::generate_dataset;
use contextvit::eval::evaluate_split;
use contextvit::train::fine_tune;

fn main() -> contextvit::Result<()> {
    let mut overrides = vec!["epochs=8".to_string(), "images_per_group=96".to_string()];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::parse("", &overrides)?;
    let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
    let groups = data.spec.train_group_ids();

    for name in ["none", "oracle", "mean_linear_detach"] {
        let mut model = ContextViT::new(cfg.vit(), name.parse()?, &groups, cfg.seed)?;
        fine_tune(&mut model, &data, &cfg.train())?;
        let id = evaluate_split(&model, &data.id_test, cfg.eval_batch_size)?;
        let ood = match evaluate_split(&model, &data.ood_test, cfg.eval_batch_size) {
            Ok(m) => format!("{:.3}", m.accuracy),
            Err(e) => format!("unavailable ({e})"),
        };
        println!("{name:20} seen groups {:.3}  unseen groups {ood}", id.accuracy);
    }
    Ok(())
}
