//! Generate a small grouped dataset, fine-tune a context model on it and
//! report in-distribution and held-out-group accuracy.
//!
//! `cargo run --release --example quickstart -- epochs=10 kind=none`

use contextvit::config::RunConfig;
use contextvit::context::ContextViT;
use contextvit::data::generate_dataset;
use contextvit::eval::compute_metrics;
use contextvit::train::fine_tune;

fn main() -> contextvit::Result<()> {
    let mut overrides = vec!["epochs=8".to_string(), "images_per_group=96".to_string()];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::parse("", &overrides)?;

    let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
    println!(
        "train {} / val {} / id test {} / ood test {} images",
        data.train.len(),
        data.val.len(),
        data.id_test.len(),
        data.ood_test.len()
    );

    let mut model = ContextViT::new(cfg.vit(), cfg.context_kind()?, &data.spec.train_group_ids(), cfg.seed)?;
    println!("{} with {} parameters", model.kind, model.params.num_scalars());
    let report = fine_tune(&mut model, &data, &cfg.train())?;
    for (epoch, loss) in report.epoch_train_loss.iter().enumerate() {
        println!("epoch {epoch:2}  train loss {loss:.4}");
    }
    let m = compute_metrics(&model, &data, cfg.eval_batch_size)?;
    for s in &m.splits {
        println!("{:9} accuracy {:.3}  worst group {:.3}", s.split, s.accuracy, s.worst_group);
    }
    println!("ood gap {:.3}", m.ood_gap);
    Ok(())
}
