//! Held-out-group accuracy as a function of how many images share the
//! context at evaluation time, down to a single image.

use contextvit::config::RunConfig;
use contextvit::context::ContextViT;
use contextvit::data::generate_dataset;
use contextvit::eval::batch_size_sweep;
use contextvit::train::fine_tune;

fn main() -> contextvit::Result<()> {
    let mut overrides = vec!["epochs=8".to_string(), "images_per_group=96".to_string()];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::parse("", &overrides)?;
    let data = generate_dataset(&cfg.spec(), cfg.data_seed)?;
    let mut model = ContextViT::new(cfg.vit(), cfg.context_kind()?, &data.spec.train_group_ids(), cfg.seed)?;
    fine_tune(&mut model, &data, &cfg.train())?;
    for p in batch_size_sweep(&model, &data.ood_test, &[1, 2, 4, 8, 16, 64])? {
        println!("batch {:3}: accuracy {:.3}  worst group {:.3}", p.batch_size, p.metrics.accuracy, p.metrics.worst_group);
    }
    Ok(())
}
