//! Central finite differences against the reverse-mode gradients, for each
//! primitive and for a toy model of every context kind.

use contextvit::check::{model_suite, op_suite};
use contextvit::numerics::GradCheckOptions;

fn main() -> contextvit::Result<()> {
    let opts = GradCheckOptions {
        step: 1e-4,
        ..GradCheckOptions::default()
    };
    let mut results = op_suite(&opts, 1e-4)?;
    let sampled = GradCheckOptions {
        max_coords_per_param: Some(8),
        ..opts
    };
    results.extend(model_suite(&sampled, 1e-4)?);
    for r in &results {
        println!(
            "{} {:40} {:.2e}  ({} coordinates, {:.2}s)",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked,
            r.seconds
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{failed} of {} checks failed", results.len());
    Ok(())
}
