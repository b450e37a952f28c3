//! The grouped synthetic dataset: per-group nuisance parameters, how far
//! apart group centroids sit, and the on-disk format.

use contextvit::data::{generate_dataset, DatasetSplit, GroupShift, Split, SyntheticShiftSpec};

fn centroid_spread(split: &Split) -> f64 {
    let len = split.image_len();
    let centroids: Vec<Vec<f64>> = split
        .group_ids()
        .into_iter()
        .map(|g| {
            let members = split.members(g);
            let mut c = vec![0.0; len];
            for &i in &members {
                c.iter_mut().zip(split.image(i)).for_each(|(a, v)| *a += v / members.len() as f64);
            }
            c
        })
        .collect();
    let n = centroids.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn main() -> contextvit::Result<()> {
    let spec = SyntheticShiftSpec::default();
    for g in spec.train_group_ids().into_iter().take(3).chain(spec.ood_group_ids().into_iter().take(1)) {
        let s = GroupShift::draw(&spec, g, 0);
        println!("group {:2}: bias {:?} contrast {:.3}", g.0, s.bias.iter().map(|b| format!("{b:+.3}")).collect::<Vec<_>>(), s.contrast);
    }
    for bias_max in [0.0, 0.05, 0.2] {
        let d = generate_dataset(&SyntheticShiftSpec { bias_max, ..spec.clone() }, 0)?;
        println!("bias_max {bias_max:.2}: mean centroid distance {:.4}", centroid_spread(&d.train));
    }

    let data = generate_dataset(&spec, 0)?;
    let dir = std::env::temp_dir().join("contextvit-synthetic-shift");
    std::fs::create_dir_all(&dir).map_err(|e| contextvit::Error::io(&dir, e))?;
    data.save(&dir, "dataset")?;
    let back = DatasetSplit::load(&dir.join("dataset.bin"))?;
    assert_eq!(back, data);
    println!("wrote and reloaded {}", dir.join("dataset.bin").display());
    Ok(())
}
