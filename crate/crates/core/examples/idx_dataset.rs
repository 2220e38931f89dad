//! Loads an IDX image/label pair (the MNIST file format) and splits it into tasks.
//!
//! Usage: `cargo run --example idx_dataset -- <images.idx> <labels.idx>`.
//! Without arguments a small synthetic pair is written to a temp dir first.

use std::path::PathBuf;

use wsim::tasks::{load_idx, partition_into_tasks};

fn write_demo_pair() -> std::io::Result<(PathBuf, PathBuf)> {
    let dir = std::env::temp_dir().join(format!("wsim-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (n, rows, cols) = (40u32, 3u32, 3u32);
    let mut images = vec![0, 0, 0x08, 0x03];
    for v in [n, rows, cols] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 0x08, 0x01];
    labels.extend_from_slice(&n.to_be_bytes());
    for i in 0..n {
        let label = (i % 4) as u8;
        labels.push(label);
        images.extend((0..rows * cols).map(|p| (label as u32 * 60 + p * 3 + i) as u8));
    }
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&ip, images)?;
    std::fs::write(&lp, labels)?;
    Ok((ip, lp))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (images, labels) = match args.as_slice() {
        [i, l] => (PathBuf::from(i), PathBuf::from(l)),
        _ => write_demo_pair()?,
    };
    let d = load_idx(&images, &labels)?;
    println!(
        "{} samples, {} features, {} classes",
        d.samples.len(),
        d.feature_dim,
        d.num_classes
    );
    let suite = partition_into_tasks(&d, 2, d.num_classes / 2, 0)?;
    for t in &suite.tasks {
        println!(
            "task {}: classes {:?}, {} train / {} test",
            t.task_id,
            t.class_ids,
            t.train_split.len(),
            t.test_split.len()
        );
    }
    Ok(())
}
