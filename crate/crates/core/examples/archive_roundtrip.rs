//! Writes a weight archive, reads it back, and detects a corrupted blob.

use wsim::cli::{read_archive, write_archive};
use wsim::harness::{generate_population, DatasetSource, HypothesisConfig};
use wsim::net::{Activation, NetSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = HypothesisConfig {
        dataset: DatasetSource::Blobs {
            feature_dim: 6,
            per_class: 20,
            spread: 1.0,
            num_classes: None,
        },
        classes_per_task: 2,
        seen_tasks: 2,
        unseen_tasks: 0,
        spec: NetSpec::mlp(&[6, 6, 6, 2], Activation::Relu),
        train: TrainConfig::with_default_decay(5, 8, 0.05, 0.9),
        runs_per_task: 3,
        ..HypothesisConfig::desk_scale()
    };
    let ws = generate_population(&cfg)?;
    let dir = std::env::temp_dir().join(format!("wsim-archive-{}", std::process::id()));
    let manifest = write_archive(&dir, &ws, "example")?;
    println!("{} blobs in {}", manifest.entries.len(), dir.display());
    let (_, back) = read_archive(&dir)?;
    println!("read back identical: {}", back.entries == ws.entries);

    let victim = dir.join(&manifest.entries[0].file);
    let mut bytes = std::fs::read(&victim)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, bytes)?;
    match read_archive(&dir) {
        Err(e) => println!("after corruption: {e}"),
        Ok(_) => println!("corruption went unnoticed"),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
