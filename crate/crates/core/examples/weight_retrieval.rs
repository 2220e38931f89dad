//! Ranks runs of unseen tasks with representations from classifiers trained on
//! seen tasks, and prints the CMC curve per chain.

use wsim::harness::{run_hypothesis_test, HypothesisConfig};

fn main() -> wsim::Result<()> {
    let run = run_hypothesis_test(&HypothesisConfig::desk_scale())?;
    for r in &run.retrieval {
        let cmc: Vec<String> = r.normalized.cmc.iter().map(|v| format!("{v:.2}")).collect();
        println!(
            "chain {}: rank-1 {:.3} (raw layers {:.3}); CMC {}",
            r.chain,
            r.normalized.rank1(),
            r.unnormalized.rank1(),
            cmc.join(" ")
        );
    }
    Ok(())
}
