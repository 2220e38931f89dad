//! Labels every SGD run by its task and trains one softmax classifier per chain
//! depth on chain features and on raw layers.

use wsim::harness::{generate_population, train_classifiers, HypothesisConfig};
use wsim::metric::{accuracy, FeatureMode};

fn main() -> wsim::Result<()> {
    let cfg = HypothesisConfig {
        unseen_tasks: 0,
        ..HypothesisConfig::desk_scale()
    };
    let mut seen = generate_population(&cfg)?;
    seen.resplit(cfg.classifier_train_fraction);
    println!("{} runs over {} tasks", seen.len(), seen.task_ids().len());
    for mode in [FeatureMode::Chain, FeatureMode::RawLayer] {
        for c in train_classifiers(&cfg, &seen, mode)? {
            println!(
                "{mode:?} l={}: train {:.3}, test {:.3}",
                c.chain_depth,
                accuracy(&c, &seen.train_entries())?,
                accuracy(&c, &seen.test_entries())?
            );
        }
    }
    Ok(())
}
