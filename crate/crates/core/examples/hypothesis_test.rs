//! The full procedure: generate runs, normalize, train, test, decide.

use wsim::harness::{evaluate_population, run_hypothesis_test, HypothesisConfig};

fn main() -> wsim::Result<()> {
    let cfg = HypothesisConfig::desk_scale();
    let run = run_hypothesis_test(&cfg)?;
    for a in &run.classification {
        println!(
            "chain {}: normalized test {:.3}, raw layer test {:.3}",
            a.chain, a.normalized_test, a.unnormalized_test
        );
    }
    println!("with chain features: accepted = {}", run.verdict.accepted);

    let raw = HypothesisConfig {
        normalize: false,
        ..cfg
    };
    let verdict = evaluate_population(&raw, run.weights)?.verdict;
    println!(
        "with raw layers: accepted = {} (max error {:.3})",
        verdict.accepted,
        verdict.max_error()
    );
    Ok(())
}
