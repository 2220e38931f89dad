//! Repeats the hypothesis test for deeper, residual and leaky-ReLU networks.

use wsim::harness::{run_variant_study, standard_variants, HypothesisConfig};

fn main() {
    let cfg = HypothesisConfig::desk_scale();
    for v in run_variant_study(&cfg, &standard_variants(&cfg.spec)) {
        match v.result {
            Ok(run) => println!(
                "{:8} accepted = {}, max error {:.3}",
                v.name,
                run.verdict.accepted,
                run.verdict.max_error()
            ),
            Err(e) => println!("{:8} failed: {e}", v.name),
        }
    }
}
