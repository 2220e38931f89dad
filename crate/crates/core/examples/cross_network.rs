//! Classifiers trained on plain-network weights, tested on weights of other networks.

use wsim::harness::{run_cross_network, standard_variants, HypothesisConfig};

fn main() -> wsim::Result<()> {
    let cfg = HypothesisConfig::cross_desk_scale();
    let plain = run_cross_network(&cfg.spec, &cfg.spec, &cfg)?;
    println!("plain -> plain   : {:.3}", plain.mean_classification());
    for (name, spec) in standard_variants(&cfg.spec) {
        let r = run_cross_network(&cfg.spec, &spec, &cfg)?;
        let per_chain: Vec<String> = r
            .chains
            .iter()
            .map(|c| format!("{:.2}", c.classification))
            .collect();
        println!(
            "plain -> {name:9}: {:.3} (per chain {})",
            r.mean_classification(),
            per_chain.join(" ")
        );
    }
    Ok(())
}
