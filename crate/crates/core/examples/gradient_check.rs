//! Backprop against central finite differences on small random networks.

use wsim::net::{gradient_check, init_layers, kink_margin, Activation, Batch, NetSpec};
use wsim::seed;
use wsim::tensor::Matrix;

fn main() -> wsim::Result<()> {
    let specs = [
        NetSpec::mlp(&[4, 3], Activation::Linear),
        NetSpec::mlp(&[4, 5, 3], Activation::Relu),
        NetSpec::mlp(&[4, 5, 5, 3], Activation::LeakyRelu { slope: 0.1 }).with_residual(true),
        NetSpec::conv(&[2, 3, 2], (2, 2), (4, 4), Activation::Relu),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = seed::rng(i as u64);
        let layers = init_layers(spec, &mut rng);
        let x = Matrix::random_uniform(6, spec.input_len(), 1.0, &mut rng);
        let batch = Batch {
            x: x.clone(),
            y: (0..6).map(|r| r % spec.num_outputs()).collect(),
        };
        let err = gradient_check(spec, &layers, &batch)?;
        let margin = kink_margin(spec, &layers, &x)?;
        println!(
            "{:?} {:?}: max rel error {err:.2e}, kink margin {margin:.2e}",
            spec.arch, spec.activation
        );
    }
    Ok(())
}
