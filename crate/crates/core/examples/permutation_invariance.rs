//! Permuting hidden units of an MLP changes every raw layer but leaves the
//! network function and every chain feature unchanged.

use wsim::chain::normalize_chain_mlp;
use wsim::net::{forward, Activation, Layers, NetSpec};
use wsim::seed;
use wsim::tensor::{apply_permutation, Matrix, PermutationMatrix, Side};

fn main() -> wsim::Result<()> {
    let widths = [5, 7, 6, 3];
    let spec = NetSpec::mlp(&widths, Activation::Relu);
    let mut rng = seed::rng(11);
    let layers: Vec<Matrix> = widths
        .windows(2)
        .map(|w| Matrix::random_uniform(w[0], w[1], 1.0, &mut rng))
        .collect();

    // W_k -> Q_{k-1}^T W_k Q_k for random hidden permutations Q_1 .. Q_{L-1}
    let perms: Vec<PermutationMatrix> = widths[1..widths.len() - 1]
        .iter()
        .map(|&n| PermutationMatrix::random(n, &mut rng))
        .collect();
    let mut permuted = Vec::new();
    for (k, w) in layers.iter().enumerate() {
        let mut p = w.clone();
        if k > 0 {
            p = apply_permutation(&p, &perms[k - 1], Side::Rows)?;
        }
        if k < perms.len() {
            p = apply_permutation(&p, &perms[k], Side::Columns)?;
        }
        permuted.push(p);
    }

    let x = [0.3, -1.2, 0.8, 0.05, 2.0];
    let a = forward(&spec, &Layers::Mlp(layers.clone()), &x)?;
    let b = forward(&spec, &Layers::Mlp(permuted.clone()), &x)?;
    println!("logits original {a:.6?}");
    println!("logits permuted {b:.6?}");

    for l in 1..widths.len() {
        let fa = normalize_chain_mlp(&layers, l)?;
        let fb = normalize_chain_mlp(&permuted, l)?;
        let raw = layers[l - 1]
            .max_abs_diff(&permuted[l - 1])
            .expect("same shape");
        let chain = fa.matrix.max_abs_diff(&fb.matrix).expect("same shape");
        println!("layer {l}: raw max |diff| = {raw:.3e}, chain max |diff| = {chain:.3e}");
    }
    Ok(())
}
