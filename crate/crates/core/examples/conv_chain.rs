//! Chain features of a patch-convolution stack, and their invariance to
//! permuting intermediate channels.

use wsim::chain::{feature_side, normalize_chain_conv};
use wsim::seed;
use wsim::tensor::{permute_channels, PermutationMatrix, Side, Tensor4};

fn main() -> wsim::Result<()> {
    let mut rng = seed::rng(3);
    let w1 = Tensor4::random_uniform([2, 3, 3, 3], 1.0, &mut rng);
    let w2 = Tensor4::random_uniform([3, 2, 3, 3], 1.0, &mut rng);
    for l in 1..=2 {
        let f = normalize_chain_conv(&[w1.clone(), w2.clone()], l)?;
        println!(
            "chain {l}: side {} (expected {})",
            f.side(),
            feature_side(2, (3, 3), l)
        );
    }

    let q = PermutationMatrix::new(vec![2, 0, 1])?;
    let p1 = permute_channels(&w1, &q, Side::Columns)?;
    let p2 = permute_channels(&w2, &q, Side::Rows)?;
    let a = normalize_chain_conv(&[w1, w2], 2)?;
    let b = normalize_chain_conv(&[p1, p2], 2)?;
    println!(
        "channel permutation {:?}: chain-2 max |diff| = {:.3e}",
        q.perm(),
        a.matrix.max_abs_diff(&b.matrix).expect("same shape")
    );
    Ok(())
}
