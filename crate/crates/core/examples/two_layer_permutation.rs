//! A two-layer linear network whose hidden units are swapped: different raw
//! weights, same function, same chain features.

use wsim::chain::normalize_chain_mlp;
use wsim::net::{forward, Activation, Layers, NetSpec};
use wsim::tensor::{apply_permutation, Matrix, PermutationMatrix, Side};

fn main() -> wsim::Result<()> {
    let w1 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?;
    let w2 = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]])?;
    let q = PermutationMatrix::swap(2, 0, 1);
    let w1p = apply_permutation(&w1, &q, Side::Columns)?;
    let w2p = apply_permutation(&w2, &q, Side::Rows)?;
    println!("W1  = {:?}\nW1' = {:?}", w1.data(), w1p.data());
    println!("W2  = {:?}\nW2' = {:?}", w2.data(), w2p.data());

    let spec = NetSpec::mlp(&[2, 2, 2], Activation::Linear);
    let a = Layers::Mlp(vec![w1.clone(), w2.clone()]);
    let b = Layers::Mlp(vec![w1p.clone(), w2p.clone()]);
    for x in [[1.0, 0.0], [0.5, -2.0]] {
        println!(
            "f({x:?}) = {:?} vs {:?}",
            forward(&spec, &a, &x)?,
            forward(&spec, &b, &x)?
        );
    }
    for l in 1..=2 {
        let fa = normalize_chain_mlp(&[w1.clone(), w2.clone()], l)?;
        let fb = normalize_chain_mlp(&[w1p.clone(), w2p.clone()], l)?;
        println!(
            "chain {l}: {:?} vs {:?}",
            fa.matrix.data(),
            fb.matrix.data()
        );
    }
    Ok(())
}
