#![allow(dead_code)]

use rand::Rng;
use wsim::tensor::{apply_permutation, Matrix, PermutationMatrix, Side};

pub fn random_mlp<R: Rng>(widths: &[usize], rng: &mut R) -> Vec<Matrix> {
    widths
        .windows(2)
        .map(|w| Matrix::random_uniform(w[0], w[1], 1.0, rng))
        .collect()
}

/// Random permutation of every hidden layer (the output layer stays put).
pub fn random_hidden_perms<R: Rng>(widths: &[usize], rng: &mut R) -> Vec<PermutationMatrix> {
    widths[1..widths.len() - 1]
        .iter()
        .map(|&n| PermutationMatrix::random(n, rng))
        .collect()
}

/// `W_k <- Q_{k-1}^T W_k Q_k` with `Q_0 = Q_L = I`.
pub fn permute_mlp(layers: &[Matrix], perms: &[PermutationMatrix]) -> Vec<Matrix> {
    layers
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let mut p = w.clone();
            if k > 0 {
                p = apply_permutation(&p, &perms[k - 1], Side::Rows).unwrap();
            }
            if k < perms.len() {
                p = apply_permutation(&p, &perms[k], Side::Columns).unwrap();
            }
            p
        })
        .collect()
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Independent triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[i * b.cols() + j] = s;
        }
    }
    Matrix::new(a.rows(), b.cols(), out).unwrap()
}
