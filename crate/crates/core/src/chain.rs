//! Chain normalization.
//!
//! Hidden neurons of a trained network can be reordered without changing its
//! function, so raw layers of two equivalent networks are not comparable. The
//! product of a chain `W_1 ... W_l` only sees that reordering on its right
//! (as `W_1 ... W_l Q_l`), and `B * B^T` cancels it. Each chain depth gives
//! one square feature of side `n_0` (or `n_0 (hw)^(l-1)` for conv kernels).

use crate::error::{Error, Result};
use crate::net::{Layers, TrainedWeights};
use crate::tensor::{Matrix, Tensor4};

/// Default cap on the side of a conv chain feature.
pub const DEFAULT_SIDE_CAP: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainFeature {
    pub chain_depth: usize,
    pub matrix: Matrix,
    pub source_task_id: usize,
}

impl ChainFeature {
    pub fn side(&self) -> usize {
        self.matrix.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.rows() * self.matrix.cols()
    }

    /// Raw row-major flattening.
    pub fn flattened(&self) -> Vec<f64> {
        self.matrix.data().to_vec()
    }

    /// Row-major flattening divided by the Frobenius norm; zero features stay zero.
    pub fn flattened_unit(&self) -> Vec<f64> {
        unit_norm(self.matrix.data())
    }

    pub fn with_task(mut self, task_id: usize) -> Self {
        self.source_task_id = task_id;
        self
    }
}

/// `v / ||v||`, or `v` unchanged when it is all zeros.
pub fn unit_norm(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn check_depth(l: usize, len: usize) -> Result<()> {
    if l == 0 || l > len {
        return Err(Error::Shape(format!("chain depth {l} outside 1..={len}")));
    }
    Ok(())
}

/// `B B^T` with `B = W_1 W_2 ... W_l`, multiplied left to right.
pub fn normalize_chain_mlp(layers: &[Matrix], l: usize) -> Result<ChainFeature> {
    check_depth(l, layers.len())?;
    let mut b = layers[0].clone();
    for (k, w) in layers.iter().enumerate().take(l).skip(1) {
        if b.cols() != w.rows() {
            return Err(Error::Shape(format!(
                "layer {} is {}x{} but the chain so far has {} columns",
                k + 1,
                w.rows(),
                w.cols(),
                b.cols()
            )));
        }
        b = b.matmul(w)?;
    }
    Ok(ChainFeature {
        chain_depth: l,
        matrix: b.gram(),
        source_task_id: 0,
    })
}

/// Moves the trailing kernel axes of a `rows x (c * hw)` chain product into its
/// rows, giving `(rows * hw) x c` with row index `(r, s)`.
fn fold_kernel_into_rows(b: &Matrix, channels: usize, hw: usize) -> Matrix {
    let rows = b.rows();
    let mut out = Matrix::zeros(rows * hw, channels);
    for r in 0..rows {
        let src = b.row(r);
        for j in 0..channels {
            for s in 0..hw {
                out[(r * hw + s, j)] = src[j * hw + s];
            }
        }
    }
    out
}

/// Conv chain feature with the default side cap.
pub fn normalize_chain_conv(layers: &[Tensor4], l: usize) -> Result<ChainFeature> {
    normalize_chain_conv_capped(layers, l, DEFAULT_SIDE_CAP)
}

/// Conv chain feature of side `n_0 (hw)^(l-1)`.
///
/// `W_1` is read as `n_0 x (n_1 hw)`. Before each further layer the previous
/// layer's kernel positions are folded into the rows, giving
/// `n_0 (hw)^(k-1) x n_(k-1)`, which then multiplies `W_k` read as
/// `n_(k-1) x (n_k hw)`. Channel permutations only ever act on a column block
/// that is contracted away or on the final columns, so the Gram product is
/// invariant to them.
pub fn normalize_chain_conv_capped(
    layers: &[Tensor4],
    l: usize,
    side_cap: usize,
) -> Result<ChainFeature> {
    check_depth(l, layers.len())?;
    let (h, w) = layers[0].kernel();
    if let Some((k, t)) = layers[..l]
        .iter()
        .enumerate()
        .find(|(_, t)| t.kernel() != (h, w))
    {
        return Err(Error::Config(format!(
            "layer {} has kernel {:?}, layer 1 has {:?}",
            k + 1,
            t.kernel(),
            (h, w)
        )));
    }
    let hw = h * w;
    let side = layers[0]
        .c_in()
        .saturating_mul(hw.checked_pow(l as u32 - 1).unwrap_or(usize::MAX));
    if side > side_cap {
        return Err(Error::Capacity {
            side,
            cap: side_cap,
        });
    }

    let first = &layers[0];
    let mut b = Matrix::new(first.c_in(), first.c_out() * hw, first.data().to_vec())?;
    for (k, t) in layers.iter().enumerate().take(l).skip(1) {
        let prev_channels = layers[k - 1].c_out();
        if t.c_in() != prev_channels {
            return Err(Error::Shape(format!(
                "layer {} expects {} input channels, layer {} produces {prev_channels}",
                k + 1,
                t.c_in(),
                k
            )));
        }
        let folded = fold_kernel_into_rows(&b, prev_channels, hw);
        let next = Matrix::new(t.c_in(), t.c_out() * hw, t.data().to_vec())?;
        b = folded.matmul(&next)?;
    }
    debug_assert_eq!(b.rows(), side);
    Ok(ChainFeature {
        chain_depth: l,
        matrix: b.gram(),
        source_task_id: 0,
    })
}

/// Features for every chain depth `1..=L`, labelled with the weights' task.
pub fn normalize_all_chains(w: &TrainedWeights) -> Result<Vec<ChainFeature>> {
    let depth = w.layers.len();
    (1..=depth)
        .map(|l| chain_feature(&w.layers, l).map(|f| f.with_task(w.task_id)))
        .collect()
}

/// Chain feature of depth `l` for either layer kind.
pub fn chain_feature(layers: &Layers, l: usize) -> Result<ChainFeature> {
    match layers {
        Layers::Mlp(m) => normalize_chain_mlp(m, l),
        Layers::Conv(t) => normalize_chain_conv(t, l),
    }
}

/// Side of the depth-`l` chain feature for the given network shape.
pub fn feature_side(n0: usize, kernel: (usize, usize), l: usize) -> usize {
    n0 * (kernel.0 * kernel.1).pow(l as u32 - 1)
}

/// Smallest and largest eigenvalue of a small symmetric matrix (cyclic Jacobi sweeps).
pub fn min_max_eigenvalues(m: &Matrix) -> (f64, f64) {
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    (
        diag.iter().copied().fold(f64::INFINITY, f64::min),
        diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}
