//! Straight-line scalar reference evaluators used to cross-check the
//! vectorized operators. These deliberately avoid the production code paths:
//! plain nested loops, f64 only.

use crate::kernel::{correlation, KernelLayout};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView3};

/// Literal per-neighbor, per-kernel-point evaluation of the aggregation sum.
pub fn reference_aggregate(
    layout: &KernelLayout,
    offsets: &[Vector3<f64>],
    features: &Array2<f64>,
) -> Array2<f64> {
    let kernel_points = layout.flat_points();
    let mut out = Array2::zeros((kernel_points.len(), features.ncols()));
    for j in 0..offsets.len() {
        for (k, kp) in kernel_points.iter().enumerate() {
            let d = (kp - offsets[j]).norm();
            if d < layout.influence {
                let w = 1.0 - d / layout.influence;
                for c in 0..features.ncols() {
                    out[[k, c]] += features[[j, c]] * w;
                }
            }
        }
    }
    out
}

/// Scalar two-stage shell convolution: per-shell kernel convolution followed
/// by shell fusion, optionally passing each stage through leaky ReLU.
pub fn reference_shell_conv(
    agg: &Array2<f64>,
    w1: &ArrayView3<f64>,
    w2: &ArrayView3<f64>,
    shell_of: &[usize],
    activate: bool,
) -> Array1<f64> {
    let (k_total, c_in, c_half) = w1.dim();
    let (n_shells, _, c_out) = w2.dim();
    let act = |x: f64| {
        if activate && x < 0.0 {
            0.1 * x
        } else {
            x
        }
    };

    let mut shells = vec![vec![0.0f64; c_half]; n_shells];
    for k in 0..k_total {
        for h in 0..c_half {
            let mut acc = 0.0;
            for i in 0..c_in {
                acc += agg[[k, i]] * w1[[k, i, h]];
            }
            shells[shell_of[k]][h] += acc;
        }
    }
    for shell in shells.iter_mut() {
        for v in shell.iter_mut() {
            *v = act(*v);
        }
    }

    let mut out = Array1::zeros(c_out);
    for n in 0..n_shells {
        for o in 0..c_out {
            let mut acc = 0.0;
            for h in 0..c_half {
                acc += shells[n][h] * w2[[n, h, o]];
            }
            out[o] += acc;
        }
    }
    out.mapv_inplace(act);
    out
}
