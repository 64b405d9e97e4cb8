//! Per-neighbor feature attention from low-level attributes (color, normal).
//!
//! Two variants: a fixed Gaussian of the attribute-difference norm, and a
//! small MLP (ReLU hidden layers, sigmoid output) applied to the attribute
//! difference. Weights are applied with a residual connection:
//! `f'(s_k) = omega_k * f(s_k) + f(s_k)`.

use crate::error::{Error, Result};
use crate::param::{c, Param, Scalar};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

/// Gaussian attention weight. The exponent uses the unsquared norm of the
/// attribute difference over `2 sigma^2`.
pub fn attention_gaussian(query: &[f64], neighbor: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if query.len() != neighbor.len() {
        return Err(Error::Shape(format!(
            "attribute widths differ: {} vs {}",
            query.len(),
            neighbor.len()
        )));
    }
    let norm: f64 = query
        .iter()
        .zip(neighbor)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((-norm / (2.0 * sigma * sigma)).exp())
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// MLP attention: ReLU hidden layers, sigmoid output of width 1.
/// The backward pass recomputes hidden activations from the stored pair
/// differences instead of caching them.
#[derive(Debug, Clone)]
pub struct MlpAttention<T> {
    pub weights: Vec<Param<T>>,
    pub biases: Vec<Param<T>>,
}

impl<T: Scalar> MlpAttention<T> {
    /// `dims` is the full width chain, e.g. `[6, 8, 1]` for a 2-layer MLP.
    pub fn new(name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Parameter("attention MLP needs >= 1 layer".into()));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::Parameter("attention MLP must end in width 1".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            weights.push(Param::he_init(
                format!("{name}.w{i}"),
                &[w[0], w[1]],
                rng,
            ));
            biases.push(Param::zeros(format!("{name}.b{i}"), &[w[1]]));
        }
        Ok(MlpAttention { weights, biases })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].value.shape()[0]
    }

    fn layer_views(&self, i: usize) -> (ndarray::ArrayView2<'_, T>, ndarray::ArrayView1<'_, T>) {
        (
            self.weights[i].value.view().into_dimensionality().unwrap(),
            self.biases[i].value.view().into_dimensionality().unwrap(),
        )
    }

    /// Hidden activations for every layer plus the final omega.
    fn run(&self, diffs: &Array2<T>) -> (Vec<Array2<T>>, Array1<T>) {
        let depth = self.depth();
        let mut acts: Vec<Array2<T>> = Vec::with_capacity(depth);
        let mut x = diffs.clone();
        for i in 0..depth - 1 {
            let (w, b) = self.layer_views(i);
            let mut z = x.dot(&w);
            z += &b;
            z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            acts.push(z.clone());
            x = z;
        }
        let (w, b) = self.layer_views(depth - 1);
        let mut z = x.dot(&w);
        z += &b;
        let omega = z.index_axis(Axis(1), 0).mapv(sigmoid);
        acts.push(z);
        (acts, omega)
    }

    /// Attention weights for a batch of attribute differences `[n, in]`.
    pub fn forward_batch(&self, diffs: &Array2<T>) -> Result<Array1<T>> {
        if diffs.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "attention input width {} != {}",
                diffs.ncols(),
                self.input_width()
            )));
        }
        if diffs.nrows() == 0 {
            return Ok(Array1::zeros(0));
        }
        Ok(self.run(diffs).1)
    }

    /// Single query/neighbor pair.
    pub fn forward_pair(&self, query: ArrayView1<T>, neighbor: ArrayView1<T>) -> Result<T> {
        if query.len() != neighbor.len() {
            return Err(Error::Shape("attribute widths differ".into()));
        }
        let diff = (&query - &neighbor).insert_axis(Axis(0));
        Ok(self.forward_batch(&diff)?[0])
    }

    /// Accumulates parameter gradients given d(loss)/d(omega) per pair.
    /// Attribute differences are constants, so no input gradient is produced.
    pub fn backward_batch(&mut self, diffs: &Array2<T>, d_omega: &Array1<T>) -> Result<()> {
        if diffs.nrows() != d_omega.len() {
            return Err(Error::Shape(format!(
                "{} pairs but {} omega grads",
                diffs.nrows(),
                d_omega.len()
            )));
        }
        if diffs.nrows() == 0 {
            return Ok(());
        }
        let depth = self.depth();
        let (acts, omega) = self.run(diffs);

        // d z_last = d_omega * sigmoid'(z) = d_omega * omega * (1 - omega)
        let dsig = Array1::from_iter(
            omega
                .iter()
                .zip(d_omega)
                .map(|(&o, &g)| g * o * (T::one() - o)),
        );
        let mut dz: Array2<T> = dsig.insert_axis(Axis(1));

        for i in (0..depth).rev() {
            let input: &Array2<T> = if i == 0 { diffs } else { &acts[i - 1] };
            let dw = input.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            {
                let mut g = self.weights[i]
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                g += &dw;
                let mut b = self.biases[i]
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                b += &db;
            }
            if i == 0 {
                break;
            }
            let w = self.weights[i]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut dx = dz.dot(&w.t());
            // ReLU mask of the producing layer.
            dx.zip_mut_with(&acts[i - 1], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            dz = dx;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }
}

/// Residual re-weighting of neighbor feature rows: `f' = omega * f + f`.
pub fn apply_attention<T: Scalar>(features: &Array2<T>, omega: &[T]) -> Result<Array2<T>> {
    if features.nrows() != omega.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} weights",
            features.nrows(),
            omega.len()
        )));
    }
    let mut out = features.clone();
    for (mut row, &w) in out.rows_mut().into_iter().zip(omega) {
        row.mapv_inplace(|f| f * (T::one() + w));
    }
    Ok(out)
}
