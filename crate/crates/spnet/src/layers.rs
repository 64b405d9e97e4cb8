//! Pointwise layers with explicit forward caches and analytic backward
//! passes: bias-free linear maps, batch normalization, leaky ReLU.

use crate::error::{Error, Result};
use crate::param::{c, Param, Scalar};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour: `Identity` bypasses normalization entirely (used by
/// gradient-check oracles), `Train` normalizes with batch statistics and
/// updates running averages, `Eval` uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Identity,
    Train,
    Eval,
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * c(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_relu_grad<T: Scalar>(pre: T, upstream: T) -> T {
    if pre >= T::zero() {
        upstream
    } else {
        upstream * c(LEAKY_SLOPE)
    }
}

/// Leaky ReLU over a matrix, returning output and keeping `pre` for the
/// backward mask.
#[derive(Debug, Clone)]
pub struct LeakyReluCache<T> {
    pre: Array2<T>,
}

pub fn leaky_relu_forward<T: Scalar>(pre: Array2<T>) -> (Array2<T>, LeakyReluCache<T>) {
    let out = pre.mapv(leaky_relu);
    (out, LeakyReluCache { pre })
}

pub fn leaky_relu_backward<T: Scalar>(cache: &LeakyReluCache<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(&cache.pre, |g, &p| *g = leaky_relu_grad(p, *g));
    dx
}

/// Bias-free pointwise linear map `y = x W`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_width: usize, out_width: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::he_init(name, &[in_width, out_width], rng),
            cache: None,
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_width() {
            return Err(Error::Shape(format!(
                "{}: input width {} != {}",
                self.weight.name,
                x.ncols(),
                self.in_width()
            )));
        }
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = x.dot(&w);
        self.cache = Some(x.to_owned());
        Ok(y)
    }

    /// Accumulates dW and returns dx.
    pub fn backward(&mut self, dy: &Array2<T>) -> Result<Array2<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: no forward cache", self.weight.name)))?;
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dw = x.t().dot(dy);
        let mut grad = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        grad += &dw;
        Ok(dy.dot(&w.t()))
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    mode: BnMode,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    centered: Array2<T>,
}

/// Per-channel batch normalization over rows of `[n, C]`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[channels]);
        gamma.value.fill(T::one());
        BatchNorm {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: Array2<T>, mode: BnMode) -> Result<Array2<T>> {
        if x.ncols() != self.channels() {
            return Err(Error::Shape(format!(
                "{}: {} channels, expected {}",
                self.gamma.name,
                x.ncols(),
                self.channels()
            )));
        }
        match mode {
            BnMode::Identity => {
                self.cache = Some(BnCache {
                    mode,
                    xhat: Array2::zeros((0, 0)),
                    inv_std: Array1::zeros(0),
                    centered: Array2::zeros((0, 0)),
                });
                Ok(x)
            }
            BnMode::Train => {
                let n = x.nrows();
                if n == 0 {
                    return Err(Error::InvalidInput("batch norm over zero rows".into()));
                }
                let inv_n = c::<T>(1.0 / n as f64);
                let mean = x.sum_axis(Axis(0)) * inv_n;
                let centered = &x - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) * inv_n;
                let inv_std = var.mapv(|v| T::one() / (v + c(BN_EPS)).sqrt());
                let xhat = &centered * &inv_std;
                let y = &xhat * &self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap()
                    + &self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();

                let m = c::<T>(BN_MOMENTUM);
                let keep = T::one() - m;
                // Unbiased variance for the running estimate.
                let unbias = if n > 1 {
                    c::<T>(n as f64 / (n as f64 - 1.0))
                } else {
                    T::one()
                };
                for ch in 0..self.channels() {
                    self.running_mean[ch] = self.running_mean[ch] * keep + mean[ch] * m;
                    self.running_var[ch] =
                        self.running_var[ch] * keep + var[ch] * unbias * m;
                }
                self.cache = Some(BnCache {
                    mode,
                    xhat: xhat.clone(),
                    inv_std,
                    centered,
                });
                Ok(y)
            }
            BnMode::Eval => {
                let inv_std = self
                    .running_var
                    .mapv(|v| T::one() / (v + c(BN_EPS)).sqrt());
                let xhat = (&x - &self.running_mean) * &inv_std;
                let y = &xhat * &self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap()
                    + &self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                self.cache = Some(BnCache {
                    mode,
                    xhat: Array2::zeros((0, 0)),
                    inv_std,
                    centered: Array2::zeros((0, 0)),
                });
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Result<Array2<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: no forward cache", self.gamma.name)))?;
        match cache.mode {
            BnMode::Identity => Ok(dy.clone()),
            BnMode::Eval => {
                let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                Ok(dy * &gamma * &cache.inv_std)
            }
            BnMode::Train => {
                let n = dy.nrows();
                let inv_n = c::<T>(1.0 / n as f64);
                let gamma = self
                    .gamma
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();

                let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0));
                {
                    let mut g = self
                        .gamma
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    g += &dgamma;
                    let mut b = self
                        .beta
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    b += &dbeta;
                }

                // dx = gamma * inv_std / n * (n dxhat_i - sum dxhat - xhat_i * sum(dxhat*xhat))
                let dxhat = dy * &gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let n_t = c::<T>(n as f64);
                let mut dx = dxhat * n_t;
                dx -= &sum_dxhat;
                dx -= &(&cache.xhat * &sum_dxhat_xhat);
                dx = dx * &cache.inv_std * inv_n;
                Ok(dx)
            }
        }
    }
}
