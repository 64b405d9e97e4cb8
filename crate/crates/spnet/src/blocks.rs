//! Residual SPConv blocks and the classifier head.
//!
//! A block is: pointwise MLP down to the bottleneck width, SPConv at that
//! width, pointwise MLP back up, plus an identity or projection skip. For
//! strided blocks the skip gathers each query's nearest support row (for
//! Poisson-disk levels that is the query point itself).

use crate::error::{Error, Result};
use crate::kernel::KernelLayout;
use crate::layers::{
    leaky_relu_backward, leaky_relu_forward, BatchNorm, BnMode, LeakyReluCache, Linear,
};
use crate::param::{Param, Scalar};
use crate::spconv::{AttentionOp, ConvGeometry, SpConv};
use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct SpConvBlock<T> {
    pub down: Linear<T>,
    pub bn_down: BatchNorm<T>,
    pub conv: SpConv<T>,
    pub up: Linear<T>,
    pub bn_up: BatchNorm<T>,
    pub proj: Option<(Linear<T>, BatchNorm<T>)>,
    relu_down: Option<LeakyReluCache<T>>,
    relu_out: Option<LeakyReluCache<T>>,
    skip_rows: Option<Array2<T>>,
}

impl<T: Scalar> SpConvBlock<T> {
    pub fn new(
        name: &str,
        layout: &KernelLayout,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        attention: AttentionOp<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let proj = if c_in != c_out {
            Some((
                Linear::new(&format!("{name}.proj"), c_in, c_out, rng),
                BatchNorm::new(&format!("{name}.bn_proj"), c_out),
            ))
        } else {
            None
        };
        Ok(SpConvBlock {
            down: Linear::new(&format!("{name}.down"), c_in, c_mid, rng),
            bn_down: BatchNorm::new(&format!("{name}.bn_down"), c_mid),
            conv: SpConv::new(&format!("{name}.conv"), layout, c_mid, c_mid, attention, rng)?,
            up: Linear::new(&format!("{name}.up"), c_mid, c_out, rng),
            bn_up: BatchNorm::new(&format!("{name}.bn_up"), c_out),
            proj,
            relu_down: None,
            relu_out: None,
            skip_rows: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.down.in_width()
    }

    pub fn c_out(&self) -> usize {
        self.up.out_width()
    }

    pub fn forward(
        &mut self,
        geom: &ConvGeometry<T>,
        input: &Array2<T>,
        bn_mode: BnMode,
    ) -> Result<Array2<T>> {
        let n_q = geom.n_queries();
        if geom.skip_gather.is_none() && n_q != input.nrows() {
            return Err(Error::Shape(
                "non-strided block requires queries == supports".into(),
            ));
        }

        let down_pre = self.bn_down.forward(self.down.forward(input.view())?, bn_mode)?;
        let (bottleneck, relu_down) = leaky_relu_forward(down_pre);
        let conv_out = self.conv.forward(geom, bottleneck.view(), bn_mode)?;
        let main = self.bn_up.forward(self.up.forward(conv_out.view())?, bn_mode)?;

        let skip_rows = match &geom.skip_gather {
            None => input.clone(),
            Some(gather) => {
                let mut rows = Array2::zeros((n_q, input.ncols()));
                for (q, &s) in gather.iter().enumerate() {
                    rows.row_mut(q).assign(&input.row(s as usize));
                }
                rows
            }
        };
        let skip = match &mut self.proj {
            Some((lin, bn)) => bn.forward(lin.forward(skip_rows.view())?, bn_mode)?,
            None => {
                if self.c_in() != self.c_out() {
                    return Err(Error::Shape("identity skip requires c_in == c_out".into()));
                }
                skip_rows.clone()
            }
        };
        self.skip_rows = Some(skip_rows);

        let (out, relu_out) = leaky_relu_forward(main + skip);
        self.relu_down = Some(relu_down);
        self.relu_out = Some(relu_out);
        Ok(out)
    }

    /// Gradient w.r.t. the block input; parameter gradients accumulate.
    pub fn backward(&mut self, geom: &ConvGeometry<T>, upstream: &Array2<T>) -> Result<Array2<T>> {
        let relu_out = self
            .relu_out
            .take()
            .ok_or_else(|| Error::State("block: no forward cache".into()))?;
        let relu_down = self.relu_down.take().unwrap();
        self.skip_rows = None;
        let d_sum = leaky_relu_backward(&relu_out, upstream);

        // Skip path.
        let d_skip_rows = match &mut self.proj {
            Some((lin, bn)) => {
                let d = bn.backward(&d_sum)?;
                lin.backward(&d)?
            }
            None => d_sum.clone(),
        };

        // Main path.
        let d_conv_out = self.up.backward(&self.bn_up.backward(&d_sum)?)?;
        let d_bottleneck = self.conv.backward(geom, &d_conv_out)?;
        let d_down_pre = self.bn_down.backward(&leaky_relu_backward(&relu_down, &d_bottleneck))?;
        let mut d_input = self.down.backward(&d_down_pre)?;

        match &geom.skip_gather {
            None => d_input += &d_skip_rows,
            Some(gather) => {
                for (q, &s) in gather.iter().enumerate() {
                    let mut row = d_input.row_mut(s as usize);
                    row += &d_skip_rows.row(q);
                }
            }
        }
        Ok(d_input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.down.weight];
        out.push(&mut self.bn_down.gamma);
        out.push(&mut self.bn_down.beta);
        out.extend(self.conv.params_mut());
        out.push(&mut self.up.weight);
        out.push(&mut self.bn_up.gamma);
        out.push(&mut self.bn_up.beta);
        if let Some((lin, bn)) = &mut self.proj {
            out.push(&mut lin.weight);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.bn_down];
        out.extend(self.conv.batch_norms_mut());
        out.push(&mut self.bn_up);
        if let Some((_, bn)) = &mut self.proj {
            out.push(bn);
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

/// Per-point classifier: linear, batch norm, leaky ReLU, linear to logits.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub lin1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub lin2: Linear<T>,
    relu: Option<LeakyReluCache<T>>,
}

impl<T: Scalar> Head<T> {
    pub fn new(name: &str, c_in: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Head {
            lin1: Linear::new(&format!("{name}.lin1"), c_in, hidden, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), hidden),
            lin2: Linear::new(&format!("{name}.lin2"), hidden, classes, rng),
            relu: None,
        }
    }

    pub fn forward(&mut self, input: &Array2<T>, bn_mode: BnMode) -> Result<Array2<T>> {
        let pre = self.bn.forward(self.lin1.forward(input.view())?, bn_mode)?;
        let (hidden, relu) = leaky_relu_forward(pre);
        self.relu = Some(relu);
        self.lin2.forward(hidden.view())
    }

    pub fn backward(&mut self, upstream: &Array2<T>) -> Result<Array2<T>> {
        let relu = self
            .relu
            .take()
            .ok_or_else(|| Error::State("head: no forward cache".into()))?;
        let d_hidden = self.lin2.backward(upstream)?;
        let d_pre = self.bn.backward(&leaky_relu_backward(&relu, &d_hidden))?;
        self.lin1.backward(&d_pre)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.lin1.weight,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.lin2.weight,
        ]
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![&mut self.bn]
    }
}
