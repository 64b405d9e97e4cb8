//! Shell-partitioned kernel point convolution.
//!
//! Per query point, neighbor features are soft-assigned to kernel points by
//! the linear correlation of their offsets, summed per kernel point, then
//! convolved in two stages: a per-shell kernel convolution (W1) and a
//! shell-fusion convolution (W2). Attention re-weights neighbor features
//! immediately before aggregation.
//!
//! All pair iteration follows CSR order with neighbor lists sorted by
//! support index, and parallel reductions are chunked in fixed order, so
//! forward and backward are bit-reproducible.

use crate::attention::MlpAttention;
use crate::error::{Error, Result};
use crate::kernel::{correlation, KernelLayout};
use crate::layers::{
    leaky_relu_backward, leaky_relu_forward, BatchNorm, BnMode, LeakyReluCache,
};
use crate::param::{c, Param, Scalar};
use crate::search::{radius_search, NeighborhoodIndex};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

/// Queries processed per work unit in parallel loops.
const CHUNK: usize = 256;

/// Precomputed pair structure for one convolution: the radius neighborhood,
/// per-pair kernel correlations, attribute differences for attention, and
/// the reverse (support -> pairs) index used by the backward scatter.
#[derive(Debug, Clone)]
pub struct ConvGeometry<T> {
    pub neighbors: NeighborhoodIndex,
    /// Query index of each pair slot.
    pub pair_query: Vec<u32>,
    /// CSR over pair slots: kernel points within influence of each pair.
    pub pair_kernel_offsets: Vec<u32>,
    pub pair_kernel_entries: Vec<(u16, T)>,
    /// CSR over supports: pair slots touching each support, ascending.
    pub rev_offsets: Vec<u32>,
    pub rev_slots: Vec<u32>,
    /// Query-minus-neighbor attribute difference per pair.
    pub attr_diffs: Array2<T>,
    /// Gaussian attention weights, when that variant is configured.
    pub gaussian_omega: Option<Array1<T>>,
    pub n_supports: usize,
    /// Nearest support of each query, for strided skip connections.
    /// `None` means queries and supports are the same point set.
    pub skip_gather: Option<Vec<u32>>,
}

impl<T: Scalar> ConvGeometry<T> {
    pub fn n_queries(&self) -> usize {
        self.neighbors.query_count()
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_query.len()
    }
}

/// Builds the pair structure for queries drawing from `supports` within
/// `radius`, against the given kernel layout.
pub fn build_conv_geometry<T: Scalar>(
    query_positions: &[Vector3<f64>],
    support_positions: &[Vector3<f64>],
    query_attrs: ArrayView2<f64>,
    support_attrs: ArrayView2<f64>,
    layout: &KernelLayout,
    radius: f64,
    gaussian_sigma: Option<f64>,
    skip_gather: Option<Vec<u32>>,
) -> Result<ConvGeometry<T>> {
    let neighbors = radius_search(query_positions, support_positions, radius)?;
    let kernel_points = layout.flat_points();
    let v = layout.influence;
    let attr_w = query_attrs.ncols();
    if support_attrs.ncols() != attr_w {
        return Err(Error::Shape("attribute widths differ".into()));
    }

    let n_q = neighbors.query_count();
    let n_pairs = neighbors.total_pairs();
    let mut pair_query = vec![0u32; n_pairs];
    for q in 0..n_q {
        for slot in neighbors.pair_range(q) {
            pair_query[slot] = q as u32;
        }
    }

    // Kernel correlations per pair, in parallel over query chunks.
    let per_query: Vec<(Vec<u32>, Vec<(u16, T)>, Vec<T>, Option<Vec<T>>)> = (0..n_q)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|queries| {
            let mut counts = Vec::new();
            let mut entries = Vec::new();
            let mut diffs = Vec::new();
            let mut gauss = gaussian_sigma.map(|_| Vec::new());
            for &q in queries {
                let qp = query_positions[q];
                for &j in neighbors.neighbors(q) {
                    let offset = support_positions[j as usize] - qp;
                    let mut n_entries = 0u32;
                    for (k, kp) in kernel_points.iter().enumerate() {
                        let w = correlation(kp, &offset, v);
                        if w > 0.0 {
                            entries.push((k as u16, c::<T>(w)));
                            n_entries += 1;
                        }
                    }
                    counts.push(n_entries);
                    let mut norm2 = 0.0;
                    for a in 0..attr_w {
                        let d = query_attrs[[q, a]] - support_attrs[[j as usize, a]];
                        diffs.push(c::<T>(d));
                        norm2 += d * d;
                    }
                    if let (Some(buf), Some(sigma)) = (&mut gauss, gaussian_sigma) {
                        buf.push(c::<T>((-norm2.sqrt() / (2.0 * sigma * sigma)).exp()));
                    }
                }
            }
            (counts, entries, diffs, gauss)
        })
        .collect();

    let mut pair_kernel_offsets = Vec::with_capacity(n_pairs + 1);
    pair_kernel_offsets.push(0u32);
    let mut pair_kernel_entries = Vec::new();
    let mut diffs_flat: Vec<T> = Vec::with_capacity(n_pairs * attr_w);
    let mut gaussian_flat: Option<Vec<T>> = gaussian_sigma.map(|_| Vec::with_capacity(n_pairs));
    for (counts, entries, diffs, gauss) in per_query {
        for n in counts {
            let base = *pair_kernel_offsets.last().unwrap();
            pair_kernel_offsets.push(base + n);
        }
        pair_kernel_entries.extend(entries);
        diffs_flat.extend(diffs);
        if let (Some(dst), Some(src)) = (&mut gaussian_flat, gauss) {
            dst.extend(src);
        }
    }

    // Reverse CSR by counting sort; slots stay ascending per support.
    let n_s = support_positions.len();
    let mut rev_counts = vec![0u32; n_s];
    for &j in neighbors.flat_indices() {
        rev_counts[j as usize] += 1;
    }
    let mut rev_offsets = vec![0u32; n_s + 1];
    for j in 0..n_s {
        rev_offsets[j + 1] = rev_offsets[j] + rev_counts[j];
    }
    let mut cursor = rev_offsets[..n_s].to_vec();
    let mut rev_slots = vec![0u32; n_pairs];
    for (slot, &j) in neighbors.flat_indices().iter().enumerate() {
        rev_slots[cursor[j as usize] as usize] = slot as u32;
        cursor[j as usize] += 1;
    }

    if let Some(gather) = &skip_gather {
        if gather.len() != n_q {
            return Err(Error::Shape("skip gather length != query count".into()));
        }
    }

    Ok(ConvGeometry {
        neighbors,
        pair_query,
        pair_kernel_offsets,
        pair_kernel_entries,
        rev_offsets,
        rev_slots,
        attr_diffs: Array2::from_shape_vec((n_pairs, attr_w), diffs_flat)
            .expect("diff buffer shape"),
        gaussian_omega: gaussian_flat.map(Array1::from_vec),
        n_supports: n_s,
        skip_gather,
    })
}

/// Per-kernel-point feature aggregation for one query: row k is the
/// correlation-weighted sum of neighbor features within the influence of
/// kernel point k. Neighbors are consumed in the order given.
pub fn aggregate_single<T: Scalar>(
    layout: &KernelLayout,
    offsets: &[Vector3<f64>],
    features: ArrayView2<T>,
) -> Result<Array2<T>> {
    if offsets.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} offsets but {} feature rows",
            offsets.len(),
            features.nrows()
        )));
    }
    let kernel_points = layout.flat_points();
    let mut out = Array2::zeros((kernel_points.len(), features.ncols()));
    for (k, kp) in kernel_points.iter().enumerate() {
        for (j, offset) in offsets.iter().enumerate() {
            let w = c::<T>(correlation(kp, offset, layout.influence));
            if w > T::zero() {
                let mut row = out.row_mut(k);
                row.scaled_add(w, &features.row(j));
            }
        }
    }
    Ok(out)
}

/// Two-stage shell convolution of one aggregated feature matrix. With
/// `activate` false both stages are linear, which reduces to plain kernel
/// point convolution when there is a single shell and W2 is the identity.
pub fn shell_conv_single<T: Scalar>(
    agg: ArrayView2<T>,
    w1: &Param<T>,
    w2: &Param<T>,
    layout: &KernelLayout,
    activate: bool,
) -> Result<Array1<T>> {
    let w1 = w1.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let w2 = w2.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let (k_total, c_in, c_half) = w1.dim();
    let (n_shells, c_half2, c_out) = w2.dim();
    if agg.nrows() != k_total || agg.ncols() != c_in {
        return Err(Error::Shape(format!(
            "agg {:?} does not match W1 {:?}",
            agg.dim(),
            w1.dim()
        )));
    }
    if c_half != c_half2 || n_shells != layout.shell_count() || k_total != layout.total_points() {
        return Err(Error::Shape("W1/W2/layout are inconsistent".into()));
    }
    let act = |x: T| if activate { crate::layers::leaky_relu(x) } else { x };

    let shell_of = layout.shell_of_flat();
    let mut shells: Array2<T> = Array2::zeros((n_shells, c_half));
    for k in 0..k_total {
        let wk = w1.index_axis(Axis(0), k);
        let contribution = agg.row(k).dot(&wk);
        let mut row = shells.row_mut(shell_of[k]);
        row += &contribution;
    }
    shells.mapv_inplace(act);

    let mut out: Array1<T> = Array1::zeros(c_out);
    for n in 0..n_shells {
        out += &shells.row(n).dot(&w2.index_axis(Axis(0), n));
    }
    out.mapv_inplace(act);
    Ok(out)
}

/// Attention variant wired into a convolution.
#[derive(Debug, Clone)]
pub enum AttentionOp<T> {
    None,
    /// Weights precomputed per pair in the geometry.
    Gaussian,
    Mlp(MlpAttention<T>),
}

#[derive(Debug, Clone)]
struct SpConvCache<T> {
    input: Array2<T>,
    omega: Array1<T>,
    aggregated: Array3<T>,
    shell_post: Array3<T>,
    relu1: LeakyReluCache<T>,
    relu2: LeakyReluCache<T>,
}

/// Batched SPConv over all query points of one level.
#[derive(Debug, Clone)]
pub struct SpConv<T> {
    pub w1: Param<T>,
    pub w2: Param<T>,
    pub bn1: BatchNorm<T>,
    pub bn2: BatchNorm<T>,
    pub attention: AttentionOp<T>,
    shell_of: Vec<usize>,
    cache: Option<SpConvCache<T>>,
}

impl<T: Scalar> SpConv<T> {
    pub fn new(
        name: &str,
        layout: &KernelLayout,
        c_in: usize,
        c_out: usize,
        attention: AttentionOp<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::Parameter(format!(
                "{name}: C_out must be even, got {c_out}"
            )));
        }
        let k_total = layout.total_points();
        let n_shells = layout.shell_count();
        let c_half = c_out / 2;
        Ok(SpConv {
            w1: Param::he_init(format!("{name}.w1"), &[k_total, c_in, c_half], rng),
            w2: Param::he_init(format!("{name}.w2"), &[n_shells, c_half, c_out], rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), c_half),
            bn2: BatchNorm::new(&format!("{name}.bn2"), c_out),
            attention,
            shell_of: layout.shell_of_flat(),
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.w1.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.w2.value.shape()[2]
    }

    fn k_total(&self) -> usize {
        self.w1.value.shape()[0]
    }

    fn n_shells(&self) -> usize {
        self.w2.value.shape()[0]
    }

    /// Attention weights per pair; zeros mean the residual path only.
    fn compute_omega(&self, geom: &ConvGeometry<T>) -> Result<Array1<T>> {
        match &self.attention {
            AttentionOp::None => Ok(Array1::zeros(geom.n_pairs())),
            AttentionOp::Gaussian => geom
                .gaussian_omega
                .clone()
                .ok_or_else(|| Error::State("geometry lacks gaussian weights".into())),
            AttentionOp::Mlp(mlp) => mlp.forward_batch(&geom.attr_diffs),
        }
    }

    pub fn forward(
        &mut self,
        geom: &ConvGeometry<T>,
        input: ArrayView2<T>,
        bn_mode: BnMode,
    ) -> Result<Array2<T>> {
        if input.nrows() != geom.n_supports {
            return Err(Error::Shape(format!(
                "{} support rows but geometry has {}",
                input.nrows(),
                geom.n_supports
            )));
        }
        if input.ncols() != self.c_in() {
            return Err(Error::Shape(format!(
                "feature width {} != {}",
                input.ncols(),
                self.c_in()
            )));
        }
        let n_q = geom.n_queries();
        let (k_total, c_in) = (self.k_total(), self.c_in());
        let (n_shells, c_half, c_out) = (self.n_shells(), self.c_out() / 2, self.c_out());

        let omega = self.compute_omega(geom)?;
        let input_owned = input.to_owned();

        // Aggregation: G[q,k,:] = sum over pairs of corr * (1+omega) * U[j,:].
        let mut aggregated: Array3<T> = Array3::zeros((n_q, k_total, c_in));
        {
            let g_flat = aggregated.as_slice_mut().unwrap();
            let u_flat = input_owned.as_slice().unwrap();
            let per_query = k_total * c_in;
            g_flat
                .par_chunks_mut(per_query * CHUNK)
                .enumerate()
                .for_each(|(chunk_idx, g_chunk)| {
                    let q_start = chunk_idx * CHUNK;
                    let q_end = (q_start + CHUNK).min(n_q);
                    for q in q_start..q_end {
                        let g_q = &mut g_chunk[(q - q_start) * per_query..][..per_query];
                        let range = geom.neighbors.pair_range(q);
                        let nbrs = geom.neighbors.neighbors(q);
                        for (slot, &j) in range.clone().zip(nbrs) {
                            let scale = T::one() + omega[slot];
                            let u_row = &u_flat[j as usize * c_in..][..c_in];
                            let ks = geom.pair_kernel_offsets[slot] as usize;
                            let ke = geom.pair_kernel_offsets[slot + 1] as usize;
                            for &(k, corr) in &geom.pair_kernel_entries[ks..ke] {
                                let factor = corr * scale;
                                let dst = &mut g_q[k as usize * c_in..][..c_in];
                                for (d, &u) in dst.iter_mut().zip(u_row) {
                                    *d = *d + factor * u;
                                }
                            }
                        }
                    }
                });
        }

        // Stage 1: per-shell kernel convolution.
        let w1 = self
            .w1
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut shell_pre: Array3<T> = Array3::zeros((n_q, n_shells, c_half));
        for k in 0..k_total {
            let contribution = aggregated
                .index_axis(Axis(1), k)
                .dot(&w1.index_axis(Axis(0), k));
            let mut dst = shell_pre.index_axis_mut(Axis(1), self.shell_of[k]);
            dst += &contribution;
        }
        let flat = shell_pre
            .into_shape_with_order((n_q * n_shells, c_half))
            .unwrap();
        let bn1_out = self.bn1.forward(flat, bn_mode)?;
        let (shell_act, relu1) = leaky_relu_forward(bn1_out);
        let shell_post = shell_act
            .into_shape_with_order((n_q, n_shells, c_half))
            .unwrap();

        // Stage 2: shell fusion.
        let w2 = self
            .w2
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut fused: Array2<T> = Array2::zeros((n_q, c_out));
        for n in 0..n_shells {
            fused += &shell_post
                .index_axis(Axis(1), n)
                .dot(&w2.index_axis(Axis(0), n));
        }
        let bn2_out = self.bn2.forward(fused, bn_mode)?;
        let (output, relu2) = leaky_relu_forward(bn2_out);

        self.cache = Some(SpConvCache {
            input: input_owned,
            omega,
            aggregated,
            shell_post,
            relu1,
            relu2,
        });
        Ok(output)
    }

    /// Returns the gradient w.r.t. the support features; parameter
    /// gradients accumulate in place.
    pub fn backward(&mut self, geom: &ConvGeometry<T>, upstream: &Array2<T>) -> Result<Array2<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("spconv: no forward cache".into()))?;
        let n_q = geom.n_queries();
        let (k_total, c_in) = (self.k_total(), self.c_in());
        let (n_shells, c_half, c_out) = (self.n_shells(), self.c_out() / 2, self.c_out());
        if upstream.dim() != (n_q, c_out) {
            return Err(Error::Shape(format!(
                "upstream {:?}, expected ({n_q}, {c_out})",
                upstream.dim()
            )));
        }

        // Through stage-2 activation and batch norm.
        let d_bn2 = leaky_relu_backward(&cache.relu2, upstream);
        let d_fused = self.bn2.backward(&d_bn2)?;

        // W2 gradients and shell feature gradients.
        let w2 = self
            .w2
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut d_shell_post: Array3<T> = Array3::zeros((n_q, n_shells, c_half));
        {
            let mut w2_grad = self
                .w2
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            for n in 0..n_shells {
                let h_n = cache.shell_post.index_axis(Axis(1), n);
                let mut gw = w2_grad.index_axis_mut(Axis(0), n);
                gw += &h_n.t().dot(&d_fused);
                let mut dh = d_shell_post.index_axis_mut(Axis(1), n);
                dh += &d_fused.dot(&w2.index_axis(Axis(0), n).t());
            }
        }

        // Through stage-1 activation and batch norm.
        let d_flat = d_shell_post
            .into_shape_with_order((n_q * n_shells, c_half))
            .unwrap();
        let d_act = leaky_relu_backward(&cache.relu1, &d_flat);
        let d_shell_pre = self
            .bn1
            .backward(&d_act)?
            .into_shape_with_order((n_q, n_shells, c_half))
            .unwrap();

        // W1 gradients and aggregated-feature gradients.
        let w1 = self
            .w1
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut d_agg: Array3<T> = Array3::zeros((n_q, k_total, c_in));
        {
            let mut w1_grad = self
                .w1
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            for k in 0..k_total {
                let d_pre_n = d_shell_pre.index_axis(Axis(1), self.shell_of[k]);
                let g_k = cache.aggregated.index_axis(Axis(1), k);
                let mut gw = w1_grad.index_axis_mut(Axis(0), k);
                gw += &g_k.t().dot(&d_pre_n);
                let mut da = d_agg.index_axis_mut(Axis(1), k);
                da += &d_pre_n.dot(&w1.index_axis(Axis(0), k).t());
            }
        }

        // Per-pair upstream vector s_p = sum_k corr * dG[q,k,:], used both
        // for the attention gradient (query-parallel) and the input-feature
        // gradient (support-parallel). Each target slot is written by
        // exactly one task, so both passes are deterministic.
        let d_agg_flat = d_agg.as_slice().unwrap();
        let u_flat = cache.input.as_slice().unwrap();
        let per_query = k_total * c_in;

        let pair_vec = |slot: usize| -> Vec<T> {
            let q = geom.pair_query[slot] as usize;
            let base = q * per_query;
            let ks = geom.pair_kernel_offsets[slot] as usize;
            let ke = geom.pair_kernel_offsets[slot + 1] as usize;
            let mut s = vec![T::zero(); c_in];
            for &(k, corr) in &geom.pair_kernel_entries[ks..ke] {
                let src = &d_agg_flat[base + k as usize * c_in..][..c_in];
                for (acc, &g) in s.iter_mut().zip(src) {
                    *acc = *acc + corr * g;
                }
            }
            s
        };

        // Attention gradients.
        let needs_omega_grad = matches!(self.attention, AttentionOp::Mlp(_));
        if needs_omega_grad {
            let mut d_omega: Array1<T> = Array1::zeros(geom.n_pairs());
            d_omega
                .as_slice_mut()
                .unwrap()
                .par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(chunk_idx, out)| {
                    let start = chunk_idx * CHUNK;
                    for (offset, d) in out.iter_mut().enumerate() {
                        let slot = start + offset;
                        let j = geom.neighbors.flat_indices()[slot] as usize;
                        let s = pair_vec(slot);
                        let u_row = &u_flat[j * c_in..][..c_in];
                        let mut dot = T::zero();
                        for (a, &b) in s.iter().zip(u_row) {
                            dot = dot + *a * b;
                        }
                        *d = dot;
                    }
                });
            if let AttentionOp::Mlp(mlp) = &mut self.attention {
                mlp.backward_batch(&geom.attr_diffs, &d_omega)?;
            }
        }

        // Input feature gradients, parallel over supports.
        let mut d_input: Array2<T> = Array2::zeros((geom.n_supports, c_in));
        {
            let d_in_flat = d_input.as_slice_mut().unwrap();
            d_in_flat
                .par_chunks_mut(c_in)
                .enumerate()
                .for_each(|(j, dst)| {
                    let rs = geom.rev_offsets[j] as usize;
                    let re = geom.rev_offsets[j + 1] as usize;
                    for &slot in &geom.rev_slots[rs..re] {
                        let scale = T::one() + cache.omega[slot as usize];
                        let s = pair_vec(slot as usize);
                        for (d, &v) in dst.iter_mut().zip(&s) {
                            *d = *d + scale * v;
                        }
                    }
                });
        }
        Ok(d_input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.w1, &mut self.w2];
        out.push(&mut self.bn1.gamma);
        out.push(&mut self.bn1.beta);
        out.push(&mut self.bn2.gamma);
        out.push(&mut self.bn2.beta);
        if let AttentionOp::Mlp(mlp) = &mut self.attention {
            out.extend(mlp.params_mut());
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![&mut self.bn1, &mut self.bn2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_layout;
    use crate::oracle;
    use ndarray::arr2;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn toy_layout() -> KernelLayout {
        build_layout(3, 5, &[0.06, 0.12], 0.04, 3).unwrap()
    }

    #[test]
    fn aggregate_with_no_neighbors_is_zero() {
        let layout = toy_layout();
        let features: Array2<f64> = Array2::zeros((0, 4));
        let agg = aggregate_single(&layout, &[], features.view()).unwrap();
        assert_eq!(agg.dim(), (layout.total_points(), 4));
        assert!(agg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbor_at_kernel_point_copies_feature_to_that_row() {
        let layout = toy_layout();
        let kp = layout.flat_points()[3];
        let features: Array2<f64> = arr2(&[[1.0, -2.0, 0.5]]);
        let agg = aggregate_single(&layout, &[kp], features.view()).unwrap();
        for (i, &v) in agg.row(3).iter().enumerate() {
            assert!((v - features[[0, i]]).abs() < 1e-15);
        }
        // Other rows are scaled by their own correlations.
        for (k, p) in layout.flat_points().iter().enumerate() {
            let w = correlation(p, &kp, layout.influence);
            for (i, v) in agg.row(k).iter().enumerate() {
                assert!((v - w * features[[0, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_matches_double_loop_reference() {
        let layout = toy_layout();
        let mut rng = StdRng::seed_from_u64(10);
        let offsets: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rand::Rng::random_range(&mut rng, -0.15..0.15),
                    rand::Rng::random_range(&mut rng, -0.15..0.15),
                    rand::Rng::random_range(&mut rng, -0.15..0.15),
                )
            })
            .collect();
        let features = Array2::from_shape_fn((20, 4), |(i, j)| ((i * 5 + j) as f64 * 0.17).sin());
        let agg = aggregate_single(&layout, &offsets, features.view()).unwrap();
        let reference = oracle::reference_aggregate(&layout, &offsets, &features);
        for (a, b) in agg.iter().zip(reference.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_rejects_width_mismatch() {
        let layout = toy_layout();
        let features: Array2<f64> = Array2::zeros((2, 4));
        assert!(aggregate_single(&layout, &[Vector3::zeros()], features.view()).is_err());
    }

    #[test]
    fn shell_conv_zero_input_zero_output_without_activation() {
        let layout = toy_layout();
        let mut rng = StdRng::seed_from_u64(1);
        let k = layout.total_points();
        let w1: Param<f64> = Param::he_init("w1", &[k, 4, 3], &mut rng);
        let w2: Param<f64> = Param::he_init("w2", &[3, 3, 6], &mut rng);
        let agg: Array2<f64> = Array2::zeros((k, 4));
        let out = shell_conv_single(agg.view(), &w1, &w2, &layout, false).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // Leaky ReLU of zero is zero as well.
        let out = shell_conv_single(agg.view(), &w1, &w2, &layout, true).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_shell_identity_fusion_reduces_to_point_convolution() {
        // One shell, W2 = identity, activation off: out = sum_k agg[k] W1[k].
        let layout = build_layout(1, 1, &[], 0.04, 0).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let w1: Param<f64> = Param::he_init("w1", &[1, 4, 4], &mut rng);
        let mut w2: Param<f64> = Param::zeros("w2", &[1, 4, 4]);
        for i in 0..4 {
            w2.value[[0, i, i]] = 1.0;
        }
        let agg = Array2::from_shape_fn((1, 4), |(_, j)| j as f64 * 0.3 - 0.4);
        let out = shell_conv_single(agg.view(), &w1, &w2, &layout, false).unwrap();
        let w1v = w1.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let direct = agg.row(0).dot(&w1v.index_axis(Axis(0), 0));
        for (a, b) in out.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shell_conv_matches_scalar_reference() {
        let layout = toy_layout();
        let mut rng = StdRng::seed_from_u64(3);
        let k = layout.total_points();
        for _ in 0..20 {
            let w1: Param<f64> = Param::he_init("w1", &[k, 4, 4], &mut rng);
            let w2: Param<f64> = Param::he_init("w2", &[3, 4, 8], &mut rng);
            let agg = Array2::from_shape_fn((k, 4), |(i, j)| ((i * 3 + j) as f64 * 0.31).cos());
            let fast = shell_conv_single(agg.view(), &w1, &w2, &layout, true).unwrap();
            let slow = oracle::reference_shell_conv(
                &agg,
                &w1.value.view().into_dimensionality().unwrap(),
                &w2.value.view().into_dimensionality().unwrap(),
                &layout.shell_of_flat(),
                true,
            );
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!(
                    (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                    "mismatch {a} vs {b}"
                );
            }
        }
    }
}
