//! Radius and k-nearest neighbor search.
//!
//! `radius_search` uses a uniform spatial hash grid with cell size equal to
//! the query radius, so each query inspects at most 27 cells.
//! `brute_force_radius_search` is the all-pairs reference; both use the same
//! strict open-ball predicate `d^2 < r^2` and return per-query neighbor
//! lists sorted by support index, so their outputs are identical, not merely
//! set-equal.

use crate::cloud::check_finite_points;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashMap;

/// Per-query neighbor lists in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub radius: f64,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl NeighborhoodIndex {
    pub fn from_lists(lists: Vec<Vec<u32>>, radius: f64) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0usize);
        let total: usize = lists.iter().map(|l| l.len()).sum();
        let mut indices = Vec::with_capacity(total);
        for list in lists {
            indices.extend_from_slice(&list);
            offsets.push(indices.len());
        }
        NeighborhoodIndex {
            radius,
            offsets,
            indices,
        }
    }

    pub fn query_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, query: usize) -> &[u32] {
        &self.indices[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn total_pairs(&self) -> usize {
        self.indices.len()
    }

    /// Byte offset of the first pair of `query` in the flattened pair array.
    pub fn pair_range(&self, query: usize) -> std::ops::Range<usize> {
        self.offsets[query]..self.offsets[query + 1]
    }

    pub fn flat_indices(&self) -> &[u32] {
        &self.indices
    }
}

fn validate_search_inputs(
    queries: &[Vector3<f64>],
    supports: &[Vector3<f64>],
    radius: f64,
) -> Result<()> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::Parameter(format!("radius must be > 0, got {radius}")));
    }
    if queries.is_empty() || supports.is_empty() {
        return Err(Error::Parameter("point sets must be non-empty".into()));
    }
    check_finite_points(queries, "queries")?;
    check_finite_points(supports, "supports")?;
    Ok(())
}

#[inline]
fn cell_of(p: &Vector3<f64>, inv_cell: f64) -> (i64, i64, i64) {
    (
        (p.x * inv_cell).floor() as i64,
        (p.y * inv_cell).floor() as i64,
        (p.z * inv_cell).floor() as i64,
    )
}

/// All support indices strictly within `radius` of each query point.
pub fn radius_search(
    queries: &[Vector3<f64>],
    supports: &[Vector3<f64>],
    radius: f64,
) -> Result<NeighborhoodIndex> {
    validate_search_inputs(queries, supports, radius)?;
    let inv_cell = 1.0 / radius;
    let r2 = radius * radius;

    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in supports.iter().enumerate() {
        grid.entry(cell_of(p, inv_cell)).or_default().push(i as u32);
    }

    let lists: Vec<Vec<u32>> = queries
        .par_iter()
        .map(|q| {
            let (cx, cy, cz) = cell_of(q, inv_cell);
            let mut found = Vec::new();
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in cell {
                                let d = supports[j as usize] - q;
                                if d.norm_squared() < r2 {
                                    found.push(j);
                                }
                            }
                        }
                    }
                }
            }
            found.sort_unstable();
            found
        })
        .collect();

    Ok(NeighborhoodIndex::from_lists(lists, radius))
}

/// Naive all-pairs scan; reference semantics for `radius_search`.
pub fn brute_force_radius_search(
    queries: &[Vector3<f64>],
    supports: &[Vector3<f64>],
    radius: f64,
) -> Result<NeighborhoodIndex> {
    validate_search_inputs(queries, supports, radius)?;
    let r2 = radius * radius;
    let lists: Vec<Vec<u32>> = queries
        .iter()
        .map(|q| {
            supports
                .iter()
                .enumerate()
                .filter(|(_, s)| (*s - q).norm_squared() < r2)
                .map(|(j, _)| j as u32)
                .collect()
        })
        .collect();
    Ok(NeighborhoodIndex::from_lists(lists, radius))
}

/// Indices (ascending by distance, ties by index) of the `k` nearest
/// supports for each query. `k` is clamped to the support count.
/// Self-matches are not excluded; pass `skip` to drop one index per query.
pub fn knn_search(
    queries: &[Vector3<f64>],
    supports: &[Vector3<f64>],
    k: usize,
) -> Result<Vec<Vec<(u32, f64)>>> {
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    if queries.is_empty() || supports.is_empty() {
        return Err(Error::Parameter("point sets must be non-empty".into()));
    }
    check_finite_points(queries, "queries")?;
    check_finite_points(supports, "supports")?;
    let k = k.min(supports.len());

    let result: Vec<Vec<(u32, f64)>> = queries
        .par_iter()
        .map(|q| {
            // Selection over a small fixed-size buffer of the best k.
            let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for (j, s) in supports.iter().enumerate() {
                let d2 = (s - q).norm_squared();
                let key = (d2, j as u32);
                if best.len() < k {
                    best.push(key);
                    best.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                } else if key < *best.last().unwrap() {
                    best.pop();
                    let pos = best.partition_point(|e| *e < key);
                    best.insert(pos, key);
                }
            }
            best.into_iter().map(|(d2, j)| (j, d2.sqrt())).collect()
        })
        .collect();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| v(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn single_inside_single_outside() {
        let queries = vec![v(0.0, 0.0, 0.0)];
        let supports = vec![v(0.0, 0.0, 0.5), v(0.0, 0.0, 2.0)];
        let idx = radius_search(&queries, &supports, 1.0).unwrap();
        assert_eq!(idx.neighbors(0), &[0]);
    }

    #[test]
    fn open_ball_excludes_boundary() {
        let queries = vec![v(0.0, 0.0, 0.0)];
        let supports = vec![v(1.0, 0.0, 0.0)];
        let idx = radius_search(&queries, &supports, 1.0).unwrap();
        assert!(idx.neighbors(0).is_empty());
    }

    #[test]
    fn radius_below_min_pairwise_distance_gives_empty_lists() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let idx = radius_search(&pts, &pts, 1e-3).unwrap();
        // Self-matches at distance 0 are within any positive radius.
        for q in 0..3 {
            assert_eq!(idx.neighbors(q), &[q as u32]);
        }
        let others = vec![v(10.0, 0.0, 0.0)];
        let idx = radius_search(&others, &pts, 1e-3).unwrap();
        assert!(idx.neighbors(0).is_empty());
    }

    #[test]
    fn brute_force_zero_distance_and_out_of_range() {
        let q = vec![v(0.3, 0.3, 0.3)];
        let s = vec![v(0.3, 0.3, 0.3)];
        let idx = brute_force_radius_search(&q, &s, 0.1).unwrap();
        assert_eq!(idx.neighbors(0), &[0]);
        let far = vec![v(5.0, 0.0, 0.0)];
        let idx = brute_force_radius_search(&q, &far, 0.1).unwrap();
        assert!(idx.neighbors(0).is_empty());
    }

    #[test]
    fn grid_matches_brute_force_on_random_cloud() {
        let pts = random_points(1000, 7);
        let fast = radius_search(&pts, &pts, 0.1).unwrap();
        let naive = brute_force_radius_search(&pts, &pts, 0.1).unwrap();
        assert_eq!(fast, naive);
    }

    #[test]
    fn hundred_points_cross_check() {
        let pts = random_points(100, 42);
        let fast = radius_search(&pts, &pts, 0.2).unwrap();
        let naive = brute_force_radius_search(&pts, &pts, 0.2).unwrap();
        assert_eq!(fast, naive);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pts = vec![v(0.0, 0.0, 0.0)];
        assert!(radius_search(&pts, &pts, 0.0).is_err());
        assert!(radius_search(&pts, &[], 1.0).is_err());
        let bad = vec![v(f64::NAN, 0.0, 0.0)];
        assert!(matches!(
            radius_search(&bad, &pts, 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            brute_force_radius_search(&pts, &bad, 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn result_independent_of_support_order() {
        let pts = random_points(200, 3);
        let queries = random_points(50, 4);
        let idx = radius_search(&queries, &pts, 0.25).unwrap();

        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.reverse();
        let shuffled: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let idx_shuffled = radius_search(&queries, &shuffled, 0.25).unwrap();

        // Map shuffled indices back and compare as sets per query.
        for q in 0..queries.len() {
            let mut mapped: Vec<u32> = idx_shuffled
                .neighbors(q)
                .iter()
                .map(|&j| perm[j as usize] as u32)
                .collect();
            mapped.sort_unstable();
            assert_eq!(idx.neighbors(q), mapped.as_slice());
        }
    }

    #[test]
    fn knn_orders_by_distance_then_index() {
        let queries = vec![v(0.0, 0.0, 0.0)];
        let supports = vec![v(1.0, 0.0, 0.0), v(0.5, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        let knn = knn_search(&queries, &supports, 2).unwrap();
        assert_eq!(knn[0][0].0, 1);
        assert_eq!(knn[0][1].0, 0);
        // k larger than support count clamps.
        let knn = knn_search(&queries, &supports, 10).unwrap();
        assert_eq!(knn[0].len(), 3);
    }

    proptest! {
        #[test]
        fn prop_grid_equals_brute_force(seed in 0u64..5000, n in 2usize..120, r in 0.01f64..0.6) {
            let pts = random_points(n, seed);
            let fast = radius_search(&pts, &pts, r).unwrap();
            let naive = brute_force_radius_search(&pts, &pts, r).unwrap();
            prop_assert_eq!(fast, naive);
        }
    }
}
