//! Point set downsampling: Poisson disk subset selection and grid averaging.

use crate::cloud::check_finite_points;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Greedy dart-throwing Poisson disk sampling over a seeded shuffle of the
/// input indices. The returned subset (ascending indices) has all pairwise
/// distances >= `r_p` and is maximal: every rejected point lies strictly
/// within `r_p` of an accepted one.
pub fn poisson_disk_sample(points: &[Vector3<f64>], r_p: f64, seed: u64) -> Result<Vec<u32>> {
    if r_p <= 0.0 || !r_p.is_finite() {
        return Err(Error::Parameter(format!("r_p must be > 0, got {r_p}")));
    }
    check_finite_points(points, "points")?;
    if points.is_empty() {
        return Ok(Vec::new());
    }

    let mut order: Vec<u32> = (0..points.len() as u32).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let inv_cell = 1.0 / r_p;
    let r2 = r_p * r_p;
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    let mut accepted: Vec<u32> = Vec::new();

    'candidates: for &i in &order {
        let p = &points[i as usize];
        let cx = (p.x * inv_cell).floor() as i64;
        let cy = (p.y * inv_cell).floor() as i64;
        let cz = (p.z * inv_cell).floor() as i64;
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in cell {
                            if (points[j as usize] - p).norm_squared() < r2 {
                                continue 'candidates;
                            }
                        }
                    }
                }
            }
        }
        grid.entry((cx, cy, cz)).or_default().push(i);
        accepted.push(i);
    }

    accepted.sort_unstable();
    Ok(accepted)
}

/// A grid-sampled point: cell barycenter plus averaged attributes.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub positions: Vec<Vector3<f64>>,
    /// Input indices contributing to each output point.
    pub members: Vec<Vec<u32>>,
}

/// Barycenter-per-occupied-cell downsampling. Output order follows the
/// lexicographic cell key so results do not depend on hash iteration order.
pub fn grid_sample(points: &[Vector3<f64>], cell: f64) -> Result<GridSample> {
    if cell <= 0.0 || !cell.is_finite() {
        return Err(Error::Parameter(format!("cell must be > 0, got {cell}")));
    }
    check_finite_points(points, "points")?;
    let inv = 1.0 / cell;
    let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        );
        cells.entry(key).or_default().push(i as u32);
    }
    let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();

    let mut positions = Vec::with_capacity(keys.len());
    let mut members = Vec::with_capacity(keys.len());
    for key in keys {
        let idxs = cells.remove(&key).unwrap();
        let mut sum = Vector3::zeros();
        for &i in &idxs {
            sum += points[i as usize];
        }
        positions.push(sum / idxs.len() as f64);
        members.push(idxs);
    }
    Ok(GridSample { positions, members })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    /// O(n^2) validation of the min-distance and maximality properties.
    pub fn check_poisson_properties(points: &[Vector3<f64>], subset: &[u32], r_p: f64) {
        let r2 = r_p * r_p;
        for (a, &i) in subset.iter().enumerate() {
            for &j in &subset[a + 1..] {
                let d2 = (points[i as usize] - points[j as usize]).norm_squared();
                assert!(d2 >= r2, "pair ({i},{j}) closer than r_p");
            }
        }
        for (i, p) in points.iter().enumerate() {
            let covered = subset
                .iter()
                .any(|&j| (points[j as usize] - p).norm_squared() < r2 || j as usize == i);
            assert!(covered, "point {i} not within r_p of any accepted point");
        }
    }

    #[test]
    fn close_pair_keeps_exactly_one() {
        let pts = vec![v(0.0, 0.0, 0.0), v(0.5, 0.0, 0.0)];
        let s = poisson_disk_sample(&pts, 1.0, 3).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn distant_pair_keeps_both() {
        let pts = vec![v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        let s = poisson_disk_sample(&pts, 1.0, 3).unwrap();
        assert_eq!(s, vec![0, 1]);
    }

    #[test]
    fn boundary_distance_is_allowed() {
        // Exactly r_p apart: both survive (constraint is >= r_p).
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let s = poisson_disk_sample(&pts, 1.0, 9).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn rejects_nonpositive_radius() {
        let pts = vec![v(0.0, 0.0, 0.0)];
        assert!(poisson_disk_sample(&pts, 0.0, 1).is_err());
        assert!(poisson_disk_sample(&pts, -1.0, 1).is_err());
    }

    #[test]
    fn properties_hold_on_random_cloud() {
        let pts = random_points(2000, 11);
        let s = poisson_disk_sample(&pts, 0.05, 5).unwrap();
        check_poisson_properties(&pts, &s, 0.05);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = random_points(500, 2);
        let a = poisson_disk_sample(&pts, 0.08, 77).unwrap();
        let b = poisson_disk_sample(&pts, 0.08, 77).unwrap();
        assert_eq!(a, b);
        let c = poisson_disk_sample(&pts, 0.08, 78).unwrap();
        // Different seed may select a different maximal subset.
        check_poisson_properties(&pts, &c, 0.08);
    }

    #[test]
    fn grid_sample_groups_by_cell() {
        let pts = vec![v(0.1, 0.1, 0.1), v(0.2, 0.2, 0.2), v(1.5, 0.0, 0.0)];
        let g = grid_sample(&pts, 1.0).unwrap();
        assert_eq!(g.positions.len(), 2);
        let expect = (pts[0] + pts[1]) / 2.0;
        assert!((g.positions[0] - expect).norm() < 1e-15);
        assert_eq!(g.members[0], vec![0, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_poisson_subset_valid_and_maximal(seed in 0u64..1000, n in 1usize..300, r in 0.02f64..0.5) {
            let pts = random_points(n, seed);
            let s = poisson_disk_sample(&pts, r, seed ^ 0x9e37).unwrap();
            prop_assert!(!s.is_empty());
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            check_poisson_properties(&pts, &s, r);
        }
    }
}
