//! Surface normal estimation from k-NN covariance.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::search::knn_search;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

/// Relative eigenvalue threshold below which a neighborhood is treated as
/// rank-deficient (collinear or coincident points).
const DEGENERATE_EIG_RATIO: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub normals: Vec<Vector3<f64>>,
    /// True where the neighborhood covariance had rank < 2 and the normal
    /// was substituted with +z.
    pub degenerate: Vec<bool>,
}

/// Per-point normal from the smallest eigenvector of the k-NN covariance,
/// sign-disambiguated toward +z. Offsets are taken relative to the query
/// point before accumulating the covariance, so results are invariant under
/// exactly-representable translations of the cloud.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    cloud.validate()?;
    if k < 1 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    if cloud.len() < k + 1 {
        return Err(Error::Parameter(format!(
            "need at least k+1 = {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let positions = &cloud.positions;
    // k+1 nearest including the query itself (distance 0 sorts first).
    let knn = knn_search(positions, positions, k + 1)?;

    let results: Vec<(Vector3<f64>, bool)> = knn
        .par_iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let q = positions[i];
            let diffs: Vec<Vector3<f64>> = nbrs
                .iter()
                .map(|&(j, _)| positions[j as usize] - q)
                .collect();
            let mut mean = Vector3::zeros();
            for d in &diffs {
                mean += d;
            }
            mean /= diffs.len() as f64;
            let mut cov = Matrix3::zeros();
            for d in &diffs {
                let c = d - mean;
                cov += c * c.transpose();
            }
            cov /= diffs.len() as f64;

            let eig = cov.symmetric_eigen();
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
            let (lo, mid, hi) = (order[0], order[1], order[2]);
            let lambda_max = eig.eigenvalues[hi].max(0.0);
            let degenerate =
                lambda_max <= 0.0 || eig.eigenvalues[mid] <= DEGENERATE_EIG_RATIO * lambda_max;
            if degenerate {
                return (Vector3::new(0.0, 0.0, 1.0), true);
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(lo).into();
            n.normalize_mut();
            if n.z < 0.0 {
                n = -n;
            }
            (n, false)
        })
        .collect();

    let mut normals = Vec::with_capacity(results.len());
    let mut degenerate = Vec::with_capacity(results.len());
    for (n, d) in results {
        normals.push(n);
        degenerate.push(d);
    }
    Ok(NormalEstimate { normals, degenerate })
}

/// Convenience wrapper returning a copy of the cloud with normals attached.
pub fn with_estimated_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let est = estimate_normals(cloud, k)?;
    let mut out = cloud.clone();
    out.normals = Some(est.normals);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn planar_points_get_z_normals() {
        let mut rng = StdRng::seed_from_u64(5);
        let pts: Vec<Vector3<f64>> = (0..120)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), 0.0))
            .collect();
        let cloud = PointCloud::from_positions(pts);
        let est = estimate_normals(&cloud, 8).unwrap();
        for (n, d) in est.normals.iter().zip(&est.degenerate) {
            assert!(!d);
            assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_points_get_radial_normals() {
        let mut rng = StdRng::seed_from_u64(6);
        let pts: Vec<Vector3<f64>> = (0..3000)
            .map(|_| {
                let g = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                g.normalize()
            })
            .collect();
        let cloud = PointCloud::from_positions(pts.clone());
        let est = estimate_normals(&cloud, 8).unwrap();
        for (p, n) in pts.iter().zip(&est.normals) {
            // Analytic sphere normal is the radial direction.
            assert!(n.dot(p).abs() > 0.99, "dot = {}", n.dot(p));
        }
    }

    #[test]
    fn collinear_points_are_flagged() {
        let pts: Vec<Vector3<f64>> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::from_positions(pts);
        let est = estimate_normals(&cloud, 2).unwrap();
        for (n, d) in est.normals.iter().zip(&est.degenerate) {
            assert!(d);
            assert_eq!(*n, Vector3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn requires_enough_points() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let cloud = PointCloud::from_positions(pts);
        assert!(estimate_normals(&cloud, 8).is_err());
    }
}
