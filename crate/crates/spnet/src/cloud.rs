//! Point cloud container with optional per-point attributes.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use ndarray::Array2;

pub const NORMAL_UNIT_TOL: f64 = 1e-6;

/// Positions plus optional per-point attribute channels. All attribute
/// arrays, when present, have the same length as `positions`.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// RGB in [0,1].
    pub colors: Option<Vec<Vector3<f64>>>,
    /// Unit vectors (within 1e-6).
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Per-point real feature vector of width C.
    pub features: Option<Array2<f64>>,
    /// Per-point class id.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the container invariants: attribute lengths, finite
    /// coordinates, unit normals.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        for p in &self.positions {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFinite("positions".into()));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::Shape(format!("colors len {} != {}", c.len(), n)));
            }
        }
        if let Some(nm) = &self.normals {
            if nm.len() != n {
                return Err(Error::Shape(format!("normals len {} != {}", nm.len(), n)));
            }
            for v in nm {
                if (v.norm() - 1.0).abs() > NORMAL_UNIT_TOL {
                    return Err(Error::InvalidInput(format!(
                        "normal {:?} is not unit length",
                        v
                    )));
                }
            }
        }
        if let Some(f) = &self.features {
            if f.nrows() != n {
                return Err(Error::Shape(format!("features rows {} != {}", f.nrows(), n)));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Shape(format!("labels len {} != {}", l.len(), n)));
            }
        }
        Ok(())
    }

    /// Extracts the subset of points named by `indices` (attributes follow).
    pub fn select(&self, indices: &[u32]) -> PointCloud {
        let pick = |src: &Vec<Vector3<f64>>| -> Vec<Vector3<f64>> {
            indices.iter().map(|&i| src[i as usize]).collect()
        };
        PointCloud {
            positions: pick(&self.positions),
            colors: self.colors.as_ref().map(pick),
            normals: self.normals.as_ref().map(pick),
            features: self.features.as_ref().map(|f| {
                let mut out = Array2::zeros((indices.len(), f.ncols()));
                for (row, &i) in indices.iter().enumerate() {
                    out.row_mut(row).assign(&f.row(i as usize));
                }
                out
            }),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i as usize]).collect()),
        }
    }
}

pub(crate) fn check_finite_points(points: &[Vector3<f64>], what: &str) -> Result<()> {
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
    }
    Ok(())
}
