//! Shell-structured kernel point layouts and the kernel correlation function.
//!
//! A layout is one central point plus, per outer shell, a set of points on a
//! sphere. Points are spread by minimizing the pairwise repulsive potential
//! sum(1/d) on the unit sphere with projected gradient descent; the same
//! optimized configuration is reused for every outer shell, scaled to the
//! shell radius.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const REPULSION_MAX_ITERS: usize = 10_000;
pub const REPULSION_GRAD_TOL: f64 = 1e-9;
const SPHERE_TOL: f64 = 1e-9;

const CACHE_MAGIC: &[u8; 4] = b"SPKL";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    /// Distance of this shell's points from the query point; 0 for the
    /// central shell.
    pub radius: f64,
    pub points: Vec<Vector3<f64>>,
}

/// Fixed kernel point positions (offsets from the query point), grouped by
/// shell, with a single influence radius shared by all shells.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLayout {
    pub shells: Vec<Shell>,
    pub influence: f64,
}

impl KernelLayout {
    pub fn shell_count(&self) -> usize {
        self.shells.len()
    }

    pub fn total_points(&self) -> usize {
        self.shells.iter().map(|s| s.points.len()).sum()
    }

    /// Points flattened in shell order.
    pub fn flat_points(&self) -> Vec<Vector3<f64>> {
        self.shells
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .collect()
    }

    /// Shell index of each flattened point.
    pub fn shell_of_flat(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_points());
        for (n, shell) in self.shells.iter().enumerate() {
            out.extend(std::iter::repeat(n).take(shell.points.len()));
        }
        out
    }

    pub fn outermost_radius(&self) -> f64 {
        self.shells.last().map(|s| s.radius).unwrap_or(0.0)
    }

    /// Distance beyond which a neighbor cannot touch any kernel point.
    pub fn reach(&self) -> f64 {
        self.outermost_radius() + self.influence
    }

    pub fn validate(&self) -> Result<()> {
        if self.shells.is_empty() {
            return Err(Error::Parameter("layout has no shells".into()));
        }
        let first = &self.shells[0];
        if first.points.len() != 1 || first.points[0].norm() != 0.0 || first.radius != 0.0 {
            return Err(Error::Parameter(
                "innermost shell must be the single central point".into(),
            ));
        }
        for w in self.shells.windows(2) {
            if w[1].radius <= w[0].radius {
                return Err(Error::Parameter("shell radii must strictly increase".into()));
            }
        }
        for shell in &self.shells[1..] {
            for p in &shell.points {
                if (p.norm() - shell.radius).abs() > SPHERE_TOL {
                    return Err(Error::Parameter(format!(
                        "kernel point {:?} off its shell sphere (r={})",
                        p, shell.radius
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Linear kernel correlation: 1 at coincidence, 0 at and beyond the
/// influence radius.
#[inline]
pub fn correlation(kernel_point: &Vector3<f64>, neighbor_offset: &Vector3<f64>, influence: f64) -> f64 {
    debug_assert!(influence > 0.0);
    let d = (kernel_point - neighbor_offset).norm();
    (1.0 - d / influence).max(0.0)
}

/// Pairwise repulsive potential sum(1/|a-b|) over distinct pairs.
pub fn repulsion_energy(points: &[Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            e += 1.0 / (points[i] - points[j]).norm();
        }
    }
    e
}

fn random_unit_points(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = Vector3::new(x, y, z);
            let n = v.norm();
            if n > 1e-8 {
                return v / n;
            }
        })
        .collect()
}

/// Spreads `count` points on the unit sphere by projected gradient descent
/// on the repulsive potential. Deterministic given the seed; the step size
/// halves whenever a step would raise the energy.
pub fn optimize_unit_sphere_points(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut points = random_unit_points(count, seed);
    if count < 2 {
        return points;
    }
    let mut energy = repulsion_energy(&points);
    let mut lr = 0.05;
    let mut grads = vec![Vector3::zeros(); count];

    for _ in 0..REPULSION_MAX_ITERS {
        let mut grad_norm2 = 0.0;
        for g in grads.iter_mut() {
            *g = Vector3::zeros();
        }
        for i in 0..count {
            for j in i + 1..count {
                let diff = points[i] - points[j];
                let d = diff.norm();
                let g = diff / (d * d * d);
                // dE/dx_i of 1/d is -(x_i-x_j)/d^3.
                grads[i] -= g;
                grads[j] += g;
            }
        }
        for i in 0..count {
            let tangential = grads[i] - points[i] * grads[i].dot(&points[i]);
            grads[i] = tangential;
            grad_norm2 += tangential.norm_squared();
        }
        if grad_norm2.sqrt() < REPULSION_GRAD_TOL {
            break;
        }
        let candidate: Vec<Vector3<f64>> = points
            .iter()
            .zip(&grads)
            .map(|(p, g)| (p - g * lr).normalize())
            .collect();
        let e = repulsion_energy(&candidate);
        if e < energy {
            points = candidate;
            energy = e;
        } else {
            lr *= 0.5;
            if lr < 1e-15 {
                break;
            }
        }
    }
    points
}

/// Builds a layout: the central point plus `points_per_outer_shell` points
/// on each of the `shell_radii` spheres. The optimized unit configuration is
/// shared across shells.
pub fn build_layout(
    num_shells: usize,
    points_per_outer_shell: usize,
    shell_radii: &[f64],
    influence: f64,
    seed: u64,
) -> Result<KernelLayout> {
    if num_shells < 1 {
        return Err(Error::Parameter("num_shells must be >= 1".into()));
    }
    if points_per_outer_shell < 1 {
        return Err(Error::Parameter("points_per_outer_shell must be >= 1".into()));
    }
    if influence <= 0.0 || !influence.is_finite() {
        return Err(Error::Parameter(format!("influence must be > 0, got {influence}")));
    }
    if shell_radii.len() != num_shells - 1 {
        return Err(Error::Parameter(format!(
            "expected {} shell radii, got {}",
            num_shells - 1,
            shell_radii.len()
        )));
    }
    let mut prev = 0.0;
    for &r in shell_radii {
        if r <= prev || !r.is_finite() {
            return Err(Error::Parameter(
                "shell radii must be strictly increasing and positive".into(),
            ));
        }
        prev = r;
    }

    let mut shells = vec![Shell {
        radius: 0.0,
        points: vec![Vector3::zeros()],
    }];
    if num_shells > 1 {
        let unit = optimize_unit_sphere_points(points_per_outer_shell, seed);
        for &r in shell_radii {
            shells.push(Shell {
                radius: r,
                points: unit.iter().map(|p| p * r).collect(),
            });
        }
    }
    let layout = KernelLayout { shells, influence };
    layout.validate()?;
    Ok(layout)
}

/// Parameters identifying a cached layout on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutParams {
    pub num_shells: usize,
    pub points_per_outer_shell: usize,
    pub shell_radii: Vec<f64>,
    pub influence: f64,
    pub seed: u64,
}

impl LayoutParams {
    fn cache_name(&self) -> String {
        // FNV-1a over the parameter bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.num_shells as u64).to_le_bytes());
        eat(&(self.points_per_outer_shell as u64).to_le_bytes());
        for r in &self.shell_radii {
            eat(&r.to_bits().to_le_bytes());
        }
        eat(&self.influence.to_bits().to_le_bytes());
        eat(&self.seed.to_le_bytes());
        format!(
            "kernel_{}s_{}p_{:016x}.spk",
            self.num_shells, self.points_per_outer_shell, h
        )
    }
}

pub fn save_layout(path: &Path, layout: &KernelLayout) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&layout.influence.to_le_bytes())?;
    w.write_all(&(layout.shells.len() as u32).to_le_bytes())?;
    for shell in &layout.shells {
        w.write_all(&shell.radius.to_le_bytes())?;
        w.write_all(&(shell.points.len() as u32).to_le_bytes())?;
        for p in &shell.points {
            w.write_all(&p.x.to_le_bytes())?;
            w.write_all(&p.y.to_le_bytes())?;
            w.write_all(&p.z.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_layout(path: &Path) -> Result<KernelLayout> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Parameter("bad layout cache magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CACHE_VERSION {
        return Err(Error::Parameter("unsupported layout cache version".into()));
    }
    r.read_exact(&mut b8)?;
    let influence = f64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let num_shells = u32::from_le_bytes(b4) as usize;
    let mut shells = Vec::with_capacity(num_shells);
    for _ in 0..num_shells {
        r.read_exact(&mut b8)?;
        let radius = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut coords = [0.0f64; 3];
            for c in coords.iter_mut() {
                r.read_exact(&mut b8)?;
                *c = f64::from_le_bytes(b8);
            }
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        shells.push(Shell { radius, points });
    }
    let layout = KernelLayout { shells, influence };
    layout.validate()?;
    Ok(layout)
}

/// Loads the layout for `params` from `cache_dir` if present, otherwise
/// builds and caches it. With no cache directory it always builds.
pub fn load_or_build(params: &LayoutParams, cache_dir: Option<&Path>) -> Result<KernelLayout> {
    let cache_path: Option<PathBuf> = cache_dir.map(|d| d.join(params.cache_name()));
    if let Some(path) = &cache_path {
        if path.exists() {
            return load_layout(path);
        }
    }
    let layout = build_layout(
        params.num_shells,
        params.points_per_outer_shell,
        &params.shell_radii,
        params.influence,
        params.seed,
    )?;
    if let Some(path) = &cache_path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_layout(path, &layout)?;
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn default_layout() -> KernelLayout {
        build_layout(3, 14, &[1.5, 3.0], 1.0, 31).unwrap()
    }

    #[test]
    fn single_shell_is_origin_only() {
        let layout = build_layout(1, 14, &[], 0.5, 7).unwrap();
        assert_eq!(layout.total_points(), 1);
        assert_eq!(layout.shells[0].points[0], Vector3::zeros());
    }

    #[test]
    fn default_config_has_29_points() {
        let layout = default_layout();
        assert_eq!(layout.total_points(), 29);
        assert_eq!(layout.shell_count(), 3);
        layout.validate().unwrap();
    }

    #[test]
    fn outer_points_lie_on_their_spheres() {
        let layout = default_layout();
        for shell in &layout.shells[1..] {
            for p in &shell.points {
                assert!((p.norm() - shell.radius).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_increasing_radii() {
        assert!(build_layout(3, 14, &[1.5, 1.5], 1.0, 0).is_err());
        assert!(build_layout(3, 14, &[2.0, 1.0], 1.0, 0).is_err());
        assert!(build_layout(3, 14, &[1.5], 1.0, 0).is_err());
    }

    #[test]
    fn repulsion_strictly_decreases_energy_and_spreads_points() {
        let seed = 42;
        let initial = random_unit_points(14, seed);
        let optimized = optimize_unit_sphere_points(14, seed);
        let e0 = repulsion_energy(&initial);
        let e1 = repulsion_energy(&optimized);
        assert!(e1 < e0, "energy {e1} not below initial {e0}");

        let min_angle = |pts: &[Vector3<f64>]| -> f64 {
            let mut best = f64::INFINITY;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    best = best.min(pts[i].dot(&pts[j]).clamp(-1.0, 1.0).acos());
                }
            }
            best
        };
        assert!(min_angle(&optimized) > min_angle(&initial));
    }

    #[test]
    fn layout_is_deterministic() {
        let a = default_layout();
        let b = default_layout();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = LayoutParams {
            num_shells: 3,
            points_per_outer_shell: 14,
            shell_radii: vec![1.5, 3.0],
            influence: 1.0,
            seed: 31,
        };
        let built = load_or_build(&params, Some(dir.path())).unwrap();
        let cached = load_or_build(&params, Some(dir.path())).unwrap();
        assert_eq!(built, cached);
        assert_eq!(dir.path().read_dir().unwrap().count(), 1);
    }

    #[test]
    fn correlation_matches_linear_form() {
        let k = Vector3::new(0.5, 0.0, 0.0);
        assert_eq!(correlation(&k, &k, 1.0), 1.0);
        let at_influence = Vector3::new(1.5, 0.0, 0.0);
        assert_eq!(correlation(&k, &at_influence, 1.0), 0.0);
        let halfway = Vector3::new(1.0, 0.0, 0.0);
        assert!((correlation(&k, &halfway, 1.0) - 0.5).abs() < 1e-15);
    }

    /// The shells' ring-shaped influence regions overlap radially, so the
    /// whole ball of radius r_N (and indeed r_N + v) is inside the union of
    /// the shell annuli |dist - r_n| < v.
    #[test]
    fn shell_annuli_cover_the_outer_ball() {
        let layout = default_layout();
        let v = layout.influence;
        let radii: Vec<f64> = layout.shells.iter().map(|s| s.radius).collect();
        // Exact interval argument: annuli [r-v, r+v] chain without gaps.
        for w in radii.windows(2) {
            assert!(w[1] - w[0] < 2.0 * v, "gap between shells {w:?}");
        }
        assert!(radii[0] < v);

        // Monte Carlo confirmation over the r_N ball.
        let r_outer = layout.outermost_radius();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut covered = 0usize;
        let total = 100_000;
        for _ in 0..total {
            let dir = random_unit_points(1, rng.random())[0];
            let r = r_outer * rng.random::<f64>().cbrt();
            let dist = r; // distance from origin along dir is just r
            let in_annulus = radii.iter().any(|&rn| (dist - rn).abs() < v);
            let _ = dir;
            if in_annulus {
                covered += 1;
            }
        }
        assert!(covered as f64 / total as f64 >= 0.999);
    }

    proptest! {
        #[test]
        fn prop_correlation_bounds_and_lipschitz(
            kx in -2.0f64..2.0, nx in -2.0f64..2.0, ny in -2.0f64..2.0, v in 0.1f64..3.0
        ) {
            let k = Vector3::new(kx, 0.0, 0.0);
            let a = Vector3::new(nx, 0.0, 0.0);
            let b = Vector3::new(nx, ny, 0.0);
            let ca = correlation(&k, &a, v);
            let cb = correlation(&k, &b, v);
            prop_assert!((0.0..=1.0).contains(&ca));
            // 1-Lipschitz in distance, scaled by 1/v.
            let da = (k - a).norm();
            let db = (k - b).norm();
            prop_assert!((ca - cb).abs() <= (da - db).abs() / v + 1e-12);
            if da >= v {
                prop_assert_eq!(ca, 0.0);
            }
        }
    }
}
