//! Bijective placement of `n³` Gaussians on an `n×n×n` lattice of 14-channel
//! feature cells, and its inverse.

mod assign;

use nalgebra::Vector3;

pub use assign::{
    assign_ot, assign_with, assignment_cost, auction_assign, greedy_assign, hungarian, is_permutation, sq_dist,
    Assignment, Solver, EXACT_LIMIT,
};

use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::{flatten, unflatten_clamped, Features14, GaussianCloud, CHANNELS};

/// Relative padding added around the centre bounding box.
pub const BOUNDS_MARGIN: f64 = 0.05;

/// Axis-aligned box `(lo, hi)`.
pub type Bounds = (Vector3<f64>, Vector3<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub n: usize,
    pub bounds: Bounds,
    /// `n³ × 14` values, cell-major, cells x-fastest.
    pub features: Vec<f64>,
    /// `assignment[k]` is the source index of the Gaussian stored in cell `k`.
    pub assignment: Vec<usize>,
}

impl VoxelGrid {
    pub fn cells(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn cell(&self, k: usize) -> Features14 {
        let mut f = [0.0; CHANNELS];
        f.copy_from_slice(&self.features[k * CHANNELS..(k + 1) * CHANNELS]);
        Features14(f)
    }

    /// Grid with features in cell order and the identity assignment.
    pub fn from_features(n: usize, bounds: Bounds, features: Vec<f64>) -> Result<Self> {
        let g = Self {
            n,
            bounds,
            assignment: (0..n * n * n).collect(),
            features,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("grid resolution must be at least 2, got {}", self.n)));
        }
        if self.features.len() != self.cells() * CHANNELS || self.assignment.len() != self.cells() {
            return Err(Error::dims(format!("grid of n = {} has wrong feature or assignment length", self.n)));
        }
        if !is_permutation(&self.assignment) {
            return Err(Error::invalid("grid assignment is not a permutation"));
        }
        ensure_finite(&self.features, "grid features")?;
        check_bounds(&self.bounds)
    }
}

fn check_bounds((lo, hi): &Bounds) -> Result<()> {
    if !(lo.iter().chain(hi.iter()).all(|v| v.is_finite()) && (0..3).all(|a| hi[a] > lo[a])) {
        return Err(Error::invalid(format!("degenerate bounds {lo:?}..{hi:?}")));
    }
    Ok(())
}

/// Flat index of lattice cell `(x, y, z)`.
pub fn cell_index(n: usize, x: usize, y: usize, z: usize) -> usize {
    x + n * (y + n * z)
}

/// Cell centres of an `n`-per-axis lattice over `bounds`, x fastest.
pub fn voxel_centers(n: usize, bounds: &Bounds) -> Result<Vec<Vector3<f64>>> {
    if n < 2 {
        return Err(Error::invalid(format!("grid resolution must be at least 2, got {n}")));
    }
    check_bounds(bounds)?;
    let (lo, hi) = bounds;
    let step = (hi - lo) / n as f64;
    let mut out = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let idx = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
                out.push(lo + step.component_mul(&idx));
            }
        }
    }
    Ok(out)
}

/// Centre bounding box inflated by [`BOUNDS_MARGIN`]. Flat axes borrow the
/// largest half-width, or 0.5 when every axis is flat.
pub fn grid_bounds(cloud: &GaussianCloud) -> Result<Bounds> {
    let (lo, hi) = cloud.bounds().ok_or_else(|| Error::invalid("cannot bound an empty cloud"))?;
    let mid = (lo + hi) / 2.0;
    let mut half = (hi - lo) / 2.0 * (1.0 + BOUNDS_MARGIN);
    let widest = half.max();
    for h in half.iter_mut() {
        if *h <= 1e-12 {
            *h = if widest > 1e-12 { widest } else { 0.5 };
        }
    }
    Ok((mid - half, mid + half))
}

/// Side of the smallest cube holding `count` cells, if `count` is a cube.
pub fn cube_root(count: usize) -> Option<usize> {
    let n = (count as f64).cbrt().round() as usize;
    (n * n * n == count).then_some(n)
}

/// Place every Gaussian in its optimal-transport cell.
pub fn structure(cloud: &GaussianCloud, bounds: &Bounds) -> Result<VoxelGrid> {
    structure_with(cloud, bounds, Solver::Auto).map(|(g, _)| g)
}

pub fn structure_with(cloud: &GaussianCloud, bounds: &Bounds, solver: Solver) -> Result<(VoxelGrid, Assignment)> {
    let n = cube_root(cloud.len())
        .filter(|&n| n >= 2)
        .ok_or_else(|| Error::invalid(format!("{} gaussians is not a cube of side at least 2", cloud.len())))?;
    cloud.validate()?;
    let centers = voxel_centers(n, bounds)?;
    let a = assign_with(&cloud.positions(), &centers, solver)?;
    let mut features = vec![0.0; centers.len() * CHANNELS];
    let mut assignment = vec![0; centers.len()];
    for (i, g) in cloud.iter().enumerate() {
        let k = a.perm[i];
        features[k * CHANNELS..(k + 1) * CHANNELS].copy_from_slice(flatten(g).as_slice());
        assignment[k] = i;
    }
    let grid = VoxelGrid {
        n,
        bounds: *bounds,
        features,
        assignment,
    };
    Ok((grid, a))
}

/// Decode every cell, restoring the original Gaussian order.
pub fn unstructure(grid: &VoxelGrid) -> Result<GaussianCloud> {
    grid.validate()?;
    let mut slots = vec![None; grid.cells()];
    for k in 0..grid.cells() {
        slots[grid.assignment[k]] = Some(unflatten_clamped(&grid.cell(k))?);
    }
    Ok(slots.into_iter().map(|g| g.expect("assignment is a permutation")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{Gaussian, IDENTITY_QUAT, MIN_OPACITY};
    use crate::losses::chamfer_distance;

    #[test]
    fn centers_examples() {
        let c = voxel_centers(2, &(Vector3::repeat(-1.0), Vector3::repeat(1.0))).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|p| p.iter().all(|v| v.abs() == 0.5)));
        assert_eq!(c[0], Vector3::repeat(-0.5));
        assert_eq!(c[1], Vector3::new(0.5, -0.5, -0.5));
        assert_eq!(c[2], Vector3::new(-0.5, 0.5, -0.5));
        let c = voxel_centers(2, &(Vector3::zeros(), Vector3::repeat(2.0))).unwrap();
        assert!(c.iter().all(|p| p.iter().all(|&v| v == 0.5 || v == 1.5)));
        assert!(voxel_centers(1, &(Vector3::zeros(), Vector3::repeat(1.0))).is_err());
        assert!(voxel_centers(2, &(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0))).is_err());
    }

    fn at_centers() -> GaussianCloud {
        let c = voxel_centers(2, &(Vector3::repeat(-1.0), Vector3::repeat(1.0))).unwrap();
        c.iter()
            .enumerate()
            .map(|(i, p)| Gaussian {
                position: *p,
                rotation: IDENTITY_QUAT,
                log_scale: Vector3::repeat(-2.0 - i as f64 * 0.1),
                opacity_logit: 0.5,
                color: Vector3::repeat(0.1 * i as f64),
            })
            .collect()
    }

    #[test]
    fn gaussians_on_centers_keep_their_cells() {
        let cloud = at_centers();
        let grid = structure(&cloud, &(Vector3::repeat(-1.0), Vector3::repeat(1.0))).unwrap();
        for (k, g) in cloud.iter().enumerate() {
            assert_eq!(grid.cell(k), flatten(g));
            assert_eq!(grid.assignment[k], k);
        }
    }

    #[test]
    fn round_trip_restores_cloud() {
        let mut cloud = at_centers();
        cloud.gaussians.reverse();
        let b = grid_bounds(&cloud).unwrap();
        let back = unstructure(&structure(&cloud, &b).unwrap()).unwrap();
        for (a, b) in cloud.iter().zip(back.iter()) {
            let (fa, fb) = (flatten(a), flatten(b));
            assert!(fa.0.iter().zip(fb.0.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        }
        let pa: Vec<[f64; 3]> = cloud.iter().map(|g| g.position.into()).collect();
        let pb: Vec<[f64; 3]> = back.iter().map(|g| g.position.into()).collect();
        assert!(chamfer_distance(&pa, &pb).unwrap() < 1e-12);
    }

    #[test]
    fn collapsed_cloud_is_still_bijective() {
        let mut cloud = at_centers();
        cloud.gaussians.iter_mut().for_each(|g| g.position = Vector3::repeat(0.2));
        let b = grid_bounds(&cloud).unwrap();
        assert_eq!(b, (Vector3::repeat(-0.3), Vector3::repeat(0.7)));
        let grid = structure(&cloud, &b).unwrap();
        assert!(is_permutation(&grid.assignment));
        assert!(structure(&GaussianCloud::new(cloud.gaussians[..7].to_vec()), &b).is_err());
    }

    #[test]
    fn zero_grid_decodes_to_background() {
        let grid = VoxelGrid::from_features(2, (Vector3::zeros(), Vector3::repeat(1.0)), vec![0.0; 8 * CHANNELS]).unwrap();
        let cloud = unstructure(&grid).unwrap();
        assert_eq!(cloud.len(), 8);
        assert!(cloud.iter().all(|g| (g.opacity() - MIN_OPACITY).abs() < 1e-15 && g.rotation == IDENTITY_QUAT));
        let mut bad = grid.clone();
        bad.features[3] = f64::INFINITY;
        assert!(unstructure(&bad).is_err());
    }
}
