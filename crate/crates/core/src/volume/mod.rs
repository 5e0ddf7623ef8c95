//! Binary voxel grids and the algebra used throughout the pipeline.
//!
//! A [`VoxelGrid`] is a dense scalar field over a 3D grid with anisotropic
//! physical spacing. Shapes are binary grids (values in {0, 1}); mean shapes
//! and resampled intermediates are fractional with values in [0, 1]. The
//! linear data layout is x-fastest: `index = x + nx * (y + ny * z)`, matching
//! the NRRD raster order.

mod nrrd;
mod phantom;

pub use nrrd::{encode_nrrd, read_nrrd, read_nrrd_binarize, write_nrrd, write_nrrd_with, NrrdEncoding};
pub use phantom::{apply_defect, defect_for_fraction, make_phantom, DefectKind, DefectSpec, PhantomSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dims, spacing and origin of a grid, without the payload.
///
/// Used wherever only the sampling geometry matters: transform targets,
/// model reference spaces, inverse warps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// Voxels per axis.
    pub dims: [usize; 3],
    /// Physical voxel size in mm per axis.
    pub spacing: [f64; 3],
    /// World position (mm) of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must all be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(GridGeometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// World coordinates (mm) of a voxel center.
    pub fn world_of(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] as f64 * self.spacing[0],
            self.origin[1] + idx[1] as f64 * self.spacing[1],
            self.origin[2] + idx[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world point.
    pub fn continuous_index(&self, world: [f64; 3]) -> [f64; 3] {
        [
            (world[0] - self.origin[0]) / self.spacing[0],
            (world[1] - self.origin[1]) / self.spacing[1],
            (world[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World center of the grid (midpoint of the voxel-center bounding box).
    pub fn world_center(&self) -> [f64; 3] {
        [
            self.origin[0] + (self.dims[0] - 1) as f64 * 0.5 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * 0.5 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * 0.5 * self.spacing[2],
        ]
    }

    pub fn same_spacing(&self, other: &GridGeometry, tol: f64) -> bool {
        self.spacing
            .iter()
            .zip(other.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Dense 3D scalar field with physical geometry.
///
/// `binary` is an invariant flag: when set, every value is exactly 0.0 or
/// 1.0. Operations that can only produce binary output on binary input
/// (subtract, add, thresholding) preserve it.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: GridGeometry,
    data: Vec<f32>,
    binary: bool,
}

impl VoxelGrid {
    /// A grid filled with a constant value.
    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        let n = geometry.voxel_count();
        VoxelGrid {
            geometry,
            data: vec![value; n],
            binary: value == 0.0 || value == 1.0,
        }
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    /// Build from raw data; the binary flag is detected from the values.
    pub fn from_data(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geometry.dims,
                geometry.voxel_count()
            )));
        }
        let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(VoxelGrid {
            geometry,
            data,
            binary,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.geometry.dims;
        x + nx * (y + ny * z)
    }

    /// Inverse of [`linear_index`](Self::linear_index).
    #[inline]
    pub fn voxel_of_linear(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.geometry.dims;
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.linear_index(x, y, z)]
    }

    /// Value at a voxel, with everything outside the grid reading as 0.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64, z: i64) -> f32 {
        let [nx, ny, nz] = self.geometry.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.linear_index(x, y, z);
        self.data[i] = value;
        if value != 0.0 && value != 1.0 {
            self.binary = false;
        }
    }

    /// Number of nonzero voxels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Linear indices of nonzero voxels, ascending.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0.0).then_some(i))
            .collect()
    }

    /// Foreground voxels with at least one six-connected background
    /// neighbor; out-of-grid counts as background.
    pub fn surface_voxels(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.geometry.dims;
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.get(x, y, z) == 0.0 {
                        continue;
                    }
                    let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                    let exposed = self.get_or_zero(xi - 1, yi, zi) == 0.0
                        || self.get_or_zero(xi + 1, yi, zi) == 0.0
                        || self.get_or_zero(xi, yi - 1, zi) == 0.0
                        || self.get_or_zero(xi, yi + 1, zi) == 0.0
                        || self.get_or_zero(xi, yi, zi - 1) == 0.0
                        || self.get_or_zero(xi, yi, zi + 1) == 0.0;
                    if exposed {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// Threshold into a binary grid: values >= `threshold` become 1.
    pub fn binarized(&self, threshold: f32) -> VoxelGrid {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        VoxelGrid {
            geometry: self.geometry,
            data,
            binary: true,
        }
    }

    /// Trilinear sample at continuous voxel coordinates; outside the grid
    /// reads as 0. Coordinates within 1e-9 of an integer lattice point snap
    /// to the exact voxel value, which keeps identity warps bit-exact.
    pub fn sample_trilinear(&self, c: [f64; 3]) -> f32 {
        let snapped = [c[0].round(), c[1].round(), c[2].round()];
        if (0..3).all(|a| (c[a] - snapped[a]).abs() < 1e-9) {
            return self.get_or_zero(snapped[0] as i64, snapped[1] as i64, snapped[2] as i64);
        }
        let base = [c[0].floor(), c[1].floor(), c[2].floor()];
        let frac = [c[0] - base[0], c[1] - base[1], c[2] - base[2]];
        let (x0, y0, z0) = (base[0] as i64, base[1] as i64, base[2] as i64);
        let mut acc = 0.0f64;
        for dz in 0..2i64 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2i64 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2i64 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let v = self.get_or_zero(x0 + dx, y0 + dy, z0 + dz) as f64;
                    acc += v * wx * wy * wz;
                }
            }
        }
        acc as f32
    }

    fn check_compatible(&self, other: &VoxelGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        if !self.geometry.same_spacing(&other.geometry, 1e-9) {
            return Err(Error::SpacingMismatch(self.spacing(), other.spacing()));
        }
        Ok(())
    }
}

/// Per-voxel `max(a - b, 0)`; for binary grids this is set difference.
pub fn volume_subtract(a: &VoxelGrid, b: &VoxelGrid) -> Result<VoxelGrid> {
    a.check_compatible(b)?;
    let data: Vec<f32> = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y).max(0.0))
        .collect();
    Ok(VoxelGrid {
        geometry: a.geometry,
        binary: a.binary && b.binary,
        data,
    })
}

/// Per-voxel `min(a + b, 1)`; for binary grids this is set union.
pub fn volume_add(a: &VoxelGrid, b: &VoxelGrid) -> Result<VoxelGrid> {
    a.check_compatible(b)?;
    let data: Vec<f32> = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x + y).min(1.0))
        .collect();
    Ok(VoxelGrid {
        geometry: a.geometry,
        binary: a.binary && b.binary,
        data,
    })
}

/// Per-voxel `min(a, b)`; for binary grids this is set intersection.
pub fn volume_intersect(a: &VoxelGrid, b: &VoxelGrid) -> Result<VoxelGrid> {
    a.check_compatible(b)?;
    let data: Vec<f32> = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x.min(y))
        .collect();
    Ok(VoxelGrid {
        geometry: a.geometry,
        binary: a.binary && b.binary,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(d: usize) -> GridGeometry {
        GridGeometry::new([d, d, d], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_zero_dims_and_bad_spacing() {
        assert!(GridGeometry::new([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
        assert!(GridGeometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(GridGeometry::new([2, 2, 2], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn data_length_must_match_dims() {
        let g = geom(2);
        assert!(VoxelGrid::from_data(g, vec![0.0; 7]).is_err());
        assert!(VoxelGrid::from_data(g, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn binary_flag_detection() {
        let g = geom(2);
        let b = VoxelGrid::from_data(g, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(b.is_binary());
        let f = VoxelGrid::from_data(g, vec![0.5; 8]).unwrap();
        assert!(!f.is_binary());
    }

    #[test]
    fn subtract_self_is_zero() {
        let mut a = VoxelGrid::zeros(geom(3));
        a.set(1, 1, 1, 1.0);
        a.set(0, 2, 2, 1.0);
        let d = volume_subtract(&a, &a).unwrap();
        assert_eq!(d.foreground_count(), 0);
        assert!(d.is_binary());
    }

    #[test]
    fn subtract_corner_from_full_cube() {
        let full = VoxelGrid::filled(geom(2), 1.0);
        let mut corner = VoxelGrid::zeros(geom(2));
        corner.set(0, 0, 0, 1.0);
        let d = volume_subtract(&full, &corner).unwrap();
        assert_eq!(d.foreground_count(), 7);
        assert_eq!(d.get(0, 0, 0), 0.0);
    }

    #[test]
    fn subtract_clamps_at_zero() {
        let zeroes = VoxelGrid::zeros(geom(2));
        let ones = VoxelGrid::filled(geom(2), 1.0);
        let d = volume_subtract(&zeroes, &ones).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_disjoint_and_idempotent() {
        let mut a = VoxelGrid::zeros(geom(2));
        a.set(0, 0, 0, 1.0);
        let mut b = VoxelGrid::zeros(geom(2));
        b.set(1, 1, 1, 1.0);
        let u = volume_add(&a, &b).unwrap();
        assert_eq!(u.foreground_count(), 2);
        let aa = volume_add(&a, &a).unwrap();
        assert_eq!(aa, a);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = VoxelGrid::zeros(geom(2));
        let b = VoxelGrid::zeros(geom(3));
        assert!(matches!(
            volume_add(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn spacing_mismatch_is_an_error() {
        let a = VoxelGrid::zeros(geom(2));
        let g2 = GridGeometry::new([2, 2, 2], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let b = VoxelGrid::zeros(g2);
        assert!(matches!(
            volume_subtract(&a, &b),
            Err(Error::SpacingMismatch(..))
        ));
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        let g = geom(4);
        let solid = VoxelGrid::filled(g, 1.0);
        let surf = solid.surface_voxels();
        // 4^3 minus the 2^3 interior.
        assert_eq!(surf.len(), 64 - 8);
    }

    #[test]
    fn trilinear_sampling_midpoint_and_snap() {
        let mut a = VoxelGrid::zeros(geom(2));
        a.set(0, 0, 0, 1.0);
        // Exactly on the voxel.
        assert_eq!(a.sample_trilinear([0.0, 0.0, 0.0]), 1.0);
        // Midpoint between (0,0,0)=1 and (1,0,0)=0.
        let v = a.sample_trilinear([0.5, 0.0, 0.0]);
        assert!((v - 0.5).abs() < 1e-6);
        // Outside reads zero.
        assert_eq!(a.sample_trilinear([-3.0, 0.0, 0.0]), 0.0);
    }

    proptest! {
        // Set algebra on binary grids: (A \ B) union (A intersect B) = A,
        // checked voxel-exhaustively on grids up to 4^3.
        #[test]
        fn difference_plus_intersection_restores(
            d in 1usize..=4,
            bits in proptest::collection::vec(0u8..=3, 64),
        ) {
            let g = geom(d);
            let n = g.voxel_count();
            let a_data: Vec<f32> = bits[..n].iter().map(|&b| f32::from(b & 1)).collect();
            let b_data: Vec<f32> = bits[..n].iter().map(|&b| f32::from((b >> 1) & 1)).collect();
            let a = VoxelGrid::from_data(g, a_data).unwrap();
            let b = VoxelGrid::from_data(g, b_data).unwrap();
            let diff = volume_subtract(&a, &b).unwrap();
            let inter = volume_intersect(&a, &b).unwrap();
            let restored = volume_add(&diff, &inter).unwrap();
            prop_assert_eq!(restored.data(), a.data());
            // A \ B never overlaps B.
            let overlap = volume_intersect(&diff, &b).unwrap();
            prop_assert_eq!(overlap.foreground_count(), 0);
        }
    }
}
