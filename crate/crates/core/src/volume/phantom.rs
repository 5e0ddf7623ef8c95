//! Synthetic phantoms: hollow ellipsoid shells with a smooth seeded radial
//! perturbation, plus defect synthesis with exact ground-truth implants.
//!
//! The shell is a desk-scale stand-in for a cranium segmentation: outer
//! ellipsoid minus an inner ellipsoid shrunk by the shell thickness, both
//! deformed by the same random radial field so the local thickness stays
//! close to the nominal value.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{volume_intersect, volume_subtract, GridGeometry, VoxelGrid};

/// Parameters of a synthetic shell phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Outer ellipsoid semi-axes in mm.
    pub radii: [f64; 3],
    /// Shell thickness in mm.
    pub thickness: f64,
    pub seed: u64,
    /// Radial perturbation amplitude as a fraction of the radius, in [0, 0.3].
    pub amplitude: f64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<GridGeometry> {
        let geometry = GridGeometry::new(self.dims, self.spacing, [0.0; 3])?;
        let min_radius = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_radius > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "phantom radii must be positive, got {:?}",
                self.radii
            )));
        }
        if !(self.thickness > 0.0) || self.thickness >= min_radius {
            return Err(Error::InvalidSpec(format!(
                "shell thickness {} must be in (0, min semi-axis {})",
                self.thickness, min_radius
            )));
        }
        let max_spacing = self.spacing.iter().cloned().fold(0.0, f64::max);
        if self.thickness < max_spacing {
            return Err(Error::InvalidSpec(format!(
                "shell thickness {} mm is below the voxel size {} mm; the shell would be degenerate",
                self.thickness, max_spacing
            )));
        }
        if !(0.0..=0.3).contains(&self.amplitude) {
            return Err(Error::InvalidSpec(format!(
                "deformation amplitude {} outside [0, 0.3]",
                self.amplitude
            )));
        }
        Ok(geometry)
    }
}

/// Radial modulation field on the unit sphere, two parts both scaled by
/// the spec amplitude:
///
/// * a fixed "anatomical" component shared by every phantom (a frontal
///   protrusion and a flattened base, the shell analogue of the cranium's
///   own asymmetries) — without a shared asymmetry, cross-subject
///   registration orientation would be ill-posed on these shells;
/// * a seeded random component that varies between subjects.
struct RadialField {
    lobes: Vec<([f64; 3], f64)>,
    norm: f64,
}

/// Weight of the shared anatomical component within the unit-bounded field.
const ANATOMY_WEIGHT: f64 = 0.7;

impl RadialField {
    const LOBES: usize = 6;
    const SHARPNESS: f64 = 4.0;

    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lobes = Vec::with_capacity(Self::LOBES);
        let mut norm = 0.0;
        for _ in 0..Self::LOBES {
            // Uniform direction via normalized Gaussian triple.
            let mut d = [0.0f64; 3];
            loop {
                for v in d.iter_mut() {
                    *v = rng.gen::<f64>() * 2.0 - 1.0;
                }
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if len > 1e-3 && len <= 1.0 {
                    for v in d.iter_mut() {
                        *v /= len;
                    }
                    break;
                }
            }
            let coeff = rng.gen::<f64>() * 2.0 - 1.0;
            lobes.push((d, coeff));
            norm += coeff.abs();
        }
        RadialField { lobes, norm }
    }

    fn random_part(&self, u: [f64; 3]) -> f64 {
        if self.norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (d, c) in &self.lobes {
            let dot = u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
            acc += c * (Self::SHARPNESS * (dot - 1.0)).exp();
        }
        acc / self.norm
    }

    /// Fixed asymmetric structure: a broad bump toward +x slightly tilted
    /// up (the "face") and a flattening toward -z (the "base"). Breaks
    /// every proper 180-degree flip of the principal axes. The two lobes
    /// are nearly disjoint on the sphere, so the field stays within
    /// [-0.8, 1].
    fn anatomy_part(u: [f64; 3]) -> f64 {
        const BROAD: f64 = 2.5;
        let face_dir = {
            let n = (1.0f64 + 0.3 * 0.3).sqrt();
            [1.0 / n, 0.0, 0.3 / n]
        };
        let dot_face = u[0] * face_dir[0] + u[1] * face_dir[1] + u[2] * face_dir[2];
        let dot_base = -u[2];
        let face = (BROAD * (dot_face - 1.0)).exp();
        let base = (BROAD * (dot_base - 1.0)).exp();
        face - 0.8 * base
    }

    fn eval(&self, u: [f64; 3]) -> f64 {
        ANATOMY_WEIGHT * Self::anatomy_part(u)
            + (1.0 - ANATOMY_WEIGHT) * self.random_part(u)
    }
}

/// Generate a binary hollow-ellipsoid shell phantom, deterministic per seed.
pub fn make_phantom(spec: &PhantomSpec) -> Result<VoxelGrid> {
    let geometry = spec.validate()?;
    let field = RadialField::new(spec.seed);
    let center = geometry.world_center();
    let outer = spec.radii;
    let inner = [
        spec.radii[0] - spec.thickness,
        spec.radii[1] - spec.thickness,
        spec.radii[2] - spec.thickness,
    ];

    let [nx, ny, nz] = spec.dims;
    let mut data = vec![0.0f32; geometry.voxel_count()];
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = geometry.world_of([x, y, z]);
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r > 1e-12 {
                    let u = [d[0] / r, d[1] / r, d[2] / r];
                    let rho = 1.0 + spec.amplitude * field.eval(u);
                    let m_out = ellipsoid_radius(d, outer);
                    if m_out <= rho {
                        let m_in = ellipsoid_radius(d, inner);
                        if m_in >= rho {
                            data[idx] = 1.0;
                        }
                    }
                }
                idx += 1;
            }
        }
    }
    VoxelGrid::from_data(geometry, data)
}

/// Normalized ellipsoid radius: 1.0 on the ellipsoid surface.
fn ellipsoid_radius(d: [f64; 3], semi_axes: [f64; 3]) -> f64 {
    let qx = d[0] / semi_axes[0];
    let qy = d[1] / semi_axes[1];
    let qz = d[2] / semi_axes[2];
    (qx * qx + qy * qy + qz * qz).sqrt()
}

/// The geometric primitive used for each defect entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    /// Spherical defects; `sizes` are radii in mm.
    Sphere,
    /// Axis-aligned cubic defects; `sizes` are edge lengths in mm.
    Box,
    /// Multiple spherical defects (count >= 2); `sizes` are radii in mm.
    Multi,
}

/// One or more defect regions carved out of a shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// World coordinates (mm) of each defect center.
    pub centers: Vec<[f64; 3]>,
    /// Per-defect size in mm (radius for spheres, edge for boxes).
    pub sizes: Vec<f64>,
}

impl DefectSpec {
    fn validate(&self) -> Result<()> {
        let count = self.centers.len();
        if count == 0 {
            return Err(Error::InvalidSpec("defect spec has no entries".into()));
        }
        if self.sizes.len() != count {
            return Err(Error::InvalidSpec(format!(
                "defect spec has {count} centers but {} sizes",
                self.sizes.len()
            )));
        }
        if self.kind == DefectKind::Multi && count < 2 {
            return Err(Error::InvalidSpec(
                "multi defect requires at least 2 entries".into(),
            ));
        }
        for (i, &s) in self.sizes.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "defect {i} has non-positive size {s} (smaller than one voxel)"
                )));
            }
        }
        Ok(())
    }

    fn contains(&self, entry: usize, p: [f64; 3]) -> bool {
        let c = self.centers[entry];
        let s = self.sizes[entry];
        match self.kind {
            DefectKind::Sphere | DefectKind::Multi => {
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                let dz = p[2] - c[2];
                dx * dx + dy * dy + dz * dz <= s * s
            }
            DefectKind::Box => {
                let h = s * 0.5;
                (p[0] - c[0]).abs() <= h && (p[1] - c[1]).abs() <= h && (p[2] - c[2]).abs() <= h
            }
        }
    }

    /// Binary mask of the union of all defect regions on the given geometry.
    pub fn region_mask(&self, geometry: &GridGeometry) -> VoxelGrid {
        let [nx, ny, nz] = geometry.dims;
        let mut mask = VoxelGrid::zeros(*geometry);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = geometry.world_of([x, y, z]);
                    if (0..self.centers.len()).any(|e| self.contains(e, p)) {
                        mask.set(x, y, z, 1.0);
                    }
                }
            }
        }
        mask
    }
}

/// Carve the defect out of a binary shape.
///
/// Returns `(defective, ground_truth_implant)`; the two partition the input:
/// their union is the input and their intersection is empty.
pub fn apply_defect(grid: &VoxelGrid, spec: &DefectSpec) -> Result<(VoxelGrid, VoxelGrid)> {
    spec.validate()?;
    if !grid.is_binary() {
        return Err(Error::InvalidArgument(
            "apply_defect requires a binary grid".into(),
        ));
    }

    // Every entry must remove at least one foreground voxel.
    let geometry = grid.geometry();
    for entry in 0..spec.centers.len() {
        let [nx, ny, nz] = geometry.dims;
        let mut hit = false;
        'scan: for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if grid.get(x, y, z) != 0.0 && spec.contains(entry, geometry.world_of([x, y, z]))
                    {
                        hit = true;
                        break 'scan;
                    }
                }
            }
        }
        if !hit {
            return Err(Error::InvalidSpec(format!(
                "defect {entry} does not intersect the shape"
            )));
        }
    }

    let region = spec.region_mask(geometry);
    let defective = volume_subtract(grid, &region)?;
    let implant = volume_intersect(grid, &region)?;
    Ok((defective, implant))
}

/// Find a defect size that removes approximately `target_fraction` of the
/// shape's foreground, by bisection on a shared size for all entries.
///
/// Returns the spec and the achieved fraction.
pub fn defect_for_fraction(
    grid: &VoxelGrid,
    kind: DefectKind,
    centers: Vec<[f64; 3]>,
    target_fraction: f64,
) -> Result<(DefectSpec, f64)> {
    if !(0.0..1.0).contains(&target_fraction) || target_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "target fraction {target_fraction} outside (0, 1)"
        )));
    }
    let total = grid.foreground_count();
    if total == 0 {
        return Err(Error::DegenerateInput("empty shape".into()));
    }

    let geometry = grid.geometry();
    let fraction_for = |size: f64| -> f64 {
        let spec = DefectSpec {
            kind,
            centers: centers.clone(),
            sizes: vec![size; centers.len()],
        };
        let region = spec.region_mask(geometry);
        let removed = grid
            .data()
            .iter()
            .zip(region.data().iter())
            .filter(|(&g, &r)| g != 0.0 && r != 0.0)
            .count();
        removed as f64 / total as f64
    };

    let diag = (0..3)
        .map(|a| (geometry.dims[a] as f64) * geometry.spacing[a])
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    let mut lo = 0.0;
    let mut hi = diag;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if fraction_for(mid) < target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let size = 0.5 * (lo + hi);
    let achieved = fraction_for(size);
    let sizes = vec![size; centers.len()];
    let spec = DefectSpec { kind, centers, sizes };
    Ok((spec, achieved))
}
