//! Similarity-transform registration of binary volumes.
//!
//! A transform maps world points of the moving image into the world frame
//! of a fixed reference grid: `p_fixed = scale * R * p_moving + t`.
//! Estimation is moment-based initialization (centroids, principal axes of
//! the foreground second-moment tensor, radius-of-gyration scale) followed
//! by trimmed iterative-closest-point refinement on surface voxels, with a
//! closed-form similarity update per iteration.

mod kdtree;

pub use kdtree::KdTree;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, VoxelGrid};

/// 7-parameter similarity transform (isotropic scale, rotation,
/// translation) together with the geometry of the space it maps into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformWire", into = "TransformWire")]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Grid the transform resamples into.
    pub fixed_grid: GridGeometry,
}

/// JSON wire format: rotation as row-major 9 reals.
#[derive(Serialize, Deserialize)]
struct TransformWire {
    scale: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    fixed_grid: GridGeometry,
}

impl From<SimilarityTransform> for TransformWire {
    fn from(t: SimilarityTransform) -> Self {
        let r = t.rotation;
        TransformWire {
            scale: t.scale,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
            fixed_grid: t.fixed_grid,
        }
    }
}

impl TryFrom<TransformWire> for SimilarityTransform {
    type Error = Error;

    fn try_from(w: TransformWire) -> Result<Self> {
        let r = w.rotation;
        let t = SimilarityTransform {
            scale: w.scale,
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vector3::new(w.translation[0], w.translation[1], w.translation[2]),
            fixed_grid: w.fixed_grid,
        };
        t.validate()?;
        Ok(t)
    }
}

impl SimilarityTransform {
    pub fn identity(fixed_grid: GridGeometry) -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fixed_grid,
        }
    }

    /// Check the transform invariants: orthonormal proper rotation within
    /// 1e-9 and positive scale.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "transform scale must be positive, got {}",
                self.scale
            )));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (error {ortho_err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} != 1"
            )));
        }
        Ok(())
    }

    /// Map a moving-space world point into the fixed frame.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::new(p[0], p[1], p[2])) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Map a fixed-frame world point back to moving space.
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation.transpose() * (Vector3::new(p[0], p[1], p[2]) - self.translation)
            / self.scale;
        [v.x, v.y, v.z]
    }

    /// Analytic inverse, resampling into the given original geometry.
    pub fn inverse(&self, original_grid: GridGeometry) -> SimilarityTransform {
        let rotation = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation,
            translation: -(rotation * self.translation) / self.scale,
            fixed_grid: original_grid,
        }
    }

    /// `second` after `first`; the result resamples into `second`'s grid.
    pub fn compose(second: &SimilarityTransform, first: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: second.scale * first.scale,
            rotation: second.rotation * first.rotation,
            translation: second.scale * (second.rotation * first.translation)
                + second.translation,
            fixed_grid: second.fixed_grid,
        }
    }

    /// Rotation angle in degrees relative to another rotation.
    pub fn rotation_angle_to(&self, other: &SimilarityTransform) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Knobs for [`estimate_transform`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Convergence threshold on the relative residual change.
    pub tol: f64,
    pub max_iterations: usize,
    /// Fraction of best point matches kept per ICP iteration.
    pub trim_fraction: f64,
    /// Surface point budget; larger sets are strided down deterministically.
    pub max_surface_points: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            tol: 1e-4,
            max_iterations: 100,
            trim_fraction: 0.8,
            max_surface_points: 15_000,
        }
    }
}

/// Outcome of a registration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub transform: SimilarityTransform,
    /// Mean symmetric surface distance after warp, in mm.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn surface_points_world(grid: &VoxelGrid, budget: usize) -> Vec<[f64; 3]> {
    let voxels = grid.surface_voxels();
    let stride = voxels.len().div_ceil(budget.max(1)).max(1);
    voxels
        .iter()
        .step_by(stride)
        .map(|&v| grid.geometry().world_of(v))
        .collect()
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for p in points {
        acc += Vector3::new(p[0], p[1], p[2]);
    }
    acc / points.len() as f64
}

fn second_moment(points: &[[f64; 3]], mean: &Vector3<f64>) -> Matrix3<f64> {
    let mut acc = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        acc += d * d.transpose();
    }
    acc / points.len() as f64
}

/// Eigenvectors of a symmetric 3x3 matrix as columns, eigenvalues
/// descending, right-handed.
fn principal_axes(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut axes = Matrix3::zeros();
    for (col, &src) in order.iter().enumerate() {
        axes.set_column(col, &eig.eigenvectors.column(src));
    }
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2).clone_owned();
        axes.set_column(2, &flipped);
    }
    axes
}

/// Moment-based initialization candidates.
///
/// Principal axes leave the rotation ambiguous in two ways: each axis pair
/// has a sign ambiguity, and on defective or near-degenerate shapes the
/// eigenvalue ordering itself is unstable (a large defect can swap two
/// moments). Both are covered by enumerating all 24 proper rotations that
/// map the moving axis frame onto the fixed one; a short ICP run per
/// candidate picks the true basin.
fn moments_init_candidates(
    moving_pts: &[[f64; 3]],
    fixed_pts: &[[f64; 3]],
) -> Vec<(f64, Matrix3<f64>, Vector3<f64>)> {
    let mu_m = centroid(moving_pts);
    let mu_f = centroid(fixed_pts);
    let cov_m = second_moment(moving_pts, &mu_m);
    let cov_f = second_moment(fixed_pts, &mu_f);
    let scale = (cov_f.trace() / cov_m.trace()).sqrt();
    let axes_m = principal_axes(&cov_m);
    let axes_f = principal_axes(&cov_f);

    let permutations: [([usize; 3], f64); 6] = [
        ([0, 1, 2], 1.0),
        ([0, 2, 1], -1.0),
        ([1, 0, 2], -1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([2, 1, 0], -1.0),
    ];
    let sign_triples: [[f64; 3]; 8] = [
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [-1.0, -1.0, -1.0],
    ];

    let mut out = Vec::with_capacity(24);
    for (perm, perm_sign) in permutations {
        for signs in sign_triples {
            // det(P) = perm parity times the sign product; proper only.
            if perm_sign * signs[0] * signs[1] * signs[2] < 0.0 {
                continue;
            }
            let mut p = Matrix3::zeros();
            for (col, &row) in perm.iter().enumerate() {
                p[(row, col)] = signs[col];
            }
            let r = axes_f * p * axes_m.transpose();
            let t = mu_f - scale * (r * mu_m);
            out.push((scale, r, t));
        }
    }
    out
}

struct IcpOutcome {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    iterations: usize,
    converged: bool,
}

/// Trimmed-ICP refinement from a given start.
fn icp_refine(
    moving_pts: &[[f64; 3]],
    fixed_pts: &[[f64; 3]],
    tree: &KdTree,
    start: (f64, Matrix3<f64>, Vector3<f64>),
    max_iterations: usize,
    trim_fraction: f64,
    tol: f64,
) -> Result<IcpOutcome> {
    let (mut scale, mut rotation, mut translation) = start;
    let keep = ((moving_pts.len() as f64 * trim_fraction).ceil() as usize)
        .clamp(4.min(moving_pts.len()), moving_pts.len());

    let mut prev_residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..max_iterations {
        iterations = iter + 1;
        let mut matches: Vec<(usize, usize, f64)> = moving_pts
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let q = scale * (rotation * Vector3::new(p[0], p[1], p[2])) + translation;
                let (j, d2) = tree.nearest([q.x, q.y, q.z]);
                (i, j, d2)
            })
            .collect();
        matches.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)));
        matches.truncate(keep);

        let residual = matches.iter().map(|m| m.2.sqrt()).sum::<f64>() / keep as f64;
        // 1e-9 mm is far below voxel scale; treat it as an exact match so a
        // perfect alignment does not churn on floating-point noise.
        if residual < 1e-9
            || (prev_residual.is_finite()
                && (prev_residual - residual).abs() / prev_residual.max(1e-30) < tol)
        {
            converged = true;
            break;
        }
        prev_residual = residual;

        let src: Vec<[f64; 3]> = matches.iter().map(|&(i, _, _)| moving_pts[i]).collect();
        let dst: Vec<[f64; 3]> = matches.iter().map(|&(_, j, _)| fixed_pts[j]).collect();
        let (s, r, t) = fit_similarity(&src, &dst)?;
        scale = s;
        rotation = r;
        translation = t;
    }
    Ok(IcpOutcome {
        scale,
        rotation,
        translation,
        iterations,
        converged,
    })
}

/// Closed-form least-squares similarity transform from paired points
/// (moving -> target), via the SVD of the cross-covariance.
fn fit_similarity(
    moving: &[[f64; 3]],
    target: &[[f64; 3]],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = moving.len();
    let mu_x = centroid(moving);
    let mu_y = centroid(target);
    let mut cross = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, q) in moving.iter().zip(target.iter()) {
        let dx = Vector3::new(p[0], p[1], p[2]) - mu_x;
        let dy = Vector3::new(q[0], q[1], q[2]) - mu_y;
        cross += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cross /= n as f64;
    var_x /= n as f64;
    if var_x < 1e-12 {
        return Err(Error::DegenerateInput(
            "matched moving points are coincident".into(),
        ));
    }
    let svd = cross.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let det_sign = (u * v_t).determinant();
    let d = if det_sign < 0.0 { -1.0 } else { 1.0 };
    let s_mat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * s_mat * v_t;
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1] + d * sv[2]) / var_x;
    let translation = mu_y - scale * (rotation * mu_x);
    Ok((scale, rotation, translation))
}

/// Estimate the similarity transform warping `moving` onto `fixed`.
pub fn estimate_transform(
    moving: &VoxelGrid,
    fixed: &VoxelGrid,
    config: &RegistrationConfig,
) -> Result<RegistrationReport> {
    if !moving.is_binary() || !fixed.is_binary() {
        return Err(Error::InvalidArgument(
            "registration requires binary volumes".into(),
        ));
    }
    if moving.foreground_count() == 0 || fixed.foreground_count() == 0 {
        return Err(Error::DegenerateInput(
            "registration requires nonempty foregrounds".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.trim_fraction) || config.trim_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {} outside (0, 1]",
            config.trim_fraction
        )));
    }

    let moving_pts = surface_points_world(moving, config.max_surface_points);
    let fixed_pts = surface_points_world(fixed, config.max_surface_points);
    let tree = KdTree::build(fixed_pts.clone());

    // Disambiguate the principal-axes sign candidates by a short trimmed
    // ICP on a point subsample; the basin with the lowest surface residual
    // wins. Membership overlap alone cannot tell the basins apart on thick
    // near-symmetric shells.
    let candidates = moments_init_candidates(&moving_pts, &fixed_pts);
    let probe_pts: Vec<[f64; 3]> = moving_pts
        .iter()
        .step_by((moving_pts.len() / 1500).max(1))
        .cloned()
        .collect();
    let mut best: Option<(f64, (f64, Matrix3<f64>, Vector3<f64>))> = None;
    for cand in candidates {
        // Each candidate must actually settle into its basin before the
        // scores are comparable; a looser tolerance keeps this cheap.
        let probe = icp_refine(
            &probe_pts,
            &fixed_pts,
            &tree,
            cand,
            40,
            config.trim_fraction,
            config.tol.max(1e-3),
        )?;
        // Score with untrimmed distances: trimming would let a flipped
        // basin discard exactly its mismatched points. The worst-decile
        // mean is added because a flip concentrates its error in small
        // mismatched regions that a plain mean dilutes.
        let mut dists: Vec<f64> = probe_pts
            .iter()
            .map(|&p| {
                let q = probe.scale * (probe.rotation * Vector3::new(p[0], p[1], p[2]))
                    + probe.translation;
                tree.nearest([q.x, q.y, q.z]).1.sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let tail_start = dists.len() - (dists.len() / 10).max(1);
        let tail = &dists[tail_start..];
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let score = mean + tail_mean;
        if std::env::var_os("VOXSSM_REG_DEBUG").is_some() {
            eprintln!(
                "[reg-debug] candidate score {score:.4} (mean {mean:.4} tail {tail_mean:.4}) scale {:.4} rot\n{:.3?}",
                probe.scale, probe.rotation
            );
        }
        if best.as_ref().map_or(true, |(r, _)| score < *r) {
            best = Some((score, (probe.scale, probe.rotation, probe.translation)));
        }
    }
    let start = best.unwrap().1;

    let outcome = icp_refine(
        &moving_pts,
        &fixed_pts,
        &tree,
        start,
        config.max_iterations,
        config.trim_fraction,
        config.tol,
    )?;
    let (scale, rotation, translation) = (outcome.scale, outcome.rotation, outcome.translation);
    let (iterations, converged) = (outcome.iterations, outcome.converged);

    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
        fixed_grid: *fixed.geometry(),
    };
    transform.validate()?;

    // Mean symmetric surface distance under the final transform.
    let warped_pts: Vec<[f64; 3]> = moving_pts.iter().map(|&p| transform.apply(p)).collect();
    let fwd = warped_pts
        .par_iter()
        .map(|&p| tree.nearest(p).1.sqrt())
        .sum::<f64>()
        / warped_pts.len() as f64;
    let warped_tree = KdTree::build(warped_pts);
    let bwd = fixed_pts
        .par_iter()
        .map(|&p| warped_tree.nearest(p).1.sqrt())
        .sum::<f64>()
        / fixed_pts.len() as f64;
    let symmetric_residual = 0.5 * (fwd + bwd);

    Ok(RegistrationReport {
        transform,
        residual: symmetric_residual,
        iterations,
        converged,
    })
}

/// Resample `moving` through `t` onto `t.fixed_grid`.
///
/// Inverse mapping with trilinear interpolation; binary inputs are
/// re-thresholded at 0.5, fractional inputs stay fractional.
pub fn warp(moving: &VoxelGrid, t: &SimilarityTransform) -> Result<VoxelGrid> {
    t.validate()?;
    let out_geom = t.fixed_grid;
    let [nx, ny, nz] = out_geom.dims;
    let binary = moving.is_binary();
    let data: Vec<f32> = (0..nz)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut plane = Vec::with_capacity(nx * ny);
            for y in 0..ny {
                for x in 0..nx {
                    let p_fixed = out_geom.world_of([x, y, z]);
                    let p_moving = t.apply_inverse(p_fixed);
                    let c = moving.geometry().continuous_index(p_moving);
                    let v = moving.sample_trilinear(c);
                    plane.push(if binary {
                        if v >= 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    });
                }
            }
            plane
        })
        .collect();
    VoxelGrid::from_data(out_geom, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;
    use crate::volume::{make_phantom, PhantomSpec};

    fn phantom64(seed: u64) -> VoxelGrid {
        make_phantom(&PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            radii: [24.0, 20.0, 16.0],
            thickness: 4.0,
            seed,
            amplitude: 0.08,
        })
        .unwrap()
    }

    #[test]
    fn self_registration_is_identity() {
        let g = phantom64(3);
        let report = estimate_transform(&g, &g, &RegistrationConfig::default()).unwrap();
        let t = &report.transform;
        assert!((t.scale - 1.0).abs() < 1e-3, "scale {}", t.scale);
        assert!(
            t.rotation_angle_to(&SimilarityTransform::identity(*g.geometry())) < 0.1,
            "rotation angle too large"
        );
        assert!(t.translation.norm() < 1e-3, "translation {:?}", t.translation);
        assert!(report.converged);
    }

    #[test]
    fn integer_shift_is_recovered() {
        let fixed = phantom64(5);
        let [nx, ny, nz] = fixed.dims();
        let mut moving = VoxelGrid::zeros(*fixed.geometry());
        // moving(x) = fixed(x - (5, -3, 2))
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    if fixed.get_or_zero(x - 5, y + 3, z - 2) != 0.0 {
                        moving.set(x as usize, y as usize, z as usize, 1.0);
                    }
                }
            }
        }
        let report = estimate_transform(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        let t = &report.transform;
        let want = [-5.0, 3.0, -2.0];
        for a in 0..3 {
            assert!(
                (t.translation[a] - want[a]).abs() < 0.5,
                "axis {a}: got {} want {}",
                t.translation[a],
                want[a]
            );
        }
        assert!((t.scale - 1.0).abs() < 0.02);
    }

    #[test]
    fn upscaled_copy_recovers_inverse_scale() {
        let fixed = phantom64(8);
        let geom = *fixed.geometry();
        let center = geom.world_center();
        let c = Vector3::new(center[0], center[1], center[2]);
        let grow = SimilarityTransform {
            scale: 1.2,
            rotation: Matrix3::identity(),
            translation: c - 1.2 * c,
            fixed_grid: geom,
        };
        let moving = warp(&fixed, &grow).unwrap();
        let report = estimate_transform(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        let s = report.transform.scale;
        assert!(
            (1.0 / 1.25..=1.0 / 1.15).contains(&s),
            "recovered scale {s}"
        );
    }

    #[test]
    fn empty_foreground_is_degenerate() {
        let g = phantom64(1);
        let empty = VoxelGrid::zeros(*g.geometry());
        assert!(matches!(
            estimate_transform(&empty, &g, &RegistrationConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn inverse_is_involutive_and_cancels() {
        let geom = GridGeometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let axis = Vector3::new(0.3f64, -0.5, 0.8).normalize();
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            0.4,
        )
        .into_inner();
        let t = SimilarityTransform {
            scale: 1.1,
            rotation,
            translation: Vector3::new(2.0, -1.0, 0.5),
            fixed_grid: geom,
        };
        t.validate().unwrap();

        let id = SimilarityTransform::identity(geom);
        assert_eq!(id.inverse(geom), id);

        let inv = t.inverse(geom);
        let back = inv.inverse(geom);
        assert!((back.scale - t.scale).abs() < 1e-9);
        assert!((back.rotation - t.rotation).abs().max() < 1e-9);
        assert!((back.translation - t.translation).norm() < 1e-9);

        let roundtrip = SimilarityTransform::compose(&inv, &t);
        for p in [[0.0, 0.0, 0.0], [3.5, -2.0, 7.25], [-10.0, 4.0, 1.0]] {
            let q = roundtrip.apply(p);
            for a in 0..3 {
                assert!((q[a] - p[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_identity_is_bitwise_on_same_grid() {
        let g = phantom64(2);
        let out = warp(&g, &SimilarityTransform::identity(*g.geometry())).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn warp_integer_translation_is_exact_shift() {
        let g = phantom64(4);
        let t = SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::new(3.0, 0.0, -2.0),
            fixed_grid: *g.geometry(),
        };
        let out = warp(&g, &t).unwrap();
        let [nx, ny, nz] = g.dims();
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let expect = g.get_or_zero(x - 3, y, z + 2);
                    assert_eq!(out.get_or_zero(x, y, z), expect, "at ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn warp_roundtrip_preserves_shape() {
        let g = phantom64(6);
        let geom = *g.geometry();
        let rotation = nalgebra::Rotation3::from_euler_angles(0.15, -0.1, 0.2).into_inner();
        let center = geom.world_center();
        let c = Vector3::new(center[0], center[1], center[2]);
        let t = SimilarityTransform {
            scale: 1.05,
            rotation,
            translation: c - 1.05 * (rotation * c) + Vector3::new(1.5, -2.0, 1.0),
            fixed_grid: geom,
        };
        let warped = warp(&g, &t).unwrap();
        let back = warp(&warped, &t.inverse(geom)).unwrap();
        let score = dsc(&g, &back).unwrap();
        assert!(score >= 0.95, "round-trip DSC {score}");
    }

    #[test]
    fn warp_composition_is_equivalent() {
        // A chunkier shell keeps the intermediate-binarization loss inside
        // the resampling tolerance this property is stated at.
        let g = make_phantom(&PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            radii: [27.0, 24.0, 21.0],
            thickness: 14.0,
            seed: 7,
            amplitude: 0.05,
        })
        .unwrap();
        let geom = *g.geometry();
        let r1 = nalgebra::Rotation3::from_euler_angles(0.05, 0.0, -0.03).into_inner();
        let r2 = nalgebra::Rotation3::from_euler_angles(0.0, 0.06, 0.04).into_inner();
        let t1 = SimilarityTransform {
            scale: 1.01,
            rotation: r1,
            translation: Vector3::new(1.0, -1.0, 0.5),
            fixed_grid: geom,
        };
        let t2 = SimilarityTransform {
            scale: 0.99,
            rotation: r2,
            translation: Vector3::new(-0.5, 0.7, 1.2),
            fixed_grid: geom,
        };
        let two_step = warp(&warp(&g, &t1).unwrap(), &t2).unwrap();
        let one_step = warp(&g, &SimilarityTransform::compose(&t2, &t1)).unwrap();
        let score = dsc(&two_step, &one_step).unwrap();
        assert!(score >= 0.98, "composition DSC {score}");
    }

    #[test]
    fn transform_json_roundtrip() {
        let geom = GridGeometry::new([4, 5, 6], [1.0, 1.0, 2.0], [0.5, 0.0, -1.0]).unwrap();
        let rotation = nalgebra::Rotation3::from_euler_angles(0.2, 0.1, -0.3).into_inner();
        let t = SimilarityTransform {
            scale: 0.9,
            rotation,
            translation: Vector3::new(1.0, 2.0, 3.0),
            fixed_grid: geom,
        };
        let json = serde_json::to_string(&t).unwrap();
        let back: SimilarityTransform = serde_json::from_str(&json).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-15);
        assert_eq!(back.fixed_grid, t.fixed_grid);

        // A non-orthonormal rotation must be rejected on deserialization.
        let bad = json.replace("\"scale\":0.9", "\"scale\":0.9,\"_\":0").replace(
            &format!("{}", rotation[(0, 0)]),
            "9.9",
        );
        assert!(serde_json::from_str::<SimilarityTransform>(&bad).is_err());
    }
}

