//! Statistical shape model on voxel grids: mean shape, PCA variation modes,
//! weight projection and reconstruction.
//!
//! All training shapes must live in a common reference space (same grid).
//! The variation matrix holds one mode per row over the flattened voxel
//! grid. Fitting runs through the Gram matrix of the sample-by-voxel data
//! matrix (samples are few, voxels are millions), so no voxel-by-voxel
//! covariance is ever materialized.

mod persist;

pub use persist::{load_model, save_model};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, VoxelGrid};

/// Ratio to the largest singular value below which a mode is flagged as
/// numerically zero (rank deficiency).
const NEAR_ZERO_RATIO: f64 = 1e-10;

/// How the rows of the variation matrix are scaled.
///
/// `UnitRows` is standard PCA: orthonormal principal directions. When the
/// score matrix and the pseudo-inverse are taken consistently (same
/// centering), the score-times-pseudo-inverse construction collapses to
/// exactly these unit rows, and projection followed by reconstruction is
/// the identity on the training span. `MixedPseudoInverse` reproduces the
/// literal mixed construction (centered scores multiplied by the
/// pseudo-inverse of the uncentered data matrix), which does not have that
/// identity property; it exists for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiNormalization {
    UnitRows,
    MixedPseudoInverse,
}

/// Fit-time choices, recorded on the model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    /// Subtract the mean before the decomposition and during projection.
    pub centered: bool,
    pub normalization: PhiNormalization,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            centered: true,
            normalization: PhiNormalization::UnitRows,
        }
    }
}

/// Per-mode weights, optionally min-max rescaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub rescaled: bool,
    /// (min, max) of the raw values, present iff `rescaled`.
    pub rescale_bounds: Option<(f64, f64)>,
}

impl WeightVector {
    pub fn raw(values: Vec<f64>) -> Self {
        WeightVector {
            values,
            rescaled: false,
            rescale_bounds: None,
        }
    }

    /// All-ones weights (the unit-weight reconstruction variant).
    pub fn unit(len: usize) -> Self {
        Self::raw(vec![1.0; len])
    }

    /// Min-max rescale raw weights into [0, 1], recording the bounds.
    pub fn rescaled_from_raw(raw: &[f64]) -> Result<Self> {
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::DegenerateWeights(format!(
                "cannot rescale weights with min = max = {min}"
            )));
        }
        Ok(WeightVector {
            values: raw.iter().map(|&v| (v - min) / (max - min)).collect(),
            rescaled: true,
            rescale_bounds: Some((min, max)),
        })
    }

    /// Weights in raw units: inverts the recorded rescaling if present.
    pub fn raw_values(&self) -> Vec<f64> {
        match (self.rescaled, self.rescale_bounds) {
            (true, Some((min, max))) => {
                self.values.iter().map(|&v| v * (max - min) + min).collect()
            }
            _ => self.values.clone(),
        }
    }
}

/// Mean shape plus variation modes in a fixed reference space.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    mean: VoxelGrid,
    /// Row-major num_modes x voxel_count.
    modes: Vec<f64>,
    num_modes: usize,
    reference: GridGeometry,
    training_ids: Vec<String>,
    centered: bool,
    normalization: PhiNormalization,
    singular_values: Vec<f64>,
}

/// Voxelwise arithmetic mean of grids in a common space; fractional output.
pub fn mean_shape(warped: &[VoxelGrid]) -> Result<VoxelGrid> {
    let first = warped
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_shape needs at least one grid".into()))?;
    let n = first.voxel_count();
    let mut acc = vec![0.0f64; n];
    for g in warped {
        if g.dims() != first.dims() {
            return Err(Error::ShapeMismatch {
                expected: first.dims(),
                actual: g.dims(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(g.data().iter()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / warped.len() as f64;
    let data: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
    VoxelGrid::from_data(*first.geometry(), data)
}

/// Fit with default options (centered, unit rows).
pub fn fit_modes(warped: &[VoxelGrid], num_modes: usize) -> Result<ShapeModel> {
    fit_modes_with(warped, num_modes, &FitOptions::default())
}

pub fn fit_modes_with(
    warped: &[VoxelGrid],
    num_modes: usize,
    opts: &FitOptions,
) -> Result<ShapeModel> {
    let n = warped.len();
    if n == 0 {
        return Err(Error::InvalidArgument("fit_modes needs training shapes".into()));
    }
    if num_modes == 0 || num_modes > n {
        return Err(Error::InvalidArgument(format!(
            "num_modes {num_modes} must be in 1..={n} (training count)"
        )));
    }
    let mean = mean_shape(warped)?;
    let d = mean.voxel_count();

    // Data matrix rows, centered or raw by configuration.
    let build_rows = |center: bool| -> Vec<Vec<f64>> {
        warped
            .iter()
            .map(|g| {
                g.data()
                    .iter()
                    .zip(mean.data().iter())
                    .map(|(&v, &m)| v as f64 - if center { m as f64 } else { 0.0 })
                    .collect()
            })
            .collect()
    };

    let rows = build_rows(opts.centered);
    let (sing, right_vectors) = thin_svd_rows(&rows, num_modes);

    let mut modes = vec![0.0f64; num_modes * d];
    match opts.normalization {
        PhiNormalization::UnitRows => {
            for (c, v) in right_vectors.iter().enumerate() {
                modes[c * d..(c + 1) * d].copy_from_slice(v);
            }
        }
        PhiNormalization::MixedPseudoInverse => {
            // Centered scores times the pseudo-inverse of the *raw* data
            // matrix: phi = T_c^T G_raw^+ A_raw, all in sample space.
            let centered_rows = if opts.centered { rows } else { build_rows(true) };
            let raw_rows = build_rows(false);
            let scores = score_matrix(&centered_rows, &sing, &right_vectors);
            let g_raw = gram(&raw_rows);
            let g_pinv = pseudo_inverse_sym(&g_raw);
            // h = scores^T * g_pinv, shape num_modes x n.
            for c in 0..num_modes {
                for (j, raw) in raw_rows.iter().enumerate() {
                    let mut hcj = 0.0;
                    for k in 0..n {
                        hcj += scores[(k, c)] * g_pinv[(k, j)];
                    }
                    if hcj != 0.0 {
                        let dst = &mut modes[c * d..(c + 1) * d];
                        for (m, &v) in dst.iter_mut().zip(raw.iter()) {
                            *m += hcj * v;
                        }
                    }
                }
            }
            fix_mode_signs(&mut modes, num_modes, d);
        }
    }

    Ok(ShapeModel {
        mean,
        modes,
        num_modes,
        reference: *warped[0].geometry(),
        training_ids: (0..n).map(|i| format!("train-{i:03}")).collect(),
        centered: opts.centered,
        normalization: opts.normalization,
        singular_values: sing,
    })
}

/// Thin SVD of the row-sample matrix via its Gram matrix. Returns the top
/// `k` singular values and unit right singular vectors (sign-fixed so the
/// largest-magnitude entry of each vector is positive). Vectors whose
/// singular value is numerically zero come back as zero rows.
fn thin_svd_rows(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let g = gram(rows);
    let eig = g.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let sigma_max = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let mut sing = Vec::with_capacity(k);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &src in order.iter().take(k) {
        let sigma = eig.eigenvalues[src].max(0.0).sqrt();
        sing.push(sigma);
        let mut v = vec![0.0f64; d];
        if sigma > NEAR_ZERO_RATIO * sigma_max && sigma > 0.0 {
            let u = eig.eigenvectors.column(src);
            for (i, row) in rows.iter().enumerate() {
                let w = u[i] / sigma;
                if w != 0.0 {
                    for (dst, &val) in v.iter_mut().zip(row.iter()) {
                        *dst += w * val;
                    }
                }
            }
            // Lifting through a tiny sigma amplifies Gram eigen noise;
            // one Gram-Schmidt pass against the earlier modes restores
            // pairwise orthogonality to machine precision.
            for prev in vectors.iter() {
                let dot: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                if dot != 0.0 {
                    for (x, &p) in v.iter_mut().zip(prev.iter()) {
                        *x -= dot * p;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
            }
            sign_fix(&mut v);
        }
        vectors.push(v);
    }
    debug_assert_eq!(vectors.len(), k);
    (sing, vectors)
}

fn gram(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: f64 = rows[i].iter().zip(rows[j].iter()).map(|(a, b)| a * b).sum();
            g[(i, j)] = dot;
            g[(j, i)] = dot;
        }
    }
    g
}

/// Scores of the centered rows on the top modes: t[i][c] = row_i . v_c.
fn score_matrix(centered_rows: &[Vec<f64>], sing: &[f64], vectors: &[Vec<f64>]) -> DMatrix<f64> {
    let n = centered_rows.len();
    let k = vectors.len();
    let mut t = DMatrix::zeros(n, k);
    for (i, row) in centered_rows.iter().enumerate() {
        for (c, v) in vectors.iter().enumerate() {
            if sing[c] > 0.0 {
                t[(i, c)] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
    t
}

fn pseudo_inverse_sym(g: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = g.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = max_ev * 1e-12;
    let n = g.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        if ev > tol {
            let u = eig.eigenvectors.column(k);
            let inv = 1.0 / ev;
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += u[i] * u[j] * inv;
                }
            }
        }
    }
    out
}

fn sign_fix(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn fix_mode_signs(modes: &mut [f64], num_modes: usize, d: usize) {
    for c in 0..num_modes {
        sign_fix(&mut modes[c * d..(c + 1) * d]);
    }
}

/// Per-mode statistics across a set of projected test shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode: usize,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Fraction of the mode's squared energy inside the ROI mask, when one
    /// was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi_energy_fraction: Option<f64>,
    pub singular_value: f64,
    pub near_zero: bool,
}

impl ShapeModel {
    pub fn mean(&self) -> &VoxelGrid {
        &self.mean
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn reference(&self) -> &GridGeometry {
        &self.reference
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn normalization(&self) -> PhiNormalization {
        self.normalization
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn training_ids(&self) -> &[String] {
        &self.training_ids
    }

    pub fn set_training_ids(&mut self, ids: Vec<String>) -> Result<()> {
        if ids.len() != self.training_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} training ids, got {}",
                self.training_ids.len(),
                ids.len()
            )));
        }
        self.training_ids = ids;
        Ok(())
    }

    pub fn mode_row(&self, c: usize) -> &[f64] {
        let d = self.mean.voxel_count();
        &self.modes[c * d..(c + 1) * d]
    }

    /// Modes whose singular value is numerically zero.
    pub fn near_zero_modes(&self) -> Vec<bool> {
        let sigma_max = self.singular_values.iter().cloned().fold(0.0, f64::max);
        self.singular_values
            .iter()
            .map(|&s| s <= NEAR_ZERO_RATIO * sigma_max || sigma_max == 0.0)
            .collect()
    }

    pub fn effective_rank(&self) -> usize {
        self.near_zero_modes().iter().filter(|&&z| !z).count()
    }

    fn check_reference_space(&self, shape: &VoxelGrid) -> Result<()> {
        if shape.dims() != self.reference.dims {
            return Err(Error::ShapeMismatch {
                expected: self.reference.dims,
                actual: shape.dims(),
            });
        }
        Ok(())
    }

    /// Project a shape onto the modes: lambda = phi * (shape - mean) when
    /// the model is centered, phi * shape otherwise.
    pub fn project(&self, shape: &VoxelGrid, rescale: bool) -> Result<WeightVector> {
        self.check_reference_space(shape)?;
        let d = self.mean.voxel_count();
        let mut raw = Vec::with_capacity(self.num_modes);
        for c in 0..self.num_modes {
            let row = &self.modes[c * d..(c + 1) * d];
            let mut acc = 0.0f64;
            if self.centered {
                for ((&phi, &v), &m) in row.iter().zip(shape.data()).zip(self.mean.data()) {
                    acc += phi * (v as f64 - m as f64);
                }
            } else {
                for (&phi, &v) in row.iter().zip(shape.data()) {
                    acc += phi * v as f64;
                }
            }
            raw.push(acc);
        }
        if rescale {
            WeightVector::rescaled_from_raw(&raw)
        } else {
            Ok(WeightVector::raw(raw))
        }
    }

    /// Mean plus weighted modes. Rescaled weights are mapped back to raw
    /// units through their recorded bounds; fractional output.
    pub fn reconstruct(&self, weights: &WeightVector) -> Result<VoxelGrid> {
        self.reconstruct_with(weights, false)
    }

    /// As [`reconstruct`](Self::reconstruct), but `literal_rescaled` keeps
    /// rescaled weight values as-is (the rescale-then-reconstruct variant).
    pub fn reconstruct_with(
        &self,
        weights: &WeightVector,
        literal_rescaled: bool,
    ) -> Result<VoxelGrid> {
        let lambda = if literal_rescaled {
            weights.values.clone()
        } else {
            weights.raw_values()
        };
        let acc = self.weighted_mode_sum(&lambda, true)?;
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        VoxelGrid::from_data(self.reference, data)
    }

    /// Weighted mode sum without the mean.
    pub fn modes_only_reconstruct(&self, weights: &WeightVector) -> Result<VoxelGrid> {
        let lambda = weights.raw_values();
        let acc = self.weighted_mode_sum(&lambda, false)?;
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        VoxelGrid::from_data(self.reference, data)
    }

    fn weighted_mode_sum(&self, lambda: &[f64], add_mean: bool) -> Result<Vec<f64>> {
        if lambda.len() != self.num_modes {
            return Err(Error::InvalidArgument(format!(
                "weight vector has {} entries, model has {} modes",
                lambda.len(),
                self.num_modes
            )));
        }
        let d = self.mean.voxel_count();
        let mut acc = if add_mean {
            self.mean.data().iter().map(|&m| m as f64).collect()
        } else {
            vec![0.0f64; d]
        };
        for (c, &w) in lambda.iter().enumerate() {
            let row = &self.modes[c * d..(c + 1) * d];
            for (a, &phi) in acc.iter_mut().zip(row.iter()) {
                *a += w * phi;
            }
        }
        Ok(acc)
    }

    /// Per-mode statistics of projected weights across test shapes, plus an
    /// optional ROI energy split.
    pub fn mode_report(
        &self,
        test_shapes: &[VoxelGrid],
        roi: Option<&VoxelGrid>,
    ) -> Result<Vec<ModeStats>> {
        if test_shapes.is_empty() {
            return Err(Error::InvalidArgument(
                "mode_report needs at least one test shape".into(),
            ));
        }
        if let Some(mask) = roi {
            self.check_reference_space(mask)?;
        }
        let mut all_weights = Vec::with_capacity(test_shapes.len());
        for shape in test_shapes {
            all_weights.push(self.project(shape, false)?.values);
        }
        let d = self.mean.voxel_count();
        let near_zero = self.near_zero_modes();
        let mut out = Vec::with_capacity(self.num_modes);
        for c in 0..self.num_modes {
            let ws: Vec<f64> = all_weights.iter().map(|w| w[c]).collect();
            let roi_energy_fraction = roi.map(|mask| {
                let row = &self.modes[c * d..(c + 1) * d];
                let mut inside = 0.0;
                let mut total = 0.0;
                for (&phi, &m) in row.iter().zip(mask.data().iter()) {
                    let e = phi * phi;
                    total += e;
                    if m != 0.0 {
                        inside += e;
                    }
                }
                if total > 0.0 {
                    inside / total
                } else {
                    0.0
                }
            });
            out.push(ModeStats {
                mode: c,
                mean_weight: ws.iter().sum::<f64>() / ws.len() as f64,
                min_weight: ws.iter().cloned().fold(f64::INFINITY, f64::min),
                max_weight: ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                roi_energy_fraction,
                singular_value: self.singular_values[c],
                near_zero: near_zero[c],
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomSpec};

    fn geom(d: usize) -> GridGeometry {
        GridGeometry::new([d, d, d], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn phantom32(seed: u64) -> VoxelGrid {
        make_phantom(&PhantomSpec {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            radii: [12.0, 10.0, 8.0],
            thickness: 3.0,
            seed,
            amplitude: 0.12,
        })
        .unwrap()
    }

    #[test]
    fn mean_of_identical_grids_is_identity() {
        let g = phantom32(1);
        let m = mean_shape(&[g.clone(), g.clone(), g.clone()]).unwrap();
        assert_eq!(m.data(), g.data());
    }

    #[test]
    fn mean_of_zeros_and_ones_is_half() {
        let zeros = VoxelGrid::zeros(geom(3));
        let ones = VoxelGrid::filled(geom(3), 1.0);
        let m = mean_shape(&[zeros, ones]).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mean_of_three_binary_grids_hits_quartiles() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s)).collect();
        let m = mean_shape(&gs).unwrap();
        let allowed = [0.0f32, (1.0f64 / 3.0) as f32, (2.0f64 / 3.0) as f32, 1.0];
        for &v in m.data() {
            assert!(allowed.contains(&v), "unexpected mean value {v}");
        }
    }

    #[test]
    fn mean_rejects_empty_and_mismatched() {
        assert!(mean_shape(&[]).is_err());
        let a = VoxelGrid::zeros(geom(3));
        let b = VoxelGrid::zeros(geom(4));
        assert!(mean_shape(&[a, b]).is_err());
    }

    #[test]
    fn two_shape_mode_is_normalized_difference() {
        let x1 = phantom32(10);
        let x2 = phantom32(11);
        let model = fit_modes(&[x1.clone(), x2.clone()], 1).unwrap();
        // Oracle: (x1 - x2) / ||x1 - x2||, sign-fixed like the model.
        let mut diff: Vec<f64> = x1
            .data()
            .iter()
            .zip(x2.data().iter())
            .map(|(&a, &b)| (a - b) as f64)
            .collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in diff.iter_mut() {
            *v /= norm;
        }
        let row = model.mode_row(0);
        let dot: f64 = row.iter().zip(diff.iter()).map(|(a, b)| a * b).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in row.iter().zip(diff.iter()) {
            assert!((a - sign * b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_training_shapes_are_rank_zero() {
        let g = phantom32(3);
        let model = fit_modes(&[g.clone(), g.clone(), g.clone()], 3).unwrap();
        assert_eq!(model.effective_rank(), 0);
        assert!(model.near_zero_modes().iter().all(|&z| z));
    }

    #[test]
    fn too_many_modes_is_an_error() {
        let g = phantom32(3);
        assert!(matches!(
            fit_modes(&[g.clone(), g], 5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn projecting_the_mean_gives_zero_weights() {
        let gs: Vec<VoxelGrid> = (0..4).map(|s| phantom32(s + 20)).collect();
        let model = fit_modes(&gs, 4).unwrap();
        let w = model.project(model.mean(), false).unwrap();
        for v in &w.values {
            assert!(v.abs() < 1e-6, "weight {v}");
        }
    }

    #[test]
    fn training_members_reconstruct_exactly() {
        let gs: Vec<VoxelGrid> = (0..5).map(|s| phantom32(s + 40)).collect();
        let model = fit_modes(&gs, 5).unwrap();
        for g in &gs {
            let w = model.project(g, false).unwrap();
            let rec = model.reconstruct(&w).unwrap();
            let max_err = rec
                .data()
                .iter()
                .zip(g.data().iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-6, "max per-voxel error {max_err}");
        }
    }

    #[test]
    fn inverse_pca_identity_on_held_out_shape() {
        let gs: Vec<VoxelGrid> = (0..4).map(|s| phantom32(s + 60)).collect();
        let model = fit_modes(&gs, 4).unwrap();
        let held_out = phantom32(99);

        // Implementation route.
        let rec = model
            .reconstruct(&model.project(&held_out, false).unwrap())
            .unwrap();

        // Independent route: mean + (y - mean) Phi^T Phi from raw arrays.
        let d = model.mean().voxel_count();
        let centered: Vec<f64> = held_out
            .data()
            .iter()
            .zip(model.mean().data().iter())
            .map(|(&v, &m)| v as f64 - m as f64)
            .collect();
        let mut expected: Vec<f64> =
            model.mean().data().iter().map(|&m| m as f64).collect();
        for c in 0..model.num_modes() {
            let row = model.mode_row(c);
            let lam: f64 = row.iter().zip(centered.iter()).map(|(a, b)| a * b).sum();
            for i in 0..d {
                expected[i] += lam * row[i];
            }
        }
        for (got, want) in rec.data().iter().zip(expected.iter()) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn summation_and_matrix_reconstruction_agree_bitwise() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 80)).collect();
        let model = fit_modes(&gs, 3).unwrap();
        let w = model.project(&gs[1], false).unwrap();
        let rec = model.reconstruct(&w).unwrap();

        // Summation form: sweep one mode at a time in the same order.
        let d = model.mean().voxel_count();
        let mut acc: Vec<f64> = model.mean().data().iter().map(|&m| m as f64).collect();
        for (c, &lam) in w.values.iter().enumerate() {
            let row = model.mode_row(c);
            for i in 0..d {
                acc[i] += lam * row[i];
            }
        }
        let by_sum: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        assert_eq!(rec.data(), by_sum.as_slice());
    }

    #[test]
    fn rescale_bounds_and_inversion() {
        let w = WeightVector::rescaled_from_raw(&[-2.0, 0.0, 2.0]).unwrap();
        assert_eq!(w.values, vec![0.0, 0.5, 1.0]);
        assert_eq!(w.rescale_bounds, Some((-2.0, 2.0)));
        assert_eq!(w.raw_values(), vec![-2.0, 0.0, 2.0]);
        assert!(WeightVector::rescaled_from_raw(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn rescaled_projection_roundtrips_through_reconstruct() {
        let gs: Vec<VoxelGrid> = (0..4).map(|s| phantom32(s + 100)).collect();
        let model = fit_modes(&gs, 4).unwrap();
        let raw = model.project(&gs[2], false).unwrap();
        let scaled = model.project(&gs[2], true).unwrap();
        assert!(scaled.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Default reconstruction un-rescales, so both agree.
        let a = model.reconstruct(&raw).unwrap();
        let b = model.reconstruct(&scaled).unwrap();
        let max_err = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-5);
        // The literal variant is a different reconstruction.
        let lit = model.reconstruct_with(&scaled, true).unwrap();
        assert_ne!(lit.data(), a.data());
    }

    #[test]
    fn zero_weights_reconstruct_the_mean_exactly() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 120)).collect();
        let model = fit_modes(&gs, 3).unwrap();
        let rec = model
            .reconstruct(&WeightVector::raw(vec![0.0; 3]))
            .unwrap();
        assert_eq!(rec.data(), model.mean().data());
    }

    #[test]
    fn modes_only_variants() {
        let gs: Vec<VoxelGrid> = (0..2).map(|s| phantom32(s + 140)).collect();
        let model = fit_modes(&gs, 2).unwrap();

        let zero = model
            .modes_only_reconstruct(&WeightVector::raw(vec![0.0, 0.0]))
            .unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let single = model
            .modes_only_reconstruct(&WeightVector::raw(vec![1.0, 0.0]))
            .unwrap();
        for (got, want) in single.data().iter().zip(model.mode_row(0).iter()) {
            assert_eq!(*got, *want as f32);
        }

        // Unit weights differ from reconstruct by exactly the mean.
        let unit = WeightVector::unit(2);
        let with_mean = model.reconstruct(&unit).unwrap();
        let without = model.modes_only_reconstruct(&unit).unwrap();
        for ((&a, &b), &m) in with_mean
            .data()
            .iter()
            .zip(without.data().iter())
            .zip(model.mean().data().iter())
        {
            assert!((a - b - m).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_row_modes_are_orthonormal() {
        let gs: Vec<VoxelGrid> = (0..5).map(|s| phantom32(s + 160)).collect();
        let model = fit_modes(&gs, 5).unwrap();
        let near_zero = model.near_zero_modes();
        for i in 0..5 {
            for j in i..5 {
                let dot: f64 = model
                    .mode_row(i)
                    .iter()
                    .zip(model.mode_row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j && !near_zero[i] { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() < 1e-8,
                    "modes {i},{j}: dot {dot} want {want}"
                );
            }
        }
    }

    #[test]
    fn truncation_never_improves_training_error() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 180)).collect();
        let target = &gs[0];
        let mut last_err = f64::INFINITY;
        for c in 1..=3 {
            let model = fit_modes(&gs, c).unwrap();
            let rec = model
                .reconstruct(&model.project(target, false).unwrap())
                .unwrap();
            let err: f64 = rec
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            assert!(
                err <= last_err * (1.0 + 1e-9) + 1e-9,
                "error grew when adding modes: {err} vs {last_err}"
            );
            last_err = err;
        }
        assert!(last_err < 1e-9, "full-rank training error {last_err}");
    }

    #[test]
    fn mixed_pseudo_inverse_construction_differs_but_projects_scores() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 200)).collect();
        let unit = fit_modes(&gs, 3).unwrap();
        let mixed = fit_modes_with(
            &gs,
            3,
            &FitOptions {
                centered: true,
                normalization: PhiNormalization::MixedPseudoInverse,
            },
        )
        .unwrap();
        // Different row scaling from the unit-row construction.
        let unit_norm: f64 = unit.mode_row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mixed_norm: f64 = mixed.mode_row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((unit_norm - 1.0).abs() < 1e-9);
        assert!((mixed_norm - 1.0).abs() > 1e-6);
        // And applying the mixed phi to a raw training shape reproduces its
        // centered PCA score (the defining property of the construction).
        let raw_score = {
            let shape = &gs[0];
            let row = mixed.mode_row(0);
            row.iter()
                .zip(shape.data().iter())
                .map(|(&p, &v)| p * v as f64)
                .sum::<f64>()
        };
        let centered_score = unit.project(&gs[0], false).unwrap().values[0]
            * if unit.mode_row(0).iter().zip(mixed.mode_row(0)).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        assert!(
            (raw_score - centered_score).abs() < 1e-6 * centered_score.abs().max(1.0),
            "score {raw_score} vs {centered_score}"
        );
    }

    #[test]
    fn uncentered_fit_projects_raw_shapes() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 220)).collect();
        let model = fit_modes_with(
            &gs,
            3,
            &FitOptions {
                centered: false,
                normalization: PhiNormalization::UnitRows,
            },
        )
        .unwrap();
        assert!(!model.centered());
        // Projecting the mean no longer gives zero weights.
        let w = model.project(model.mean(), false).unwrap();
        assert!(w.values.iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn mode_report_single_shape_and_roi_partition() {
        let gs: Vec<VoxelGrid> = (0..3).map(|s| phantom32(s + 240)).collect();
        let model = fit_modes(&gs, 3).unwrap();
        let probe = phantom32(260);

        let stats = model.mode_report(std::slice::from_ref(&probe), None).unwrap();
        let w = model.project(&probe, false).unwrap();
        for (s, &v) in stats.iter().zip(w.values.iter()) {
            assert_eq!(s.mean_weight, v);
            assert_eq!(s.min_weight, v);
            assert_eq!(s.max_weight, v);
            assert!(s.roi_energy_fraction.is_none());
        }

        let full = VoxelGrid::filled(*model.reference(), 1.0);
        let stats = model
            .mode_report(std::slice::from_ref(&probe), Some(&full))
            .unwrap();
        for s in &stats {
            if !s.near_zero {
                assert!((s.roi_energy_fraction.unwrap() - 1.0).abs() < 1e-12);
            }
        }

        // Two disjoint ROIs partitioning the grid: fractions sum to 1.
        let [nx, ny, nz] = model.reference().dims;
        let mut lower = VoxelGrid::zeros(*model.reference());
        let mut upper = VoxelGrid::zeros(*model.reference());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if z < nz / 2 {
                        lower.set(x, y, z, 1.0);
                    } else {
                        upper.set(x, y, z, 1.0);
                    }
                }
            }
        }
        let s_lo = model
            .mode_report(std::slice::from_ref(&probe), Some(&lower))
            .unwrap();
        let s_hi = model
            .mode_report(std::slice::from_ref(&probe), Some(&upper))
            .unwrap();
        for (a, b) in s_lo.iter().zip(s_hi.iter()) {
            if !a.near_zero {
                let total = a.roi_energy_fraction.unwrap() + b.roi_energy_fraction.unwrap();
                assert!((total - 1.0).abs() < 1e-9, "partition sum {total}");
            }
        }
    }

    #[test]
    fn mode_report_rejects_empty_test_set() {
        let gs: Vec<VoxelGrid> = (0..2).map(|s| phantom32(s)).collect();
        let model = fit_modes(&gs, 2).unwrap();
        assert!(model.mode_report(&[], None).is_err());
    }
}
