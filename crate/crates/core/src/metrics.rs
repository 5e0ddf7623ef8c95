//! Segmentation-overlap metrics: DSC, boundary DSC at a distance tolerance,
//! and the 95th-percentile symmetric surface distance (HD95).
//!
//! Boundary voxels are foreground voxels with at least one six-connected
//! background neighbor (out-of-grid counts as background). Distances are
//! Euclidean in physical millimeters, taken between voxel centers, and are
//! computed with an exact separable distance transform; the brute-force
//! all-pairs computation exists only as a test oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Sentinel for "no seed reachable yet" in the distance transform. Large
/// enough to dominate any real squared distance, small enough to keep the
/// parabola arithmetic finite.
const FAR: f64 = 1e30;

/// Exact squared Euclidean distance transform of a seed mask, separable
/// one axis at a time (lower envelope of parabolas per scanline), with
/// anisotropic physical spacing. Entries with no reachable seed are
/// `f64::INFINITY`.
pub fn squared_edt(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    assert_eq!(seeds.len(), nx * ny * nz);
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();

    let mut scan = Vec::new();
    let mut out = Vec::new();
    // Axis 0: stride 1, runs over x for each (y, z).
    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            gather(&dist, base, 1, nx, &mut scan);
            dt_scanline(&scan, spacing[0], &mut out);
            scatter(&mut dist, base, 1, &out);
        }
    }
    // Axis 1: stride nx.
    for z in 0..nz {
        for x in 0..nx {
            let base = x + nx * ny * z;
            gather(&dist, base, nx, ny, &mut scan);
            dt_scanline(&scan, spacing[1], &mut out);
            scatter(&mut dist, base, nx, &out);
        }
    }
    // Axis 2: stride nx * ny.
    for y in 0..ny {
        for x in 0..nx {
            let base = x + nx * y;
            gather(&dist, base, nx * ny, nz, &mut scan);
            dt_scanline(&scan, spacing[2], &mut out);
            scatter(&mut dist, base, nx * ny, &out);
        }
    }

    for d in dist.iter_mut() {
        if *d >= FAR * 0.5 {
            *d = f64::INFINITY;
        }
    }
    dist
}

fn gather(src: &[f64], base: usize, stride: usize, len: usize, into: &mut Vec<f64>) {
    into.clear();
    into.extend((0..len).map(|i| src[base + i * stride]));
}

fn scatter(dst: &mut [f64], base: usize, stride: usize, from: &[f64]) {
    for (i, &v) in from.iter().enumerate() {
        dst[base + i * stride] = v;
    }
}

/// 1D lower envelope of parabolas rooted at (i * spacing, f[i]).
fn dt_scanline(f: &[f64], spacing: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    if n == 1 {
        out.push(f[0]);
        return;
    }
    let x = |i: usize| i as f64 * spacing;
    let mut roots = vec![0usize; n];
    let mut bounds = vec![0.0f64; n + 1];
    let mut k = 0usize;
    roots[0] = 0;
    bounds[0] = f64::NEG_INFINITY;
    bounds[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let v = roots[k];
            s = ((f[q] + x(q) * x(q)) - (f[v] + x(v) * x(v))) / (2.0 * x(q) - 2.0 * x(v));
            if s <= bounds[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= bounds[k] {
            // The new parabola dominates everything so far.
            roots[k] = q;
        } else {
            k += 1;
            roots[k] = q;
        }
        bounds[k] = s;
        bounds[k + 1] = f64::INFINITY;
    }

    let mut k = 0usize;
    for q in 0..n {
        let xq = x(q);
        while bounds[k + 1] < xq {
            k += 1;
        }
        let v = roots[k];
        let d = xq - x(v);
        out.push(d * d + f[v]);
    }
}

/// Boundary mask: foreground voxels with a six-connected background
/// neighbor, zero-padded at the grid border.
fn boundary_mask(grid: &VoxelGrid) -> Vec<bool> {
    let mut mask = vec![false; grid.voxel_count()];
    for [x, y, z] in grid.surface_voxels() {
        mask[grid.linear_index(x, y, z)] = true;
    }
    mask
}

fn check_binary_pair(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    if !a.geometry().same_spacing(b.geometry(), 1e-9) {
        return Err(Error::SpacingMismatch(a.spacing(), b.spacing()));
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::InvalidArgument(
            "metrics require binary volumes".into(),
        ));
    }
    Ok(())
}

/// Dice similarity coefficient 2|A∩B| / (|A| + |B|), exact in integer
/// arithmetic. Two empty volumes compare as 1.
pub fn dsc(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_binary_pair(a, b)?;
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for (&va, &vb) in a.data().iter().zip(b.data().iter()) {
        let fa = va != 0.0;
        let fb = vb != 0.0;
        na += u64::from(fa);
        nb += u64::from(fb);
        inter += u64::from(fa && fb);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary DSC at a physical tolerance: a boundary voxel counts as matched
/// if some boundary voxel of the other volume lies within `tolerance_mm`.
/// Two empty boundaries compare as 1.
pub fn bdsc(a: &VoxelGrid, b: &VoxelGrid, tolerance_mm: f64) -> Result<f64> {
    check_binary_pair(a, b)?;
    if tolerance_mm < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bdsc tolerance must be >= 0, got {tolerance_mm}"
        )));
    }
    let ba = boundary_mask(a);
    let bb = boundary_mask(b);
    let na = ba.iter().filter(|&&v| v).count();
    let nb = bb.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let tol2 = tolerance_mm * tolerance_mm;
    let matched = |from: &[bool], to: &[bool]| -> usize {
        if to.iter().all(|&v| !v) {
            return 0;
        }
        let d2 = squared_edt(to, a.dims(), a.spacing());
        from.iter()
            .zip(d2.iter())
            .filter(|(&f, &d)| f && d <= tol2)
            .count()
    };
    let ma = matched(&ba, &bb);
    let mb = matched(&bb, &ba);
    Ok((ma + mb) as f64 / (na + nb) as f64)
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances
/// in mm. Errors if either volume is empty.
pub fn hd95(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_binary_pair(a, b)?;
    if a.foreground_count() == 0 || b.foreground_count() == 0 {
        return Err(Error::UndefinedMetric(
            "hd95 requires both volumes nonempty".into(),
        ));
    }
    let ba = boundary_mask(a);
    let bb = boundary_mask(b);
    let da = squared_edt(&bb, a.dims(), a.spacing());
    let db = squared_edt(&ba, a.dims(), a.spacing());
    let mut pooled = Vec::new();
    for (i, &on) in ba.iter().enumerate() {
        if on {
            pooled.push(da[i].sqrt());
        }
    }
    for (i, &on) in bb.iter().enumerate() {
        if on {
            pooled.push(db[i].sqrt());
        }
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(percentile_linear(&pooled, 0.95))
}

/// Percentile by linear interpolation between order statistics on a sorted
/// slice: rank = p * (n - 1).
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

/// One compared volume pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    /// What was compared, e.g. "implant" or "skull".
    pub target: String,
    pub dsc: f64,
    pub bdsc: f64,
    /// Absent when either foreground is empty.
    pub hd95: Option<f64>,
    pub bdsc_tolerance_mm: f64,
    /// Provenance of the compared volumes (prediction, ground truth).
    pub pred_source: String,
    pub gt_source: String,
}

/// Evaluation of one case: implant metrics, optional skull metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub implant: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skull: Option<MetricsReport>,
}

/// Inputs for [`evaluate_case`]; skull volumes are optional.
pub struct CaseVolumes<'a> {
    pub pred_implant: &'a VoxelGrid,
    pub gt_implant: &'a VoxelGrid,
    pub pred_skull: Option<&'a VoxelGrid>,
    pub gt_skull: Option<&'a VoxelGrid>,
}

fn report_pair(
    case_id: &str,
    target: &str,
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    tolerance_mm: f64,
    pred_source: &str,
    gt_source: &str,
) -> Result<MetricsReport> {
    let hd = match hd95(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        target: target.to_string(),
        dsc: dsc(pred, gt)?,
        bdsc: bdsc(pred, gt, tolerance_mm)?,
        hd95: hd,
        bdsc_tolerance_mm: tolerance_mm,
        pred_source: pred_source.to_string(),
        gt_source: gt_source.to_string(),
    })
}

/// Compare prediction against ground truth for one case. An empty
/// prediction scores DSC 0 and bDSC 0 with hd95 reported as missing.
pub fn evaluate_case(
    case_id: &str,
    volumes: &CaseVolumes,
    tolerance_mm: f64,
    pred_source: &str,
    gt_source: &str,
) -> Result<CaseEvaluation> {
    let implant = report_pair(
        case_id,
        "implant",
        volumes.pred_implant,
        volumes.gt_implant,
        tolerance_mm,
        pred_source,
        gt_source,
    )?;
    let skull = match (volumes.pred_skull, volumes.gt_skull) {
        (Some(p), Some(g)) => Some(report_pair(
            case_id,
            "skull",
            p,
            g,
            tolerance_mm,
            pred_source,
            gt_source,
        )?),
        (None, None) => None,
        _ => {
            return Err(Error::InvalidArgument(
                "skull metrics need both pred and gt skull volumes".into(),
            ))
        }
    };
    Ok(CaseEvaluation { implant, skull })
}

/// Mean/median across cases; hd95 statistics cover only cases where it is
/// defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub mean_dsc: f64,
    pub median_dsc: f64,
    pub mean_bdsc: f64,
    pub median_bdsc: f64,
    pub mean_hd95: Option<f64>,
    pub median_hd95: Option<f64>,
    pub hd95_missing: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregate per-case implant reports in deterministic (case id) order.
pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let mut dscs: Vec<f64> = reports.iter().map(|r| r.dsc).collect();
    let mut bdscs: Vec<f64> = reports.iter().map(|r| r.bdsc).collect();
    let mut hds: Vec<f64> = reports.iter().filter_map(|r| r.hd95).collect();
    let hd95_missing = reports.len() - hds.len();
    let (mean_hd95, median_hd95) = if hds.is_empty() {
        (None, None)
    } else {
        (Some(mean(&hds)), Some(median(&mut hds)))
    };
    Ok(Aggregate {
        cases: reports.len(),
        mean_dsc: mean(&dscs),
        median_dsc: median(&mut dscs),
        mean_bdsc: mean(&bdscs),
        median_bdsc: median(&mut bdscs),
        mean_hd95,
        median_hd95,
        hd95_missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    fn geom(dims: [usize; 3], spacing: [f64; 3]) -> GridGeometry {
        GridGeometry::new(dims, spacing, [0.0; 3]).unwrap()
    }

    fn grid_from_bits(dims: [usize; 3], spacing: [f64; 3], bits: &[u8]) -> VoxelGrid {
        let data = bits.iter().map(|&b| f32::from(b)).collect();
        VoxelGrid::from_data(geom(dims, spacing), data).unwrap()
    }

    // ---- brute-force oracles (independent of the EDT path) ----

    fn naive_boundary(g: &VoxelGrid) -> Vec<[i64; 3]> {
        let [nx, ny, nz] = g.dims();
        let mut out = Vec::new();
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    if g.get_or_zero(x, y, z) == 0.0 {
                        continue;
                    }
                    let nbs = [
                        [x - 1, y, z],
                        [x + 1, y, z],
                        [x, y - 1, z],
                        [x, y + 1, z],
                        [x, y, z - 1],
                        [x, y, z + 1],
                    ];
                    if nbs.iter().any(|&[a, b, c]| g.get_or_zero(a, b, c) == 0.0) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    fn point_dist(a: [i64; 3], b: [i64; 3], sp: [f64; 3]) -> f64 {
        let dx = (a[0] - b[0]) as f64 * sp[0];
        let dy = (a[1] - b[1]) as f64 * sp[1];
        let dz = (a[2] - b[2]) as f64 * sp[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn naive_set_dist(p: [i64; 3], set: &[[i64; 3]], sp: [f64; 3]) -> f64 {
        set.iter()
            .map(|&q| point_dist(p, q, sp))
            .fold(f64::INFINITY, f64::min)
    }

    fn naive_bdsc(a: &VoxelGrid, b: &VoxelGrid, tol: f64) -> f64 {
        let ba = naive_boundary(a);
        let bb = naive_boundary(b);
        if ba.is_empty() && bb.is_empty() {
            return 1.0;
        }
        let sp = a.spacing();
        let ma = ba
            .iter()
            .filter(|&&p| naive_set_dist(p, &bb, sp) <= tol)
            .count();
        let mb = bb
            .iter()
            .filter(|&&p| naive_set_dist(p, &ba, sp) <= tol)
            .count();
        (ma + mb) as f64 / (ba.len() + bb.len()) as f64
    }

    fn naive_hd95(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
        let ba = naive_boundary(a);
        let bb = naive_boundary(b);
        let sp = a.spacing();
        let mut pooled: Vec<f64> = ba
            .iter()
            .map(|&p| naive_set_dist(p, &bb, sp))
            .chain(bb.iter().map(|&p| naive_set_dist(p, &ba, sp)))
            .collect();
        pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
        percentile_linear(&pooled, 0.95)
    }

    fn naive_dsc(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
        let na = a.foreground_count();
        let nb = b.foreground_count();
        if na + nb == 0 {
            return 1.0;
        }
        let inter = a
            .data()
            .iter()
            .zip(b.data().iter())
            .filter(|(&x, &y)| x != 0.0 && y != 0.0)
            .count();
        2.0 * inter as f64 / (na + nb) as f64
    }

    // ---- tests ----

    #[test]
    fn edt_single_seed_matches_hand_values() {
        let dims = [3, 1, 1];
        let seeds = vec![true, false, false];
        let d = squared_edt(&seeds, dims, [2.0, 1.0, 1.0]);
        assert_eq!(d, vec![0.0, 4.0, 16.0]);
    }

    #[test]
    fn edt_no_seeds_is_infinite() {
        let d = squared_edt(&[false; 8], [2, 2, 2], [1.0; 3]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn edt_anisotropic_matches_brute_force() {
        let dims = [4, 3, 5];
        let spacing = [1.0, 2.0, 0.5];
        let n = dims[0] * dims[1] * dims[2];
        // Deterministic pseudo-random seeds.
        let seeds: Vec<bool> = (0..n).map(|i| (i * 2654435761) % 7 == 0).collect();
        let d2 = squared_edt(&seeds, dims, spacing);
        let seed_pts: Vec<[i64; 3]> = (0..n)
            .filter(|&i| seeds[i])
            .map(|i| {
                let x = i % dims[0];
                let y = (i / dims[0]) % dims[1];
                let z = i / (dims[0] * dims[1]);
                [x as i64, y as i64, z as i64]
            })
            .collect();
        for z in 0..dims[2] as i64 {
            for y in 0..dims[1] as i64 {
                for x in 0..dims[0] as i64 {
                    let i = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                    let want = naive_set_dist([x, y, z], &seed_pts, spacing);
                    assert!(
                        (d2[i].sqrt() - want).abs() < 1e-9,
                        "mismatch at ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn dsc_identical_disjoint_half() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let mut a = VoxelGrid::zeros(g);
        a.set(0, 0, 0, 1.0);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);

        let mut b = VoxelGrid::zeros(g);
        b.set(1, 1, 1, 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);

        // |A| = |B| = 8, overlap 4 -> 0.5 on a 4x2x2 grid.
        let g2 = geom([4, 2, 2], [1.0; 3]);
        let a2 = VoxelGrid::from_data(
            g2,
            (0..16).map(|i| f32::from(u8::from(i % 4 < 2))).collect(),
        )
        .unwrap();
        let b2 = VoxelGrid::from_data(
            g2,
            (0..16)
                .map(|i| f32::from(u8::from(i % 4 >= 1 && i % 4 < 3)))
                .collect(),
        )
        .unwrap();
        assert_eq!(a2.foreground_count(), 8);
        assert_eq!(b2.foreground_count(), 8);
        assert_eq!(dsc(&a2, &b2).unwrap(), 0.5);
    }

    #[test]
    fn dsc_both_empty_is_one() {
        let a = VoxelGrid::zeros(geom([2, 2, 2], [1.0; 3]));
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn bdsc_equal_and_saturating() {
        let g = geom([4, 4, 4], [1.0; 3]);
        let mut a = VoxelGrid::zeros(g);
        for z in 1..3 {
            for y in 1..3 {
                for x in 1..3 {
                    a.set(x, y, z, 1.0);
                }
            }
        }
        assert_eq!(bdsc(&a, &a, 1.0).unwrap(), 1.0);
        let mut b = VoxelGrid::zeros(g);
        b.set(0, 0, 0, 1.0);
        // Tolerance beyond the grid diagonal matches everything.
        assert_eq!(bdsc(&a, &b, 100.0).unwrap(), 1.0);
    }

    #[test]
    fn bdsc_shifted_cubes_match_brute_force() {
        let g = geom([6, 6, 6], [1.0; 3]);
        let mut a = VoxelGrid::zeros(g);
        let mut b = VoxelGrid::zeros(g);
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    a.set(x, y, z, 1.0);
                    b.set(x + 1, y, z, 1.0);
                }
            }
        }
        for tol in [0.0, 1.0, 1.5] {
            let fast = bdsc(&a, &b, tol).unwrap();
            let slow = naive_bdsc(&a, &b, tol);
            assert!((fast - slow).abs() < 1e-9, "tol {tol}: {fast} vs {slow}");
        }
        assert!(bdsc(&a, &b, 0.0).unwrap() < 1.0);
    }

    #[test]
    fn hd95_two_point_case() {
        let g = geom([12, 1, 1], [1.0; 3]);
        let mut a = VoxelGrid::zeros(g);
        let mut b = VoxelGrid::zeros(g);
        a.set(0, 0, 0, 1.0);
        b.set(10, 0, 0, 1.0);
        assert!((hd95(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hd95_empty_is_undefined() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let empty = VoxelGrid::zeros(g);
        let mut full = VoxelGrid::zeros(g);
        full.set(0, 0, 0, 1.0);
        assert!(matches!(
            hd95(&empty, &full),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn hd95_anisotropic_offset_cubes_match_brute_force() {
        let g = geom([6, 6, 6], [1.0, 1.0, 3.0]);
        let mut a = VoxelGrid::zeros(g);
        let mut b = VoxelGrid::zeros(g);
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    a.set(x, y, z, 1.0);
                    b.set(x, y, z + 1, 1.0);
                }
            }
        }
        let fast = hd95(&a, &b).unwrap();
        let slow = naive_hd95(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn randomized_grids_match_oracles() {
        // A small sample here; the full 200-grid sweep runs in acceptance.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for trial in 0..30 {
            let dims = [
                1 + (next() % 5) as usize,
                1 + (next() % 5) as usize,
                1 + (next() % 5) as usize,
            ];
            let n = dims[0] * dims[1] * dims[2];
            let bits_a: Vec<u8> = (0..n).map(|_| (next() % 2) as u8).collect();
            let bits_b: Vec<u8> = (0..n).map(|_| (next() % 2) as u8).collect();
            let sp = [1.0, 0.5 + (next() % 4) as f64 * 0.5, 1.0];
            let a = grid_from_bits(dims, sp, &bits_a);
            let b = grid_from_bits(dims, sp, &bits_b);

            assert!((dsc(&a, &b).unwrap() - naive_dsc(&a, &b)).abs() < 1e-9);
            let fast_b = bdsc(&a, &b, 1.0).unwrap();
            assert!(
                (fast_b - naive_bdsc(&a, &b, 1.0)).abs() < 1e-9,
                "trial {trial}"
            );
            if a.foreground_count() > 0 && b.foreground_count() > 0 {
                let fast_h = hd95(&a, &b).unwrap();
                assert!((fast_h - naive_hd95(&a, &b)).abs() < 1e-9, "trial {trial}");
            }
        }
    }

    #[test]
    fn metrics_are_symmetric_and_translation_invariant() {
        let g = geom([8, 8, 8], [1.0; 3]);
        let mut a = VoxelGrid::zeros(g);
        let mut b = VoxelGrid::zeros(g);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    a.set(x, y, z, 1.0);
                    b.set(x + 1, y + 1, z, 1.0);
                }
            }
        }
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        assert_eq!(bdsc(&a, &b, 1.0).unwrap(), bdsc(&b, &a, 1.0).unwrap());
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());

        // Shift both volumes by the same integer offset.
        let shift = |src: &VoxelGrid| {
            let mut out = VoxelGrid::zeros(g);
            for z in 0..8i64 {
                for y in 0..8usize {
                    for x in 0..8i64 {
                        if x >= 2 && z >= 3 && src.get_or_zero(x - 2, y as i64, z - 3) != 0.0 {
                            out.set(x as usize, y, z as usize, 1.0);
                        }
                    }
                }
            }
            out
        };
        let (a2, b2) = (shift(&a), shift(&b));
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&a2, &b2).unwrap());
        assert_eq!(bdsc(&a, &b, 1.0).unwrap(), bdsc(&a2, &b2, 1.0).unwrap());
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&a2, &b2).unwrap());
    }

    #[test]
    fn evaluate_case_perfect_and_empty_prediction() {
        let g = geom([4, 4, 4], [1.0; 3]);
        let mut gt = VoxelGrid::zeros(g);
        gt.set(1, 1, 1, 1.0);
        gt.set(2, 1, 1, 1.0);
        let vols = CaseVolumes {
            pred_implant: &gt,
            gt_implant: &gt,
            pred_skull: None,
            gt_skull: None,
        };
        let ev = evaluate_case("case0", &vols, 1.0, "pred", "gt").unwrap();
        assert_eq!(ev.implant.dsc, 1.0);
        assert_eq!(ev.implant.bdsc, 1.0);
        assert_eq!(ev.implant.hd95, Some(0.0));

        let empty = VoxelGrid::zeros(g);
        let vols = CaseVolumes {
            pred_implant: &empty,
            gt_implant: &gt,
            pred_skull: None,
            gt_skull: None,
        };
        let ev = evaluate_case("case1", &vols, 1.0, "pred", "gt").unwrap();
        assert_eq!(ev.implant.dsc, 0.0);
        assert_eq!(ev.implant.bdsc, 0.0);
        assert_eq!(ev.implant.hd95, None);
    }

    #[test]
    fn aggregate_means_and_medians() {
        let mk = |id: &str, d: f64, h: Option<f64>| MetricsReport {
            case_id: id.into(),
            target: "implant".into(),
            dsc: d,
            bdsc: d,
            hd95: h,
            bdsc_tolerance_mm: 1.0,
            pred_source: "p".into(),
            gt_source: "g".into(),
        };
        let reports = vec![mk("a", 1.0, Some(2.0)), mk("b", 0.5, None)];
        let agg = aggregate(&reports).unwrap();
        assert_eq!(agg.cases, 2);
        assert!((agg.mean_dsc - 0.75).abs() < 1e-12);
        assert!((agg.median_dsc - 0.75).abs() < 1e-12);
        assert_eq!(agg.mean_hd95, Some(2.0));
        assert_eq!(agg.hd95_missing, 1);
    }
}
