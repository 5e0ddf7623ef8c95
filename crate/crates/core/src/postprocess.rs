//! Implant extraction from raw subtraction output: median smoothing,
//! morphological opening, connected-component selection, and an optional
//! scripted mask-erase for severing noise bridges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{volume_subtract, VoxelGrid};

/// Voxel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidArgument(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 == 0 {
                        continue;
                    }
                    let keep = match self {
                        Connectivity::Six => l1 == 1,
                        Connectivity::Eighteen => l1 <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Which labeled component(s) to keep as the implant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// The single largest component.
    Largest,
    /// Per connected component of the defect hint, the raw component with
    /// the largest overlap. Falls back to `Largest` when no hint is given.
    HintOverlap,
}

/// Pipeline knobs for [`extract_implant`].
#[derive(Debug, Clone)]
pub struct PostprocessConfig {
    /// Median window edge in voxels; odd, >= 1 (1 disables smoothing).
    pub median_kernel: usize,
    /// Opening ball radius in voxels; 0 disables.
    pub opening_radius: usize,
    pub connectivity: Connectivity,
    pub selection: Selection,
    /// Voxels to remove before anything else (the scripted stand-in for a
    /// manual scissors erase).
    pub erase_mask: Option<VoxelGrid>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            median_kernel: 3,
            opening_radius: 0,
            connectivity: Connectivity::TwentySix,
            selection: Selection::HintOverlap,
            erase_mask: None,
        }
    }
}

/// Voxelwise median over a cubic window with zero padding; for binary
/// grids this is the majority vote of the window.
pub fn median_filter(grid: &VoxelGrid, kernel: usize) -> Result<VoxelGrid> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(format!(
            "median kernel must be odd and >= 1, got {kernel}"
        )));
    }
    if !grid.is_binary() {
        return Err(Error::InvalidArgument(
            "median_filter requires a binary grid".into(),
        ));
    }
    if kernel == 1 {
        return Ok(grid.clone());
    }
    let r = (kernel / 2) as i64;
    let counts = box_counts(grid, r);
    let majority = (kernel * kernel * kernel / 2) as u32; // count > floor(k^3 / 2)
    let data: Vec<f32> = counts
        .iter()
        .map(|&c| if c > majority { 1.0 } else { 0.0 })
        .collect();
    VoxelGrid::from_data(*grid.geometry(), data)
}

/// Number of foreground voxels in the (2r+1)^3 window around each voxel,
/// zero-padded, via three separable sliding sums.
fn box_counts(grid: &VoxelGrid, r: i64) -> Vec<u32> {
    let [nx, ny, nz] = grid.dims();
    let mut a: Vec<u32> = grid.data().iter().map(|&v| u32::from(v != 0.0)).collect();
    let mut b = vec![0u32; a.len()];

    let sum_axis = |src: &[u32], dst: &mut [u32], stride: usize, len: usize, lines: &[(usize, usize)]| {
        for &(base, _) in lines {
            for i in 0..len {
                let lo = i.saturating_sub(r as usize);
                let hi = (i + r as usize).min(len - 1);
                let mut s = 0u32;
                for j in lo..=hi {
                    s += src[base + j * stride];
                }
                dst[base + i * stride] = s;
            }
        }
    };

    let lines_x: Vec<(usize, usize)> = (0..nz)
        .flat_map(|z| (0..ny).map(move |y| (nx * (y + ny * z), 0)))
        .collect();
    sum_axis(&a, &mut b, 1, nx, &lines_x);
    let lines_y: Vec<(usize, usize)> = (0..nz)
        .flat_map(|z| (0..nx).map(move |x| (x + nx * ny * z, 0)))
        .collect();
    sum_axis(&b, &mut a, nx, ny, &lines_y);
    let lines_z: Vec<(usize, usize)> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x + nx * y, 0)))
        .collect();
    sum_axis(&a, &mut b, nx * ny, nz, &lines_z);
    b
}

fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let r2 = r * r;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Erosion then dilation with a discrete ball; radius 0 is the identity.
pub fn morphological_opening(grid: &VoxelGrid, radius: usize) -> Result<VoxelGrid> {
    if !grid.is_binary() {
        return Err(Error::InvalidArgument(
            "morphological_opening requires a binary grid".into(),
        ));
    }
    if radius == 0 {
        return Ok(grid.clone());
    }
    let offsets = ball_offsets(radius);
    let [nx, ny, nz] = grid.dims();

    let mut eroded = VoxelGrid::zeros(*grid.geometry());
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if grid.get_or_zero(x, y, z) == 0.0 {
                    continue;
                }
                let survives = offsets
                    .iter()
                    .all(|&[dx, dy, dz]| grid.get_or_zero(x + dx, y + dy, z + dz) != 0.0);
                if survives {
                    eroded.set(x as usize, y as usize, z as usize, 1.0);
                }
            }
        }
    }

    let mut opened = VoxelGrid::zeros(*grid.geometry());
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if eroded.get_or_zero(x, y, z) == 0.0 {
                    continue;
                }
                for &[dx, dy, dz] in &offsets {
                    let (px, py, pz) = (x + dx, y + dy, z + dz);
                    if px >= 0
                        && py >= 0
                        && pz >= 0
                        && px < nx as i64
                        && py < ny as i64
                        && pz < nz as i64
                    {
                        opened.set(px as usize, py as usize, pz as usize, 1.0);
                    }
                }
            }
        }
    }
    Ok(opened)
}

/// Foreground partition into connected components.
///
/// Labels start at 1 and are ordered deterministically: descending size,
/// ties by the smallest linear voxel index in the component.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    /// Per-voxel label, 0 for background.
    pub labels: Vec<u32>,
    /// sizes[k] is the voxel count of label k+1.
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Binary mask of one labeled component.
    pub fn mask_of(&self, label: u32, like: &VoxelGrid) -> VoxelGrid {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == label { 1.0 } else { 0.0 })
            .collect();
        VoxelGrid::from_data(*like.geometry(), data).unwrap()
    }
}

pub fn connected_components(grid: &VoxelGrid, connectivity: Connectivity) -> ComponentLabeling {
    let [nx, ny, nz] = grid.dims();
    let n = grid.voxel_count();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; n];
    // (provisional label, size, seed index); seeds appear in ascending
    // linear order, so the seed is the component's smallest index.
    let mut comps: Vec<(u32, usize, usize)> = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    let mut next_label = 1u32;
    for start in 0..n {
        if grid.data()[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        let label = next_label;
        next_label += 1;
        let mut size = 0usize;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = [
                (i % nx) as i64,
                ((i / nx) % ny) as i64,
                (i / (nx * ny)) as i64,
            ];
            for &[dx, dy, dz] in &offsets {
                let (px, py, pz) = (x + dx, y + dy, z + dz);
                if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64
                {
                    continue;
                }
                let j = px as usize + nx * (py as usize + ny * pz as usize);
                if grid.data()[j] != 0.0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        comps.push((label, size, start));
    }

    // Deterministic final order: size desc, then smallest seed index.
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        comps[b]
            .1
            .cmp(&comps[a].1)
            .then(comps[a].2.cmp(&comps[b].2))
    });
    let mut remap = vec![0u32; comps.len() + 1];
    let mut sizes = Vec::with_capacity(comps.len());
    for (new_rank, &idx) in order.iter().enumerate() {
        remap[comps[idx].0 as usize] = new_rank as u32 + 1;
        sizes.push(comps[idx].1);
    }
    for l in labels.iter_mut() {
        if *l != 0 {
            *l = remap[*l as usize];
        }
    }
    ComponentLabeling { labels, sizes }
}

/// One pipeline stage with the foreground count it left behind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub foreground_after: usize,
}

/// Audit trail of an [`extract_implant`] run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractReport {
    pub stages: Vec<StageReport>,
    pub median_kernel: usize,
    pub opening_radius: usize,
    pub connectivity: Connectivity,
    pub selection: Selection,
    pub erase_mask_applied: bool,
    pub hint_provided: bool,
    /// Final labels kept, in the deterministic component order.
    pub selected_components: Vec<u32>,
}

/// Clean a raw subtraction volume into the final implant.
///
/// Pipeline: erase mask removal (if any), median filter, morphological
/// opening, connected-component selection. Errors name the stage that
/// emptied the grid.
pub fn extract_implant(
    raw: &VoxelGrid,
    config: &PostprocessConfig,
    defect_hint: Option<&VoxelGrid>,
) -> Result<(VoxelGrid, ExtractReport)> {
    if !raw.is_binary() {
        return Err(Error::InvalidArgument(
            "extract_implant requires a binary grid".into(),
        ));
    }
    let mut stages = Vec::new();
    let mut current = raw.clone();

    if let Some(mask) = &config.erase_mask {
        current = volume_subtract(&current, mask)?;
        stages.push(StageReport {
            stage: "erase".into(),
            foreground_after: current.foreground_count(),
        });
        if current.foreground_count() == 0 {
            return Err(Error::EmptyImplant { stage: "erase".into() });
        }
    }

    current = median_filter(&current, config.median_kernel)?;
    stages.push(StageReport {
        stage: "median".into(),
        foreground_after: current.foreground_count(),
    });
    if current.foreground_count() == 0 {
        return Err(Error::EmptyImplant { stage: "median".into() });
    }

    current = morphological_opening(&current, config.opening_radius)?;
    stages.push(StageReport {
        stage: "opening".into(),
        foreground_after: current.foreground_count(),
    });
    if current.foreground_count() == 0 {
        return Err(Error::EmptyImplant { stage: "opening".into() });
    }

    let labeling = connected_components(&current, config.connectivity);
    let selected: Vec<u32> = match (config.selection, defect_hint) {
        (Selection::HintOverlap, Some(hint)) => {
            let hint_parts = connected_components(hint, config.connectivity);
            let mut picked = Vec::new();
            for hl in 1..=hint_parts.count() as u32 {
                // Overlap of this hint piece with every raw component.
                let mut best: Option<(usize, u32)> = None;
                let mut counts = vec![0usize; labeling.count() + 1];
                for (i, &l) in labeling.labels.iter().enumerate() {
                    if l != 0 && hint_parts.labels[i] == hl {
                        counts[l as usize] += 1;
                    }
                }
                for (l, &c) in counts.iter().enumerate().skip(1) {
                    if c > 0 && best.map_or(true, |(bc, _)| c > bc) {
                        best = Some((c, l as u32));
                    }
                }
                if let Some((_, l)) = best {
                    if !picked.contains(&l) {
                        picked.push(l);
                    }
                }
            }
            picked.sort_unstable();
            picked
        }
        _ => {
            if labeling.count() > 0 {
                vec![1]
            } else {
                Vec::new()
            }
        }
    };
    if selected.is_empty() {
        return Err(Error::EmptyImplant {
            stage: "component-selection".into(),
        });
    }

    let data: Vec<f32> = labeling
        .labels
        .iter()
        .map(|l| if selected.contains(l) { 1.0 } else { 0.0 })
        .collect();
    let implant = VoxelGrid::from_data(*raw.geometry(), data)?;
    stages.push(StageReport {
        stage: "component-selection".into(),
        foreground_after: implant.foreground_count(),
    });

    let report = ExtractReport {
        stages,
        median_kernel: config.median_kernel,
        opening_radius: config.opening_radius,
        connectivity: config.connectivity,
        selection: config.selection,
        erase_mask_applied: config.erase_mask.is_some(),
        hint_provided: defect_hint.is_some(),
        selected_components: selected,
    };
    Ok((implant, report))
}
