//! Model persistence: a directory with `mean.nrrd`, the variation matrix
//! as a flat little-endian f64 file, and a JSON sidecar with everything
//! needed to reload and audit the model.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{PhiNormalization, ShapeModel};
use crate::volume::{read_nrrd, write_nrrd, GridGeometry};

const MEAN_FILE: &str = "mean.nrrd";
const MODES_FILE: &str = "modes.bin";
const META_FILE: &str = "model.json";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    num_modes: usize,
    voxel_count: usize,
    centered: bool,
    normalization: PhiNormalization,
    training_ids: Vec<String>,
    reference: GridGeometry,
    singular_values: Vec<f64>,
    /// Recorded so golden files stay interpretable.
    sign_convention: String,
    mode_dtype: String,
}

pub fn save_model(model: &ShapeModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_nrrd(model.mean(), dir.join(MEAN_FILE))?;

    let modes_path = dir.join(MODES_FILE);
    let file = fs::File::create(&modes_path).map_err(|e| Error::io(&modes_path, e))?;
    let mut w = BufWriter::new(file);
    for c in 0..model.num_modes() {
        for &v in model.mode_row(c) {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&modes_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&modes_path, e))?;

    let meta = ModelMeta {
        num_modes: model.num_modes(),
        voxel_count: model.mean().voxel_count(),
        centered: model.centered(),
        normalization: model.normalization(),
        training_ids: model.training_ids().to_vec(),
        reference: *model.reference(),
        singular_values: model.singular_values().to_vec(),
        sign_convention: "largest-magnitude-entry-positive".into(),
        mode_dtype: "f64-le".into(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ShapeModel> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ModelMeta = serde_json::from_str(&meta_text)?;

    let mean = read_nrrd(dir.join(MEAN_FILE))?;
    if mean.voxel_count() != meta.voxel_count || mean.dims() != meta.reference.dims {
        return Err(Error::InvalidArgument(format!(
            "model mean has {} voxels, sidecar declares {}",
            mean.voxel_count(),
            meta.voxel_count
        )));
    }
    if meta.singular_values.len() != meta.num_modes {
        return Err(Error::InvalidArgument(
            "model sidecar singular_values length != num_modes".into(),
        ));
    }

    let modes_path = dir.join(MODES_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&modes_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&modes_path, e))?;
    let want = meta.num_modes * meta.voxel_count * 8;
    if bytes.len() != want {
        return Err(Error::InvalidArgument(format!(
            "modes file has {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let modes: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    Ok(ShapeModel {
        mean,
        modes,
        num_modes: meta.num_modes,
        reference: meta.reference,
        training_ids: meta.training_ids,
        centered: meta.centered,
        normalization: meta.normalization,
        singular_values: meta.singular_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::fit_modes;
    use crate::volume::{make_phantom, PhantomSpec};

    #[test]
    fn save_load_roundtrip_preserves_behavior() {
        let gs: Vec<_> = (0..3)
            .map(|s| {
                make_phantom(&PhantomSpec {
                    dims: [24, 24, 24],
                    spacing: [1.0; 3],
                    radii: [9.0, 8.0, 7.0],
                    thickness: 2.5,
                    seed: s + 300,
                    amplitude: 0.1,
                })
                .unwrap()
            })
            .collect();
        let model = fit_modes(&gs, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();

        assert_eq!(loaded.num_modes(), model.num_modes());
        assert_eq!(loaded.centered(), model.centered());
        assert_eq!(loaded.training_ids(), model.training_ids());
        for c in 0..3 {
            assert_eq!(loaded.mode_row(c), model.mode_row(c));
        }
        // Projection through the loaded model matches within the f32
        // rounding of the persisted mean.
        let w0 = model.project(&gs[1], false).unwrap();
        let w1 = loaded.project(&gs[1], false).unwrap();
        for (a, b) in w0.values.iter().zip(w1.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_modes_file_is_rejected() {
        let gs: Vec<_> = (0..2)
            .map(|s| {
                make_phantom(&PhantomSpec {
                    dims: [16, 16, 16],
                    spacing: [1.0; 3],
                    radii: [6.0, 5.5, 5.0],
                    thickness: 2.0,
                    seed: s,
                    amplitude: 0.0,
                })
                .unwrap()
            })
            .collect();
        let model = fit_modes(&gs, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let modes = dir.path().join("modes.bin");
        let bytes = std::fs::read(&modes).unwrap();
        std::fs::write(&modes, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}
