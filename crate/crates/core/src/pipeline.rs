//! End-to-end pipeline commands behind the CLI: model building, batch
//! completion, evaluation, phantom dataset generation, implant extraction
//! and weight inspection.
//!
//! Every command is deterministic given its config and seed. Manifests
//! carry the resolved configuration and sha256 content hashes of all
//! inputs and outputs; nothing time-dependent is ever written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::completion::{
    complete_by_ssm, complete_by_template, make_template, CompletionMethod, CompletionResult,
    ExternalSpace, SsmCompletionOptions, Template, TemplateSource, WeightSource,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, CaseVolumes, MetricsReport};
use crate::postprocess::{extract_implant, Connectivity, PostprocessConfig, Selection};
use crate::registration::{estimate_transform, warp, RegistrationConfig};
use crate::ssm::{fit_modes_with, load_model, save_model, FitOptions, PhiNormalization, ShapeModel};
use crate::volume::{
    apply_defect, defect_for_fraction, encode_nrrd, make_phantom, read_nrrd_binarize,
    DefectKind, NrrdEncoding, PhantomSpec, VoxelGrid,
};

/// sha256 hex digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write bytes atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_grid_atomic(grid: &VoxelGrid, path: &Path) -> Result<String> {
    let bytes = encode_nrrd(grid, NrrdEncoding::Raw)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

/// Template construction choice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TemplateModeConfig {
    /// The reference shape itself.
    Single,
    /// Mean of the first `k` warped training shapes, binarized.
    Mean {
        k: usize,
        #[serde(default = "default_threshold")]
        threshold: f32,
    },
}

fn default_threshold() -> f32 {
    0.5
}

/// Serializable twin of [`PostprocessConfig`] with the erase mask as a path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessParams {
    pub median_kernel: usize,
    pub opening_radius: usize,
    pub connectivity: Connectivity,
    pub selection: Selection,
    pub erase_mask: Option<PathBuf>,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            median_kernel: 3,
            opening_radius: 0,
            connectivity: Connectivity::TwentySix,
            selection: Selection::HintOverlap,
            erase_mask: None,
        }
    }
}

impl PostprocessParams {
    pub fn to_config(&self) -> Result<PostprocessConfig> {
        let erase_mask = match &self.erase_mask {
            Some(path) => Some(read_nrrd_binarize(path)?),
            None => None,
        };
        Ok(PostprocessConfig {
            median_kernel: self.median_kernel,
            opening_radius: self.opening_radius,
            connectivity: self.connectivity,
            selection: self.selection,
            erase_mask,
        })
    }
}

/// Resolved configuration for model building and completion runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Reference shape in whose space the model lives.
    pub reference: PathBuf,
    /// Training shape files (complete shapes).
    pub training: Vec<PathBuf>,
    pub num_modes: usize,
    #[serde(default = "default_template_mode")]
    pub template: TemplateModeConfig,
    #[serde(default = "default_method")]
    pub method: CompletionMethod,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub postprocess: PostprocessParams,
    #[serde(default = "default_true")]
    pub centered: bool,
    #[serde(default)]
    pub paper_rescale: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Case-level parallelism bound; 0 uses the global thread pool.
    #[serde(default)]
    pub jobs: usize,
}

fn default_template_mode() -> TemplateModeConfig {
    TemplateModeConfig::Single
}

fn default_method() -> CompletionMethod {
    CompletionMethod::Ssm
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.training.is_empty() {
            return Err(Error::InvalidConfig("no training shapes configured".into()));
        }
        if self.num_modes == 0 || self.num_modes > self.training.len() {
            return Err(Error::InvalidConfig(format!(
                "num_modes {} must be in 1..={} (training count)",
                self.num_modes,
                self.training.len()
            )));
        }
        if let TemplateModeConfig::Mean { k, threshold } = self.template {
            if k == 0 || k > self.training.len() {
                return Err(Error::InvalidConfig(format!(
                    "template mean k {} must be in 1..={}",
                    k,
                    self.training.len()
                )));
            }
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "template threshold {threshold} outside (0, 1)"
                )));
            }
        }
        if !self.reference.exists() {
            return Err(Error::InvalidConfig(format!(
                "reference path {} does not exist",
                self.reference.display()
            )));
        }
        for p in &self.training {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!(
                    "training path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            centered: self.centered,
            normalization: PhiNormalization::UnitRows,
        }
    }

    /// Run a closure under the configured parallelism bound.
    fn with_jobs<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        if self.jobs == 0 {
            f()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .expect("thread pool");
            pool.install(f)
        }
    }
}

/// Registration outcome stored in the build manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarpRecord {
    pub id: String,
    pub input: PathBuf,
    pub input_sha256: String,
    /// Hash of the warped volume's NRRD serialization.
    pub warped_sha256: String,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildManifest {
    pub config: PipelineConfig,
    pub reference_sha256: String,
    pub warped: Vec<WarpRecord>,
    pub templates: BTreeMap<String, String>,
    pub model_files: BTreeMap<String, String>,
}

/// Build the shape model and templates from the configured training set.
///
/// Output layout under `config.output_dir`:
/// `model/` (mean.nrrd, modes.bin, model.json), `templates/single.nrrd`
/// (and `templates/mean.nrrd` for a mean template), `build_manifest.json`.
pub fn build_model(config: &PipelineConfig) -> Result<BuildManifest> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let reference = read_nrrd_binarize(&config.reference)?;
    if reference.foreground_count() == 0 {
        return Err(Error::DegenerateInput("reference shape is empty".into()));
    }
    let reference_sha256 = hash_file(&config.reference)?;

    // Register every training shape onto the reference.
    let results: Vec<(String, String, VoxelGrid, WarpRecord)> = config.with_jobs(|| {
        config
            .training
            .par_iter()
            .map(|path| -> Result<_> {
                let id = file_stem(path);
                let input_sha256 = hash_file(path)?;
                let moving = read_nrrd_binarize(path)?;
                let report = estimate_transform(&moving, &reference, &config.registration)?;
                let warped = warp(&moving, &report.transform)?;
                let warped_sha256 = sha256_hex(&encode_nrrd(&warped, NrrdEncoding::Raw)?);
                let record = WarpRecord {
                    id: id.clone(),
                    input: path.clone(),
                    input_sha256: input_sha256.clone(),
                    warped_sha256,
                    residual: report.residual,
                    iterations: report.iterations,
                    converged: report.converged,
                };
                Ok((id, input_sha256, warped, record))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let warped_shapes: Vec<VoxelGrid> = results.iter().map(|r| r.2.clone()).collect();
    let ids: Vec<String> = results.iter().map(|r| r.0.clone()).collect();
    let warp_records: Vec<WarpRecord> = results.iter().map(|r| r.3.clone()).collect();

    let mut model = fit_modes_with(&warped_shapes, config.num_modes, &config.fit_options())?;
    model.set_training_ids(ids.clone())?;
    let model_dir = out.join("model");
    save_model(&model, &model_dir)?;
    let mut model_files = BTreeMap::new();
    for name in ["mean.nrrd", "modes.bin", "model.json"] {
        model_files.insert(name.to_string(), hash_file(&model_dir.join(name))?);
    }

    let template_dir = out.join("templates");
    fs::create_dir_all(&template_dir).map_err(|e| Error::io(&template_dir, e))?;
    let mut templates = BTreeMap::new();

    let single = make_template(
        TemplateSource::Single {
            shape: &reference,
            id: file_stem(&config.reference),
        },
        0.5,
    )?;
    let hash = write_grid_atomic(&single.grid, &template_dir.join("single.nrrd"))?;
    templates.insert("single".to_string(), hash);

    if let TemplateModeConfig::Mean { k, threshold } = config.template {
        let mean = make_template(
            TemplateSource::Mean {
                shapes: &warped_shapes[..k],
                ids: ids[..k].to_vec(),
            },
            threshold,
        )?;
        let hash = write_grid_atomic(&mean.grid, &template_dir.join("mean.nrrd"))?;
        templates.insert("mean".to_string(), hash);
    }

    let manifest = BuildManifest {
        config: config.clone(),
        reference_sha256,
        warped: warp_records,
        templates,
        model_files,
    };
    write_json_atomic(&manifest, &out.join("build_manifest.json"))?;
    Ok(manifest)
}

/// Per-case completion record in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub input: PathBuf,
    pub input_sha256: String,
    pub method: CompletionMethod,
    pub outputs: BTreeMap<String, String>,
    pub registration_residual: f64,
    pub registration_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteManifest {
    pub config: PipelineConfig,
    pub cases: Vec<CaseRecord>,
}

/// What feeds a completion run: a template or the model directory contents.
enum MethodAssets {
    Template(Template),
    Model(Box<ShapeModel>),
}

fn load_assets(config: &PipelineConfig, build_dir: &Path) -> Result<MethodAssets> {
    match config.method {
        CompletionMethod::TemplateSingle => {
            let grid = read_nrrd_binarize(build_dir.join("templates/single.nrrd"))?;
            Ok(MethodAssets::Template(Template {
                grid,
                provenance: crate::completion::TemplateProvenance::Single {
                    id: file_stem(&config.reference),
                },
            }))
        }
        CompletionMethod::TemplateMean => {
            let path = build_dir.join("templates/mean.nrrd");
            if !path.exists() {
                return Err(Error::InvalidConfig(
                    "method template-mean requires a mean template; build with template mode `mean`"
                        .into(),
                ));
            }
            let grid = read_nrrd_binarize(&path)?;
            let (k, threshold) = match config.template {
                TemplateModeConfig::Mean { k, threshold } => (k, threshold),
                TemplateModeConfig::Single => (config.training.len(), 0.5),
            };
            Ok(MethodAssets::Template(Template {
                grid,
                provenance: crate::completion::TemplateProvenance::MeanOfK {
                    ids: config.training.iter().take(k).map(|p| file_stem(p)).collect(),
                    threshold,
                },
            }))
        }
        CompletionMethod::Ssm | CompletionMethod::SsmExternal => {
            let model = load_model(build_dir.join("model"))?;
            Ok(MethodAssets::Model(Box::new(model)))
        }
    }
}

/// Complete a batch of defective cases against a prior [`build_model`] run.
///
/// `external` supplies one completed volume per case (same order) for the
/// external-weight method; it must be present exactly when the method is
/// `ssm-external`. Per-case outputs land in `output_dir/cases/<id>/`.
pub fn complete_cases(
    config: &PipelineConfig,
    build_dir: &Path,
    cases: &[PathBuf],
    external: Option<&[PathBuf]>,
) -> Result<CompleteManifest> {
    if cases.is_empty() {
        return Err(Error::InvalidConfig("no cases to complete".into()));
    }
    match (config.method, external) {
        (CompletionMethod::SsmExternal, None) => {
            return Err(Error::InvalidConfig(
                "method ssm-external requires --external volumes".into(),
            ))
        }
        (CompletionMethod::SsmExternal, Some(ext)) if ext.len() != cases.len() => {
            return Err(Error::InvalidConfig(format!(
                "{} external volumes for {} cases",
                ext.len(),
                cases.len()
            )))
        }
        (m, Some(_)) if m != CompletionMethod::SsmExternal => {
            return Err(Error::InvalidConfig(format!(
                "external volumes are only valid with method ssm-external, not {m:?}"
            )))
        }
        _ => {}
    }

    let assets = load_assets(config, build_dir)?;
    let cases_dir = config.output_dir.join("cases");
    fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;

    let opts = SsmCompletionOptions {
        binarize_threshold: 0.5,
        paper_rescale: config.paper_rescale,
    };

    let records: Vec<CaseRecord> = config.with_jobs(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, path)| -> Result<CaseRecord> {
                let case_id = file_stem(path);
                let defective = read_nrrd_binarize(path)?;
                let result = match &assets {
                    MethodAssets::Template(template) => {
                        complete_by_template(&defective, template, &config.registration)
                    }
                    MethodAssets::Model(model) => {
                        let source = match external {
                            Some(ext_paths) => {
                                let ext = read_nrrd_binarize(&ext_paths[i])?;
                                complete_with_external(&defective, model, ext, config, &opts)?
                            }
                            None => complete_by_ssm(
                                &defective,
                                model,
                                WeightSource::SelfProjection,
                                &config.registration,
                                &opts,
                            )?,
                        };
                        Ok(source)
                    }
                }
                .map_err(|e| {
                    Error::InvalidArgument(format!("case {case_id}: {e}"))
                })?;
                write_case_outputs(&cases_dir, &case_id, path, &result)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let manifest = CompleteManifest {
        config: config.clone(),
        cases: records,
    };
    write_json_atomic(&manifest, &config.output_dir.join("complete_manifest.json"))?;
    Ok(manifest)
}

fn complete_with_external(
    defective: &VoxelGrid,
    model: &ShapeModel,
    external: VoxelGrid,
    config: &PipelineConfig,
    opts: &SsmCompletionOptions,
) -> Result<CompletionResult> {
    // External volumes arrive in the case's original space; a volume that
    // already matches the reference grid is taken as reference space.
    let space = if external.dims() == model.reference().dims
        && external.dims() != defective.dims()
    {
        ExternalSpace::Reference
    } else {
        ExternalSpace::Original
    };
    complete_by_ssm(
        defective,
        model,
        WeightSource::External {
            volume: &external,
            space,
        },
        &config.registration,
        opts,
    )
}

fn write_case_outputs(
    cases_dir: &Path,
    case_id: &str,
    input: &Path,
    result: &CompletionResult,
) -> Result<CaseRecord> {
    let dir = cases_dir.join(case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut outputs = BTreeMap::new();
    outputs.insert(
        "completed.nrrd".to_string(),
        write_grid_atomic(&result.completed_reference_space, &dir.join("completed.nrrd"))?,
    );
    outputs.insert(
        "implant.nrrd".to_string(),
        write_grid_atomic(&result.implant_reference_space, &dir.join("implant.nrrd"))?,
    );
    outputs.insert(
        "completed_original.nrrd".to_string(),
        write_grid_atomic(
            &result.completed_original_space,
            &dir.join("completed_original.nrrd"),
        )?,
    );
    write_json_atomic(&result.transform, &dir.join("transform.json"))?;

    let record = CaseRecord {
        case_id: case_id.to_string(),
        input: input.to_path_buf(),
        input_sha256: hash_file(input)?,
        method: result.method,
        outputs,
        registration_residual: result.registration.residual,
        registration_converged: result.registration.converged,
    };
    write_json_atomic(&record, &dir.join("manifest.json"))?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub reports: Vec<MetricsReport>,
    pub aggregate: crate::metrics::Aggregate,
}

/// Evaluate predicted implants against ground truth by matching `*.nrrd`
/// file stems across two directories. Writes one JSON per case plus an
/// aggregate CSV and JSON.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    tolerance_mm: f64,
    out_dir: &Path,
) -> Result<EvaluationOutput> {
    let list_nrrd = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "nrrd") {
                out.insert(file_stem(&path), path);
            }
        }
        Ok(out)
    };
    let preds = list_nrrd(pred_dir)?;
    let gts = list_nrrd(gt_dir)?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .nrrd files in {}",
            pred_dir.display()
        )));
    }
    let missing: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unmatched case ids between pred and gt: {}",
            missing.join(", ")
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut reports = Vec::new();
    for (case_id, pred_path) in &preds {
        let pred = read_nrrd_binarize(pred_path)?;
        let gt = read_nrrd_binarize(&gts[case_id])?;
        let volumes = CaseVolumes {
            pred_implant: &pred,
            gt_implant: &gt,
            pred_skull: None,
            gt_skull: None,
        };
        let evaluation = evaluate_case(
            case_id,
            &volumes,
            tolerance_mm,
            &pred_path.display().to_string(),
            &gts[case_id].display().to_string(),
        )?;
        write_json_atomic(&evaluation, &out_dir.join(format!("{case_id}.metrics.json")))?;
        reports.push(evaluation.implant);
    }

    let agg = aggregate(&reports)?;
    let mut csv = String::from("case,dsc,bdsc,hd95,bdsc_tolerance_mm\n");
    for r in &reports {
        let hd = r
            .hd95
            .map(|v| format!("{v}"))
            .unwrap_or_else(|| "".to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.case_id, r.dsc, r.bdsc, hd, r.bdsc_tolerance_mm
        ));
    }
    csv.push_str(&format!(
        "mean,{},{},{},{}\n",
        agg.mean_dsc,
        agg.mean_bdsc,
        agg.mean_hd95.map(|v| format!("{v}")).unwrap_or_default(),
        tolerance_mm
    ));
    csv.push_str(&format!(
        "median,{},{},{},{}\n",
        agg.median_dsc,
        agg.median_bdsc,
        agg.median_hd95.map(|v| format!("{v}")).unwrap_or_default(),
        tolerance_mm
    ));
    write_atomic(&out_dir.join("aggregate.csv"), csv.as_bytes())?;
    write_json_atomic(&agg, &out_dir.join("aggregate.json"))?;
    Ok(EvaluationOutput {
        reports,
        aggregate: agg,
    })
}

/// Configuration for the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomDatasetConfig {
    pub output_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Target fraction of shell voxels each defect removes.
    #[serde(default = "default_fraction")]
    pub defect_fraction: f64,
    #[serde(default = "default_defect_kind")]
    pub defect_kind: DefectKind,
    /// Defects per test case (2+ spheres for `multi`).
    #[serde(default = "default_defect_count")]
    pub defect_count: usize,
    /// Apply a random small pose offset to each test phantom.
    #[serde(default = "default_true")]
    pub pose_jitter: bool,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_dims() -> [usize; 3] {
    [64, 64, 64]
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_fraction() -> f64 {
    0.2
}

fn default_defect_kind() -> DefectKind {
    DefectKind::Sphere
}

fn default_defect_count() -> usize {
    1
}

fn default_amplitude() -> f64 {
    0.06
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomCaseRecord {
    pub case_id: String,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    /// Achieved fraction of shell voxels removed (test cases only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defect_fraction_achieved: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomDatasetManifest {
    pub config: PhantomDatasetConfig,
    pub train: Vec<PhantomCaseRecord>,
    pub test: Vec<PhantomCaseRecord>,
}

fn phantom_spec_for(config: &PhantomDatasetConfig, seed: u64) -> PhantomSpec {
    let d = config.dims[0].min(config.dims[1]).min(config.dims[2]) as f64;
    PhantomSpec {
        dims: config.dims,
        spacing: config.spacing,
        radii: [0.38 * d, 0.32 * d, 0.26 * d],
        thickness: 0.07 * d,
        seed,
        amplitude: config.amplitude,
    }
}

/// Generate a deterministic phantom dataset: complete training shells plus
/// defective test cases with exact ground-truth implants.
///
/// Layout: `train/train_###.nrrd`, `test/test_###_defective.nrrd`,
/// `test/test_###_implant.nrrd`, `test/test_###_complete.nrrd`,
/// `dataset_manifest.json`.
pub fn generate_phantom_dataset(config: &PhantomDatasetConfig) -> Result<PhantomDatasetManifest> {
    if config.train_count == 0 {
        return Err(Error::InvalidConfig("train_count must be >= 1".into()));
    }
    if config.defect_count == 0 {
        return Err(Error::InvalidConfig("defect_count must be >= 1".into()));
    }
    if !(0.0 < config.defect_fraction && config.defect_fraction < 0.9) {
        return Err(Error::InvalidConfig(format!(
            "defect_fraction {} outside (0, 0.9)",
            config.defect_fraction
        )));
    }
    let train_dir = config.output_dir.join("train");
    let test_dir = config.output_dir.join("test");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;

    let mut train = Vec::new();
    for i in 0..config.train_count {
        let seed = config.seed.wrapping_add(i as u64);
        let phantom = make_phantom(&phantom_spec_for(config, seed))?;
        let case_id = format!("train_{i:03}");
        let hash = write_grid_atomic(&phantom, &train_dir.join(format!("{case_id}.nrrd")))?;
        let mut files = BTreeMap::new();
        files.insert(format!("{case_id}.nrrd"), hash);
        train.push(PhantomCaseRecord {
            case_id,
            seed,
            files,
            defect_fraction_achieved: None,
        });
    }

    let mut test = Vec::new();
    for i in 0..config.test_count {
        let seed = config.seed.wrapping_add(10_000 + i as u64);
        let case_id = format!("test_{i:03}");
        let record = generate_test_case(config, &test_dir, &case_id, seed)?;
        test.push(record);
    }

    let manifest = PhantomDatasetManifest {
        config: config.clone(),
        train,
        test,
    };
    write_json_atomic(&manifest, &config.output_dir.join("dataset_manifest.json"))?;
    Ok(manifest)
}

fn generate_test_case(
    config: &PhantomDatasetConfig,
    test_dir: &Path,
    case_id: &str,
    seed: u64,
) -> Result<PhantomCaseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = make_phantom(&phantom_spec_for(config, seed))?;

    // Optional random pose offset so test cases exercise registration.
    let complete = if config.pose_jitter {
        let geom = *base.geometry();
        let center = geom.world_center();
        let c = nalgebra::Vector3::new(center[0], center[1], center[2]);
        let angles = [
            (rng.gen::<f64>() - 0.5) * 0.5,
            (rng.gen::<f64>() - 0.5) * 0.5,
            (rng.gen::<f64>() - 0.5) * 0.5,
        ];
        let rotation =
            nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).into_inner();
        let scale = 0.95 + rng.gen::<f64>() * 0.10;
        let max_shift = config.spacing[0] * 3.0;
        let shift = nalgebra::Vector3::new(
            (rng.gen::<f64>() - 0.5) * 2.0 * max_shift,
            (rng.gen::<f64>() - 0.5) * 2.0 * max_shift,
            (rng.gen::<f64>() - 0.5) * 2.0 * max_shift,
        );
        let transform = crate::registration::SimilarityTransform {
            scale,
            rotation,
            translation: c - scale * (rotation * c) + shift,
            fixed_grid: geom,
        };
        warp(&base, &transform)?
    } else {
        base
    };

    // Defect centers on the upper half of the shell.
    let surface = complete.surface_voxels();
    if surface.is_empty() {
        return Err(Error::DegenerateInput("jittered phantom is empty".into()));
    }
    let geometry = complete.geometry();
    let center_world = geometry.world_center();
    let upper: Vec<[f64; 3]> = surface
        .iter()
        .map(|&v| geometry.world_of(v))
        .filter(|w| w[2] > center_world[2])
        .collect();
    let pool = if upper.is_empty() {
        surface.iter().map(|&v| geometry.world_of(v)).collect()
    } else {
        upper
    };
    let mut centers = Vec::with_capacity(config.defect_count);
    for _ in 0..config.defect_count {
        centers.push(pool[rng.gen_range(0..pool.len())]);
    }

    let (spec, achieved) = defect_for_fraction(
        &complete,
        config.defect_kind,
        centers,
        config.defect_fraction,
    )?;
    let (defective, implant) = apply_defect(&complete, &spec)?;

    let mut files = BTreeMap::new();
    files.insert(
        format!("{case_id}_defective.nrrd"),
        write_grid_atomic(&defective, &test_dir.join(format!("{case_id}_defective.nrrd")))?,
    );
    files.insert(
        format!("{case_id}_implant.nrrd"),
        write_grid_atomic(&implant, &test_dir.join(format!("{case_id}_implant.nrrd")))?,
    );
    files.insert(
        format!("{case_id}_complete.nrrd"),
        write_grid_atomic(&complete, &test_dir.join(format!("{case_id}_complete.nrrd")))?,
    );
    Ok(PhantomCaseRecord {
        case_id: case_id.to_string(),
        seed,
        files,
        defect_fraction_achieved: Some(achieved),
    })
}

/// Extract an implant from a raw subtraction volume file, writing the
/// implant and the stage-by-stage postprocess manifest.
pub fn extract_implant_file(
    input: &Path,
    params: &PostprocessParams,
    hint: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let raw = read_nrrd_binarize(input)?;
    let hint_grid = match hint {
        Some(p) => Some(read_nrrd_binarize(p)?),
        None => None,
    };
    let config = params.to_config()?;
    let (implant, report) = extract_implant(&raw, &config, hint_grid.as_ref())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = file_stem(input);
    write_grid_atomic(&implant, &out_dir.join(format!("{stem}_implant.nrrd")))?;
    write_json_atomic(&report, &out_dir.join(format!("{stem}_postprocess.json")))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightInspection {
    pub model_dir: PathBuf,
    pub shapes: Vec<PathBuf>,
    pub stats: Vec<crate::ssm::ModeStats>,
}

/// Project shapes through a persisted model and emit per-mode statistics
/// as CSV plus plot-ready JSON.
pub fn inspect_weights(
    model_dir: &Path,
    shapes: &[PathBuf],
    roi: Option<&Path>,
    out_dir: &Path,
) -> Result<WeightInspection> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("no shapes to inspect".into()));
    }
    let model = load_model(model_dir)?;
    let mut grids = Vec::with_capacity(shapes.len());
    for path in shapes {
        let grid = read_nrrd_binarize(path)?;
        let grid = if grid.dims() == model.reference().dims {
            grid
        } else {
            // Shapes not in reference space are registered and warped in.
            let target = model.mean().binarized(0.5);
            let report = estimate_transform(&grid, &target, &RegistrationConfig::default())?;
            warp(&grid, &report.transform)?
        };
        grids.push(grid);
    }
    let roi_grid = match roi {
        Some(p) => Some(read_nrrd_binarize(p)?),
        None => None,
    };
    let stats = model.mode_report(&grids, roi_grid.as_ref())?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv =
        String::from("mode,mean_weight,min_weight,max_weight,roi_energy_fraction,singular_value,near_zero\n");
    for s in &stats {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.mode,
            s.mean_weight,
            s.min_weight,
            s.max_weight,
            s.roi_energy_fraction
                .map(|v| format!("{v}"))
                .unwrap_or_default(),
            s.singular_value,
            s.near_zero
        ));
    }
    write_atomic(&out_dir.join("weights.csv"), csv.as_bytes())?;
    let inspection = WeightInspection {
        model_dir: model_dir.to_path_buf(),
        shapes: shapes.to_vec(),
        stats,
    };
    write_json_atomic(&inspection, &out_dir.join("weights.json"))?;
    Ok(inspection)
}
