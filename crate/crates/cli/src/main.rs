//! Command-line front end for the shape-model completion pipeline.
//!
//! Subcommands: `build-model`, `complete`, `extract-implant`, `evaluate`,
//! `phantom`, `inspect-weights`. Every run is driven by a JSON config plus
//! per-key flag overrides; the resolved config is written into the run's
//! manifest. Exit codes: 0 success, 2 configuration errors, 3 file/format
//! errors, 4 numerical-stage failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voxssm::completion::CompletionMethod;
use voxssm::error::{Error, ErrorClass};
use voxssm::pipeline::{
    build_model, complete_cases, evaluate_dirs, extract_implant_file, generate_phantom_dataset,
    inspect_weights, PhantomDatasetConfig, PipelineConfig, PostprocessParams, TemplateModeConfig,
};
use voxssm::postprocess::{Connectivity, Selection};
use voxssm::volume::DefectKind;

#[derive(Parser)]
#[command(
    name = "voxssm",
    about = "Statistical shape modeling and completion on binary volumes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register training shapes to the reference, fit the model, persist
    /// model and templates.
    BuildModel(ConfigArgs),
    /// Complete defective cases using a previously built model/template.
    Complete(CompleteArgs),
    /// Clean a raw subtraction volume into the final implant.
    ExtractImplant(ExtractArgs),
    /// Score predicted implants against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom dataset with ground-truth implants.
    Phantom(PhantomArgs),
    /// Project shapes through a model and report per-mode weights.
    InspectWeights(InspectArgs),
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    training: Option<Vec<PathBuf>>,
    #[arg(long)]
    num_modes: Option<usize>,
    /// Template construction: single | mean.
    #[arg(long)]
    template_mode: Option<String>,
    /// Shapes averaged for a mean template.
    #[arg(long)]
    template_k: Option<usize>,
    #[arg(long)]
    template_threshold: Option<f32>,
    /// Completion method: template-single | template-mean | ssm | ssm-external.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    reg_tol: Option<f64>,
    #[arg(long)]
    reg_max_iterations: Option<usize>,
    #[arg(long)]
    reg_trim_fraction: Option<f64>,
    #[arg(long)]
    reg_max_surface_points: Option<usize>,
    #[arg(long)]
    median_kernel: Option<usize>,
    #[arg(long)]
    opening_radius: Option<usize>,
    /// 6, 18 or 26.
    #[arg(long)]
    connectivity: Option<u8>,
    /// largest | hint-overlap.
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    erase_mask: Option<PathBuf>,
    #[arg(long)]
    centered: Option<bool>,
    #[arg(long)]
    paper_rescale: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Case-level parallelism bound (0 = default pool).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory produced by build-model.
    #[arg(long)]
    build_dir: PathBuf,
    /// Defective input volumes.
    #[arg(long, num_args = 1.., required = true)]
    case: Vec<PathBuf>,
    /// External completed volumes, one per case (ssm-external only).
    #[arg(long, num_args = 1..)]
    external: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Defect-region mask guiding component selection.
    #[arg(long)]
    hint: Option<PathBuf>,
    #[arg(long)]
    erase_mask: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    median_kernel: usize,
    #[arg(long, default_value_t = 0)]
    opening_radius: usize,
    #[arg(long, default_value_t = 26)]
    connectivity: u8,
    /// largest | hint-overlap.
    #[arg(long, default_value = "hint-overlap")]
    selection: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Boundary-DSC tolerance in mm.
    #[arg(long, default_value_t = 1.0)]
    tolerance: f64,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    defect_fraction: f64,
    /// sphere | box | multi.
    #[arg(long, default_value = "sphere")]
    defect_kind: String,
    #[arg(long, default_value_t = 1)]
    defect_count: usize,
    /// Disable the random pose offset on test cases.
    #[arg(long)]
    no_pose_jitter: bool,
    #[arg(long, default_value_t = 0.06)]
    amplitude: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    shape: Vec<PathBuf>,
    #[arg(long)]
    roi: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::InvalidConfig(format!("invalid {what}: `{s}`")))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_json_file(path)?,
            None => {
                let (reference, training, output_dir) = match (
                    &self.reference,
                    &self.training,
                    &self.output_dir,
                ) {
                    (Some(r), Some(t), Some(o)) => (r.clone(), t.clone(), o.clone()),
                    _ => {
                        return Err(Error::InvalidConfig(
                            "without --config, --reference, --training and --output-dir are required"
                                .into(),
                        ))
                    }
                };
                PipelineConfig {
                    num_modes: training.len(),
                    reference,
                    training,
                    template: TemplateModeConfig::Single,
                    method: CompletionMethod::Ssm,
                    registration: Default::default(),
                    postprocess: PostprocessParams::default(),
                    centered: true,
                    paper_rescale: false,
                    output_dir,
                    seed: 0,
                    jobs: 0,
                }
            }
        };

        if let Some(v) = &self.reference {
            config.reference = v.clone();
        }
        if let Some(v) = &self.training {
            config.training = v.clone();
        }
        if let Some(v) = self.num_modes {
            config.num_modes = v;
        }
        if let Some(mode) = &self.template_mode {
            config.template = match mode.as_str() {
                "single" => TemplateModeConfig::Single,
                "mean" => TemplateModeConfig::Mean {
                    k: self.template_k.unwrap_or(config.training.len()),
                    threshold: self.template_threshold.unwrap_or(0.5),
                },
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "invalid template mode `{other}` (single | mean)"
                    )))
                }
            };
        } else if let TemplateModeConfig::Mean { k, threshold } = config.template {
            if self.template_k.is_some() || self.template_threshold.is_some() {
                config.template = TemplateModeConfig::Mean {
                    k: self.template_k.unwrap_or(k),
                    threshold: self.template_threshold.unwrap_or(threshold),
                };
            }
        }
        if let Some(m) = &self.method {
            config.method = parse_kebab("method", m)?;
        }
        if let Some(v) = self.reg_tol {
            config.registration.tol = v;
        }
        if let Some(v) = self.reg_max_iterations {
            config.registration.max_iterations = v;
        }
        if let Some(v) = self.reg_trim_fraction {
            config.registration.trim_fraction = v;
        }
        if let Some(v) = self.reg_max_surface_points {
            config.registration.max_surface_points = v;
        }
        if let Some(v) = self.median_kernel {
            config.postprocess.median_kernel = v;
        }
        if let Some(v) = self.opening_radius {
            config.postprocess.opening_radius = v;
        }
        if let Some(v) = self.connectivity {
            config.postprocess.connectivity = Connectivity::try_from(v)?;
        }
        if let Some(s) = &self.selection {
            config.postprocess.selection = parse_kebab::<Selection>("selection", s)?;
        }
        if let Some(v) = &self.erase_mask {
            config.postprocess.erase_mask = Some(v.clone());
        }
        if let Some(v) = self.centered {
            config.centered = v;
        }
        if let Some(v) = self.paper_rescale {
            config.paper_rescale = v;
        }
        if let Some(v) = &self.output_dir {
            config.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.jobs {
            config.jobs = v;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::BuildModel(args) => {
            let config = args.resolve()?;
            let manifest = build_model(&config)?;
            println!(
                "built model: {} modes from {} shapes -> {}",
                config.num_modes,
                manifest.warped.len(),
                config.output_dir.display()
            );
            Ok(())
        }
        Command::Complete(args) => {
            let config = args.config.resolve()?;
            let manifest = complete_cases(
                &config,
                &args.build_dir,
                &args.case,
                args.external.as_deref(),
            )?;
            println!(
                "completed {} case(s) -> {}",
                manifest.cases.len(),
                config.output_dir.join("cases").display()
            );
            Ok(())
        }
        Command::ExtractImplant(args) => {
            let params = PostprocessParams {
                median_kernel: args.median_kernel,
                opening_radius: args.opening_radius,
                connectivity: Connectivity::try_from(args.connectivity)?,
                selection: parse_kebab::<Selection>("selection", &args.selection)?,
                erase_mask: args.erase_mask.clone(),
            };
            extract_implant_file(&args.input, &params, args.hint.as_deref(), &args.out_dir)?;
            println!("extracted implant -> {}", args.out_dir.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let result = evaluate_dirs(&args.pred, &args.gt, args.tolerance, &args.out_dir)?;
            let agg = &result.aggregate;
            println!(
                "evaluated {} case(s): mean DSC {:.4}, mean bDSC {:.4}, mean HD95 {}",
                agg.cases,
                agg.mean_dsc,
                agg.mean_bdsc,
                agg.mean_hd95
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Phantom(args) => {
            let config = PhantomDatasetConfig {
                output_dir: args.out_dir.clone(),
                train_count: args.train,
                test_count: args.test,
                dims: [args.dims; 3],
                spacing: [1.0; 3],
                seed: args.seed,
                defect_fraction: args.defect_fraction,
                defect_kind: parse_kebab::<DefectKind>("defect kind", &args.defect_kind)?,
                defect_count: args.defect_count,
                pose_jitter: !args.no_pose_jitter,
                amplitude: args.amplitude,
            };
            let manifest = generate_phantom_dataset(&config)?;
            println!(
                "generated {} training + {} test phantom(s) -> {}",
                manifest.train.len(),
                manifest.test.len(),
                args.out_dir.display()
            );
            Ok(())
        }
        Command::InspectWeights(args) => {
            let inspection =
                inspect_weights(&args.model_dir, &args.shape, args.roi.as_deref(), &args.out_dir)?;
            println!(
                "inspected {} mode(s) over {} shape(s) -> {}",
                inspection.stats.len(),
                args.shape.len(),
                args.out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Io => ExitCode::from(3),
                ErrorClass::Numerical => ExitCode::from(4),
            }
        }
    }
}
