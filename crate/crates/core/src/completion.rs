//! Shape completion: warp a defective shape into a reference space, take
//! the missing portion from a template or a model reconstruction, and map
//! the completed shape back to the original image space.
//!
//! Completion returns the raw clamped subtraction as the implant; cleanup
//! (noise removal, component selection) is the postprocess stage's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{
    estimate_transform, warp, RegistrationConfig, SimilarityTransform,
};
use crate::ssm::{mean_shape, ShapeModel, WeightVector};
use crate::volume::{volume_add, volume_subtract, VoxelGrid};

/// How a completion was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletionMethod {
    TemplateSingle,
    TemplateMean,
    Ssm,
    SsmExternal,
}

/// Where a template came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TemplateProvenance {
    Single { id: String },
    MeanOfK { ids: Vec<String>, threshold: f32 },
}

/// A binary template shape in reference space.
#[derive(Debug, Clone)]
pub struct Template {
    pub grid: VoxelGrid,
    pub provenance: TemplateProvenance,
}

/// Input for [`make_template`].
pub enum TemplateSource<'a> {
    Single { shape: &'a VoxelGrid, id: String },
    Mean { shapes: &'a [VoxelGrid], ids: Vec<String> },
}

/// Build a template: a single shape passes through, a list is averaged and
/// binarized at the threshold.
pub fn make_template(source: TemplateSource, threshold: f32) -> Result<Template> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "template threshold must be in (0, 1), got {threshold}"
        )));
    }
    match source {
        TemplateSource::Single { shape, id } => {
            if !shape.is_binary() {
                return Err(Error::InvalidArgument(
                    "single-shape template must be binary".into(),
                ));
            }
            Ok(Template {
                grid: shape.clone(),
                provenance: TemplateProvenance::Single { id },
            })
        }
        TemplateSource::Mean { shapes, ids } => {
            let mean = mean_shape(shapes)?;
            Ok(Template {
                grid: mean.binarized(threshold),
                provenance: TemplateProvenance::MeanOfK { ids, threshold },
            })
        }
    }
}

/// Registration summary carried on a completion result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// All spaces of one completed case.
#[derive(Debug, Clone)]
pub struct CompletionResult {
    /// Completed shape in reference space: implant plus warped input.
    pub completed_reference_space: VoxelGrid,
    /// Raw clamped subtraction in reference space.
    pub implant_reference_space: VoxelGrid,
    /// Completed shape warped back to the input's own space.
    pub completed_original_space: VoxelGrid,
    /// Transform from the input's space into the reference space.
    pub transform: SimilarityTransform,
    pub method: CompletionMethod,
    pub registration: RegistrationSummary,
}

impl CompletionResult {
    /// The raw implant carried back to the input's own space.
    pub fn implant_original_space(&self) -> Result<VoxelGrid> {
        let inv = self
            .transform
            .inverse(*self.completed_original_space.geometry());
        warp(&self.implant_reference_space, &inv)
    }
}

fn check_defective(defective: &VoxelGrid) -> Result<()> {
    if !defective.is_binary() {
        return Err(Error::InvalidArgument(
            "completion input must be binary".into(),
        ));
    }
    if defective.foreground_count() == 0 {
        return Err(Error::DegenerateInput("completion input is empty".into()));
    }
    Ok(())
}

fn assemble(
    defective: &VoxelGrid,
    reference_shape: &VoxelGrid,
    warped_input: VoxelGrid,
    report: crate::registration::RegistrationReport,
    method: CompletionMethod,
) -> Result<CompletionResult> {
    let implant = volume_subtract(reference_shape, &warped_input)?;
    let completed_ref = volume_add(&implant, &warped_input)?;
    let inverse = report.transform.inverse(*defective.geometry());
    let completed_original = warp(&completed_ref, &inverse)?;
    Ok(CompletionResult {
        completed_reference_space: completed_ref,
        implant_reference_space: implant,
        completed_original_space: completed_original,
        transform: report.transform,
        method,
        registration: RegistrationSummary {
            residual: report.residual,
            iterations: report.iterations,
            converged: report.converged,
        },
    })
}

/// Complete by template subtraction: register the defective shape onto the
/// template, subtract, and invert the warp.
pub fn complete_by_template(
    defective: &VoxelGrid,
    template: &Template,
    reg: &RegistrationConfig,
) -> Result<CompletionResult> {
    check_defective(defective)?;
    let report = estimate_transform(defective, &template.grid, reg)?;
    let warped = warp(defective, &report.transform)?;
    let method = match template.provenance {
        TemplateProvenance::Single { .. } => CompletionMethod::TemplateSingle,
        TemplateProvenance::MeanOfK { .. } => CompletionMethod::TemplateMean,
    };
    assemble(defective, &template.grid, warped, report, method)
}

/// Where the projection weights come from in a model-based completion.
pub enum WeightSource<'a> {
    /// Project the warped defective shape itself.
    SelfProjection,
    /// Project an externally supplied completed volume instead (for cases
    /// where defect-distorted weights are a concern).
    External {
        volume: &'a VoxelGrid,
        space: ExternalSpace,
    },
}

/// Declared space of an external completion volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalSpace {
    /// Same space as the defective input; warped with the same transform.
    Original,
    /// Already in the model's reference space.
    Reference,
}

/// Knobs for model-based completion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsmCompletionOptions {
    /// Threshold for binarizing the model reconstruction before Eq-style
    /// subtraction (and for the registration target built from the mean).
    pub binarize_threshold: f32,
    /// Rescale weights to [0, 1] and reconstruct with them literally.
    pub paper_rescale: bool,
}

impl Default for SsmCompletionOptions {
    fn default() -> Self {
        SsmCompletionOptions {
            binarize_threshold: 0.5,
            paper_rescale: false,
        }
    }
}

/// Complete through the shape model: warp, project (or take weights from an
/// external completion), reconstruct, binarize, subtract, invert.
pub fn complete_by_ssm(
    defective: &VoxelGrid,
    model: &ShapeModel,
    weight_source: WeightSource,
    reg: &RegistrationConfig,
    opts: &SsmCompletionOptions,
) -> Result<CompletionResult> {
    check_defective(defective)?;
    let target = model.mean().binarized(opts.binarize_threshold);
    if target.foreground_count() == 0 {
        return Err(Error::DegenerateInput(
            "binarized model mean is empty; threshold too high".into(),
        ));
    }
    let report = estimate_transform(defective, &target, reg)?;
    let warped = warp(defective, &report.transform)?;

    let (weights, method) = match weight_source {
        WeightSource::SelfProjection => (
            model.project(&warped, opts.paper_rescale)?,
            CompletionMethod::Ssm,
        ),
        WeightSource::External { volume, space } => {
            let in_reference = match space {
                ExternalSpace::Original => warp(volume, &report.transform)?,
                ExternalSpace::Reference => {
                    if volume.dims() != model.reference().dims {
                        return Err(Error::ShapeMismatch {
                            expected: model.reference().dims,
                            actual: volume.dims(),
                        });
                    }
                    volume.clone()
                }
            };
            (
                model.project(&in_reference, opts.paper_rescale)?,
                CompletionMethod::SsmExternal,
            )
        }
    };

    let reconstruction = reconstruct_for_completion(model, &weights, opts)?;
    let binary = reconstruction.binarized(opts.binarize_threshold);
    assemble(defective, &binary, warped, report, method)
}

fn reconstruct_for_completion(
    model: &ShapeModel,
    weights: &WeightVector,
    opts: &SsmCompletionOptions,
) -> Result<VoxelGrid> {
    if opts.paper_rescale {
        model.reconstruct_with(weights, true)
    } else {
        model.reconstruct(weights)
    }
}
