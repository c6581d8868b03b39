//! Metrics, editing evaluation and the variant ablation.
//!
//! Perceptual and language-model scores need external pretrained networks
//! and are not provided; masked PSNR, SSIM and cross-view consistency are
//! the deterministic substitutes.

pub mod ablation;
pub mod metrics;
pub mod probe;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::datapipe::{build_batch, latents_to_images, ModelBatch, PairedSample, Task};
use crate::denoiser::{BoundDenoiser, Denoiser};
use crate::diffusion::{sample, EdmConfig, NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Result};

pub use ablation::{run_ablation, train_arms, AblationTable, Arm, ArmDelta, TrainBudget};
pub use metrics::{
    correspondences, cross_view_consistency, cross_view_consistency_masked, cross_view_variance, masked_mse,
    masked_psnr, masked_psnr_views, psnr_from_mse, ssim, ssim_gray, PSNR_CAP,
};
pub use probe::{probe_mass, ProbeReport};

/// Printed above every report table.
pub const REPORT_HEADER: &str = "metrics: masked PSNR (dB, inside the edit mask, 99 = identical), \
SSIM (7x7 luminance windows), cross-view consistency error (mean abs color difference over \
corresponding edited pixels); perceptual and language-model scores are not computed";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EditSettings {
    pub sampler: SamplerConfig,
    pub edm: EdmConfig,
}


/// All `N` views after editing; the condition image sits at its own index.
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub views: Array4<f32>,
    pub condition_index: usize,
    pub target_views: Vec<usize>,
}

/// Sample the target views of `batch` and splice the condition back in.
pub fn run_edit(
    model: &Denoiser<f32>,
    batch: &ModelBatch,
    condition_image: ndarray::ArrayView3<f32>,
    condition_index: usize,
    seed: u64,
    settings: &EditSettings,
) -> Result<EditOutput> {
    let schedule = NoiseSchedule::<f32>::from_config(settings.sampler.steps, &settings.edm)?;
    let net = BoundDenoiser {
        model,
        inputs: &batch.inputs,
    };
    let latents = sample(&net, &batch.targets, &schedule, settings.sampler.cfg_scale as f32, seed)?;
    let targets = latents_to_images(&latents)?;
    let n = batch.target_views.len() + 1;
    let (_, c, h, w) = targets.dim();
    let mut views = Array4::zeros((n, c, h, w));
    views.index_axis_mut(Axis(0), condition_index).assign(&condition_image);
    for (k, &v) in batch.target_views.iter().enumerate() {
        views.index_axis_mut(Axis(0), v).assign(&targets.index_axis(Axis(0), k));
    }
    Ok(EditOutput {
        views,
        condition_index,
        target_views: batch.target_views.clone(),
    })
}

/// Edit the source views of `sample` from its condition image alone.
pub fn edit_sample(model: &Denoiser<f32>, sample: &PairedSample, seed: u64, settings: &EditSettings) -> Result<EditOutput> {
    let batch = build_batch(
        Some(sample.source_views.view()),
        Some(sample.condition_image()),
        sample.condition_index,
        None,
        &sample.poses,
        model.config.patch,
    )?;
    run_edit(model, &batch, sample.condition_image(), sample.condition_index, seed, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub task: Task,
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when no edited pixel is seen by two views.
    pub consistency: Option<f64>,
}

/// Score edited views against ground-truth renders of the target world.
pub fn score_edit(output: &EditOutput, sample: &PairedSample) -> Result<SampleMetrics> {
    ensure!(output.views.dim() == sample.target_views.dim(), "edited views do not match the sample");
    let gt = sample.ground_truth();
    let t = &output.target_views;
    let pred = output.views.select(Axis(0), t);
    let refs = gt.select(Axis(0), t);
    let masks = sample.edit_masks.select(Axis(0), t);
    let psnr = masked_psnr_views(pred.view(), refs.view(), masks.view())?;
    let mut s = 0.0;
    for (p, r) in pred.outer_iter().zip(refs.outer_iter()) {
        s += ssim(p, r)?;
    }
    let consistency =
        cross_view_consistency_masked(output.views.view(), &sample.target_scene, &sample.poses, sample.edit_masks.view())?;
    Ok(SampleMetrics {
        task: sample.task,
        psnr,
        ssim: s / t.len() as f64,
        consistency,
    })
}

/// Edit and score in one call.
pub fn evaluate_edit(
    model: &Denoiser<f32>,
    sample: &PairedSample,
    seed: u64,
    settings: &EditSettings,
) -> Result<(EditOutput, SampleMetrics)> {
    let out = edit_sample(model, sample, seed, settings)?;
    let metrics = score_edit(&out, sample)?;
    Ok((out, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: Option<f64>,
}

impl Aggregate {
    fn mean_of(items: impl Iterator<Item = (f64, f64, Option<f64>)>) -> Self {
        let (mut n, mut p, mut s, mut c, mut nc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (a, b, d) in items {
            n += 1.0;
            p += a;
            s += b;
            if let Some(d) = d {
                c += d;
                nc += 1.0;
            }
        }
        Self {
            psnr: p / n,
            ssim: s / n,
            consistency: (nc > 0.0).then(|| c / nc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub samples: Vec<SampleMetrics>,
    pub mean: Aggregate,
}

impl SeedMetrics {
    pub fn new(seed: u64, samples: Vec<SampleMetrics>) -> Self {
        let mean = Aggregate::mean_of(samples.iter().map(|s| (s.psnr, s.ssim, s.consistency)));
        Self { seed, samples, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    /// Mean over samples, then over seeds.
    pub aggregate: Aggregate,
    /// Median over seeds of the per-seed means.
    pub median_psnr: f64,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, per_seed: Vec<SeedMetrics>) -> Self {
        let aggregate = Aggregate::mean_of(per_seed.iter().map(|s| (s.mean.psnr, s.mean.ssim, s.mean.consistency)));
        let median_psnr = median(per_seed.iter().map(|s| s.mean.psnr).collect());
        Self {
            label: label.into(),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
            aggregate,
            median_psnr,
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Evaluate one model on held-out samples.
pub fn evaluate_set(
    model: &Denoiser<f32>,
    samples: &[PairedSample],
    seed: u64,
    settings: &EditSettings,
) -> Result<Vec<SampleMetrics>> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(evaluate_edit(model, s, crate::datapipe::sample_seed(seed, i), settings)?.1))
        .collect()
}
