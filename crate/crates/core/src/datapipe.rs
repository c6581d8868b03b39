//! Paired multi-view editing samples: scene sampling, instruction choice,
//! ground-truth edit rendering, simulated per-view editor drift, optional
//! multi-view refinement, and a metric-based quality filter.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, LatentGrid};
use crate::denoiser::{pose_features, BoundDenoiser, Denoiser, EditInputs, ViewBatch};
use crate::diffusion::{run_ladder, standard_normal_latent, EdmConfig, NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::evaluation::metrics::{cross_view_variance, masked_mse, psnr_from_mse};
use crate::geometry::{normalize_cameras, poses_from_json, poses_to_json, CameraPose};
use crate::scalar::snap_to_unit_grid;
use crate::scene::{
    apply_edit, orbit_poses, propose_removal_target, render, render_with_hits, sample_scene, EditInstruction, EditOp,
    SceneSpec, PALETTE,
};
use crate::tensor_io::{read_json, read_tensor, write_json, write_png, write_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Removal,
    Addition,
    Recolor,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Removal, Task::Addition, Task::Recolor];

    pub fn name(self) -> &'static str {
        match self {
            Task::Removal => "removal",
            Task::Addition => "addition",
            Task::Recolor => "recolor",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}` (expected removal, addition or recolor)")))
    }
}

/// Simulated inconsistency of an independent per-view 2D editor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub enabled: bool,
    /// Half-width of the uniform per-view, per-channel color offset.
    pub offset: f64,
    /// Standard deviation of the per-pixel noise.
    pub noise_std: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            offset: 0.22,
            noise_std: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    pub min_psnr_inside: f64,
    pub min_psnr_outside: f64,
    pub max_variance: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_psnr_inside: 30.0,
            min_psnr_outside: 40.0,
            max_variance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub jitter: JitterConfig,
    pub thresholds: FilterThresholds,
    /// Scene draws before a removal target search gives up.
    pub max_resamples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            views: 6,
            height: 48,
            width: 48,
            jitter: JitterConfig::default(),
            thresholds: FilterThresholds::default(),
            max_resamples: 20,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((2..=10).contains(&self.views), "views must lie in [2, 10], got {}", self.views);
        ensure!(self.height >= 8 && self.width >= 8, "images must be at least 8×8");
        ensure!(
            self.jitter.offset >= 0.0 && self.jitter.noise_std >= 0.0,
            "jitter amplitudes must be non-negative"
        );
        Ok(())
    }
}

/// A multi-view editing pair with everything needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub task: Task,
    pub seed: u64,
    /// World shown by the source views.
    pub scene: SceneSpec,
    /// World the target views should show.
    pub target_scene: SceneSpec,
    /// `N × 3 × H × W`
    pub source_views: Array4<f32>,
    pub target_views: Array4<f32>,
    pub condition_index: usize,
    pub poses: Vec<CameraPose<f64>>,
    pub instruction: EditInstruction,
    /// `N × H × W`, 1 on the edited object's silhouette.
    pub edit_masks: Array3<f32>,
    pub provenance: Vec<String>,
}

impl PairedSample {
    pub fn views(&self) -> usize {
        self.poses.len()
    }

    pub fn condition_image(&self) -> ArrayView3<'_, f32> {
        self.target_views.index_axis(Axis(0), self.condition_index)
    }

    /// Ground-truth renders of the target world.
    pub fn ground_truth(&self) -> Array4<f32> {
        render_stack(&self.target_scene, &self.poses)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.views();
        ensure!(n >= 1, "sample has no views");
        ensure!(self.condition_index < n, "condition index {} out of range", self.condition_index);
        let (h, w) = (self.poses[0].height(), self.poses[0].width());
        ensure!(self.source_views.dim() == (n, 3, h, w), "source views have the wrong shape");
        ensure!(self.target_views.dim() == (n, 3, h, w), "target views have the wrong shape");
        ensure!(self.edit_masks.dim() == (n, h, w), "edit masks have the wrong shape");
        self.instruction.validate_for(if self.task == Task::Addition {
            &self.target_scene
        } else {
            &self.scene
        })
        .or_else(|e| if self.task == Task::Addition { Ok(()) } else { Err(e) })
    }
}

pub fn render_stack(scene: &SceneSpec, poses: &[CameraPose<f64>]) -> Array4<f32> {
    let views: Vec<Array3<f32>> = poses.iter().map(|p| render(scene, p)).collect();
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::stack(Axis(0), &refs).expect("equal render sizes")
}

/// Something that harmonizes a set of independently edited views.
pub trait Refiner: Sync {
    fn refine(&self, views: &Array4<f32>, poses: &[CameraPose<f64>], condition_index: usize, seed: u64) -> Result<Array4<f32>>;
}

/// Multi-view SDEdit with a trained denoiser.
pub struct SdeditRefiner<'a> {
    pub model: &'a Denoiser<f32>,
    pub edm: EdmConfig,
    pub sampler: SamplerConfig,
    pub noise_frac: f64,
}

impl Refiner for SdeditRefiner<'_> {
    fn refine(&self, views: &Array4<f32>, poses: &[CameraPose<f64>], condition_index: usize, seed: u64) -> Result<Array4<f32>> {
        consistency_refine(self.model, views, poses, condition_index, self.noise_frac, seed, &self.edm, &self.sampler)
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    crate::params::name_seed(seed, &salt.to_string())
}

/// Independent per-view color offset and pixel noise inside each mask.
pub fn per_view_jitter(views: &Array4<f32>, masks: &Array3<f32>, seed: u64, cfg: &JitterConfig) -> Result<Array4<f32>> {
    let (n, c, h, w) = views.dim();
    ensure!(masks.dim() == (n, h, w), "mask shape {:?} does not match views", masks.dim());
    let mut out = views.clone();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    for v in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, v as u64));
        let offsets: Vec<f64> = (0..c)
            .map(|_| if cfg.offset > 0.0 { rng.random_range(-cfg.offset..=cfg.offset) } else { 0.0 })
            .collect();
        for y in 0..h {
            for x in 0..w {
                if masks[[v, y, x]] <= 0.5 {
                    continue;
                }
                for (ch, off) in offsets.iter().enumerate() {
                    let px = &mut out[[v, ch, y, x]];
                    let value = f64::from(*px) + off + noise.sample(&mut rng);
                    *px = snap_to_unit_grid(value.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Camera-normalized ray features for all views of a sample.
pub fn sample_pose_features(poses: &[CameraPose<f64>], patch: usize) -> Result<Array4<f32>> {
    let (normalized, _) = normalize_cameras(poses)?;
    let rays = pose_features(&normalized, patch)?;
    Ok(rays.mapv(|x| x as f32))
}

/// Model-ready tensors for one multi-view editing problem.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub inputs: EditInputs<f32>,
    /// Clean target latents (zeros when unknown).
    pub targets: LatentGrid<f32>,
    /// Camera index of each target.
    pub target_views: Vec<usize>,
}

/// Targets are every view except `condition_index`.
pub fn build_batch(
    sources: Option<ArrayView4<f32>>,
    condition: Option<ArrayView3<f32>>,
    condition_index: usize,
    targets: Option<ArrayView4<f32>>,
    poses: &[CameraPose<f64>],
    patch: usize,
) -> Result<ModelBatch> {
    let n = poses.len();
    ensure!(n >= 2, "need at least two views");
    ensure!(condition_index < n, "condition index {condition_index} out of range for {n} views");
    let rays = sample_pose_features(poses, patch)?;
    let target_views: Vec<usize> = (0..n).filter(|&i| i != condition_index).collect();
    let (h, w) = (poses[0].height(), poses[0].width());
    let sources = match sources {
        Some(s) => {
            ensure!(s.dim() == (n, 3, h, w), "source views {:?} do not match {n} poses at {h}×{w}", s.dim());
            Some(ViewBatch::new(encode(s, patch)?, rays.clone())?)
        }
        None => None,
    };
    let condition = match condition {
        Some(c) => {
            ensure!(c.dim() == (3, h, w), "condition image {:?} does not match {h}×{w}", c.dim());
            let latents = encode(c.insert_axis(Axis(0)), patch)?;
            let ray = rays.slice(s![condition_index..condition_index + 1, .., .., ..]).to_owned();
            Some(ViewBatch::new(latents, ray)?)
        }
        None => None,
    };
    let target_images = match targets {
        Some(t) => {
            ensure!(t.dim() == (n, 3, h, w), "target views {:?} do not match {n} poses", t.dim());
            t.select(Axis(0), &target_views)
        }
        None => Array4::from_elem((n - 1, 3, h, w), 0.5),
    };
    Ok(ModelBatch {
        inputs: EditInputs {
            sources,
            condition,
            target_pose: rays.select(Axis(0), &target_views),
            target_sources: target_views.clone(),
        },
        targets: encode(target_images.view(), patch)?,
        target_views,
    })
}

/// Batch of a paired sample as seen by the edit model.
pub fn sample_batch(sample: &PairedSample, patch: usize) -> Result<ModelBatch> {
    build_batch(
        Some(sample.source_views.view()),
        Some(sample.condition_image()),
        sample.condition_index,
        Some(sample.target_views.view()),
        &sample.poses,
        patch,
    )
}

/// Latents back to clamped, grid-snapped images.
pub fn latents_to_images(latents: &LatentGrid<f32>) -> Result<Array4<f32>> {
    Ok(decode(latents)?.mapv(|x| snap_to_unit_grid(x.clamp(0.0, 1.0))))
}

/// Number of trailing ladder steps run for a refinement strength.
pub fn refine_steps(noise_frac: f64, total_steps: usize) -> Result<usize> {
    ensure!(
        noise_frac > 0.0 && noise_frac < 1.0,
        "noise_frac must lie in (0, 1), got {noise_frac}"
    );
    Ok(((noise_frac * total_steps as f64).ceil() as usize).min(total_steps))
}

/// SDEdit over all non-condition views: noise them to the ladder level
/// `⌈noise_frac·n⌉` steps above clean, denoise with the condition view as
/// reference, decode. The condition view is returned untouched.
#[allow(clippy::too_many_arguments)]
pub fn consistency_refine(
    model: &Denoiser<f32>,
    views: &Array4<f32>,
    poses: &[CameraPose<f64>],
    condition_index: usize,
    noise_frac: f64,
    seed: u64,
    edm: &EdmConfig,
    sampler: &SamplerConfig,
) -> Result<Array4<f32>> {
    let steps = refine_steps(noise_frac, sampler.steps)?;
    refine_with_steps(model, views, poses, condition_index, steps, seed, edm, sampler)
}

#[allow(clippy::too_many_arguments)]
pub fn refine_with_steps(
    model: &Denoiser<f32>,
    views: &Array4<f32>,
    poses: &[CameraPose<f64>],
    condition_index: usize,
    steps: usize,
    seed: u64,
    edm: &EdmConfig,
    sampler: &SamplerConfig,
) -> Result<Array4<f32>> {
    let batch = build_batch(
        None,
        Some(views.index_axis(Axis(0), condition_index)),
        condition_index,
        Some(views.view()),
        poses,
        model.config.patch,
    )?;
    if steps == 0 {
        return Ok(views.clone());
    }
    let schedule = NoiseSchedule::<f32>::from_config(sampler.steps, edm)?;
    let ladder = &schedule.sigmas[schedule.steps() - steps.min(schedule.steps())..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_latent(&batch.targets, &mut rng);
    let mut x = batch.targets.clone();
    x.data.zip_mut_with(&eps.data, |v, &e| *v += ladder[0] * e);
    let net = BoundDenoiser {
        model,
        inputs: &batch.inputs,
    };
    let clean = run_ladder(&net, x, ladder, schedule.sigma_data, sampler.cfg_scale as f32)?;
    let refined = latents_to_images(&clean)?;
    let mut out = views.clone();
    for (k, &v) in batch.target_views.iter().enumerate() {
        out.index_axis_mut(Axis(0), v).assign(&refined.index_axis(Axis(0), k));
    }
    Ok(out)
}

fn pick_recolor(rng: &mut ChaCha8Rng, current: [f64; 3]) -> [f64; 3] {
    loop {
        let c = PALETTE[rng.random_range(0..PALETTE.len())];
        let dist: f64 = (0..3).map(|i| (c[i] - current[i]).powi(2)).sum::<f64>().sqrt();
        if dist > 0.25 {
            return c;
        }
    }
}

pub fn task_of(instruction: &EditInstruction) -> Task {
    match instruction.op {
        EditOp::Remove { .. } => Task::Removal,
        EditOp::Add { .. } => Task::Addition,
        EditOp::Recolor { .. } => Task::Recolor,
    }
}

/// Silhouette of the edited object in whichever world contains it.
pub fn edit_masks_for(
    scene: &SceneSpec,
    target_scene: &SceneSpec,
    instruction: &EditInstruction,
    poses: &[CameraPose<f64>],
) -> Result<Array3<f32>> {
    let (world, id) = match &instruction.op {
        EditOp::Remove { object_id } | EditOp::Recolor { object_id, .. } => (scene, *object_id),
        EditOp::Add { new_primitive } => (target_scene, new_primitive.id),
    };
    ensure!(!poses.is_empty(), "no cameras");
    let (h, w) = (poses[0].height(), poses[0].width());
    let mut masks = Array3::zeros((poses.len(), h, w));
    for (v, pose) in poses.iter().enumerate() {
        masks.index_axis_mut(Axis(0), v).assign(&render_with_hits(world, pose).object_mask(id));
    }
    Ok(masks)
}

/// Full pipeline for one sample. `refiner`, when given, harmonizes the
/// jittered edited views before packaging.
pub fn generate_pair(task: Task, seed: u64, cfg: &PipelineConfig, refiner: Option<&dyn Refiner>) -> Result<PairedSample> {
    cfg.validate()?;
    if task == Task::Addition {
        let removal = generate_pair(Task::Removal, seed, cfg, refiner)?;
        let mut sample = invert_for_addition(&removal)?;
        sample.seed = seed;
        return Ok(sample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xda7a));
    for attempt in 0..cfg.max_resamples {
        let scene_seed = derive_seed(seed, attempt as u64 + 1);
        let scene = sample_scene(scene_seed);
        let poses = orbit_poses(scene_seed, cfg.views, cfg.height, cfg.width)?;
        let Some(object) = propose_removal_target(&scene, &poses) else { continue };
        let instruction = match task {
            Task::Removal => EditInstruction::remove(&scene, object)?,
            _ => {
                let current = scene.primitive(object).expect("proposed id exists").albedo;
                EditInstruction::recolor(&scene, object, pick_recolor(&mut rng, current))?
            }
        };
        let target_scene = apply_edit(&scene, &instruction)?;
        let source_views = render_stack(&scene, &poses);
        let clean_targets = render_stack(&target_scene, &poses);
        let edit_masks = edit_masks_for(&scene, &target_scene, &instruction, &poses)?;
        let mut provenance = vec![
            format!("scene:{scene_seed}"),
            format!("target:{object}"),
            format!("instruction:{}", instruction.text),
            "render".to_string(),
            "edit_render".to_string(),
        ];
        let condition_index = rng.random_range(0..cfg.views);
        let mut target_views = clean_targets;
        if cfg.jitter.enabled {
            target_views = per_view_jitter(&target_views, &edit_masks, derive_seed(seed, 0x7177), &cfg.jitter)?;
            provenance.push(format!("jitter:{}/{}", cfg.jitter.offset, cfg.jitter.noise_std));
        }
        if let Some(r) = refiner {
            target_views = r.refine(&target_views, &poses, condition_index, derive_seed(seed, 0x4ef1))?;
            provenance.push("refine".to_string());
        }
        return Ok(PairedSample {
            task,
            seed,
            scene,
            target_scene,
            source_views,
            target_views,
            condition_index,
            poses,
            instruction,
            edit_masks,
            provenance,
        });
    }
    Err(Error::GenerationExhausted(format!(
        "no valid edit target after {} scene draws (seed {seed})",
        cfg.max_resamples
    )))
}

/// Removal pair → addition pair: views and worlds swap roles, so the new
/// targets are the original, consistent renders.
pub fn invert_for_addition(sample: &PairedSample) -> Result<PairedSample> {
    let (task, instruction) = match (&sample.task, &sample.instruction.op) {
        (Task::Removal, EditOp::Remove { object_id }) => {
            let p = sample
                .scene
                .primitive(*object_id)
                .ok_or_else(|| Error::invalid("removed object missing from the source world"))?
                .clone();
            (Task::Addition, EditInstruction::add(p))
        }
        (Task::Addition, EditOp::Add { new_primitive }) => {
            (Task::Removal, EditInstruction::remove(&sample.target_scene, new_primitive.id)?)
        }
        _ => return Err(Error::invalid(format!("cannot invert a {} sample", sample.task.name()))),
    };
    let mut provenance = sample.provenance.clone();
    provenance.push("invert".to_string());
    Ok(PairedSample {
        task,
        seed: sample.seed,
        scene: sample.target_scene.clone(),
        target_scene: sample.scene.clone(),
        source_views: sample.target_views.clone(),
        target_views: sample.source_views.clone(),
        condition_index: sample.condition_index,
        poses: sample.poses.clone(),
        instruction,
        edit_masks: sample.edit_masks.clone(),
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    /// Edited region matches the ground-truth edit.
    EditFidelity,
    /// Everything outside the edit is preserved.
    Preservation,
    /// Edited region agrees across views.
    Consistency,
}

impl FilterRule {
    pub fn code(self) -> &'static str {
        match self {
            FilterRule::EditFidelity => "a",
            FilterRule::Preservation => "b",
            FilterRule::Consistency => "c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(FilterRule),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail(rule) => write!(f, "fail:({})", rule.code()),
        }
    }
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pass" => Ok(Verdict::Pass),
            "fail:(a)" => Ok(Verdict::Fail(FilterRule::EditFidelity)),
            "fail:(b)" => Ok(Verdict::Fail(FilterRule::Preservation)),
            "fail:(c)" => Ok(Verdict::Fail(FilterRule::Consistency)),
            _ => Err(Error::invalid(format!("unknown verdict `{s}`"))),
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Verdict plus the statistics behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub verdict: Verdict,
    pub psnr_inside: f64,
    pub psnr_outside: f64,
    /// `None` when no masked pixel is seen by two views.
    pub variance: Option<f64>,
}

/// Rules are checked consistency first, then edit fidelity, then
/// preservation; the verdict names the first failure.
pub fn quality_filter(sample: &PairedSample, t: &FilterThresholds) -> Result<FilterReport> {
    let gt = sample.ground_truth();
    let masks = sample.edit_masks.view();
    let inside = psnr_from_mse(masked_mse(sample.target_views.view(), gt.view(), masks, true)?);
    let outside = psnr_from_mse(masked_mse(sample.target_views.view(), gt.view(), masks, false)?);
    let variance = cross_view_variance(sample.target_views.view(), &sample.target_scene, &sample.poses, masks)?;
    let verdict = if variance.is_some_and(|v| v > t.max_variance) {
        Verdict::Fail(FilterRule::Consistency)
    } else if inside < t.min_psnr_inside {
        Verdict::Fail(FilterRule::EditFidelity)
    } else if outside < t.min_psnr_outside {
        Verdict::Fail(FilterRule::Preservation)
    } else {
        Verdict::Pass
    };
    Ok(FilterReport {
        verdict,
        psnr_inside: inside,
        psnr_outside: outside,
        variance,
    })
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dir: String,
    pub task: Task,
    pub seed: u64,
    pub verdict: Verdict,
    pub report: FilterReport,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub thresholds: FilterThresholds,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    task: Task,
    seed: u64,
    condition_index: usize,
    provenance: Vec<String>,
}

/// Seed of sample `index` of a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0x5a3e_0000 + index as u64)
}

/// `count` samples; `task = None` draws each task uniformly.
pub fn generate_dataset(
    task: Option<Task>,
    count: usize,
    seed: u64,
    cfg: &PipelineConfig,
    refiner: Option<&dyn Refiner>,
) -> Result<Vec<PairedSample>> {
    use rayon::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a5c));
    let tasks: Vec<Task> = (0..count)
        .map(|_| task.unwrap_or_else(|| Task::ALL[rng.random_range(0..3)]))
        .collect();
    tasks
        .into_par_iter()
        .enumerate()
        .map(|(i, t)| generate_pair(t, sample_seed(seed, i), cfg, refiner))
        .collect()
}

fn write_views(dir: &Path, prefix: &str, views: ArrayView4<f32>, files: &mut Vec<String>) -> Result<()> {
    for (i, v) in views.outer_iter().enumerate() {
        let name = format!("{prefix}_{i:02}.f32");
        write_tensor(&dir.join(&name), v.into_dyn())?;
        files.push(name);
        let png = format!("{prefix}_{i:02}.png");
        write_png(&dir.join(&png), v)?;
    }
    Ok(())
}

pub fn write_dataset(samples: &[PairedSample], dir: &Path, thresholds: &FilterThresholds) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (k, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let name = format!("sample_{k:04}");
        let sdir = dir.join(&name);
        let mut files = Vec::new();
        write_views(&sdir, "src", sample.source_views.view(), &mut files)?;
        write_views(&sdir, "tgt", sample.target_views.view(), &mut files)?;
        for (i, m) in sample.edit_masks.outer_iter().enumerate() {
            let f = format!("masks_{i:02}.f32");
            write_tensor(&sdir.join(&f), m.into_dyn())?;
            files.push(f);
        }
        let json_files: [(&str, serde_json::Value); 5] = [
            ("poses.json", poses_to_json(&sample.poses)),
            ("instruction.json", to_value(&sample.instruction)?),
            ("scene.json", to_value(&sample.scene)?),
            ("target_scene.json", to_value(&sample.target_scene)?),
            (
                "meta.json",
                to_value(&SampleMeta {
                    task: sample.task,
                    seed: sample.seed,
                    condition_index: sample.condition_index,
                    provenance: sample.provenance.clone(),
                })?,
            ),
        ];
        for (f, value) in json_files {
            write_json(&sdir.join(f), &value)?;
            files.push(f.to_string());
        }
        let report = quality_filter(sample, thresholds)?;
        entries.push(ManifestEntry {
            dir: name,
            task: sample.task,
            seed: sample.seed,
            verdict: report.verdict,
            report,
            files,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        thresholds: *thresholds,
        samples: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn to_value<V: Serialize>(v: &V) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::invalid(e.to_string()))
}

fn read_views(dir: &Path, prefix: &str, n: usize) -> Result<Array4<f32>> {
    let views: Vec<Array3<f32>> = (0..n)
        .map(|i| {
            let path = dir.join(format!("{prefix}_{i:02}.f32"));
            read_tensor::<f32>(&path)?
                .into_dimensionality()
                .map_err(|e| Error::Corrupt { path, reason: e.to_string() })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::stack(Axis(0), &refs).map_err(|e| Error::Corrupt {
        path: dir.into(),
        reason: e.to_string(),
    })
}

pub fn read_sample(dir: &Path) -> Result<PairedSample> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let poses_value: serde_json::Value = read_json(&dir.join("poses.json"))?;
    let poses = poses_from_json::<f64>(&poses_value)?;
    let n = poses.len();
    let masks = read_views_2d(dir, n)?;
    let sample = PairedSample {
        task: meta.task,
        seed: meta.seed,
        scene: read_json(&dir.join("scene.json"))?,
        target_scene: read_json(&dir.join("target_scene.json"))?,
        source_views: read_views(dir, "src", n)?,
        target_views: read_views(dir, "tgt", n)?,
        condition_index: meta.condition_index,
        poses,
        instruction: read_json(&dir.join("instruction.json"))?,
        edit_masks: masks,
        provenance: meta.provenance,
    };
    sample.validate().map_err(|e| Error::Corrupt {
        path: dir.into(),
        reason: e.to_string(),
    })?;
    Ok(sample)
}

fn read_views_2d(dir: &Path, n: usize) -> Result<Array3<f32>> {
    let masks: Vec<ndarray::Array2<f32>> = (0..n)
        .map(|i| {
            let path = dir.join(format!("masks_{i:02}.f32"));
            read_tensor::<f32>(&path)?
                .into_dimensionality()
                .map_err(|e| Error::Corrupt { path, reason: e.to_string() })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<_> = masks.iter().map(|v| v.view()).collect();
    ndarray::stack(Axis(0), &refs).map_err(|e| Error::Corrupt {
        path: dir.into(),
        reason: e.to_string(),
    })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Corrupt {
            path: dir.join("manifest.json"),
            reason: format!("unsupported dataset version {}", manifest.version),
        });
    }
    for e in &manifest.samples {
        for f in &e.files {
            let p: PathBuf = dir.join(&e.dir).join(f);
            if !p.exists() {
                return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest")));
            }
        }
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| read_sample(&dir.join(&e.dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
