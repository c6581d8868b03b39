//! Two-phase optimization: a base multi-view generator trained on
//! novel-view synthesis, then frozen while edit adapters are trained on
//! paired editing samples.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::datapipe::{build_batch, render_stack, sample_batch, ModelBatch, PairedSample, Task};
use crate::denoiser::{is_adapter_param, is_finetune_param, Denoiser, DenoiserConfig, EditInputs, Variant, ViewBatch};
use crate::diffusion::{masked_loss, precondition, training_sigma, Branch, EdmConfig};
use crate::error::{ensure, Error, Result};
use crate::geometry::CameraPose;
use crate::params::{name_seed, ParamStore};
use crate::scalar::Scalar;
use crate::scene::{orbit_poses, sample_scene};
use crate::tensor_io::{read_container, write_container};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ucg_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_phase(Phase::Pretrain)
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        Self {
            phase,
            steps: match phase {
                Phase::Pretrain => 2000,
                Phase::Finetune => 4000,
            },
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ucg_rate: 0.2,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps > 0 && self.batch > 0, "steps and batch must be positive");
        ensure!((0.0..=1.0).contains(&self.ucg_rate), "UCG rate {} outside [0, 1]", self.ucg_rate);
        ensure!(self.lr > 0.0 && self.eps > 0.0, "learning rate and epsilon must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "moment coefficients must lie in [0, 1)"
        );
        ensure!(self.weight_decay >= 0.0 && self.clip_norm >= 0.0, "weight decay and clip norm must be non-negative");
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(trainable: &ParamStore<T>) -> Self {
        Self {
            m: trainable.zeros_like(),
            v: trainable.zeros_like(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter that has a gradient.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
        state.step += 1;
        let t = state.step as i32;
        let lr = T::lit(self.lr);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - T::lit(self.beta1.powi(t));
        let bc2 = T::one() - T::lit(self.beta2.powi(t));
        let eps = T::lit(self.eps);
        let decay = T::one() - lr * T::lit(self.weight_decay);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = state.m.get_mut(name)?;
            ensure!(p.dim() == g.dim() && m.dim() == g.dim(), "gradient shape mismatch for `{name}`");
            ndarray::Zip::from(&mut *p).and(&mut *m).and(g).for_each(|p, m, &g| {
                *p *= decay;
                *m = b1 * *m + (T::one() - b1) * g;
            });
            let v = state.v.get_mut(name)?;
            let m = state.m.get(name)?;
            ndarray::Zip::from(p).and(v).and(m).and(g).for_each(|p, v, &m, &g| {
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Rescale `grads` to global norm `max_norm` if it is larger. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm().to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// One supervised denoising problem.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub inputs: EditInputs<T>,
    /// Clean target latents.
    pub targets: LatentGrid<T>,
    /// Which target latent entries enter the loss.
    pub mask: ndarray::Array4<bool>,
}

impl Example<f32> {
    pub fn from_batch(batch: ModelBatch) -> Self {
        let mask = Array4::from_elem(batch.targets.data.raw_dim(), true);
        Self {
            inputs: batch.inputs,
            targets: batch.targets,
            mask,
        }
    }
}

/// Noise draw and branch of one example in a step.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T> {
    pub sigma: T,
    pub eps: LatentGrid<T>,
    pub branch: Branch,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn draw(template: &LatentGrid<T>, edm: &EdmConfig, ucg_rate: f64, rng: &mut impl Rng) -> Self {
        let sigma = training_sigma(rng, edm);
        let eps = LatentGrid {
            data: template.data.mapv(|_| T::lit(rng.sample::<f64, _>(StandardNormal))),
            patch: template.patch,
        };
        let branch = if rng.random::<f64>() < ucg_rate {
            Branch::Unconditional
        } else {
            Branch::Conditional
        };
        Self { sigma, eps, branch }
    }
}

/// Loss and parameter gradients of one example.
#[derive(Debug, Clone)]
pub struct ExampleGrad<T> {
    pub loss: T,
    pub grads: ParamStore<T>,
    pub condition: Option<LatentGrid<T>>,
    pub sources: Option<LatentGrid<T>>,
}

/// Target-only loss `mean_mask (D − y)² / σ²` and its gradients.
pub fn example_loss_and_grad<T: Scalar>(
    model: &Denoiser<T>,
    ex: &Example<T>,
    noise: &NoiseDraw<T>,
    edm: &EdmConfig,
) -> Result<ExampleGrad<T>> {
    let mut x = ex.targets.clone();
    x.data.zip_mut_with(&noise.eps.data, |y, &e| *y += noise.sigma * e);
    loss_at(model, &ex.inputs, &x, &ex.targets, &ex.mask, noise.sigma, noise.branch, edm)
}

/// Loss and gradients for an explicit noisy input `x`.
#[allow(clippy::too_many_arguments)]
pub fn loss_at<T: Scalar>(
    model: &Denoiser<T>,
    inputs: &EditInputs<T>,
    x: &LatentGrid<T>,
    y: &LatentGrid<T>,
    mask: &Array4<bool>,
    sigma: T,
    branch: Branch,
    edm: &EdmConfig,
) -> Result<ExampleGrad<T>> {
    let k = precondition(sigma, T::lit(edm.sigma_data));
    let scaled = LatentGrid {
        data: x.data.mapv(|v| v * k.c_in),
        patch: x.patch,
    };
    let (f, cache) = model.forward_cached(inputs, &scaled, k.c_noise, branch)?;
    let mut d = x.data.clone();
    d.zip_mut_with(&f.data, |xv, &fv| *xv = k.c_skip * *xv + k.c_out * fv);
    let loss = masked_loss(d.view(), y.data.view(), sigma, mask.view())?;
    let d_out = LatentGrid {
        data: loss.grad.mapv(|g| g * k.c_out),
        patch: x.patch,
    };
    let g = model.backward(&cache, &d_out)?;
    Ok(ExampleGrad {
        loss: loss.value,
        grads: g.params,
        condition: g.condition,
        sources: g.sources,
    })
}

/// Where training examples come from.
pub trait ExampleStream: Sync {
    /// Example `index` of step `step`; must depend only on its arguments.
    fn example(&self, step: usize, index: usize, rng: &mut ChaCha8Rng) -> Result<Example<f32>>;
}

/// Unedited scenes for novel-view pretraining: one clean view is the
/// condition, the remaining views are targets.
#[derive(Debug, Clone, Copy)]
pub struct SceneStream {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl SceneStream {
    pub fn scene_example(&self, scene_seed: u64, condition_index: usize) -> Result<Example<f32>> {
        let scene = sample_scene(scene_seed);
        let poses: Vec<CameraPose<f64>> = orbit_poses(scene_seed, self.views, self.height, self.width)?;
        let views = render_stack(&scene, &poses);
        let batch = build_batch(
            None,
            Some(views.index_axis(Axis(0), condition_index)),
            condition_index,
            Some(views.view()),
            &poses,
            self.patch,
        )?;
        Ok(Example::from_batch(batch))
    }
}

impl ExampleStream for SceneStream {
    fn example(&self, _step: usize, _index: usize, rng: &mut ChaCha8Rng) -> Result<Example<f32>> {
        let scene_seed = rng.random::<u64>();
        let condition = rng.random_range(0..self.views);
        self.scene_example(scene_seed, condition)
    }
}

/// Paired editing samples; the task is drawn uniformly first, then a
/// sample of that task.
pub struct PairStream<'a> {
    pub by_task: Vec<(Task, Vec<&'a PairedSample>)>,
    pub patch: usize,
}

impl<'a> PairStream<'a> {
    pub fn new(samples: &'a [PairedSample], patch: usize) -> Result<Self> {
        let mut by_task: BTreeMap<u8, (Task, Vec<&PairedSample>)> = BTreeMap::new();
        for s in samples {
            by_task.entry(s.task as u8).or_insert((s.task, Vec::new())).1.push(s);
        }
        ensure!(!by_task.is_empty(), "finetuning needs at least one editing sample");
        Ok(Self {
            by_task: by_task.into_values().collect(),
            patch,
        })
    }
}

impl ExampleStream for PairStream<'_> {
    fn example(&self, _step: usize, _index: usize, rng: &mut ChaCha8Rng) -> Result<Example<f32>> {
        let (_, pool) = &self.by_task[rng.random_range(0..self.by_task.len())];
        let sample = pool[rng.random_range(0..pool.len())];
        Ok(Example::from_batch(sample_batch(sample, self.patch)?))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub dropped: usize,
}

fn step_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(name_seed(seed, &format!("step{step}.example{index}")))
}

/// Summed parameter gradients and mean loss of one step's batch.
pub struct StepGradients {
    pub loss: f64,
    pub grads: ParamStore<f32>,
    pub dropped: usize,
}

/// Batch gradient of step `step` (0-based). Per-example gradients are
/// computed in parallel and summed in index order.
pub fn step_gradients(
    model: &Denoiser<f32>,
    stream: &dyn ExampleStream,
    cfg: &TrainConfig,
    edm: &EdmConfig,
    step: usize,
) -> Result<StepGradients> {
    let parts: Vec<Result<(ExampleGrad<f32>, bool)>> = (0..cfg.batch)
        .into_par_iter()
        .map(|i| {
            let mut rng = step_rng(cfg.seed, step, i);
            let ex = stream.example(step, i, &mut rng)?;
            let noise = NoiseDraw::draw(&ex.targets, edm, cfg.ucg_rate, &mut rng);
            let dropped = noise.branch == Branch::Unconditional;
            Ok((example_loss_and_grad(model, &ex, &noise, edm)?, dropped))
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    let mut dropped = 0;
    for part in parts {
        let (g, d) = part.map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {}: {m}", step + 1)),
            other => other,
        })?;
        loss += g.loss.to_f64_lossy();
        total.accumulate(&g.grads);
        dropped += usize::from(d);
    }
    let n = cfg.batch as f32;
    total.scale(1.0 / n);
    let loss = loss / cfg.batch as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at step {}", step + 1)));
    }
    Ok(StepGradients { loss, grads: total, dropped })
}

/// Model, optimizer state and where the run is.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub optim: OptimState<f32>,
    pub config: TrainConfig,
    pub edm: EdmConfig,
    /// Completed steps.
    pub step: usize,
}

pub fn trainable(phase: Phase) -> fn(&str) -> bool {
    match phase {
        Phase::Pretrain => |n| !is_adapter_param(n),
        Phase::Finetune => is_finetune_param,
    }
}

impl TrainState {
    pub fn new(model: Denoiser<f32>, config: TrainConfig, edm: EdmConfig) -> Result<Self> {
        config.validate()?;
        if config.phase == Phase::Pretrain {
            ensure!(
                model.config.variant == Variant::Zeroshot,
                "the base model is pretrained as the zeroshot variant"
            );
        }
        let keep = trainable(config.phase);
        let optim = OptimState::new(&model.params.subset(keep));
        Ok(Self {
            model,
            optim,
            config,
            edm,
            step: 0,
        })
    }

    /// Fresh zeroshot base for pretraining.
    pub fn pretrain(model_cfg: &DenoiserConfig, config: TrainConfig, edm: EdmConfig) -> Result<Self> {
        let mut base_cfg = model_cfg.clone();
        base_cfg.variant = Variant::Zeroshot;
        let model = Denoiser::init(base_cfg, config.seed)?;
        Self::new(model, TrainConfig { phase: Phase::Pretrain, ..config }, edm)
    }

    /// Edit model with fresh adapters on top of a frozen base.
    pub fn finetune(base: &Denoiser<f32>, model_cfg: &DenoiserConfig, config: TrainConfig, edm: EdmConfig) -> Result<Self> {
        let model = Denoiser::from_base(base, model_cfg.clone(), config.seed)?;
        Self::new(model, TrainConfig { phase: Phase::Finetune, ..config }, edm)
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Run one optimizer step.
    pub fn step(&mut self, stream: &dyn ExampleStream) -> Result<StepMetrics> {
        let sg = step_gradients(&self.model, stream, &self.config, &self.edm, self.step)?;
        let mut grads = sg.grads.subset(trainable(self.config.phase));
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        self.config.adamw().step(&mut self.model.params, &grads, &mut self.optim)?;
        if !self.model.params.is_finite() {
            return Err(Error::Numerical(format!("non-finite weights after step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(StepMetrics {
            phase: self.config.phase,
            step: self.step,
            loss: sg.loss,
            grad_norm,
            lr: self.config.lr,
            dropped: sg.dropped,
        })
    }

    /// Train until `config.steps`, logging every step and checkpointing to
    /// `out` when given.
    pub fn run(&mut self, stream: &dyn ExampleStream, out: Option<&Path>, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        while !self.done() {
            let m = self.step(stream)?;
            if let Some((path, file)) = log.as_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&m);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && !self.done() {
                    self.save(&checkpoint_base(dir))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&checkpoint_base(dir))?;
        }
        Ok(())
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        save_model(base, &self.model, self.config.phase, self.step)?;
        let meta = serde_json::json!({
            "step": self.step,
            "optim_step": self.optim.step,
            "train": self.config,
            "edm": self.edm,
        });
        let mut both = ParamStore::new();
        for (n, a) in self.optim.m.iter() {
            both.insert(format!("m/{n}"), a.clone());
        }
        for (n, a) in self.optim.v.iter() {
            both.insert(format!("v/{n}"), a.clone());
        }
        write_container(&optim_base(base), &both, meta)
    }

    /// Resume a run saved by [`TrainState::save`]. `steps` may extend the
    /// original target.
    pub fn resume(base: &Path, steps: Option<usize>) -> Result<Self> {
        let (model, _) = load_model(base)?;
        let (store, meta) = read_container::<f32>(&optim_base(base))?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: optim_base(base),
            reason: reason.to_string(),
        };
        let mut config: TrainConfig =
            serde_json::from_value(meta["train"].clone()).map_err(|e| corrupt(&e.to_string()))?;
        let edm: EdmConfig = serde_json::from_value(meta["edm"].clone()).map_err(|e| corrupt(&e.to_string()))?;
        let step = meta["step"].as_u64().ok_or_else(|| corrupt("missing step"))? as usize;
        let optim_step = meta["optim_step"].as_u64().ok_or_else(|| corrupt("missing optimizer step"))?;
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, a) in store.iter() {
            match name.split_once('/') {
                Some(("m", n)) => m.insert(n, a.clone()),
                Some(("v", n)) => v.insert(n, a.clone()),
                _ => return Err(corrupt(&format!("unexpected tensor `{name}`"))),
            }
        }
        if let Some(s) = steps {
            config.steps = s;
        }
        Ok(Self {
            model,
            optim: OptimState { m, v, step: optim_step },
            config,
            edm,
            step,
        })
    }
}

pub fn checkpoint_base(dir: &Path) -> PathBuf {
    dir.join("model")
}

fn optim_base(base: &Path) -> PathBuf {
    let stem = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    base.with_file_name(format!("{stem}_optim"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub phase: Phase,
    pub step: usize,
}

pub fn save_model(base: &Path, model: &Denoiser<f32>, phase: Phase, step: usize) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        phase,
        step,
    };
    write_container(base, &model.params, serde_json::to_value(&meta).expect("meta serializes"))
}

/// Load a checkpoint written by [`save_model`]. A missing file is a
/// configuration error naming the path.
pub fn load_model(base: &Path) -> Result<(Denoiser<f32>, CheckpointMeta)> {
    let (_, index) = crate::tensor_io::container_paths(base);
    if !index.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", index.display())));
    }
    let (params, meta) = read_container::<f32>(base)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Corrupt {
        path: index.clone(),
        reason: e.to_string(),
    })?;
    meta.config.validate()?;
    Ok((
        Denoiser {
            config: meta.config.clone(),
            params,
        },
        meta,
    ))
}

/// Names of parameters whose step-1 batch gradient is exactly zero.
pub fn dead_parameters(grads: &ParamStore<f32>, keep: impl Fn(&str) -> bool) -> Vec<String> {
    grads
        .iter()
        .filter(|(n, g)| keep(n) && g.iter().all(|&x| x == 0.0))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Worst finite-difference disagreement of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// `max |analytic − numeric| / max |analytic|` over the checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&GroupCheck> {
        // NaN errors count as failures
        self.groups.iter().filter(|g| g.max_rel_err.is_nan() || g.max_rel_err >= self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// A small `f64` problem for gradient checking.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub model: Denoiser<f64>,
    pub example: Example<f64>,
    pub noise: NoiseDraw<f64>,
    pub edm: EdmConfig,
}

impl GradProblem {
    /// `d=16`, 2 blocks, 4×4 latents, 2 sources, 2 targets; every weight
    /// (adapters included) is perturbed away from its initialization so no
    /// gradient is structurally zero.
    pub fn tiny(variant: Variant, branch: Branch, seed: u64) -> Result<Self> {
        let cfg = DenoiserConfig {
            dim: 16,
            blocks: 2,
            heads: 2,
            patch: 1,
            ff_mult: 2,
            variant,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..DenoiserConfig::default()
        };
        let mut model = Denoiser::<f64>::init(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
        for (_, p) in model.params.iter_mut() {
            p.mapv_inplace(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let (h, w, c) = (4, 4, 3);
        let lat = |v: usize, rng: &mut ChaCha8Rng| LatentGrid {
            data: Array4::from_shape_simple_fn((v, c, h, w), || rng.random_range(-1.0..1.0)),
            patch: 1,
        };
        let rays = |v: usize, rng: &mut ChaCha8Rng| Array4::from_shape_simple_fn((v, 6, h, w), || rng.random_range(-1.0..1.0));
        let inputs = EditInputs {
            sources: Some(ViewBatch::new(lat(3, &mut rng), rays(3, &mut rng))?),
            condition: Some(ViewBatch::new(lat(1, &mut rng), rays(1, &mut rng))?),
            target_pose: rays(2, &mut rng),
            target_sources: vec![0, 2],
        };
        let targets = lat(2, &mut rng);
        let eps = lat(2, &mut rng);
        let mask = Array4::from_shape_simple_fn((2, c, h, w), || rng.random::<f64>() < 0.7);
        Ok(Self {
            model,
            example: Example { inputs, targets, mask },
            noise: NoiseDraw { sigma: 0.8, eps, branch },
            edm: EdmConfig::default(),
        })
    }

    pub fn loss(&self, model: &Denoiser<f64>) -> Result<f64> {
        Ok(example_loss_and_grad(model, &self.example, &self.noise, &self.edm)?.loss)
    }

    pub fn analytic(&self) -> Result<ParamStore<f64>> {
        Ok(example_loss_and_grad(&self.model, &self.example, &self.noise, &self.edm)?.grads)
    }
}

/// Compare `analytic` with central differences of the problem loss, for up
/// to `per_group` entries of every parameter tensor (the largest analytic
/// entry always included).
pub fn grad_check_against(
    problem: &GradProblem,
    analytic: &ParamStore<f64>,
    tolerance: f64,
    per_group: usize,
) -> Result<GradCheckReport> {
    let h = 1e-5;
    let names: Vec<String> = problem.model.params.names().map(String::from).collect();
    let groups = names
        .par_iter()
        .map(|name| {
            let p = problem.model.params.get(name)?;
            let g = analytic.get(name)?;
            let n = p.len();
            let mut idx: Vec<usize> = if n <= per_group {
                (0..n).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(7, name));
                (0..per_group).map(|_| rng.random_range(0..n)).collect()
            };
            let argmax = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            idx.push(argmax);
            idx.sort_unstable();
            idx.dedup();
            let cols = p.ncols();
            let mut model = problem.model.clone();
            let (mut max_diff, mut max_abs) = (0.0f64, 0.0f64);
            for &k in &idx {
                let at = (k / cols, k % cols);
                let orig = p[at];
                model.params.get_mut(name)?[at] = orig + h;
                let plus = problem.loss(&model)?;
                model.params.get_mut(name)?[at] = orig - h;
                let minus = problem.loss(&model)?;
                model.params.get_mut(name)?[at] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                max_diff = max_diff.max((numeric - g[at]).abs());
                max_abs = max_abs.max(g[at].abs()).max(numeric.abs());
            }
            let max_rel_err = if max_abs == 0.0 { 0.0 } else { max_diff / max_abs };
            Ok(GroupCheck {
                name: name.clone(),
                max_rel_err,
                checked: idx.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { tolerance, groups })
}

pub fn grad_check(problem: &GradProblem, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_against(problem, &problem.analytic()?, tolerance, 24)
}

impl GradProblem {
    /// Noisy input of the problem.
    pub fn noisy(&self) -> LatentGrid<f64> {
        let mut x = self.example.targets.clone();
        x.data.scaled_add(self.noise.sigma, &self.noise.eps.data);
        x
    }

    /// Loss and gradients with the clean targets replaced by `y` and the
    /// noisy input held fixed.
    pub fn with_targets(&self, y: &LatentGrid<f64>) -> Result<ExampleGrad<f64>> {
        let ex = &self.example;
        let n = &self.noise;
        loss_at(&self.model, &ex.inputs, &self.noisy(), y, &ex.mask, n.sigma, n.branch, &self.edm)
    }
}

/// Largest absolute entry of a gradient store.
pub fn max_abs(store: &ParamStore<f64>) -> f64 {
    store.iter().flat_map(|(_, a)| a.iter()).fold(0.0f64, |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests;
