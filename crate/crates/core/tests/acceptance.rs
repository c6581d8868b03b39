//! Acceptance criteria, one line per criterion.
//!
//! ```text
//! cargo test -p mvedit --test acceptance                 # criteria 1-6
//! cargo test -p mvedit --test acceptance -- --ignored    # 7-10 as well (trains models)
//! cargo test -p mvedit --test acceptance -- 4 7          # only the listed criteria
//! ```
//!
//! Criteria 7-10 train every ablation arm. `MVEDIT_ACCEPT_BUDGET=reduced`
//! selects a smaller labeled budget; trained checkpoints are cached under
//! `MVEDIT_ACCEPT_DIR` (default: the cargo target tmp dir) and reused.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvedit::codec::LatentGrid;
use mvedit::datapipe::{
    build_batch, consistency_refine, generate_dataset, quality_filter, read_dataset, render_stack, write_dataset,
    PairedSample, PipelineConfig, Task, Verdict,
};
use mvedit::denoiser::{Denoiser, DenoiserConfig, EditInputs, Variant, ViewBatch};
use mvedit::diffusion::{
    denoised, euler_step, precondition, sample, Branch, DenoiserForm, EdmConfig, NoiseSchedule, SamplerConfig,
};
use mvedit::evaluation::ablation::{arm_dir, base_dir};
use mvedit::evaluation::{
    cross_view_consistency_masked, evaluate_set, median, probe_mass, run_ablation, train_arms, Arm, EditSettings,
    TrainBudget,
};
use mvedit::geometry::{axis_angle, cross, dot, norm, normalize_cameras, plucker_map, CameraPose, Intrinsics};
use mvedit::training::{checkpoint_base, grad_check, load_model, GradProblem, Phase, TrainConfig};
use mvedit::Denoiser64;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    heavy: bool,
    run: fn(&Ctx) -> Result<Outcome>,
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "zero-init adapter equivalence",
        limit: Duration::from_secs(10),
        heavy: false,
        run: zero_init_equivalence,
    },
    Criterion {
        id: 2,
        name: "gradient correctness",
        limit: Duration::from_secs(120),
        heavy: false,
        run: gradient_correctness,
    },
    Criterion {
        id: 3,
        name: "target-only loss",
        limit: Duration::from_secs(10),
        heavy: false,
        run: target_only_loss,
    },
    Criterion {
        id: 4,
        name: "EDM kernel identities",
        limit: Duration::from_secs(30),
        heavy: false,
        run: edm_identities,
    },
    Criterion {
        id: 5,
        name: "Plücker and normalization invariants",
        limit: Duration::from_secs(30),
        heavy: false,
        run: camera_invariants,
    },
    Criterion {
        id: 6,
        name: "data pipeline invariants",
        limit: Duration::from_secs(300),
        heavy: false,
        run: pipeline_invariants,
    },
    Criterion {
        id: 7,
        name: "consistency refinement efficacy",
        limit: Duration::from_secs(600),
        heavy: true,
        run: refinement_efficacy,
    },
    Criterion {
        id: 8,
        name: "directional ablation",
        limit: Duration::from_secs(3 * 3600),
        heavy: true,
        run: directional_ablation,
    },
    Criterion {
        id: 9,
        name: "end-to-end editing",
        limit: Duration::from_secs(900),
        heavy: true,
        run: end_to_end_editing,
    },
    Criterion {
        id: 10,
        name: "attention probe",
        limit: Duration::from_secs(60),
        heavy: true,
        run: attention_probe,
    },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let heavy = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion_{:02}: test", c.id);
        }
        return;
    }
    let ctx = Ctx::new();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        if c.heavy && !heavy {
            println!("criterion {:>2}  {:<38} SKIP  trains models; run with --ignored", c.id, c.name);
            continue;
        }
        let mut train_note = String::new();
        if c.heavy {
            match ctx.trained() {
                Ok(t) => train_note = format!("; budget {}, training {:.0} s", t.label, t.train_secs),
                Err(e) => {
                    failed += 1;
                    println!("criterion {:>2}  {:<38} FAIL  training: {e}", c.id, c.name);
                    continue;
                }
            }
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| (c.run)(&ctx)));
        let took = start.elapsed();
        let o = match result {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => outcome(false, format!("error: {e}")),
            Err(_) => outcome(false, "panicked"),
        };
        let in_time = took <= c.limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let time_note = if in_time {
            String::new()
        } else {
            format!(" (over the {:.0} s limit)", c.limit.as_secs_f64())
        };
        println!(
            "criterion {:>2}  {:<38} {}  {}; {:.1} s{time_note}{train_note}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn random_inputs(cfg: &DenoiserConfig, n_src: usize, n_tgt: usize, rng: &mut ChaCha8Rng) -> Result<(EditInputs<f64>, LatentGrid<f64>)> {
    let (h, w) = (3, 3);
    let ch = cfg.channels();
    let mut lat = |v: usize| {
        LatentGrid::new(Array4::from_shape_simple_fn((v, ch, h, w), || rng.random_range(-2.0..2.0)), cfg.patch)
    };
    let (src, cond, noisy) = (lat(n_src)?, lat(1)?, lat(n_tgt)?);
    let mut rays = |v: usize| Array4::from_shape_simple_fn((v, 6, h, w), || rng.random_range(-1.0..1.0));
    let inputs = EditInputs {
        sources: Some(ViewBatch::new(src, rays(n_src))?),
        condition: Some(ViewBatch::new(cond, rays(1))?),
        target_pose: rays(n_tgt),
        target_sources: (0..n_tgt).map(|i| i % n_src).collect(),
    };
    Ok((inputs, noisy))
}

fn zero_init_equivalence(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let variants = [Variant::DualStream, Variant::SeqConcatShared, Variant::FeatureConcat];
    for i in 0..20u64 {
        let base_cfg = DenoiserConfig {
            variant: Variant::Zeroshot,
            ..DenoiserConfig::default()
        };
        let base = Denoiser64::init(base_cfg.clone(), 100 + i)?;
        let variant = variants[i as usize % 3];
        let edit = Denoiser::from_base(&base, DenoiserConfig { variant, ..base_cfg }, 200 + i)?;
        let reference = edit.base_equivalent();
        let (inputs, noisy) = random_inputs(&edit.config, 3, 2, &mut rng)?;
        let c_noise = rng.random_range(-2.0..2.0);
        let branch = if i % 2 == 0 { Branch::Conditional } else { Branch::Unconditional };
        let a = edit.forward(&inputs, &noisy, c_noise, branch)?;
        let b = reference.forward(&inputs, &noisy, c_noise, branch)?;
        Zip::from(&a.data).and(&b.data).for_each(|x, y| worst = worst.max((x - y).abs()));
    }
    Ok(outcome(worst < 1e-6, format!("max |edit - base| = {worst:.2e} over 20 inputs")))
}

// ---------------------------------------------------------------- 2

fn gradient_correctness(_: &Ctx) -> Result<Outcome> {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut groups = 0;
    let mut failures = Vec::new();
    for variant in Variant::ALL {
        for branch in [Branch::Conditional, Branch::Unconditional] {
            let problem = GradProblem::tiny(variant, branch, 3)?;
            let report = grad_check(&problem, 1e-4)?;
            groups += report.groups.len();
            for g in &report.groups {
                if g.max_rel_err > worst.0 {
                    worst = (g.max_rel_err, format!("{}/{:?}/{}", variant.label(), branch, g.name));
                }
            }
            failures.extend(report.failures().iter().map(|g| format!("{}:{}", variant.label(), g.name)));
        }
    }
    Ok(outcome(
        failures.is_empty(),
        format!(
            "{groups} groups checked, worst relative error {:.2e} ({}){}",
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn target_only_loss(_: &Ctx) -> Result<Outcome> {
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let problem = GradProblem::tiny(variant, Branch::Conditional, 20 + k as u64)?;
        let base = problem.with_targets(&problem.example.targets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut moved_y = problem.example.targets.clone();
        Zip::from(&mut moved_y.data).and(&problem.example.mask).for_each(|y, &m| {
            if !m {
                *y += rng.random_range(-3.0..3.0);
            }
        });
        let moved = problem.with_targets(&moved_y)?;
        worst_loss = worst_loss.max((moved.loss - base.loss).abs());
        for (name, g) in base.grads.iter() {
            let h = moved.grads.get(name)?;
            Zip::from(g).and(h).for_each(|a, b| worst_grad = worst_grad.max((a - b).abs()));
        }
    }

    // The condition view is never supervised: changing its pixels in the
    // ground-truth stack leaves the training example untouched.
    let samples = generate_dataset(Some(Task::Recolor), 1, 5, &small_pipeline(), None)?;
    let s = &samples[0];
    let example = |truth: &Array4<f32>| {
        build_batch(
            Some(s.source_views.view()),
            Some(s.condition_image()),
            s.condition_index,
            Some(truth.view()),
            &s.poses,
            4,
        )
    };
    let a = example(&s.target_views)?;
    let mut scrambled = s.target_views.clone();
    scrambled.index_axis_mut(Axis(0), s.condition_index).mapv_inplace(|v| 1.0 - v);
    let b = example(&scrambled)?;
    let same_example = a.targets == b.targets && a.inputs == b.inputs;

    let pass = worst_loss < 1e-9 && worst_grad < 1e-9 && same_example;
    Ok(outcome(
        pass,
        format!(
            "masked-out targets: |Δloss| = {worst_loss:.1e}, max |Δgrad| = {worst_grad:.1e}; condition-view truth ignored: {same_example}"
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn edm_identities(_: &Ctx) -> Result<Outcome> {
    let edm = EdmConfig::default();
    let sd = edm.sigma_data;
    let mut precond_err = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let sigma: f64 = (rng.random_range(-6.0f64..6.0)).exp();
        let k = precondition(sigma, sd);
        let total = sigma * sigma + sd * sd;
        precond_err = precond_err
            .max((k.c_skip + k.c_out * k.c_out / (sd * sd) - 1.0).abs())
            .max((k.c_in * k.c_in * total - 1.0).abs())
            .max((k.c_skip - sd * sd / total).abs())
            .max((k.c_noise - sigma.ln() / 4.0).abs());
    }

    let grid = |rng: &mut ChaCha8Rng| LatentGrid {
        data: Array4::from_shape_simple_fn((2, 3, 4, 4), || rng.random_range(-1.5..1.5)),
        patch: 1,
    };
    let x = grid(&mut rng);
    let weights = grid(&mut rng);
    let arbitrary = |z: &LatentGrid<f64>, c: f64, _: Branch| -> mvedit::Result<LatentGrid<f64>> {
        let mut out = z.clone();
        out.data.zip_mut_with(&weights.data, |v, &w| *v = (w * *v + c).sin());
        Ok(out)
    };
    let fixed_zero = denoised(&arbitrary, &x, 0.0, sd, Branch::Conditional, DenoiserForm::Standard)? == x;
    let fixed_euler = euler_step(&x, 0.7, 1.3, &x)? == x;

    // Oracle network: whatever the input, D(x, σ) is exactly `target`.
    let target = grid(&mut rng);
    let oracle = |z: &LatentGrid<f64>, c_noise: f64, _: Branch| -> mvedit::Result<LatentGrid<f64>> {
        let k = precondition((4.0 * c_noise).exp(), sd);
        let mut out = z.clone();
        out.data.zip_mut_with(&target.data, |v, &y| *v = (y - k.c_skip * (*v / k.c_in)) / k.c_out);
        Ok(out)
    };
    let schedule = NoiseSchedule::<f64>::from_config(50, &edm)?;
    let mut converge = 0.0f64;
    for seed in 0..5 {
        let out = sample(&oracle, &target, &schedule, 1.2, seed)?;
        Zip::from(&out.data).and(&target.data).for_each(|a, b| converge = converge.max((a - b).abs()));
    }

    let pass = precond_err < 1e-12 && fixed_zero && fixed_euler && converge < 1e-4;
    Ok(outcome(
        pass,
        format!(
            "preconditioning err {precond_err:.1e}, D(x,0)=x {fixed_zero}, Euler fixed point {fixed_euler}, oracle sampler ‖out−y‖∞ = {converge:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn random_pose(rng: &mut ChaCha8Rng) -> Result<CameraPose<f64>> {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let rot = axis_angle(axis, rng.random_range(-3.1..3.1));
    let center = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
    let fx = rng.random_range(6.0..20.0);
    let intr = Intrinsics {
        fx,
        fy: fx * rng.random_range(0.8..1.2),
        cx: rng.random_range(3.0..5.0),
        cy: rng.random_range(3.0..5.0),
    };
    Ok(CameraPose::new(rot, center, intr, 8, 8)?)
}

fn camera_invariants(_: &Ctx) -> Result<Outcome> {
    let tol = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses: Vec<_> = (0..1000).map(|_| random_pose(&mut rng)).collect::<Result<_>>()?;
    let (mut unit, mut ortho, mut origin) = (0.0f64, 0.0f64, 0.0f64);
    for p in &poses {
        let map = plucker_map(p);
        for v in 0..8 {
            for u in 0..8 {
                let r = map.at(v, u);
                let d = [r[0], r[1], r[2]];
                let m = [r[3], r[4], r[5]];
                unit = unit.max((norm(d) - 1.0).abs());
                ortho = ortho.max(dot(m, d).abs());
                let t = rng.random_range(-10.0..10.0);
                let slid = std::array::from_fn(|i| p.center()[i] + t * d[i]);
                let m2 = cross(slid, d);
                origin = origin.max((0..3).map(|i| (m2[i] - m[i]).abs()).fold(0.0, f64::max));
            }
        }
    }
    let (mut outside, mut drift) = (0.0f64, 0.0f64);
    for rig in poses.chunks(10) {
        let (once, _) = normalize_cameras(rig)?;
        let (twice, _) = normalize_cameras(&once)?;
        for (a, b) in once.iter().zip(&twice) {
            for i in 0..3 {
                outside = outside.max(a.center()[i].abs() - 2.0);
                drift = drift.max((a.center()[i] - b.center()[i]).abs());
            }
        }
    }
    let pass = unit < tol && ortho < tol && origin < tol && outside <= tol && drift < tol;
    Ok(outcome(
        pass,
        format!(
            "1000 poses: ||d|−1| {unit:.1e}, |m·d| {ortho:.1e}, origin shift {origin:.1e}, box overshoot {:.1e}, re-normalize drift {drift:.1e}",
            outside.max(0.0)
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn small_pipeline() -> PipelineConfig {
    PipelineConfig {
        views: 4,
        height: 32,
        width: 32,
        ..PipelineConfig::default()
    }
}

fn pipeline_invariants(_: &Ctx) -> Result<Outcome> {
    let cfg = PipelineConfig::default();
    let t = cfg.thresholds;
    let samples = generate_dataset(None, 50, 6, &cfg, None)?;
    let mut addition_ok = 0;
    let mut additions = 0;
    let mut passes = 0;
    let mut refilter_ok = 0;
    for s in &samples {
        if s.task == Task::Addition {
            additions += 1;
            if s.target_views == render_stack(&s.target_scene, &s.poses) {
                addition_ok += 1;
            }
        }
        let r = quality_filter(s, &t)?;
        if r.verdict == Verdict::Pass {
            passes += 1;
            let again = quality_filter(s, &t)?;
            let rules = again.psnr_inside >= t.min_psnr_inside
                && again.psnr_outside >= t.min_psnr_outside
                && again.variance.is_none_or(|v| v <= t.max_variance);
            if again.verdict == Verdict::Pass && rules {
                refilter_ok += 1;
            }
        }
    }
    let dir = tempfile::tempdir()?;
    let manifest = write_dataset(&samples, dir.path(), &t)?;
    let (m2, back) = read_dataset(dir.path())?;
    let lossless = m2 == manifest && back == samples;
    let reread_pass = manifest
        .samples
        .iter()
        .zip(&back)
        .filter(|(e, _)| e.verdict == Verdict::Pass)
        .all(|(_, s)| quality_filter(s, &t).map(|r| r.verdict == Verdict::Pass).unwrap_or(false));
    let pass = additions > 0 && addition_ok == additions && refilter_ok == passes && lossless && reread_pass;
    Ok(outcome(
        pass,
        format!(
            "50 samples: addition targets = original renders {addition_ok}/{additions}, pass samples re-pass {refilter_ok}/{passes}, round trip lossless {lossless}"
        ),
    ))
}

// ---------------------------------------------------------------- heavy

struct Heavy {
    label: &'static str,
    budget: TrainBudget,
    seeds: Vec<u64>,
    train_samples: usize,
    heldout: usize,
}

impl Heavy {
    fn from_env() -> Self {
        let reduced = std::env::var("MVEDIT_ACCEPT_BUDGET").is_ok_and(|v| v == "reduced");
        let seeds = vec![0, 1, 2];
        if !reduced {
            return Self {
                label: "full",
                budget: TrainBudget::default(),
                seeds,
                train_samples: 600,
                heldout: 20,
            };
        }
        let phase = |phase, steps| TrainConfig {
            steps,
            batch: 4,
            ..TrainConfig::for_phase(phase)
        };
        Self {
            label: "reduced",
            budget: TrainBudget {
                pretrain: phase(Phase::Pretrain, 1500),
                finetune: phase(Phase::Finetune, 1500),
                views: 4,
                height: 24,
                width: 24,
                ..TrainBudget::default()
            },
            seeds,
            train_samples: 300,
            heldout: 20,
        }
    }

    fn pipeline(&self, jitter: bool) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            views: self.budget.views,
            height: self.budget.height,
            width: self.budget.width,
            ..PipelineConfig::default()
        };
        cfg.jitter.enabled = jitter;
        cfg
    }

    fn settings(&self) -> EditSettings {
        EditSettings {
            sampler: SamplerConfig::default(),
            edm: self.budget.edm,
        }
    }

    fn passing(&self, task: Option<Task>, count: usize, seed: u64) -> Result<Vec<PairedSample>> {
        let cfg = self.pipeline(false);
        let t = cfg.thresholds;
        let mut out = Vec::new();
        for s in generate_dataset(task, count, seed, &cfg, None)? {
            if quality_filter(&s, &t)?.verdict == Verdict::Pass {
                out.push(s);
            }
        }
        Ok(out)
    }
}

struct Trained {
    label: &'static str,
    heavy: Heavy,
    root: PathBuf,
    train_secs: f64,
}

impl Trained {
    fn model(&self, arm: Arm, seed: u64) -> Result<Denoiser<f32>> {
        let (model, _) = load_model(&checkpoint_base(&arm_dir(&self.root, arm, seed)))?;
        Ok(Denoiser {
            config: arm.model_config(&model.config),
            params: model.params,
        })
    }

    fn base(&self, seed: u64) -> Result<Denoiser<f32>> {
        Ok(load_model(&checkpoint_base(&base_dir(&self.root, seed)))?.0)
    }
}

struct Ctx {
    trained: OnceLock<std::result::Result<Trained, String>>,
}

impl Ctx {
    fn new() -> Self {
        Self { trained: OnceLock::new() }
    }

    fn trained(&self) -> std::result::Result<&Trained, String> {
        self.trained.get_or_init(|| train().map_err(|e| e.to_string())).as_ref().map_err(Clone::clone)
    }
}

fn cache_root(label: &str) -> PathBuf {
    std::env::var_os("MVEDIT_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
        .join(label)
}

fn train() -> Result<Trained> {
    let heavy = Heavy::from_env();
    let root = cache_root(heavy.label);
    std::fs::create_dir_all(&root)?;
    let stamp = root.join("budget.json");
    let want = serde_json::to_string_pretty(&heavy.budget)?;
    match std::fs::read_to_string(&stamp) {
        Ok(have) if have != want => {
            return Err(format!(
                "{} holds checkpoints of a different budget; remove it or set MVEDIT_ACCEPT_DIR",
                root.display()
            )
            .into())
        }
        Ok(_) => {}
        Err(_) => std::fs::write(&stamp, &want)?,
    }
    let start = Instant::now();
    let data = heavy.passing(None, heavy.train_samples, 0)?;
    eprintln!("[acceptance] {} training pairs, budget {} in {}", data.len(), heavy.label, root.display());
    let mut progress = |tag: &str, m: &mvedit::training::StepMetrics| {
        if m.step.is_multiple_of(250) {
            eprintln!("[acceptance] {tag} step {} loss {:.4}", m.step, m.loss);
        }
    };
    train_arms(&heavy.budget, &data, &Arm::ALL, &heavy.seeds, &root, &mut progress)?;
    Ok(Trained {
        label: heavy.label,
        heavy,
        root,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------- 7

fn refinement_efficacy(ctx: &Ctx) -> Result<Outcome> {
    let t = ctx.trained()?;
    let h = &t.heavy;
    let samples = generate_dataset(Some(Task::Recolor), h.heldout, 7_000_003, &h.pipeline(true), None)?;
    let settings = h.settings();
    let mut fractions = Vec::new();
    let mut reductions = Vec::new();
    for &seed in &h.seeds {
        let model = t.base(seed)?;
        let (mut improved, mut counted, mut before_sum, mut after_sum) = (0, 0, 0.0, 0.0);
        for (i, s) in samples.iter().enumerate() {
            let refined = consistency_refine(
                &model,
                &s.target_views,
                &s.poses,
                s.condition_index,
                0.2,
                seed * 1000 + i as u64,
                &settings.edm,
                &settings.sampler,
            )?;
            let err = |v: &Array4<f32>| cross_view_consistency_masked(v.view(), &s.target_scene, &s.poses, s.edit_masks.view());
            if let (Some(before), Some(after)) = (err(&s.target_views)?, err(&refined)?) {
                counted += 1;
                improved += usize::from(after < before);
                before_sum += before;
                after_sum += after;
            }
        }
        fractions.push(improved as f64 / counted.max(1) as f64);
        reductions.push(if before_sum > 0.0 { 1.0 - after_sum / before_sum } else { 0.0 });
    }
    let (frac, red) = (median(fractions.clone()), median(reductions.clone()));
    Ok(outcome(
        frac >= 0.8 && red >= 0.3,
        format!(
            "median over seeds: improved {:.0}% of samples (need ≥ 80%), mean error reduced {:.0}% (need ≥ 30%); per seed {:?} / {:?}",
            100.0 * frac,
            100.0 * red,
            fractions.iter().map(|f| format!("{:.2}", f)).collect::<Vec<_>>(),
            reductions.iter().map(|f| format!("{:.2}", f)).collect::<Vec<_>>()
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn directional_ablation(ctx: &Ctx) -> Result<Outcome> {
    let t = ctx.trained()?;
    let h = &t.heavy;
    let heldout = h.passing(None, h.heldout, 1_000_003)?;
    let table = run_ablation(&Arm::ALL, &heldout, &h.seeds, &t.root, &h.settings())?;
    std::fs::write(t.root.join("ablation.txt"), table.to_text())?;
    let mut parts = Vec::new();
    let mut pass = true;
    for arm in Arm::ALL.into_iter().filter(|&a| a != Arm::DualStream) {
        let d = table
            .delta(arm)
            .ok_or_else(|| format!("no delta for {}", arm.label()))?;
        pass &= d.median >= 0.5;
        parts.push(format!("{} {:+.2}", arm.label(), d.median));
    }
    let dual = table.report(Arm::DualStream).map_or(f64::NAN, |r| r.median_psnr);
    Ok(outcome(
        pass,
        format!(
            "dual_stream median PSNR {dual:.2} dB on {} held-out; margins (need ≥ +0.5 dB): {}; table in {}",
            heldout.len(),
            parts.join(", "),
            t.root.join("ablation.txt").display()
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn end_to_end_editing(ctx: &Ctx) -> Result<Outcome> {
    let t = ctx.trained()?;
    let h = &t.heavy;
    let settings = h.settings();
    let psnr_gain = |task: Task, salt: u64| -> Result<(f64, Vec<PairedSample>)> {
        let set = h.passing(Some(task), h.heldout, 9_000_000 + salt)?;
        let mut gains = Vec::new();
        for &seed in &h.seeds {
            let tuned = t.model(Arm::DualStream, seed)?;
            let fresh = Denoiser::from_base(&t.base(seed)?, tuned.config.clone(), seed)?;
            let mean = |m: &Denoiser<f32>| -> Result<f64> {
                let r = evaluate_set(m, &set, seed, &settings)?;
                Ok(r.iter().map(|s| s.psnr).sum::<f64>() / r.len() as f64)
            };
            gains.push(mean(&tuned)? - mean(&fresh)?);
        }
        Ok((median(gains), set))
    };
    let (recolor, _) = psnr_gain(Task::Recolor, 1)?;
    let (removal, _) = psnr_gain(Task::Removal, 2)?;

    let additions = h.passing(Some(Task::Addition), h.heldout, 9_000_003)?;
    let mut ratios = Vec::new();
    for &seed in &h.seeds {
        let tuned = t.model(Arm::DualStream, seed)?;
        let edited = evaluate_set(&tuned, &additions, seed, &settings)?;
        let (mut out_sum, mut clean_sum) = (0.0, 0.0);
        for (m, s) in edited.iter().zip(&additions) {
            let clean = cross_view_consistency_masked(s.ground_truth().view(), &s.target_scene, &s.poses, s.edit_masks.view())?;
            if let (Some(out), Some(clean)) = (m.consistency, clean) {
                out_sum += out;
                clean_sum += clean;
            }
        }
        ratios.push(if clean_sum > 0.0 { out_sum / clean_sum } else { f64::INFINITY });
    }
    let ratio = median(ratios);
    Ok(outcome(
        recolor >= 3.0 && removal >= 3.0 && ratio <= 2.0,
        format!(
            "finetuned minus zero-init masked PSNR: recolor {recolor:+.2} dB, removal {removal:+.2} dB (need ≥ +3); addition consistency {ratio:.2}× clean renders (need ≤ 2×)"
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn attention_probe(ctx: &Ctx) -> Result<Outcome> {
    let t = ctx.trained()?;
    let h = &t.heavy;
    let settings = h.settings();
    let removals = h.passing(Some(Task::Removal), 10, 10_000_003)?;
    let mut ratios = Vec::new();
    let mut per_block = Vec::new();
    for &seed in &h.seeds {
        let model = t.model(Arm::DualStream, seed)?;
        let blocks = model.config.blocks;
        let mut done = false;
        for s in &removals {
            let reports: mvedit::Result<Vec<_>> = (0..blocks).map(|b| probe_mass(&model, s, b, seed, &settings)).collect();
            // samples whose edit leaves no overlapping target or source cell cannot be probed
            let Ok(reports) = reports else { continue };
            let mean = reports.iter().map(|r| r.ratio_to_uniform).sum::<f64>() / blocks as f64;
            ratios.push(mean);
            per_block.push(reports.iter().map(|r| format!("{:.1}", r.ratio_to_uniform)).collect::<Vec<_>>().join("/"));
            done = true;
            break;
        }
        if !done {
            return Err("no removal sample with edited target and source cells".into());
        }
    }
    let ratio = median(ratios);
    Ok(outcome(
        ratio >= 3.0,
        format!(
            "source-key mass in the edited region {ratio:.2}× uniform (need ≥ 3×), per block per seed [{}]",
            per_block.join(", ")
        ),
    ))
}
