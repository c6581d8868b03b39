use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array4, Axis};

use mvedit::config::RunConfig;
use mvedit::datapipe::{
    self, build_batch, generate_dataset, read_dataset, read_manifest, read_sample, refine_with_steps, refine_steps,
    render_stack, write_dataset, PairedSample, SdeditRefiner, Task, Verdict,
};
use mvedit::evaluation::{self, probe, run_ablation, train_arms};
use mvedit::geometry::{poses_from_json, poses_to_json, CameraPose};
use mvedit::scene::{apply_edit, EditInstruction, SceneSpec};
use mvedit::tensor_io::{read_json, read_png, write_contact_sheet, write_json, write_png, write_tensor};
use mvedit::training::{checkpoint_base, load_model, PairStream, TrainState};
use mvedit::{Denoiser32, Error};

#[derive(Parser)]
#[command(name = "mvedit", version, about = "Multi-view consistent editing from one edited reference view")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired multi-view editing dataset.
    GenData {
        /// removal, addition, recolor or mixed.
        #[arg(long, default_value = "mixed")]
        task: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint used to harmonize jittered edits.
        #[arg(long)]
        refine_ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base novel-view model.
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train edit adapters on top of a frozen base.
    Finetune {
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Propagate one edited view to every view of a scene.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with scene.json and poses.json (a dataset sample works).
        #[arg(long)]
        scene: PathBuf,
        /// JSON edit instruction; the reference view is rendered from it.
        #[arg(long)]
        instruction_file: Option<PathBuf>,
        /// Already edited reference view (PNG).
        #[arg(long)]
        cond_image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        cond_index: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Harmonize independently edited views.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with view_##.png (or tgt_##.png) and poses.json.
        #[arg(long)]
        views_dir: PathBuf,
        #[arg(long)]
        cond_index: usize,
        #[arg(long)]
        noise_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every architecture variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Attention heatmaps of edited target tokens over source views.
    ProbeAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset sample directory.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        block: usize,
        /// Sampler step (1 = first).
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Numerical(_))));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn require(path: &Path, flag: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{flag}: {} does not exist", path.display());
    }
    Ok(())
}

/// Load the config, resolve the seed and write the snapshot under `out`.
fn prepare(common: &Common, seed: Option<u64>) -> anyhow::Result<(RunConfig, u64)> {
    if let Some(p) = &common.config {
        require(p, "--config")?;
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let seed = cfg.resolve_seed(seed)?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    std::fs::write(common.out.join("config.toml"), cfg.to_toml())
        .with_context(|| format!("writing {}", common.out.join("config.toml").display()))?;
    Ok((cfg, seed))
}

/// A checkpoint is named by its directory or by its base path.
fn ckpt_base(path: &Path) -> PathBuf {
    if path.is_dir() {
        checkpoint_base(path)
    } else {
        path.with_extension("")
    }
}

fn load_ckpt(path: &Path, flag: &str) -> anyhow::Result<Denoiser32> {
    let base = ckpt_base(path);
    if !base.with_extension("json").exists() {
        bail!("{flag}: no checkpoint at {}", path.display());
    }
    Ok(load_model(&base)?.0)
}

fn progress(tag: &str, m: &mvedit::training::StepMetrics) {
    if m.step == 1 || m.step.is_multiple_of(50) {
        eprintln!("{tag} step {:>5} loss {:.5} grad-norm {:.4}", m.step, m.loss, m.grad_norm);
    }
}

fn write_views(dir: &Path, views: &Array4<f32>) -> anyhow::Result<()> {
    for (i, v) in views.outer_iter().enumerate() {
        write_png(&dir.join(format!("view_{i:02}.png")), v)?;
    }
    write_tensor(&dir.join("views.f32"), views.view().into_dyn())?;
    let list: Vec<_> = views.outer_iter().collect();
    write_contact_sheet(&dir.join("contact.png"), &list)?;
    Ok(())
}

fn passing(dir: &Path) -> anyhow::Result<Vec<PairedSample>> {
    let (manifest, samples) = read_dataset(dir)?;
    let kept: Vec<PairedSample> = manifest
        .samples
        .iter()
        .zip(samples)
        .filter(|(e, _)| e.verdict == Verdict::Pass)
        .map(|(_, s)| s)
        .collect();
    if kept.is_empty() {
        bail!("--data: no sample in {} passed the quality filter", dir.display());
    }
    Ok(kept)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            task,
            count,
            seed,
            refine_ckpt,
            common,
        } => {
            let task = match task.as_str() {
                "mixed" => None,
                t => Some(t.parse::<Task>().map_err(|e| anyhow!("--task: {e}"))?),
            };
            if let Some(p) = &refine_ckpt {
                require(p, "--refine-ckpt")?;
            }
            let (cfg, seed) = prepare(&common, seed)?;
            let refiner_model = refine_ckpt.as_deref().map(|p| load_ckpt(p, "--refine-ckpt")).transpose()?;
            let refiner = refiner_model.as_ref().map(|model| SdeditRefiner {
                model,
                edm: cfg.edm,
                sampler: cfg.sampler,
                noise_frac: cfg.refine.noise_frac,
            });
            let samples = generate_dataset(
                task,
                count,
                seed,
                &cfg.data,
                refiner.as_ref().map(|r| r as &dyn datapipe::Refiner),
            )?;
            let manifest = write_dataset(&samples, &common.out, &cfg.data.thresholds)?;
            let passed = manifest.samples.iter().filter(|s| s.verdict == Verdict::Pass).count();
            println!("wrote {} samples ({passed} pass) to {}", manifest.samples.len(), common.out.display());
        }
        Command::Pretrain { seed, common } => {
            let (cfg, seed) = prepare(&common, seed)?;
            let train = mvedit::training::TrainConfig { seed, ..cfg.pretrain };
            let budget = cfg.budget();
            let mut state = TrainState::pretrain(&cfg.model, train, cfg.edm)?;
            state.run(&budget.scene_stream(), Some(&common.out), |m| progress("pretrain", m))?;
            println!("base checkpoint: {}", checkpoint_base(&common.out).display());
        }
        Command::Finetune {
            base_ckpt,
            data,
            seed,
            common,
        } => {
            require(&data, "--data")?;
            let base = load_ckpt(&base_ckpt, "--base-ckpt")?;
            let (cfg, seed) = prepare(&common, seed)?;
            let samples = passing(&data)?;
            let stream = PairStream::new(&samples, cfg.model.patch)?;
            let train = mvedit::training::TrainConfig { seed, ..cfg.finetune };
            let mut state = TrainState::finetune(&base, &cfg.model, train, cfg.edm)?;
            state.run(&stream, Some(&common.out), |m| progress("finetune", m))?;
            println!("adapter checkpoint: {}", checkpoint_base(&common.out).display());
        }
        Command::Edit {
            ckpt,
            scene,
            instruction_file,
            cond_image,
            cond_index,
            seed,
            common,
        } => {
            if instruction_file.is_none() && cond_image.is_none() {
                bail!("edit needs a reference: pass --instruction-file or --cond-image");
            }
            require(&scene, "--scene")?;
            for (p, flag) in [(&instruction_file, "--instruction-file"), (&cond_image, "--cond-image")] {
                if let Some(p) = p {
                    require(p, flag)?;
                }
            }
            let model = load_ckpt(&ckpt, "--ckpt")?;
            let (cfg, seed) = prepare(&common, seed)?;
            let world: SceneSpec = read_json(&scene.join("scene.json"))?;
            let poses: Vec<CameraPose<f64>> = poses_from_json(&read_json(&scene.join("poses.json"))?)?;
            if cond_index >= poses.len() {
                bail!("--cond-index {cond_index} out of range for {} views", poses.len());
            }
            let sources = render_stack(&world, &poses);
            let (condition, truth) = match (&cond_image, &instruction_file) {
                (Some(p), _) => (read_png(p)?, None),
                (None, Some(p)) => {
                    let instruction: EditInstruction = read_json(p)?;
                    let edited = apply_edit(&world, &instruction)?;
                    let views = render_stack(&edited, &poses);
                    (views.index_axis(Axis(0), cond_index).to_owned(), Some((instruction, edited)))
                }
                (None, None) => unreachable!(),
            };
            let batch = build_batch(
                Some(sources.view()),
                Some(condition.view()),
                cond_index,
                None,
                &poses,
                model.config.patch,
            )?;
            let out = evaluation::run_edit(&model, &batch, condition.view(), cond_index, seed, &cfg.edit_settings())?;
            write_views(&common.out, &out.views)?;
            write_json(&common.out.join("poses.json"), &poses_to_json(&poses))?;
            if let Some((instruction, edited)) = truth {
                write_json(&common.out.join("target_scene.json"), &edited)?;
                let masks = datapipe::edit_masks_for(&world, &edited, &instruction, &poses)?;
                let sample = PairedSample {
                    task: datapipe::task_of(&instruction),
                    seed,
                    scene: world,
                    target_scene: edited,
                    source_views: sources,
                    target_views: out.views.clone(),
                    condition_index: cond_index,
                    poses,
                    instruction,
                    edit_masks: masks,
                    provenance: vec!["edit".into()],
                };
                let metrics = evaluation::score_edit(&out, &sample)?;
                write_json(&common.out.join("metrics.json"), &metrics)?;
                println!(
                    "masked PSNR {:.3} dB, SSIM {:.4}, consistency {}",
                    metrics.psnr,
                    metrics.ssim,
                    metrics.consistency.map_or("-".into(), |c| format!("{c:.4}"))
                );
            }
            println!("edited views written to {}", common.out.display());
        }
        Command::Refine {
            ckpt,
            views_dir,
            cond_index,
            noise_frac,
            seed,
            common,
        } => {
            require(&views_dir, "--views-dir")?;
            let model = load_ckpt(&ckpt, "--ckpt")?;
            let (cfg, seed) = prepare(&common, seed)?;
            let noise_frac = noise_frac.unwrap_or(cfg.refine.noise_frac);
            let steps = refine_steps(noise_frac, cfg.sampler.steps).map_err(|e| anyhow!("--noise-frac: {e}"))?;
            let poses: Vec<CameraPose<f64>> = poses_from_json(&read_json(&views_dir.join("poses.json"))?)?;
            let views = read_view_pngs(&views_dir, poses.len())?;
            if cond_index >= poses.len() {
                bail!("--cond-index {cond_index} out of range for {} views", poses.len());
            }
            let refined = refine_with_steps(&model, &views, &poses, cond_index, steps, seed, &cfg.edm, &cfg.sampler)?;
            write_views(&common.out, &refined)?;
            let world = ["target_scene.json", "scene.json"]
                .iter()
                .map(|f| views_dir.join(f))
                .find(|p| p.exists());
            if let Some(p) = world {
                let world: SceneSpec = read_json(&p)?;
                let before = evaluation::cross_view_consistency(views.view(), &world, &poses)?;
                let after = evaluation::cross_view_consistency(refined.view(), &world, &poses)?;
                let report = serde_json::json!({ "before": before, "after": after, "noise_frac": noise_frac, "steps": steps });
                write_json(&common.out.join("consistency.json"), &report)?;
                println!("cross-view consistency error: {before:?} -> {after:?}");
            }
            println!("refined views written to {}", common.out.display());
        }
        Command::Ablate { data, seeds, common } => {
            require(&data, "--data")?;
            read_manifest(&data)?;
            let (cfg, _) = prepare(&common, None)?;
            let seeds = seeds.unwrap_or_else(|| cfg.ablation.seeds.clone());
            let samples = passing(&data)?;
            let root = common.out.join("checkpoints");
            train_arms(&cfg.budget(), &samples, &cfg.ablation.arms, &seeds, &root, &mut progress)?;
            let mut heldout_cfg = cfg.data;
            heldout_cfg.jitter.enabled = false;
            let heldout = generate_dataset(None, cfg.ablation.heldout, cfg.ablation.heldout_seed, &heldout_cfg, None)?;
            let table = run_ablation(&cfg.ablation.arms, &heldout, &seeds, &root, &cfg.edit_settings())?;
            write_json(&common.out.join("ablation.json"), &table)?;
            let text = table.to_text();
            std::fs::write(common.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::ProbeAttn {
            ckpt,
            sample,
            block,
            step,
            seed,
            common,
        } => {
            require(&sample, "--sample")?;
            let model = load_ckpt(&ckpt, "--ckpt")?;
            let (cfg, seed) = prepare(&common, seed)?;
            let sample = read_sample(&sample)?;
            if step == 0 || step > cfg.sampler.steps {
                bail!("--step must lie in [1, {}]", cfg.sampler.steps);
            }
            let settings = cfg.edit_settings();
            let (maps, target_views) = probe::maps_at_step(&model, &sample, block, step, seed, &settings)?;
            let cells = probe::cell_mask(sample.edit_masks.view(), model.config.patch);
            let queries = probe::edited_queries(&maps, &target_views, &cells);
            let heat = probe::source_heatmaps(&maps, &queries, sample.views());
            let peak = heat.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
            let p = model.config.patch;
            for (v, map) in heat.outer_iter().enumerate() {
                let img = ndarray::Array3::from_shape_fn((3, map.nrows() * p, map.ncols() * p), |(_, y, x)| {
                    map[[y / p, x / p]] / peak
                });
                write_png(&common.out.join(format!("heat_src_{v:02}.png")), img.view())?;
            }
            let report = if step == 1 {
                Some(evaluation::probe_mass(&model, &sample, block, seed, &settings)?)
            } else {
                None
            };
            write_json(
                &common.out.join("probe.json"),
                &serde_json::json!({ "block": block, "step": step, "queries": queries.len(), "first_step": report }),
            )?;
            if let Some(r) = report {
                println!("attention per edited source key: {:.2}× uniform", r.ratio_to_uniform);
            }
            println!("heatmaps written to {}", common.out.display());
        }
    }
    Ok(())
}

fn read_view_pngs(dir: &Path, n: usize) -> anyhow::Result<Array4<f32>> {
    let prefix = if dir.join("view_00.png").exists() { "view" } else { "tgt" };
    let views = (0..n)
        .map(|i| {
            let p = dir.join(format!("{prefix}_{i:02}.png"));
            read_png(&p).map_err(anyhow::Error::from)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    Ok(ndarray::stack(Axis(0), &refs)?)
}

