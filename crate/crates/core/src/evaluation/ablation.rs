//! Training and evaluating the architecture and input-signal variants
//! under one budget.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate_set, median, EditSettings, MetricReport, SeedMetrics, REPORT_HEADER};
use crate::datapipe::PairedSample;
use crate::denoiser::{Denoiser, DenoiserConfig, Variant};
use crate::diffusion::EdmConfig;
use crate::error::{Error, Result};
use crate::training::{checkpoint_base, load_model, PairStream, Phase, SceneStream, StepMetrics, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    DualStream,
    SeqConcatShared,
    FeatureConcat,
    /// The pretrained base, no edit finetuning.
    Zeroshot,
    #[serde(rename = "dual_stream_no_indicator")]
    NoIndicator,
    #[serde(rename = "dual_stream_no_pose")]
    NoPose,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::DualStream,
        Arm::SeqConcatShared,
        Arm::FeatureConcat,
        Arm::Zeroshot,
        Arm::NoIndicator,
        Arm::NoPose,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::DualStream => "dual_stream",
            Arm::SeqConcatShared => "seq_concat_shared",
            Arm::FeatureConcat => "feature_concat",
            Arm::Zeroshot => "zeroshot",
            Arm::NoIndicator => "dual_stream_no_indicator",
            Arm::NoPose => "dual_stream_no_pose",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }

    pub fn model_config(self, base: &DenoiserConfig) -> DenoiserConfig {
        let mut c = base.clone();
        match self {
            Arm::DualStream => c.variant = Variant::DualStream,
            Arm::SeqConcatShared => c.variant = Variant::SeqConcatShared,
            Arm::FeatureConcat => c.variant = Variant::FeatureConcat,
            Arm::Zeroshot => c.variant = Variant::Zeroshot,
            Arm::NoIndicator => {
                c.variant = Variant::DualStream;
                c.use_indicator = false;
            }
            Arm::NoPose => {
                c.variant = Variant::DualStream;
                c.use_pose = false;
            }
        }
        c
    }

    pub fn finetuned(self) -> bool {
        self != Arm::Zeroshot
    }
}

/// Everything that determines a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBudget {
    pub model: DenoiserConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub edm: EdmConfig,
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            pretrain: TrainConfig::for_phase(Phase::Pretrain),
            finetune: TrainConfig::for_phase(Phase::Finetune),
            edm: EdmConfig::default(),
            views: 6,
            height: 48,
            width: 48,
        }
    }
}

impl TrainBudget {
    pub fn scene_stream(&self) -> SceneStream {
        SceneStream {
            views: self.views,
            height: self.height,
            width: self.width,
            patch: self.model.patch,
        }
    }
}

pub fn base_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed{seed}")).join("base")
}

pub fn arm_dir(root: &Path, arm: Arm, seed: u64) -> PathBuf {
    if arm.finetuned() {
        root.join(format!("seed{seed}")).join(arm.label())
    } else {
        base_dir(root, seed)
    }
}

fn finished(dir: &Path, steps: usize) -> Option<Denoiser<f32>> {
    let (model, meta) = load_model(&checkpoint_base(dir)).ok()?;
    (meta.step >= steps).then_some(model)
}

fn train_in(
    dir: &Path,
    fresh: impl FnOnce() -> Result<TrainState>,
    steps: usize,
    stream: &dyn crate::training::ExampleStream,
    progress: &mut dyn FnMut(&str, &StepMetrics),
    tag: &str,
) -> Result<Denoiser<f32>> {
    if let Some(m) = finished(dir, steps) {
        return Ok(m);
    }
    let mut state = match TrainState::resume(&checkpoint_base(dir), Some(steps)) {
        Ok(s) => s,
        Err(_) => fresh()?,
    };
    state.run(stream, Some(dir), |m| progress(tag, m))?;
    Ok(state.model)
}

/// Pretrain one base per seed and finetune every requested arm on top of
/// it, under `root/seed{s}/{label}`. Finished checkpoints are reused and
/// interrupted runs resume.
pub fn train_arms(
    budget: &TrainBudget,
    data: &[PairedSample],
    arms: &[Arm],
    seeds: &[u64],
    root: &Path,
    progress: &mut dyn FnMut(&str, &StepMetrics),
) -> Result<()> {
    let stream = PairStream::new(data, budget.model.patch)?;
    for &seed in seeds {
        let pre = TrainConfig {
            seed,
            ..budget.pretrain
        };
        let base = train_in(
            &base_dir(root, seed),
            || TrainState::pretrain(&budget.model, pre, budget.edm),
            pre.steps,
            &budget.scene_stream(),
            progress,
            &format!("seed{seed}/base"),
        )?;
        for &arm in arms.iter().filter(|a| a.finetuned()) {
            let ft = TrainConfig {
                seed,
                ..budget.finetune
            };
            let cfg = arm.model_config(&budget.model);
            train_in(
                &arm_dir(root, arm, seed),
                || TrainState::finetune(&base, &cfg, ft, budget.edm),
                ft.steps,
                &stream,
                progress,
                &format!("seed{seed}/{}", arm.label()),
            )?;
        }
    }
    Ok(())
}

/// Per-seed masked PSNR difference `dual_stream − arm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub arm: String,
    pub per_seed: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub header: String,
    pub reports: Vec<MetricReport>,
    /// Against `dual_stream`, when it is among the arms.
    pub deltas: Vec<ArmDelta>,
}

impl AblationTable {
    pub fn report(&self, arm: Arm) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.label == arm.label())
    }

    pub fn delta(&self, arm: Arm) -> Option<&ArmDelta> {
        self.deltas.iter().find(|d| d.arm == arm.label())
    }

    /// Rows × (PSNR, SSIM, consistency).
    pub fn shape(&self) -> (usize, usize) {
        (self.reports.len(), 3)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.header);
        let _ = writeln!(s, "{:<26} {:>9} {:>8} {:>12}", "variant", "PSNR", "SSIM", "consistency");
        for r in &self.reports {
            let c = r.aggregate.consistency.map_or("-".to_string(), |c| format!("{c:.4}"));
            let _ = writeln!(s, "{:<26} {:>9.3} {:>8.4} {:>12}", r.label, r.aggregate.psnr, r.aggregate.ssim, c);
        }
        if !self.deltas.is_empty() {
            let _ = writeln!(s, "\nmasked PSNR, dual_stream minus variant (dB): median [min, max] over seeds");
            for d in &self.deltas {
                let _ = writeln!(s, "{:<26} {:>+8.3} [{:+.3}, {:+.3}]", d.arm, d.median, d.min, d.max);
            }
        }
        s
    }
}

/// Evaluate the trained arms on held-out samples.
pub fn run_ablation(
    arms: &[Arm],
    heldout: &[PairedSample],
    seeds: &[u64],
    root: &Path,
    settings: &EditSettings,
) -> Result<AblationTable> {
    let mut reports = Vec::new();
    for &arm in arms {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let dir = arm_dir(root, arm, seed);
            let (model, _) = load_model(&checkpoint_base(&dir)).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{} (seed {seed}): {m}", arm.label())),
                other => other,
            })?;
            let model = Denoiser {
                config: arm.model_config(&model.config),
                params: model.params,
            };
            per_seed.push(SeedMetrics::new(seed, evaluate_set(&model, heldout, seed, settings)?));
        }
        reports.push(MetricReport::new(arm.label(), per_seed));
    }
    let deltas = match reports.iter().find(|r| r.label == Arm::DualStream.label()) {
        Some(dual) => reports
            .iter()
            .filter(|r| r.label != dual.label)
            .map(|r| {
                let per_seed: Vec<f64> = dual
                    .per_seed
                    .iter()
                    .zip(&r.per_seed)
                    .map(|(a, b)| a.mean.psnr - b.mean.psnr)
                    .collect();
                ArmDelta {
                    arm: r.label.clone(),
                    median: median(per_seed.clone()),
                    min: per_seed.iter().copied().fold(f64::INFINITY, f64::min),
                    max: per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    per_seed,
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(AblationTable {
        header: REPORT_HEADER.to_string(),
        reports,
        deltas,
    })
}
