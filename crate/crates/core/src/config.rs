//! Strict run configuration: one TOML file plus `key.path=value` overrides.
//! Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::PipelineConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{EdmConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::evaluation::{Arm, EditSettings, TrainBudget};
use crate::training::{Phase, TrainConfig};

/// Environment variable consulted when neither the flags nor the file set
/// a seed.
pub const SEED_ENV: &str = "OMNI_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// Held-out samples per evaluation.
    pub heldout: usize,
    pub heldout_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            heldout: 20,
            heldout_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Fraction of the ladder re-run by refinement.
    pub noise_frac: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { noise_frac: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: DenoiserConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub edm: EdmConfig,
    pub sampler: SamplerConfig,
    pub data: PipelineConfig,
    pub refine: RefineConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: DenoiserConfig::default(),
            pretrain: TrainConfig::for_phase(Phase::Pretrain),
            finetune: TrainConfig::for_phase(Phase::Finetune),
            edm: EdmConfig::default(),
            sampler: SamplerConfig::default(),
            data: PipelineConfig::default(),
            refine: RefineConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{path}`")))?;
    let mut node = table;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Overlay `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// File (if any), then `key.path=value` overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let source = path.map_or("overrides".to_string(), |p| p.display().to_string());
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, table);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{source}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.data.validate()?;
        let to_config = |e: Error| Error::Config(e.to_string());
        if self.pretrain.phase != Phase::Pretrain || self.finetune.phase != Phase::Finetune {
            return Err(Error::Config("pretrain/finetune sections must keep their own phase".into()));
        }
        if !self.data.height.is_multiple_of(self.model.patch) || !self.data.width.is_multiple_of(self.model.patch) {
            return Err(Error::Config(format!(
                "image size {}×{} is not divisible by patch {}",
                self.data.height, self.data.width, self.model.patch
            )));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be positive".into()));
        }
        crate::datapipe::refine_steps(self.refine.noise_frac, self.sampler.steps).map_err(to_config)?;
        Ok(())
    }

    /// Seed precedence: explicit flag, config file, `OMNI_SEED`, 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn budget(&self) -> TrainBudget {
        TrainBudget {
            model: self.model.clone(),
            pretrain: self.pretrain,
            finetune: self.finetune,
            edm: self.edm,
            views: self.data.views,
            height: self.data.height,
            width: self.data.width,
        }
    }

    pub fn edit_settings(&self) -> EditSettings {
        EditSettings {
            sampler: self.sampler,
            edm: self.edm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, &text).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
        assert_eq!(c.finetune.steps, 4000);
        assert_eq!(c.sampler.cfg_scale, 1.2);
        assert_eq!(c.model.lora_rank, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[model]\ndim = 32\nwidth_mult = 2\n").unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(err.contains("width_mult"), "{err}");
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(
            None,
            &[
                "model.dim=32".into(),
                "finetune.lr=0.001".into(),
                "ablation.arms=[\"dual_stream\", \"zeroshot\"]".into(),
                "model.variant=feature_concat".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.finetune.lr, 1e-3);
        assert_eq!((c.finetune.phase, c.finetune.steps), (Phase::Finetune, 4000));
        assert_eq!(c.ablation.arms, vec![Arm::DualStream, Arm::Zeroshot]);
        assert_eq!(c.model.variant, crate::denoiser::Variant::FeatureConcat);
        assert!(RunConfig::load(None, &["model.dim".into()]).is_err());
        assert!(RunConfig::load(None, &["model.heads=5".into()]).is_err());
        assert!(RunConfig::load(None, &["refine.noise_frac=1.5".into()]).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig {
            seed: Some(4),
            ..Default::default()
        };
        assert_eq!(c.resolve_seed(Some(9)).unwrap(), 9);
        let mut c = RunConfig {
            seed: Some(4),
            ..Default::default()
        };
        assert_eq!(c.resolve_seed(None).unwrap(), 4);
    }
}
