//! Multi-view transformer that denoises target views given source views
//! and one edited condition view, all placed in a single token sequence.

mod network;
pub mod ops;
mod tokens;

use serde::{Deserialize, Serialize};

pub use network::{AttentionMaps, BoundDenoiser, ForwardCache, Gradients};
pub use ops::{dual_stream_linear, multiview_attention, Attention};
pub use tokens::{assemble_sequence, pose_features, scatter_back, EditInputs, Segments, TokenSequence, ViewBatch};

use crate::error::{ensure, Error, Result};
use crate::lora::init_adapter;
use crate::params::{gaussian, name_seed, ParamStore};
use crate::scalar::Scalar;

/// Number of features `c_noise` is expanded into before projection.
pub const NOISE_FEATURES: usize = 9;
pub const PROJECTIONS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Source,
    Condition,
    Target,
}

impl StreamTag {
    pub fn indicator(self) -> f64 {
        match self {
            StreamTag::Source => -1.0,
            StreamTag::Condition => 1.0,
            StreamTag::Target => 0.0,
        }
    }
}

/// Which adapter set a routed projection uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterStream {
    Geometry,
    Guidance,
    Shared,
}

impl AdapterStream {
    pub fn key(self) -> &'static str {
        match self {
            AdapterStream::Geometry => "geo",
            AdapterStream::Guidance => "guid",
            AdapterStream::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Sources, condition and targets in one sequence; separate geometry and
    /// guidance adapters.
    DualStream,
    /// Same sequence, one adapter set shared by every token.
    SeqConcatShared,
    /// No source tokens; each target adds its aligned source latent through
    /// a zero-initialized projection. One shared adapter set.
    FeatureConcat,
    /// Base model: condition and targets only, no adapters.
    Zeroshot,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DualStream,
        Variant::SeqConcatShared,
        Variant::FeatureConcat,
        Variant::Zeroshot,
    ];

    pub fn uses_source_tokens(self) -> bool {
        matches!(self, Variant::DualStream | Variant::SeqConcatShared)
    }

    pub fn adapter_streams(self) -> &'static [AdapterStream] {
        match self {
            Variant::DualStream => &[AdapterStream::Geometry, AdapterStream::Guidance],
            Variant::SeqConcatShared | Variant::FeatureConcat => &[AdapterStream::Shared],
            Variant::Zeroshot => &[],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::DualStream => "dual_stream",
            Variant::SeqConcatShared => "seq_concat_shared",
            Variant::FeatureConcat => "feature_concat",
            Variant::Zeroshot => "zeroshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `dim`.
    pub ff_mult: usize,
    pub variant: Variant,
    pub use_indicator: bool,
    pub use_pose: bool,
    /// Add pose features to source tokens too.
    pub pose_on_source: bool,
    /// Route target tokens through the guidance adapter.
    pub guidance_on_target: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Projections that carry adapters.
    pub lora_projections: Vec<String>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 4,
            heads: 4,
            patch: crate::codec::DEFAULT_PATCH,
            ff_mult: 4,
            variant: Variant::DualStream,
            use_indicator: true,
            use_pose: true,
            pose_on_source: true,
            guidance_on_target: false,
            lora_rank: crate::lora::DEFAULT_RANK,
            lora_alpha: crate::lora::DEFAULT_RANK as f64,
            lora_projections: PROJECTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 1 && self.blocks >= 1 && self.heads >= 1, "dim, blocks and heads must be positive");
        ensure!(
            self.dim.is_multiple_of(self.heads),
            "dim {} is not divisible by {} heads",
            self.dim,
            self.heads
        );
        ensure!(self.patch >= 1 && self.ff_mult >= 1, "patch and ff_mult must be positive");
        for p in &self.lora_projections {
            if !PROJECTIONS.contains(&p.as_str()) {
                return Err(Error::Config(format!("unknown LoRA projection `{p}`")));
            }
        }
        if !self.lora_projections.is_empty() && !self.variant.adapter_streams().is_empty() {
            ensure!(
                self.lora_rank >= 1 && self.lora_rank <= self.dim,
                "LoRA rank {} must lie in [1, {}]",
                self.lora_rank,
                self.dim
            );
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn hidden(&self) -> usize {
        self.ff_mult * self.dim
    }

    /// `(d_out, d_in)` of a block projection.
    pub fn projection_shape(&self, proj: &str) -> (usize, usize) {
        match proj {
            "up" => (self.hidden(), self.dim),
            "down" => (self.dim, self.hidden()),
            _ => (self.dim, self.dim),
        }
    }

    pub fn adapter_for(&self, proj: &str, tag: StreamTag) -> Option<AdapterStream> {
        if !self.lora_projections.iter().any(|p| p == proj) {
            return None;
        }
        match self.variant {
            Variant::DualStream => match tag {
                StreamTag::Source => Some(AdapterStream::Geometry),
                StreamTag::Condition => Some(AdapterStream::Guidance),
                StreamTag::Target => self.guidance_on_target.then_some(AdapterStream::Guidance),
            },
            Variant::SeqConcatShared | Variant::FeatureConcat => Some(AdapterStream::Shared),
            Variant::Zeroshot => None,
        }
    }
}

/// Whether a parameter belongs to an adapter set or the fuse projection.
pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".geo.") || name.contains(".guid.") || name.contains(".shared.") || name == "embed.fuse.w"
}

/// Parameters updated while finetuning on editing pairs.
pub fn is_finetune_param(name: &str) -> bool {
    is_adapter_param(name) || matches!(name, "embed.indicator.w" | "embed.pose.w" | "null_cond")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.dim;
        let c = config.channels();
        let mut normal = |name: &str, rows: usize, cols: usize, std: f64| {
            params.insert(name, gaussian::<T>(rows, cols, std, name_seed(seed, name)));
        };
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        normal("embed.latent.w", d, c, inv_sqrt(c));
        normal("embed.spatial.w", d, 2, inv_sqrt(2));
        normal("embed.noise.w", d, NOISE_FEATURES, inv_sqrt(NOISE_FEATURES));
        normal("embed.indicator.w", d, 1, 1.0);
        normal("embed.pose.w", d, 6, inv_sqrt(6));
        let residual = 1.0 / (2.0 * config.blocks as f64).sqrt();
        for b in 0..config.blocks {
            for proj in PROJECTIONS {
                let (rows, cols) = config.projection_shape(proj);
                let std = inv_sqrt(cols) * if matches!(proj, "o" | "down") { residual } else { 1.0 };
                normal(&format!("block{b}.{proj}.w"), rows, cols, std);
            }
        }
        normal("out.w", c, d, inv_sqrt(d));
        let mut model = Self { config, params };
        model.init_constants();
        model.attach_adapters(seed)?;
        Ok(model)
    }

    fn init_constants(&mut self) {
        let d = self.config.dim;
        let c = self.config.channels();
        let hidden = self.config.hidden();
        let ones = |n| ndarray::Array2::from_elem((1, n), T::one());
        let zeros = |n| ndarray::Array2::zeros((1, n));
        self.params.insert("embed.latent.b", zeros(d));
        self.params.insert("null_cond", zeros(d));
        for b in 0..self.config.blocks {
            for ln in ["ln1", "ln2"] {
                self.params.insert(format!("block{b}.{ln}.g"), ones(d));
                self.params.insert(format!("block{b}.{ln}.b"), zeros(d));
            }
            self.params.insert(format!("block{b}.up.b"), zeros(hidden));
            self.params.insert(format!("block{b}.down.b"), zeros(d));
        }
        self.params.insert("final.ln.g", ones(d));
        self.params.insert("final.ln.b", zeros(d));
        self.params.insert("out.b", zeros(c));
    }

    /// Fresh zero-output adapters (and fuse projection) for the configured
    /// variant; existing ones are replaced.
    fn attach_adapters(&mut self, seed: u64) -> Result<()> {
        let names: Vec<String> = self.params.names().filter(|n| is_adapter_param(n)).map(String::from).collect();
        for n in names {
            self.params.remove(&n);
        }
        for b in 0..self.config.blocks {
            for proj in &self.config.lora_projections {
                let (d_out, d_in) = self.config.projection_shape(proj);
                for stream in self.config.variant.adapter_streams() {
                    let prefix = format!("block{b}.{proj}.{}", stream.key());
                    let mut adapter = init_adapter::<T>(d_in, d_out, self.config.lora_rank, name_seed(seed, &prefix))?;
                    adapter.alpha = T::lit(self.config.lora_alpha);
                    self.params.insert(format!("{prefix}.A"), adapter.a);
                    self.params.insert(format!("{prefix}.B"), adapter.b);
                }
            }
        }
        if self.config.variant == Variant::FeatureConcat {
            self.params.insert(
                "embed.fuse.w",
                ndarray::Array2::zeros((self.config.dim, self.config.channels())),
            );
        }
        Ok(())
    }

    /// Edit model built on a pretrained base: base tensors are copied and
    /// fresh adapters are attached according to `config`.
    pub fn from_base(base: &Denoiser<T>, config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let same_shape = base.config.dim == config.dim
            && base.config.blocks == config.blocks
            && base.config.heads == config.heads
            && base.config.patch == config.patch
            && base.config.ff_mult == config.ff_mult;
        if !same_shape {
            return Err(Error::Config(
                "edit model shape (dim/blocks/heads/patch/ff_mult) differs from the base checkpoint".into(),
            ));
        }
        let mut model = Self {
            config,
            params: base.params.subset(|n| !is_adapter_param(n)),
        };
        model.attach_adapters(seed)?;
        Ok(model)
    }

    /// The same network with every adapter and the fuse projection removed.
    pub fn base_equivalent(&self) -> Self {
        let mut config = self.config.clone();
        config.lora_projections.clear();
        if config.variant == Variant::FeatureConcat {
            config.variant = Variant::Zeroshot;
        }
        Self {
            config,
            params: self.params.subset(|n| !is_adapter_param(n)),
        }
    }
}
