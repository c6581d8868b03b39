//! Packing of source, condition and noisy target latents into one token
//! sequence, and the inverse bookkeeping.

use std::ops::Range;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};

use super::{Denoiser, StreamTag, Variant, NOISE_FEATURES};
use crate::codec::LatentGrid;
use crate::error::{ensure, Result};
use crate::geometry::{plucker_map, CameraPose};
use crate::scalar::Scalar;

/// Latents of one stream plus their pooled ray features (`V × 6 × h × w`).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch<T> {
    pub latents: LatentGrid<T>,
    pub pose: Array4<T>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn new(latents: LatentGrid<T>, pose: Array4<T>) -> Result<Self> {
        ensure!(
            pose.dim() == (latents.views(), 6, latents.h(), latents.w()),
            "pose features {:?} do not match latents of {} views at {}×{}",
            pose.dim(),
            latents.views(),
            latents.h(),
            latents.w()
        );
        Ok(Self { latents, pose })
    }

    pub fn from_poses(latents: LatentGrid<T>, poses: &[CameraPose<T>]) -> Result<Self> {
        let pose = pose_features(poses, latents.patch)?;
        Self::new(latents, pose)
    }

    pub fn views(&self) -> usize {
        self.latents.views()
    }
}

/// Ray maps of each (already normalized) camera, average-pooled per patch.
pub fn pose_features<T: Scalar>(poses: &[CameraPose<T>], patch: usize) -> Result<Array4<T>> {
    ensure!(!poses.is_empty(), "pose_features needs at least one pose");
    let first = plucker_map(&poses[0]).pooled(patch)?;
    let (_, h, w) = first.dim();
    let mut out = Array4::zeros((poses.len(), 6, h, w));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for (i, p) in poses.iter().enumerate().skip(1) {
        let pooled = plucker_map(p).pooled(patch)?;
        ensure!(pooled.dim() == (6, h, w), "all views must share one resolution");
        out.index_axis_mut(Axis(0), i).assign(&pooled);
    }
    Ok(out)
}

/// Everything a forward pass is conditioned on besides the noisy targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInputs<T> {
    pub sources: Option<ViewBatch<T>>,
    pub condition: Option<ViewBatch<T>>,
    /// Ray features of the target cameras.
    pub target_pose: Array4<T>,
    /// For each target, the source view taken from the same camera.
    pub target_sources: Vec<usize>,
}

/// Token counts of the three contiguous stream blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub sources: usize,
    pub condition: usize,
    pub targets: usize,
}

impl Segments {
    pub fn len(&self) -> usize {
        self.sources + self.condition + self.targets
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, tag: StreamTag) -> Range<usize> {
        match tag {
            StreamTag::Source => 0..self.sources,
            StreamTag::Condition => self.sources..self.sources + self.condition,
            StreamTag::Target => self.sources + self.condition..self.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `L × d` embedded features.
    pub tokens: Array2<T>,
    pub tags: Vec<StreamTag>,
    pub views: Vec<usize>,
    pub spatial: Vec<usize>,
    pub segments: Segments,
    /// Latent grid size `(h, w)`.
    pub grid: (usize, usize),
    /// `L × C` latent cell each token was built from.
    pub latents: Array2<T>,
}

/// Raw per-token inputs of every embedding term, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Embedding<T> {
    pub seq: TokenSequence<T>,
    pub nulled: bool,
    pub spatial: Array2<T>,
    pub indicator: Array2<T>,
    pub pose: Array2<T>,
    pub noise: Array2<T>,
    pub fuse: Option<FuseInput<T>>,
}

/// Aligned source cells added onto target tokens.
#[derive(Debug, Clone)]
pub(crate) struct FuseInput<T> {
    /// `L × C`, zero outside target rows.
    pub rows: Array2<T>,
    /// Source row (view-major) feeding each target token.
    pub source_row: Vec<usize>,
    pub source_views: usize,
}

pub(crate) fn noise_features<T: Scalar>(c_noise: T) -> Array2<T> {
    let mut f = Array2::zeros((1, NOISE_FEATURES));
    f[[0, 0]] = c_noise;
    for k in 1..=(NOISE_FEATURES - 1) / 2 {
        let w = T::lit(k as f64 * std::f64::consts::FRAC_PI_2);
        f[[0, 2 * k - 1]] = (w * c_noise).sin();
        f[[0, 2 * k]] = (w * c_noise).cos();
    }
    f
}

fn coord<T: Scalar>(i: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        T::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
    }
}

/// `V·h·w × C` rows in view-major, row-major spatial order.
pub(crate) fn gather_rows<T: Scalar>(grid: &LatentGrid<T>) -> Array2<T> {
    let (v, c, h, w) = grid.data.dim();
    let permuted = grid.data.view().permuted_axes([0, 2, 3, 1]);
    permuted
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((v * h * w, c))
        .expect("contiguous")
}

pub(crate) fn scatter_rows<T: Scalar>(rows: ArrayView2<T>, h: usize, w: usize, patch: usize) -> Result<LatentGrid<T>> {
    let (n, c) = rows.dim();
    ensure!(h * w > 0 && n % (h * w) == 0, "{n} rows do not tile a {h}×{w} grid");
    let data = rows
        .to_owned()
        .into_shape_with_order((n / (h * w), h, w, c))
        .expect("row count checked")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned();
    LatentGrid::new(data, patch)
}

/// Source, condition and target grids; the first two may be absent.
pub type StreamGrids<T> = (Option<LatentGrid<T>>, Option<LatentGrid<T>>, LatentGrid<T>);

/// Inverse of the packing order: per-stream latent grids from `L × C` rows.
pub fn scatter_back<T: Scalar>(
    rows: ArrayView2<T>,
    segments: Segments,
    grid: (usize, usize),
    patch: usize,
) -> Result<StreamGrids<T>> {
    ensure!(rows.nrows() == segments.len(), "row count does not match segments");
    let (h, w) = grid;
    let part = |tag: StreamTag| -> Result<Option<LatentGrid<T>>> {
        let r = segments.rows(tag);
        if r.is_empty() {
            return Ok(None);
        }
        scatter_rows(rows.slice(s![r, ..]), h, w, patch).map(Some)
    };
    let targets = part(StreamTag::Target)?
        .ok_or_else(|| crate::Error::invalid("sequence has no target tokens"))?;
    Ok((part(StreamTag::Source)?, part(StreamTag::Condition)?, targets))
}

/// Token sequence ordered sources, condition, targets.
pub fn assemble_sequence<T: Scalar>(
    model: &Denoiser<T>,
    inputs: &EditInputs<T>,
    noisy_targets: &LatentGrid<T>,
    c_noise: T,
    null_condition: bool,
) -> Result<TokenSequence<T>> {
    Ok(embed(model, inputs, noisy_targets, c_noise, null_condition)?.seq)
}

pub(crate) fn embed<T: Scalar>(
    model: &Denoiser<T>,
    inputs: &EditInputs<T>,
    noisy: &LatentGrid<T>,
    c_noise: T,
    null_condition: bool,
) -> Result<Embedding<T>> {
    let cfg = &model.config;
    let (h, w) = (noisy.h(), noisy.w());
    let hw = h * w;
    ensure!(noisy.views() >= 1, "need at least one target view");
    ensure!(
        noisy.channels() == cfg.channels(),
        "latent channels {} do not match the model ({})",
        noisy.channels(),
        cfg.channels()
    );
    ensure!(
        inputs.target_pose.dim() == (noisy.views(), 6, h, w),
        "target pose features {:?} do not match {} targets at {h}×{w}",
        inputs.target_pose.dim(),
        noisy.views()
    );
    for (batch, what) in [(&inputs.sources, "source"), (&inputs.condition, "condition")] {
        if let Some(b) = batch {
            ensure!(
                b.latents.h() == h && b.latents.w() == w && b.latents.channels() == noisy.channels(),
                "{what} latents do not share the target resolution"
            );
        }
    }
    if let Some(c) = &inputs.condition {
        ensure!(c.views() == 1, "condition must be exactly one view, got {}", c.views());
    }
    let sources = inputs.sources.as_ref().filter(|_| cfg.variant.uses_source_tokens());
    let fuse_sources = if cfg.variant == Variant::FeatureConcat {
        let s = inputs
            .sources
            .as_ref()
            .ok_or_else(|| crate::Error::invalid("feature concatenation needs source views"))?;
        ensure!(
            inputs.target_sources.len() == noisy.views()
                && inputs.target_sources.iter().all(|&i| i < s.views()),
            "target_sources must name one valid source view per target"
        );
        Some(s)
    } else {
        None
    };
    let segments = Segments {
        sources: sources.map_or(0, |s| s.views() * hw),
        condition: inputs.condition.as_ref().map_or(0, |c| c.views() * hw),
        targets: noisy.views() * hw,
    };
    let len = segments.len();
    let channels = cfg.channels();

    let mut latents = Array2::zeros((len, channels));
    let mut pose = Array2::zeros((len, 6));
    let mut spatial = Array2::zeros((len, 2));
    let mut indicator = Array2::zeros((len, 1));
    let mut tags = Vec::with_capacity(len);
    let mut views = Vec::with_capacity(len);
    let mut cells = Vec::with_capacity(len);
    let streams = [
        (StreamTag::Source, sources.map(|s| (&s.latents, &s.pose))),
        (StreamTag::Condition, inputs.condition.as_ref().map(|c| (&c.latents, &c.pose))),
        (StreamTag::Target, Some((noisy, &inputs.target_pose))),
    ];
    for (tag, stream) in streams {
        let Some((grid, rays)) = stream else { continue };
        let rows = segments.rows(tag);
        latents.slice_mut(s![rows.clone(), ..]).assign(&gather_rows(grid));
        let with_pose = cfg.use_pose && (tag != StreamTag::Source || cfg.pose_on_source);
        for (n, row) in rows.enumerate() {
            let (view, cell) = (n / hw, n % hw);
            let (i, j) = (cell / w, cell % w);
            tags.push(tag);
            views.push(view);
            cells.push(cell);
            spatial[[row, 0]] = coord(j, w);
            spatial[[row, 1]] = coord(i, h);
            if cfg.use_indicator {
                indicator[[row, 0]] = T::lit(tag.indicator());
            }
            if with_pose {
                for k in 0..6 {
                    pose[[row, k]] = rays[[view, k, i, j]];
                }
            }
        }
    }
    let fuse = fuse_sources.map(|s| {
        let src_rows = gather_rows(&s.latents);
        let mut rows = Array2::zeros((len, channels));
        let mut source_row = Vec::with_capacity(segments.targets);
        for (n, row) in segments.rows(StreamTag::Target).enumerate() {
            let src = inputs.target_sources[n / hw] * hw + n % hw;
            rows.row_mut(row).assign(&src_rows.row(src));
            source_row.push(src);
        }
        FuseInput {
            rows,
            source_row,
            source_views: s.views(),
        }
    });
    let noise = noise_features(c_noise);
    let nulled = null_condition && segments.condition > 0;

    let p = &model.params;
    let mut tokens = latents.dot(&p.get("embed.latent.w")?.t()) + p.get("embed.latent.b")?.row(0);
    if nulled {
        let null = p.get("null_cond")?.row(0);
        for mut row in tokens.slice_mut(s![segments.rows(StreamTag::Condition), ..]).rows_mut() {
            row.assign(&null);
        }
    }
    tokens += &spatial.dot(&p.get("embed.spatial.w")?.t());
    tokens += &indicator.dot(&p.get("embed.indicator.w")?.t());
    tokens += &pose.dot(&p.get("embed.pose.w")?.t());
    tokens += &noise.dot(&p.get("embed.noise.w")?.t()).row(0);
    if let Some(f) = &fuse {
        tokens += &f.rows.dot(&p.get("embed.fuse.w")?.t());
    }
    Ok(Embedding {
        seq: TokenSequence {
            tokens,
            tags,
            views,
            spatial: cells,
            segments,
            grid: (h, w),
            latents,
        },
        nulled,
        spatial,
        indicator,
        pose,
        noise,
        fuse,
    })
}
