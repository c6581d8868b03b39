//! Where target tokens in the edited region look at the first sampler step.

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EditSettings;
use crate::datapipe::{build_batch, PairedSample};
use crate::codec::LatentGrid;
use crate::denoiser::{AttentionMaps, BoundDenoiser, Denoiser, StreamTag};
use crate::diffusion::{precondition, run_ladder, standard_normal_latent, NoiseSchedule};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub block: usize,
    pub sequence_len: usize,
    pub queries: usize,
    pub keys: usize,
    /// Attention weight per selected key, averaged over queries and heads.
    pub mass_per_key: f64,
    /// `mass_per_key · L`; 1 means no preference over a uniform spread.
    pub ratio_to_uniform: f64,
}

/// Latent cells whose pixel patch touches the mask, per view.
pub fn cell_mask(masks: ArrayView3<f32>, patch: usize) -> Array3<bool> {
    let (n, h, w) = masks.dim();
    let mut out = Array3::from_elem((n, h / patch, w / patch), false);
    for ((v, y, x), &m) in masks.indexed_iter() {
        if m > 0.5 {
            out[[v, y / patch, x / patch]] = true;
        }
    }
    out
}

/// Attention maps of `block` at sampler step `step` (1-based) of editing
/// `sample`, with the camera index of each target.
pub fn maps_at_step(
    model: &Denoiser<f32>,
    sample: &PairedSample,
    block: usize,
    step: usize,
    seed: u64,
    settings: &EditSettings,
) -> Result<(AttentionMaps<f32>, Vec<usize>)> {
    let batch = build_batch(
        Some(sample.source_views.view()),
        Some(sample.condition_image()),
        sample.condition_index,
        None,
        &sample.poses,
        model.config.patch,
    )?;
    let schedule = NoiseSchedule::<f32>::from_config(settings.sampler.steps, &settings.edm)?;
    ensure!(step >= 1 && step <= schedule.steps(), "step {step} outside [1, {}]", schedule.steps());
    let mut x = standard_normal_latent(&batch.targets, &mut ChaCha8Rng::seed_from_u64(seed));
    x.data.mapv_inplace(|v| v * schedule.sigma_start());
    let net = BoundDenoiser {
        model,
        inputs: &batch.inputs,
    };
    let sigma_data = settings.edm.sigma_data as f32;
    let x = run_ladder(&net, x, &schedule.sigmas[..step], sigma_data, settings.sampler.cfg_scale as f32)?;
    let sigma = schedule.sigmas[step - 1];
    let k = precondition(sigma, sigma_data);
    let scaled = LatentGrid {
        data: x.data.mapv(|v| v * k.c_in),
        patch: x.patch,
    };
    let maps = model.attention_probe(&batch.inputs, &scaled, k.c_noise, block)?;
    Ok((maps, batch.target_views))
}

/// Mean attention from target queries in the edit region onto source keys
/// in the edit region, relative to a uniform spread over the sequence.
pub fn probe_mass(
    model: &Denoiser<f32>,
    sample: &PairedSample,
    block: usize,
    seed: u64,
    settings: &EditSettings,
) -> Result<ProbeReport> {
    let (maps, target_views) = maps_at_step(model, sample, block, 1, seed, settings)?;
    let cells = cell_mask(sample.edit_masks.view(), model.config.patch);
    let grid_w = maps.grid.1;
    let edited = |view: usize, cell: usize| cells[[view, cell / grid_w, cell % grid_w]];
    let queries = edited_queries(&maps, &target_views, &cells);
    let keys: Vec<usize> = (0..maps.key_tags.len())
        .filter(|&j| maps.key_tags[j] == StreamTag::Source && edited(maps.key_views[j], maps.key_spatial[j]))
        .collect();
    ensure!(!queries.is_empty(), "no target token overlaps the edit region");
    ensure!(!keys.is_empty(), "no source token overlaps the edit region");
    let mut total = 0.0;
    for head in &maps.heads {
        for &r in &queries {
            total += keys.iter().map(|&j| f64::from(head[[r, j]])).sum::<f64>();
        }
    }
    let len = maps.key_tags.len();
    let mass_per_key = total / (maps.heads.len() * queries.len() * keys.len()) as f64;
    Ok(ProbeReport {
        block,
        sequence_len: len,
        queries: queries.len(),
        keys: keys.len(),
        mass_per_key,
        ratio_to_uniform: mass_per_key * len as f64,
    })
}

/// Mean attention from the selected target queries onto every source
/// cell, one `h × w` map per source view.
pub fn source_heatmaps(maps: &AttentionMaps<f32>, queries: &[usize], sources: usize) -> Array3<f32> {
    let (h, w) = maps.grid;
    let mut out = Array3::<f32>::zeros((sources, h, w));
    if queries.is_empty() {
        return out;
    }
    let norm = (maps.heads.len() * queries.len()) as f32;
    for (j, tag) in maps.key_tags.iter().enumerate() {
        if *tag != StreamTag::Source {
            continue;
        }
        let cell = maps.key_spatial[j];
        let s: f32 = maps.heads.iter().map(|head| queries.iter().map(|&r| head[[r, j]]).sum::<f32>()).sum();
        out[[maps.key_views[j], cell / w, cell % w]] = s / norm;
    }
    out
}

/// Target rows whose cell lies in the edit region.
pub fn edited_queries(maps: &AttentionMaps<f32>, target_views: &[usize], cells: &Array3<bool>) -> Vec<usize> {
    let w = maps.grid.1;
    (0..maps.query_views.len())
        .filter(|&r| {
            let cell = maps.query_spatial[r];
            cells[[target_views[maps.query_views[r]], cell / w, cell % w]]
        })
        .collect()
}
