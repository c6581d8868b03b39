//! Forward pass, hand-written backward pass and attention probing.

use ndarray::{s, Array2, Axis};

use super::ops::{
    attention_backward, layer_norm, layer_norm_backward, multiview_attention, routed_backward, routed_forward,
    silu, silu_grad, LnCache, Route,
};
use super::tokens::{embed, scatter_rows, EditInputs, Embedding, Segments};
use super::{Denoiser, StreamTag};
use crate::codec::LatentGrid;
use crate::diffusion::{Branch, RawNetwork};
use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    a1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    mix: Array2<T>,
    ln2: LnCache<T>,
    a2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Activations retained by [`Denoiser::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    emb: Embedding<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    final_out: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn segments(&self) -> Segments {
        self.emb.seq.segments
    }

    pub fn tags(&self) -> &[StreamTag] {
        &self.emb.seq.tags
    }
}

/// Parameter gradients plus gradients with respect to the latent inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub sources: Option<LatentGrid<T>>,
    pub condition: Option<LatentGrid<T>>,
    pub targets: LatentGrid<T>,
}

/// Per-head attention probabilities of target queries over all keys.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    pub block: usize,
    /// One `(N_tgt·h·w) × L` matrix per head.
    pub heads: Vec<Array2<T>>,
    pub key_tags: Vec<StreamTag>,
    pub key_views: Vec<usize>,
    pub key_spatial: Vec<usize>,
    pub query_views: Vec<usize>,
    pub query_spatial: Vec<usize>,
    pub grid: (usize, usize),
}

fn check_finite<T: Scalar>(x: &Array2<T>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite activations in {what}")))
    }
}

impl<T: Scalar> Denoiser<T> {
    fn routes(&self, block: usize, proj: &str, seg: Segments) -> Result<Vec<Route<'_, T>>> {
        let mut routes: Vec<Route<'_, T>> = Vec::new();
        let scale = T::lit(self.config.lora_alpha / self.config.lora_rank as f64);
        for tag in [StreamTag::Source, StreamTag::Condition, StreamTag::Target] {
            let rows = seg.rows(tag);
            let Some(stream) = self.config.adapter_for(proj, tag) else { continue };
            if rows.is_empty() {
                continue;
            }
            let name = format!("block{block}.{proj}.{}", stream.key());
            // adjacent segments sharing an adapter become one route
            if let Some(last) = routes.last_mut() {
                if last.name == name && last.rows.end == rows.start {
                    last.rows.end = rows.end;
                    continue;
                }
            }
            routes.push(Route {
                rows,
                a: self.params.get(&format!("{name}.A"))?.view(),
                b: self.params.get(&format!("{name}.B"))?.view(),
                scale,
                name,
            });
        }
        Ok(routes)
    }

    /// Raw network output for the target views, shaped like `x_scaled`.
    pub fn forward(
        &self,
        inputs: &EditInputs<T>,
        x_scaled: &LatentGrid<T>,
        c_noise: T,
        branch: Branch,
    ) -> Result<LatentGrid<T>> {
        Ok(self.run(inputs, x_scaled, c_noise, branch, false, None)?.0)
    }

    pub fn forward_cached(
        &self,
        inputs: &EditInputs<T>,
        x_scaled: &LatentGrid<T>,
        c_noise: T,
        branch: Branch,
    ) -> Result<(LatentGrid<T>, ForwardCache<T>)> {
        let (out, cache, _) = self.run(inputs, x_scaled, c_noise, branch, true, None)?;
        Ok((out, cache.expect("cache requested")))
    }

    pub fn attention_probe(
        &self,
        inputs: &EditInputs<T>,
        x_scaled: &LatentGrid<T>,
        c_noise: T,
        block: usize,
    ) -> Result<AttentionMaps<T>> {
        ensure!(
            block < self.config.blocks,
            "block index {block} out of range (model has {})",
            self.config.blocks
        );
        let (_, _, probe) = self.run(inputs, x_scaled, c_noise, Branch::Conditional, false, Some(block))?;
        Ok(probe.expect("probe requested"))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        inputs: &EditInputs<T>,
        x_scaled: &LatentGrid<T>,
        c_noise: T,
        branch: Branch,
        keep: bool,
        probe: Option<usize>,
    ) -> Result<(LatentGrid<T>, Option<ForwardCache<T>>, Option<AttentionMaps<T>>)> {
        let cfg = &self.config;
        let p = &self.params;
        let emb = embed(self, inputs, x_scaled, c_noise, branch == Branch::Unconditional)?;
        let seg = emb.seq.segments;
        let mut h = emb.seq.tokens.clone();
        check_finite(&h, "the token embedding")?;
        let mut caches = Vec::new();
        let mut maps = None;
        for b in 0..cfg.blocks {
            let name = |s: &str| format!("block{b}.{s}");
            let (a1, ln1) = layer_norm(&h, p.get(&name("ln1.g"))?.view(), p.get(&name("ln1.b"))?.view());
            let q = routed_forward(&a1, p.get(&name("q.w"))?.view(), &self.routes(b, "q", seg)?);
            let k = routed_forward(&a1, p.get(&name("k.w"))?.view(), &self.routes(b, "k", seg)?);
            let v = routed_forward(&a1, p.get(&name("v.w"))?.view(), &self.routes(b, "v", seg)?);
            let att = multiview_attention(q.view(), k.view(), v.view(), cfg.heads)?;
            if probe == Some(b) {
                let rows = seg.rows(StreamTag::Target);
                let seq = &emb.seq;
                maps = Some(AttentionMaps {
                    block: b,
                    heads: att.probs.iter().map(|m| m.slice(s![rows.clone(), ..]).to_owned()).collect(),
                    key_tags: seq.tags.clone(),
                    key_views: seq.views.clone(),
                    key_spatial: seq.spatial.clone(),
                    query_views: seq.views[rows.clone()].to_vec(),
                    query_spatial: seq.spatial[rows].to_vec(),
                    grid: seq.grid,
                });
            }
            h = h + routed_forward(&att.out, p.get(&name("o.w"))?.view(), &self.routes(b, "o", seg)?);
            let (a2, ln2) = layer_norm(&h, p.get(&name("ln2.g"))?.view(), p.get(&name("ln2.b"))?.view());
            let pre_act = routed_forward(&a2, p.get(&name("up.w"))?.view(), &self.routes(b, "up", seg)?)
                + p.get(&name("up.b"))?.row(0);
            let act = pre_act.mapv(silu);
            h = h + routed_forward(&act, p.get(&name("down.w"))?.view(), &self.routes(b, "down", seg)?)
                + p.get(&name("down.b"))?.row(0);
            check_finite(&h, &format!("block {b}"))?;
            if keep {
                caches.push(BlockCache {
                    ln1,
                    a1,
                    q,
                    k,
                    v,
                    probs: att.probs,
                    mix: att.out,
                    ln2,
                    a2,
                    pre_act,
                    act,
                });
            }
        }
        let tgt = h.slice(s![seg.rows(StreamTag::Target), ..]).to_owned();
        let (final_out, final_ln) = layer_norm(&tgt, p.get("final.ln.g")?.view(), p.get("final.ln.b")?.view());
        let out = final_out.dot(&p.get("out.w")?.t()) + p.get("out.b")?.row(0);
        check_finite(&out, "the output projection")?;
        let grid = scatter_rows(out.view(), x_scaled.h(), x_scaled.w(), x_scaled.patch)?;
        let cache = keep.then(|| ForwardCache {
            emb,
            blocks: caches,
            final_ln,
            final_out,
        });
        Ok((grid, cache, maps))
    }

    /// Gradients of `Σ d_out ⊙ F` with respect to every parameter and latent
    /// input.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &LatentGrid<T>) -> Result<Gradients<T>> {
        let p = &self.params;
        let cfg = &self.config;
        let seg = cache.emb.seq.segments;
        let len = seg.len();
        let dy = super::tokens::gather_rows(d_out);
        ensure!(
            dy.dim() == (seg.targets, cfg.channels()),
            "output gradient does not match the cached forward pass"
        );
        let mut grads = ParamStore::new();
        grads.insert("out.w", dy.t().dot(&cache.final_out));
        grads.insert("out.b", dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let d_final = dy.dot(p.get("out.w")?);
        let (d_tgt, dg, db) = layer_norm_backward(&cache.final_ln, p.get("final.ln.g")?.view(), &d_final);
        grads.insert("final.ln.g", dg);
        grads.insert("final.ln.b", db);
        let mut dh = Array2::zeros((len, cfg.dim));
        dh.slice_mut(s![seg.rows(StreamTag::Target), ..]).assign(&d_tgt);

        let store_routed = |grads: &mut ParamStore<T>, b: usize, proj: &str, rg: &super::ops::RoutedGrads<T>| {
            grads.insert(format!("block{b}.{proj}.w"), rg.dw.clone());
            for (prefix, da, dbb) in &rg.adapters {
                grads.add_into(&format!("{prefix}.A"), da);
                grads.add_into(&format!("{prefix}.B"), dbb);
            }
        };
        for b in (0..cfg.blocks).rev() {
            let c = &cache.blocks[b];
            let name = |s: &str| format!("block{b}.{s}");
            // feed-forward sublayer
            grads.insert(name("down.b"), dh.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let down = routed_backward(&c.act, p.get(&name("down.w"))?.view(), &self.routes(b, "down", seg)?, &dh);
            store_routed(&mut grads, b, "down", &down);
            let mut d_pre = down.dx;
            ndarray::Zip::from(&mut d_pre)
                .and(&c.pre_act)
                .for_each(|g, &x| *g *= silu_grad(x));
            grads.insert(name("up.b"), d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let up = routed_backward(&c.a2, p.get(&name("up.w"))?.view(), &self.routes(b, "up", seg)?, &d_pre);
            store_routed(&mut grads, b, "up", &up);
            let (dx2, dg2, db2) = layer_norm_backward(&c.ln2, p.get(&name("ln2.g"))?.view(), &up.dx);
            grads.insert(name("ln2.g"), dg2);
            grads.insert(name("ln2.b"), db2);
            dh += &dx2;
            // attention sublayer
            let o = routed_backward(&c.mix, p.get(&name("o.w"))?.view(), &self.routes(b, "o", seg)?, &dh);
            store_routed(&mut grads, b, "o", &o);
            let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &o.dx);
            let mut da1 = Array2::zeros((len, cfg.dim));
            for (proj, d) in [("q", &dq), ("k", &dk), ("v", &dv)] {
                let rg = routed_backward(&c.a1, p.get(&name(&format!("{proj}.w")))?.view(), &self.routes(b, proj, seg)?, d);
                da1 += &rg.dx;
                store_routed(&mut grads, b, proj, &rg);
            }
            let (dx1, dg1, db1) = layer_norm_backward(&c.ln1, p.get(&name("ln1.g"))?.view(), &da1);
            grads.insert(name("ln1.g"), dg1);
            grads.insert(name("ln1.b"), db1);
            dh += &dx1;
        }
        self.embedding_backward(cache, &dh, grads)
    }

    fn embedding_backward(&self, cache: &ForwardCache<T>, dh: &Array2<T>, mut grads: ParamStore<T>) -> Result<Gradients<T>> {
        let p = &self.params;
        let e = &cache.emb;
        let seg = e.seq.segments;
        let (h, w) = e.seq.grid;
        let patch = self.config.patch;
        grads.insert("embed.spatial.w", dh.t().dot(&e.spatial));
        grads.insert("embed.indicator.w", dh.t().dot(&e.indicator));
        grads.insert("embed.pose.w", dh.t().dot(&e.pose));
        grads.insert("embed.noise.w", dh.sum_axis(Axis(0)).insert_axis(Axis(1)).dot(&e.noise));

        // rows whose content comes from the latent projection
        let mut dh_content = dh.clone();
        let mut d_null = Array2::zeros((1, self.config.dim));
        if e.nulled {
            let rows = seg.rows(StreamTag::Condition);
            d_null = dh.slice(s![rows.clone(), ..]).sum_axis(Axis(0)).insert_axis(Axis(0));
            dh_content.slice_mut(s![rows, ..]).fill(T::zero());
        }
        grads.insert("null_cond", d_null);
        grads.insert("embed.latent.w", dh_content.t().dot(&e.seq.latents));
        grads.insert("embed.latent.b", dh_content.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let d_lat = dh_content.dot(p.get("embed.latent.w")?);

        let mut d_sources = if seg.sources > 0 {
            Some(scatter_rows(d_lat.slice(s![seg.rows(StreamTag::Source), ..]), h, w, patch)?)
        } else {
            None
        };
        let d_condition = if seg.condition > 0 {
            Some(scatter_rows(d_lat.slice(s![seg.rows(StreamTag::Condition), ..]), h, w, patch)?)
        } else {
            None
        };
        let d_targets = scatter_rows(d_lat.slice(s![seg.rows(StreamTag::Target), ..]), h, w, patch)?;
        if let Some(f) = &e.fuse {
            grads.insert("embed.fuse.w", dh.t().dot(&f.rows));
            // aligned source cells enter through the fuse projection only
            let d_fuse = dh.dot(p.get("embed.fuse.w")?);
            let mut acc = Array2::zeros((f.source_views * h * w, self.config.channels()));
            for (row, &src) in seg.rows(StreamTag::Target).zip(&f.source_row) {
                let mut dst = acc.row_mut(src);
                dst += &d_fuse.row(row);
            }
            d_sources = Some(scatter_rows(acc.view(), h, w, patch)?);
        }
        Ok(Gradients {
            params: grads,
            sources: d_sources,
            condition: d_condition,
            targets: d_targets,
        })
    }
}

/// A denoiser bound to fixed conditioning inputs, usable by the sampler.
pub struct BoundDenoiser<'a, T> {
    pub model: &'a Denoiser<T>,
    pub inputs: &'a EditInputs<T>,
}

impl<T: Scalar> RawNetwork<T> for BoundDenoiser<'_, T> {
    fn raw(&self, x_scaled: &LatentGrid<T>, c_noise: T, branch: Branch) -> Result<LatentGrid<T>> {
        self.model.forward(self.inputs, x_scaled, c_noise, branch)
    }
}
