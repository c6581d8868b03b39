//! Building blocks of the transformer with their hand-written backward
//! passes.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::StreamTag;
use crate::error::{ensure, Error, Result};
use crate::lora::LoraAdapter;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Low-rank update restricted to a contiguous block of token rows.
#[derive(Debug, Clone)]
pub(crate) struct Route<'a, T> {
    pub rows: Range<usize>,
    pub a: ArrayView2<'a, T>,
    pub b: ArrayView2<'a, T>,
    pub scale: T,
    /// Parameter-name prefix, e.g. `block0.q.geo`.
    pub name: String,
}

/// `x·Wᵀ`, plus `s·(x_r·Aᵀ)·Bᵀ` on the rows of every route.
pub(crate) fn routed_forward<T: Scalar>(x: &Array2<T>, w: ArrayView2<T>, routes: &[Route<T>]) -> Array2<T> {
    let mut y = x.dot(&w.t());
    for r in routes {
        if r.rows.is_empty() {
            continue;
        }
        let xs = x.slice(s![r.rows.clone(), ..]);
        let low = xs.dot(&r.a.t()).dot(&r.b.t());
        y.slice_mut(s![r.rows.clone(), ..]).scaled_add(r.scale, &low);
    }
    y
}

pub(crate) struct RoutedGrads<T> {
    pub dx: Array2<T>,
    pub dw: Array2<T>,
    /// `(name prefix, dA, dB)` per route.
    pub adapters: Vec<(String, Array2<T>, Array2<T>)>,
}

pub(crate) fn routed_backward<T: Scalar>(
    x: &Array2<T>,
    w: ArrayView2<T>,
    routes: &[Route<T>],
    dy: &Array2<T>,
) -> RoutedGrads<T> {
    let mut dx = dy.dot(&w);
    let dw = dy.t().dot(x);
    let mut adapters = Vec::with_capacity(routes.len());
    for r in routes {
        let rank = r.a.nrows();
        if r.rows.is_empty() {
            adapters.push((
                r.name.clone(),
                Array2::zeros((rank, r.a.ncols())),
                Array2::zeros((r.b.nrows(), rank)),
            ));
            continue;
        }
        let xs = x.slice(s![r.rows.clone(), ..]);
        let dys = dy.slice(s![r.rows.clone(), ..]);
        let xa = xs.dot(&r.a.t());
        let dyb = dys.dot(&r.b);
        let db = dys.t().dot(&xa) * r.scale;
        let da = dyb.t().dot(&xs) * r.scale;
        dx.slice_mut(s![r.rows.clone(), ..])
            .scaled_add(r.scale, &dyb.dot(&r.a));
        adapters.push((r.name.clone(), da, db));
    }
    RoutedGrads { dx, dw, adapters }
}

/// Position-wise projection with per-stream adapters: source rows use
/// `geo`, condition rows `guid`, target rows the base weight alone.
pub fn dual_stream_linear<T: Scalar>(
    x: ArrayView2<T>,
    tags: &[StreamTag],
    w: ArrayView2<T>,
    geo: Option<&LoraAdapter<T>>,
    guid: Option<&LoraAdapter<T>>,
) -> Result<Array2<T>> {
    ensure!(x.nrows() == tags.len(), "{} tokens but {} tags", x.nrows(), tags.len());
    ensure!(
        x.ncols() == w.ncols(),
        "token width {} does not match weight input dim {}",
        x.ncols(),
        w.ncols()
    );
    for (adapter, name) in [(geo, "geometry"), (guid, "guidance")] {
        if let Some(a) = adapter {
            ensure!(
                a.a.ncols() == w.ncols() && a.b.nrows() == w.nrows() && a.b.ncols() == a.a.nrows(),
                "{name} adapter shape does not match the base weight"
            );
        }
    }
    let mut y = x.dot(&w.t());
    for (i, tag) in tags.iter().enumerate() {
        let adapter = match tag {
            StreamTag::Source => Some(geo.ok_or_else(|| {
                Error::Config("source tokens present but no geometry adapter".into())
            })?),
            StreamTag::Condition => Some(guid.ok_or_else(|| {
                Error::Config("condition tokens present but no guidance adapter".into())
            })?),
            StreamTag::Target => None,
        };
        if let Some(a) = adapter {
            let low = a.b.dot(&a.a.dot(&x.row(i)));
            y.row_mut(i).scaled_add(a.scale(), &low);
        }
    }
    Ok(y)
}

/// Shared softmax attention over every token, one probability matrix per
/// head.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub out: Array2<T>,
    pub probs: Vec<Array2<T>>,
}

pub fn multiview_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
) -> Result<Attention<T>> {
    ensure!(heads >= 1, "need at least one attention head");
    ensure!(
        q.dim() == k.dim() && q.dim() == v.dim(),
        "q/k/v shapes differ: {:?} {:?} {:?}",
        q.dim(),
        k.dim(),
        v.dim()
    );
    let (len, width) = q.dim();
    ensure!(width % heads == 0, "width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((len, width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p.mapv_inplace(|x| x * scale);
        softmax_rows(&mut p);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    Ok(Attention { out, probs })
}

pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    d_out: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let heads = probs.len();
    let width = q.ncols();
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = d_out.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let mut ds = dout.dot(&v.slice(cols).t());
        Zip::from(ds.rows_mut()).and(p.rows()).for_each(|mut drow, prow| {
            let dot = drow.iter().zip(prow.iter()).fold(T::zero(), |a, (&d, &p)| a + d * p);
            Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot));
        });
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Normalized activations and inverse deviations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &Array2<T>, gain: ArrayView2<T>, bias: ArrayView2<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
        *r = T::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * &gain.row(0) + bias.row(0);
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: ArrayView2<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = T::lit(dy.ncols() as f64);
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = dy * &gain.row(0);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean = row.sum() / d;
        let mean_x = row.iter().zip(xh.iter()).fold(T::zero(), |a, (&g, &x)| a + g * x) / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = r * (*g - mean - x * mean_x));
    }
    (dx, dgain, dbias)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
