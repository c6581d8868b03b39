//! Low-rank adapters: `W ↦ W + (α/r)·B·A` with `B` zero at initialization.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    /// `r × d_in`
    pub a: Array2<T>,
    /// `d_out × r`
    pub b: Array2<T>,
    pub alpha: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn scale(&self) -> T {
        self.alpha / T::lit(self.rank() as f64)
    }

    /// Dense `(α/r)·B·A`.
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }
}

/// `A ~ N(0, 1/d_in)`, `B = 0`, `α = r`.
pub fn init_adapter<T: Scalar>(d_in: usize, d_out: usize, rank: usize, seed: u64) -> Result<LoraAdapter<T>> {
    ensure!(rank >= 1, "LoRA rank must be at least 1");
    ensure!(
        rank <= d_in.min(d_out),
        "LoRA rank {rank} exceeds min(d_in, d_out) = {}",
        d_in.min(d_out)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
    let a = Array2::from_shape_simple_fn((rank, d_in), || T::lit(normal.sample(&mut rng)));
    Ok(LoraAdapter {
        a,
        b: Array2::zeros((d_out, rank)),
        alpha: T::lit(rank as f64),
    })
}

fn check_shapes<T: Scalar>(w: &ArrayView2<T>, adapter: &LoraAdapter<T>) -> Result<()> {
    ensure!(
        adapter.b.ncols() == adapter.rank(),
        "adapter B has {} columns but rank is {}",
        adapter.b.ncols(),
        adapter.rank()
    );
    ensure!(
        w.dim() == (adapter.d_out(), adapter.d_in()),
        "base weight {:?} does not match adapter {}×{}",
        w.dim(),
        adapter.d_out(),
        adapter.d_in()
    );
    Ok(())
}

/// Batched `W·x + (α/r)·B·(A·x)` with one input per row of `x`.
pub fn apply<T: Scalar>(w: ArrayView2<T>, adapter: &LoraAdapter<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    check_shapes(&w, adapter)?;
    ensure!(
        x.ncols() == w.ncols(),
        "input width {} does not match weight input dim {}",
        x.ncols(),
        w.ncols()
    );
    let mut out = x.dot(&w.t());
    let low = x.dot(&adapter.a.t()).dot(&adapter.b.t());
    out.scaled_add(adapter.scale(), &low);
    Ok(out)
}

pub fn apply_vec<T: Scalar>(w: ArrayView2<T>, adapter: &LoraAdapter<T>, x: ArrayView1<T>) -> Result<Vec<T>> {
    let n = x.len();
    let row = x.to_shape((1, n)).expect("contiguous reshape");
    Ok(apply(w, adapter, row.view())?.into_iter().collect())
}

pub fn merge<T: Scalar>(w: ArrayView2<T>, adapter: &LoraAdapter<T>) -> Result<Array2<T>> {
    check_shapes(&w, adapter)?;
    Ok(&w + &adapter.delta())
}
