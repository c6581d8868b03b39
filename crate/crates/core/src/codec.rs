//! Lossless space-to-depth latent codec.
//!
//! Each `p × p` pixel block of each color channel becomes `p²` latent
//! channels (latent channel `c·p² + dy·p + dx`), and values are mapped
//! `x ↦ 2x − 1`. For images on the [`Scalar::unit_grid`] the round trip is
//! exact; every image the renderer or the PNG reader produces is on it.

use ndarray::{Array4, ArrayView4};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

pub const DEFAULT_PATCH: usize = 4;

/// Per-view latent tensor `V × C × h × w` with `C = 3·p²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub data: Array4<T>,
    pub patch: usize,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(data: Array4<T>, patch: usize) -> Result<Self> {
        ensure!(patch > 0, "patch must be positive");
        let c = data.dim().1;
        ensure!(
            c == 3 * patch * patch,
            "latent has {c} channels, expected 3·{patch}² = {}",
            3 * patch * patch
        );
        Ok(Self { data, patch })
    }

    pub fn zeros(views: usize, h: usize, w: usize, patch: usize) -> Self {
        Self {
            data: Array4::zeros((views, 3 * patch * patch, h, w)),
            patch,
        }
    }

    pub fn views(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn h(&self) -> usize {
        self.data.dim().2
    }

    pub fn w(&self) -> usize {
        self.data.dim().3
    }

    /// Pixel resolution this latent decodes to.
    pub fn image_size(&self) -> (usize, usize) {
        (self.h() * self.patch, self.w() * self.patch)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.patch == other.patch && self.data.dim() == other.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn encode<T: Scalar>(images: ArrayView4<T>, patch: usize) -> Result<LatentGrid<T>> {
    let (v, c, h, w) = images.dim();
    ensure!(c == 3, "expected 3 color channels, got {c}");
    ensure!(patch > 0, "patch must be positive");
    ensure!(
        h % patch == 0 && w % patch == 0,
        "image {h}×{w} not divisible by patch {patch}"
    );
    let (lh, lw) = (h / patch, w / patch);
    let two = T::lit(2.0);
    let data = Array4::from_shape_fn((v, 3 * patch * patch, lh, lw), |(n, ch, i, j)| {
        let (color, rem) = (ch / (patch * patch), ch % (patch * patch));
        let (dy, dx) = (rem / patch, rem % patch);
        two * images[[n, color, i * patch + dy, j * patch + dx]] - T::one()
    });
    Ok(LatentGrid { data, patch })
}

/// Exact inverse of [`encode`]. No clamping happens here.
pub fn decode<T: Scalar>(latent: &LatentGrid<T>) -> Result<Array4<T>> {
    let p = latent.patch;
    let (v, c, lh, lw) = latent.data.dim();
    ensure!(p > 0 && c == 3 * p * p, "malformed latent: {c} channels for patch {p}");
    let half = T::lit(0.5);
    Ok(Array4::from_shape_fn((v, 3, lh * p, lw * p), |(n, color, y, x)| {
        let ch = color * p * p + (y % p) * p + (x % p);
        (latent.data[[n, ch, y / p, x / p]] + T::one()) * half
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::snap_to_unit_grid;
    use proptest::prelude::*;

    #[test]
    fn midgray_encodes_to_zero() {
        let img = Array4::<f32>::from_elem((2, 3, 8, 8), 0.5);
        let z = encode(img.view(), 4).unwrap();
        assert_eq!(z.data.dim(), (2, 48, 2, 2));
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkerboard_channels_follow_block_layout() {
        // 8×8 checkerboard in red, 0 elsewhere
        let img = Array4::<f64>::from_shape_fn((1, 3, 8, 8), |(_, c, y, x)| {
            if c == 0 {
                ((x + y) % 2) as f64
            } else {
                0.0
            }
        });
        let z = encode(img.view(), 4).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        let y = i * 4 + dy;
                        let x = j * 4 + dx;
                        let want = 2.0 * ((x + y) % 2) as f64 - 1.0;
                        assert_eq!(z.data[[0, dy * 4 + dx, i, j]], want);
                        assert_eq!(z.data[[0, 16 + dy * 4 + dx, i, j]], -1.0);
                    }
                }
            }
        }
        assert_eq!(decode(&z).unwrap(), img);
    }

    #[test]
    fn rejects_bad_shapes() {
        let img = Array4::<f32>::zeros((1, 3, 10, 8));
        assert!(encode(img.view(), 4).is_err());
        let bad = LatentGrid {
            data: Array4::<f32>::zeros((1, 47, 2, 2)),
            patch: 4,
        };
        assert!(decode(&bad).is_err());
        assert!(LatentGrid::new(Array4::<f32>::zeros((1, 12, 2, 2)), 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_on_grid(
            vals in proptest::collection::vec(0.0f32..=1.0, 3 * 8 * 4),
        ) {
            let img = Array4::from_shape_vec((1, 3, 8, 4), vals).unwrap().mapv(snap_to_unit_grid);
            let z = encode(img.view(), 4).unwrap();
            let back = decode(&z).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode(back.view(), 4).unwrap(), z);
        }

        #[test]
        fn rearrangement_is_linear(
            a in proptest::collection::vec(0.0f64..1.0, 3 * 16),
            b in proptest::collection::vec(0.0f64..1.0, 3 * 16),
            alpha in 0.0f64..1.0,
        ) {
            let x = Array4::from_shape_vec((1, 3, 4, 4), a).unwrap();
            let y = Array4::from_shape_vec((1, 3, 4, 4), b).unwrap();
            let mix = &x * alpha + &y * (1.0 - alpha);
            let lhs = encode(mix.view(), 2).unwrap().data;
            let rhs = encode(x.view(), 2).unwrap().data * alpha + encode(y.view(), 2).unwrap().data * (1.0 - alpha);
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
