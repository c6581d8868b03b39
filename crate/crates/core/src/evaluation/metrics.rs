//! Image metrics and cross-view agreement measured through ground-truth
//! geometry.

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayView4};

use crate::error::{ensure, Result};
use crate::geometry::{dot, norm, normalize, sub, CameraPose};
use crate::scene::{render_with_hits, trace, Hit, Rendered, SceneSpec, Surface};

/// Reported value for identical inputs and the upper clamp of every PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR over the pixels with `mask > 0.5`, all channels pooled; images in
/// `[0, 1]` as `C × H × W`, mask `H × W`.
pub fn masked_psnr(pred: ArrayView3<f32>, reference: ArrayView3<f32>, mask: ArrayView2<f32>) -> Result<f64> {
    let p = pred.insert_axis(ndarray::Axis(0));
    let r = reference.insert_axis(ndarray::Axis(0));
    let m = mask.insert_axis(ndarray::Axis(0));
    masked_psnr_views(p, r, m)
}

/// [`masked_psnr`] with the squared error pooled over a stack of views.
pub fn masked_psnr_views(pred: ArrayView4<f32>, reference: ArrayView4<f32>, masks: ArrayView3<f32>) -> Result<f64> {
    Ok(psnr_from_mse(masked_mse(pred, reference, masks, true)?))
}

/// Mean squared error inside (`inside = true`) or outside the masks.
pub fn masked_mse(pred: ArrayView4<f32>, reference: ArrayView4<f32>, masks: ArrayView3<f32>, inside: bool) -> Result<f64> {
    ensure!(pred.dim() == reference.dim(), "image shapes differ: {:?} vs {:?}", pred.dim(), reference.dim());
    let (n, c, h, w) = pred.dim();
    ensure!(masks.dim() == (n, h, w), "mask shape {:?} does not match images", masks.dim());
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..n {
        for y in 0..h {
            for x in 0..w {
                if (masks[[v, y, x]] > 0.5) != inside {
                    continue;
                }
                count += c;
                for ch in 0..c {
                    let d = f64::from(pred[[v, ch, y, x]]) - f64::from(reference[[v, ch, y, x]]);
                    sum += d * d;
                }
            }
        }
    }
    ensure!(count > 0, "mask selects no pixels");
    Ok(sum / count as f64)
}

pub fn luminance(image: ArrayView3<f32>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|c| LUMA[c] * f64::from(image[[c, y, x]])).sum())
}

/// Mean SSIM over every fully contained 7×7 window of the luminance
/// images, population statistics, dynamic range 1.
pub fn ssim(pred: ArrayView3<f32>, reference: ArrayView3<f32>) -> Result<f64> {
    ensure!(pred.dim() == reference.dim(), "image shapes differ");
    ensure!(pred.dim().0 == 3, "SSIM expects RGB input");
    ssim_gray(luminance(pred).view(), luminance(reference).view())
}

pub fn ssim_gray(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "image shapes differ");
    let (h, w) = a.dim();
    let k = SSIM_WINDOW;
    ensure!(h >= k && w >= k, "image {h}×{w} is smaller than the {k}×{k} window");
    let table = |f: &dyn Fn(f64, f64) -> f64| {
        let mut s = Array2::<f64>::zeros((h + 1, w + 1));
        for y in 0..h {
            for x in 0..w {
                s[[y + 1, x + 1]] = f(a[[y, x]], b[[y, x]]) + s[[y, x + 1]] + s[[y + 1, x]] - s[[y, x]];
            }
        }
        s
    };
    let sa = table(&|p, _| p);
    let sb = table(&|_, q| q);
    let saa = table(&|p, _| p * p);
    let sbb = table(&|_, q| q * q);
    let sab = table(&|p, q| p * q);
    let boxsum = |s: &Array2<f64>, y: usize, x: usize| s[[y + k, x + k]] - s[[y, x + k]] - s[[y + k, x]] + s[[y, x]];
    let n = (k * k) as f64;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = boxsum(&sa, y, x) / n;
            let mb = boxsum(&sb, y, x) / n;
            let va = (boxsum(&saa, y, x) / n - ma * ma).max(0.0);
            let vb = (boxsum(&sbb, y, x) / n - mb * mb).max(0.0);
            let cov = boxsum(&sab, y, x) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// One surface point seen by an anchor pixel and the colors other views
/// report for it.
#[derive(Debug, Clone)]
pub struct CorrespondenceGroup {
    pub view: usize,
    pub pixel: (usize, usize),
    pub anchor: [f64; 3],
    pub others: Vec<(usize, [f64; 3])>,
}

/// For every anchor pixel (inside `masks` when given) whose surface point
/// is visible in other views, gather the colors those views show there.
/// Visibility: the other camera's first hit is the same surface within
/// half a pixel footprint; colors are bilinear over neighbors on the same
/// surface, face and shadow state.
pub fn correspondences(
    views: ArrayView4<f32>,
    scene: &SceneSpec,
    poses: &[CameraPose<f64>],
    masks: Option<ArrayView3<f32>>,
) -> Result<Vec<CorrespondenceGroup>> {
    let (n, c, h, w) = views.dim();
    ensure!(c == 3, "views must be RGB");
    ensure!(poses.len() == n, "{} poses for {n} views", poses.len());
    ensure!(
        poses.iter().all(|p| p.height() == h && p.width() == w),
        "pose resolution does not match the views"
    );
    if let Some(m) = &masks {
        ensure!(m.dim() == (n, h, w), "mask shape {:?} does not match views", m.dim());
    }
    let renders: Vec<Rendered> = poses.iter().map(|p| render_with_hits(scene, p)).collect();
    let color = |v: usize, y: usize, x: usize| std::array::from_fn(|ch| f64::from(views[[v, ch, y, x]]));
    let mut groups = Vec::new();
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                if masks.as_ref().is_some_and(|m| m[[i, y, x]] <= 0.5) {
                    continue;
                }
                let hit = renders[i].hit(y, x);
                if hit.surface == Surface::Background {
                    continue;
                }
                let mut others = Vec::new();
                for j in (0..n).filter(|&j| j != i) {
                    if let Some(col) = sample_in_view(scene, &poses[j], &renders[j], hit, views, j) {
                        others.push((j, col));
                    }
                }
                if !others.is_empty() {
                    groups.push(CorrespondenceGroup {
                        view: i,
                        pixel: (y, x),
                        anchor: color(i, y, x),
                        others,
                    });
                }
            }
        }
    }
    Ok(groups)
}

fn sample_in_view(
    scene: &SceneSpec,
    pose: &CameraPose<f64>,
    render: &Rendered,
    anchor: &Hit,
    views: ArrayView4<f32>,
    j: usize,
) -> Option<[f64; 3]> {
    let (surface, point) = (anchor.surface, anchor.point);
    let shadowed = !anchor.shadowed_by.is_empty();
    let (u, v) = pose.project(point)?;
    let (h, w) = (pose.height(), pose.width());
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let to_point = sub(point, pose.center());
    let dist = norm(to_point);
    let (_, first) = trace(scene, pose.center(), normalize(to_point));
    let footprint = 0.5 * dist / pose.intrinsics().fx.min(pose.intrinsics().fy);
    if first.surface != surface || dist - first.distance > footprint {
        return None;
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let taps = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ];
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (y, x, wgt) in taps {
        let tap = render.hit(y, x);
        let smooth = dot(tap.normal, anchor.normal) > 0.95;
        if wgt > 0.0 && tap.surface == surface && smooth && tap.shadowed_by.is_empty() != shadowed {
            total += wgt;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += wgt * f64::from(views[[j, ch, y, x]]);
            }
        }
    }
    (total > 1e-9).then(|| acc.map(|a| a / total))
}

/// Mean absolute color difference between corresponding pixels of
/// different views; `None` when no pixel is seen twice.
pub fn cross_view_consistency(
    views: ArrayView4<f32>,
    scene: &SceneSpec,
    poses: &[CameraPose<f64>],
) -> Result<Option<f64>> {
    Ok(consistency_of(&correspondences(views, scene, poses, None)?))
}

pub fn cross_view_consistency_masked(
    views: ArrayView4<f32>,
    scene: &SceneSpec,
    poses: &[CameraPose<f64>],
    masks: ArrayView3<f32>,
) -> Result<Option<f64>> {
    Ok(consistency_of(&correspondences(views, scene, poses, Some(masks))?))
}

fn consistency_of(groups: &[CorrespondenceGroup]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in groups {
        for (_, col) in &g.others {
            sum += (0..3).map(|c| (g.anchor[c] - col[c]).abs()).sum::<f64>() / 3.0;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Per-channel variance across the views observing each anchor's surface
/// point, averaged over channels and anchors inside the masks.
pub fn cross_view_variance(
    views: ArrayView4<f32>,
    scene: &SceneSpec,
    poses: &[CameraPose<f64>],
    masks: ArrayView3<f32>,
) -> Result<Option<f64>> {
    let groups = correspondences(views, scene, poses, Some(masks))?;
    if groups.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for g in &groups {
        let k = (g.others.len() + 1) as f64;
        let mut var = 0.0;
        for c in 0..3 {
            let values = std::iter::once(g.anchor[c]).chain(g.others.iter().map(|o| o.1[c]));
            let mean = values.clone().sum::<f64>() / k;
            var += values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
        }
        total += var / 3.0;
    }
    Ok(Some(total / groups.len() as f64))
}
