//! Pinhole cameras, scene-level camera normalization, per-pixel rays and
//! Plücker line maps.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
/// Row-major 3×3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Scalar>(a: Vec3<T>) -> Vec3<T> {
    scale(a, T::one() / norm(a))
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (i, row) in m.iter().enumerate() {
        for (o, r) in out.iter_mut().zip(row) {
            *o += *r * v[i];
        }
    }
    out
}

fn det3<T: Scalar>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation about an arbitrary unit axis (Rodrigues).
pub fn axis_angle<T: Scalar>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

/// One pinhole view: camera-to-world rotation, camera center and
/// intrinsics. Camera looks along its local +z, image v grows along local +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T> {
    rotation: Mat3<T>,
    center: Vec3<T>,
    intrinsics: Intrinsics<T>,
    height: usize,
    width: usize,
}

const POSE_TOL: f64 = 1e-6;

impl<T: Scalar> CameraPose<T> {
    pub fn new(
        rotation: Mat3<T>,
        center: Vec3<T>,
        intrinsics: Intrinsics<T>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let tol = T::lit(POSE_TOL);
        for i in 0..3 {
            for j in 0..3 {
                // (RᵀR)_ij = column_i · column_j
                let mut s = T::zero();
                for row in &rotation {
                    s += row[i] * row[j];
                }
                let want = if i == j { T::one() } else { T::zero() };
                ensure!(
                    (s - want).abs() <= tol,
                    "rotation is not orthonormal (entry {i},{j} of RᵀR = {s})"
                );
            }
        }
        ensure!(
            (det3(&rotation) - T::one()).abs() <= tol,
            "rotation determinant must be +1"
        );
        ensure!(height > 0 && width > 0, "image size must be positive");
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        ensure!(fx > T::zero() && fy > T::zero(), "focal lengths must be positive");
        ensure!(
            cx >= T::zero() && cx < T::lit(width as f64),
            "principal point cx = {cx} outside [0, {width})"
        );
        ensure!(
            cy >= T::zero() && cy < T::lit(height as f64),
            "principal point cy = {cy} outside [0, {height})"
        );
        ensure!(center.iter().all(|c| c.is_finite()), "camera center must be finite");
        Ok(Self {
            rotation,
            center,
            intrinsics,
            height,
            width,
        })
    }

    /// Camera at `eye` looking at `target` with world +y as the up hint.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        intrinsics: Intrinsics<T>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let up = [T::zero(), T::one(), T::zero()];
        let right = cross(forward, up);
        ensure!(
            norm(right) > T::lit(1e-9),
            "look_at direction is parallel to the up axis"
        );
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(rotation, eye, intrinsics, height, width)
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn center(&self) -> Vec3<T> {
        self.center
    }

    pub fn intrinsics(&self) -> Intrinsics<T> {
        self.intrinsics
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn with_center(&self, center: Vec3<T>) -> Self {
        Self { center, ..*self }
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        CameraPose {
            rotation: self.rotation.map(|r| r.map(c)),
            center: self.center.map(c),
            intrinsics: Intrinsics {
                fx: c(self.intrinsics.fx),
                fy: c(self.intrinsics.fy),
                cx: c(self.intrinsics.cx),
                cy: c(self.intrinsics.cy),
            },
            height: self.height,
            width: self.width,
        }
    }

    /// Continuous pixel coordinates `(u, v)` of a world point, using the
    /// same pixel-center convention as [`ray_for_pixel`]; `None` behind the
    /// camera.
    pub fn project(&self, point: Vec3<T>) -> Option<(T, T)> {
        let local = mat_t_vec(&self.rotation, sub(point, self.center));
        if local[2] <= T::zero() {
            return None;
        }
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        let half = T::lit(0.5);
        Some((
            fx * local[0] / local[2] + cx - half,
            fy * local[1] / local[2] + cy - half,
        ))
    }
}

/// Maps camera centers by `c' = scale · (c + translation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform<T> {
    pub scale: T,
    pub translation: Vec3<T>,
}

impl<T: Scalar> NormalizationTransform<T> {
    pub fn apply(&self, point: Vec3<T>) -> Vec3<T> {
        scale(add(point, self.translation), self.scale)
    }
}

/// Center the camera centroid at the origin and shrink isotropically until
/// every center lies in `[-2, 2]³`. Already-compact rigs are only
/// translated.
pub fn normalize_cameras<T: Scalar>(
    poses: &[CameraPose<T>],
) -> Result<(Vec<CameraPose<T>>, NormalizationTransform<T>)> {
    ensure!(!poses.is_empty(), "normalize_cameras needs at least one pose");
    let n = T::lit(poses.len() as f64);
    let mut centroid = [T::zero(); 3];
    for p in poses {
        centroid = add(centroid, p.center);
    }
    let centroid = scale(centroid, T::one() / n);
    let extent = poses
        .iter()
        .flat_map(|p| sub(p.center, centroid))
        .fold(T::zero(), |m, c| m.max(c.abs()));
    let two = T::lit(2.0);
    let s = if extent > two { two / extent } else { T::one() };
    let transform = NormalizationTransform {
        scale: s,
        translation: scale(centroid, -T::one()),
    };
    let out = poses
        .iter()
        .map(|p| p.with_center(transform.apply(p.center)))
        .collect();
    Ok((out, transform))
}

/// World-space ray through pixel `(u, v)`; the ray passes through the
/// pixel center `(u + 0.5, v + 0.5)`.
pub fn ray_for_pixel<T: Scalar>(pose: &CameraPose<T>, u: T, v: T) -> Result<(Vec3<T>, Vec3<T>)> {
    ensure!(
        u >= T::zero() && u < T::lit(pose.width as f64),
        "pixel u = {u} outside [0, {})",
        pose.width
    );
    ensure!(
        v >= T::zero() && v < T::lit(pose.height as f64),
        "pixel v = {v} outside [0, {})",
        pose.height
    );
    Ok((pose.center, pixel_direction(pose, u, v)))
}

pub(crate) fn pixel_direction<T: Scalar>(pose: &CameraPose<T>, u: T, v: T) -> Vec3<T> {
    let Intrinsics { fx, fy, cx, cy } = pose.intrinsics;
    let half = T::lit(0.5);
    let local = [(u + half - cx) / fx, (v + half - cy) / fy, T::one()];
    normalize(mat_vec(&pose.rotation, local))
}

/// Per-pixel Plücker coordinates: channels 0..3 hold the unit ray direction
/// `d`, channels 3..6 the moment `o × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerMap<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> PluckerMap<T> {
    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn at(&self, v: usize, u: usize) -> [T; 6] {
        std::array::from_fn(|c| self.data[[c, v, u]])
    }

    /// Average-pool every channel over non-overlapping `patch × patch` cells.
    pub fn pooled(&self, patch: usize) -> Result<Array3<T>> {
        let (_, h, w) = self.data.dim();
        ensure!(
            patch > 0 && h % patch == 0 && w % patch == 0,
            "Plücker map {h}×{w} not divisible by patch {patch}"
        );
        let (ph, pw) = (h / patch, w / patch);
        let inv = T::one() / T::lit((patch * patch) as f64);
        Ok(Array3::from_shape_fn((6, ph, pw), |(c, i, j)| {
            let mut s = T::zero();
            for dy in 0..patch {
                for dx in 0..patch {
                    s += self.data[[c, i * patch + dy, j * patch + dx]];
                }
            }
            s * inv
        }))
    }
}

pub fn plucker_map<T: Scalar>(pose: &CameraPose<T>) -> PluckerMap<T> {
    let o = pose.center;
    let mut data = Array3::zeros((6, pose.height, pose.width));
    for v in 0..pose.height {
        for u in 0..pose.width {
            let d = pixel_direction(pose, T::lit(u as f64), T::lit(v as f64));
            let m = cross(o, d);
            for c in 0..3 {
                data[[c, v, u]] = d[c];
                data[[c + 3, v, u]] = m[c];
            }
        }
    }
    PluckerMap { data }
}

/// JSON form of a pose: row-major 4×4 camera-to-world matrix plus
/// `[fx, fy, cx, cy, H, W]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub c2w: [[f64; 4]; 4],
    pub intrinsics: [f64; 6],
}

impl<T: Scalar> From<&CameraPose<T>> for PoseRecord {
    fn from(p: &CameraPose<T>) -> Self {
        let mut c2w = [[0.0; 4]; 4];
        for (i, row) in c2w.iter_mut().take(3).enumerate() {
            for (dst, src) in row.iter_mut().zip(p.rotation[i]) {
                *dst = src.to_f64_lossy();
            }
            row[3] = p.center[i].to_f64_lossy();
        }
        c2w[3][3] = 1.0;
        let k = p.intrinsics;
        PoseRecord {
            c2w,
            intrinsics: [
                k.fx.to_f64_lossy(),
                k.fy.to_f64_lossy(),
                k.cx.to_f64_lossy(),
                k.cy.to_f64_lossy(),
                p.height as f64,
                p.width as f64,
            ],
        }
    }
}

impl PoseRecord {
    pub fn to_pose<T: Scalar>(&self) -> Result<CameraPose<T>> {
        let m = &self.c2w;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("camera-to-world bottom row must be [0, 0, 0, 1]"));
        }
        let [fx, fy, cx, cy, h, w] = self.intrinsics;
        ensure!(
            h >= 1.0 && w >= 1.0 && h.fract() == 0.0 && w.fract() == 0.0,
            "image size must be positive integers"
        );
        let rotation = std::array::from_fn(|i| std::array::from_fn(|j| T::lit(m[i][j])));
        let center = std::array::from_fn(|i| T::lit(m[i][3]));
        CameraPose::new(
            rotation,
            center,
            Intrinsics {
                fx: T::lit(fx),
                fy: T::lit(fy),
                cx: T::lit(cx),
                cy: T::lit(cy),
            },
            h as usize,
            w as usize,
        )
    }
}

pub fn poses_to_json<T: Scalar>(poses: &[CameraPose<T>]) -> serde_json::Value {
    let recs: Vec<PoseRecord> = poses.iter().map(PoseRecord::from).collect();
    serde_json::to_value(recs).expect("pose records serialize")
}

pub fn poses_from_json<T: Scalar>(value: &serde_json::Value) -> Result<Vec<CameraPose<T>>> {
    let recs: Vec<PoseRecord> = serde_json::from_value(value.clone())
        .map_err(|e| Error::invalid(format!("malformed pose JSON: {e}")))?;
    recs.iter().map(PoseRecord::to_pose).collect()
}
