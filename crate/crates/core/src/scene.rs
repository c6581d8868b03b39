//! Procedural worlds of spheres and boxes on a floor, structured edits, and
//! a deterministic ray caster with hard shadows.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{self, add, cross, dot, norm, normalize, scale, sub, CameraPose, Intrinsics, Vec3};
use crate::scalar::snap_to_unit_grid;

/// Lambertian shading is mapped into `[AMBIENT, 1] · albedo`.
pub const AMBIENT: f64 = 0.1;
const EPS: f64 = 1e-7;

/// Fixed palette recolor targets are drawn from.
pub const PALETTE: [[f64; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.95, 0.50, 0.05],
    [0.60, 0.15, 0.80],
    [0.10, 0.80, 0.80],
    [0.90, 0.30, 0.65],
    [0.55, 0.35, 0.15],
    [0.95, 0.95, 0.95],
    [0.12, 0.12, 0.12],
    [0.55, 0.80, 0.30],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Radius of the smallest center-anchored sphere containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => norm(half_extents),
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes_ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        ensure!(sizes_ok, "primitive {} has a non-positive size", self.id);
        ensure!(
            self.albedo.iter().all(|a| (0.0..=1.0).contains(a)),
            "primitive {} albedo outside [0, 1]",
            self.id
        );
        Ok(())
    }

    /// Nearest ray parameter `t > EPS` and outward normal.
    fn intersect(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, Vec3<f64>)> {
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = sub(origin, self.center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > EPS { -b - sq } else { -b + sq };
                (t > EPS).then(|| (t, scale(sub(add(origin, scale(dir, t)), self.center), 1.0 / radius)))
            }
            Shape::Box { half_extents } => {
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis_near, mut axis_far) = (0, 0);
                for i in 0..3 {
                    let lo = self.center[i] - half_extents[i];
                    let hi = self.center[i] + half_extents[i];
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < lo || origin[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - origin[i]) / dir[i], (hi - origin[i]) / dir[i]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = i;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        axis_far = i;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > EPS {
                    (t_near, axis_near)
                } else if t_far > EPS {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                let p = origin[axis] + dir[axis] * t;
                n[axis] = if p > self.center[axis] { 1.0 } else { -1.0 };
                Some((t, n))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub height: f64,
    pub albedo: [f64; 3],
}

/// Vertical sky gradient, `bottom` at the horizon-down direction and `top`
/// straight up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub bottom: [f64; 3],
    pub top: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub floor: Floor,
    pub background: Background,
    /// Unit vector pointing toward the light.
    pub light: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.primitives.is_empty(), "scene has no primitives");
        self.validate_allow_empty()
    }

    fn validate_allow_empty(&self) -> Result<()> {
        ensure!((norm(self.light) - 1.0).abs() < 1e-9, "light direction must be unit length");
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ensure!(ids.windows(2).all(|w| w[0] != w[1]), "duplicate primitive ids");
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn primitive(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    /// Only the primitive `id`, with floor, background and light kept.
    pub fn isolate(&self, id: u32) -> Option<SceneSpec> {
        let p = self.primitive(id)?.clone();
        Some(SceneSpec {
            primitives: vec![p],
            ..self.clone()
        })
    }

    fn next_id(&self) -> u32 {
        self.primitives.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }
}

/// What a camera ray hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Surface {
    Background,
    Floor,
    Object(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub surface: Surface,
    /// Ray parameter of the hit (unit direction); infinite for background.
    pub distance: f64,
    pub point: Vec3<f64>,
    /// Outward unit normal; zero for background.
    pub normal: Vec3<f64>,
    /// Every primitive blocking the light from `point`.
    pub shadowed_by: Vec<u32>,
}

/// Image plus per-pixel hit records (row-major, `v·W + u`).
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Array3<f32>,
    pub hits: Vec<Hit>,
    pub width: usize,
}

impl Rendered {
    pub fn hit(&self, v: usize, u: usize) -> &Hit {
        &self.hits[v * self.width + u]
    }

    pub fn object_mask(&self, id: u32) -> Array2<f32> {
        self.mask_where(|h| h.surface == Surface::Object(id))
    }

    /// Pixels whose light is blocked by `id`.
    pub fn shadow_footprint(&self, id: u32) -> Array2<f32> {
        self.mask_where(|h| h.shadowed_by.contains(&id))
    }

    pub fn mask_where(&self, pred: impl Fn(&Hit) -> bool) -> Array2<f32> {
        let h = self.hits.len() / self.width;
        Array2::from_shape_fn((h, self.width), |(v, u)| {
            if pred(self.hit(v, u)) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn nearest_hit(scene: &SceneSpec, origin: Vec3<f64>, dir: Vec3<f64>) -> (Surface, f64, Vec3<f64>) {
    let mut best = (Surface::Background, f64::INFINITY, [0.0; 3]);
    if dir[1] < -1e-12 {
        let t = (scene.floor.height - origin[1]) / dir[1];
        if t > EPS {
            best = (Surface::Floor, t, [0.0, 1.0, 0.0]);
        }
    }
    for p in &scene.primitives {
        if let Some((t, n)) = p.intersect(origin, dir) {
            if t < best.1 {
                best = (Surface::Object(p.id), t, n);
            }
        }
    }
    best
}

/// Shade one ray. Returns the color and the hit record.
pub fn trace(scene: &SceneSpec, origin: Vec3<f64>, dir: Vec3<f64>) -> ([f64; 3], Hit) {
    let (surface, t, normal) = nearest_hit(scene, origin, dir);
    let albedo = match surface {
        Surface::Background => {
            let s = 0.5 * (dir[1] + 1.0);
            let bg = scene.background;
            let color = std::array::from_fn(|i| bg.bottom[i] + s * (bg.top[i] - bg.bottom[i]));
            return (
                color,
                Hit {
                    surface,
                    distance: f64::INFINITY,
                    point: [f64::INFINITY; 3],
                    normal: [0.0; 3],
                    shadowed_by: Vec::new(),
                },
            );
        }
        Surface::Floor => scene.floor.albedo,
        Surface::Object(id) => scene.primitive(id).expect("hit primitive exists").albedo,
    };
    let point = add(origin, scale(dir, t));
    let lambert = dot(normal, scene.light).max(0.0);
    let mut shadowed_by = Vec::new();
    if lambert > 0.0 {
        let start = add(point, scale(normal, 1e-6));
        for p in &scene.primitives {
            if p.intersect(start, scene.light).is_some() {
                shadowed_by.push(p.id);
            }
        }
    }
    let lit = if shadowed_by.is_empty() { lambert } else { 0.0 };
    let shade = AMBIENT + (1.0 - AMBIENT) * lit;
    (
        albedo.map(|a| a * shade),
        Hit {
            surface,
            distance: t,
            point,
            normal,
            shadowed_by,
        },
    )
}

pub fn render_with_hits(scene: &SceneSpec, pose: &CameraPose<f64>) -> Rendered {
    let (h, w) = (pose.height(), pose.width());
    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut hits = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let dir = geometry::pixel_direction(pose, u as f64, v as f64);
            let (color, hit) = trace(scene, pose.center(), dir);
            for c in 0..3 {
                image[[c, v, u]] = snap_to_unit_grid(color[c].clamp(0.0, 1.0) as f32);
            }
            hits.push(hit);
        }
    }
    Rendered { image, hits, width: w }
}

/// `3 × H × W` image in `[0, 1]`.
pub fn render(scene: &SceneSpec, pose: &CameraPose<f64>) -> Array3<f32> {
    render_with_hits(scene, pose).image
}

pub fn render_mask(scene: &SceneSpec, pose: &CameraPose<f64>, object_id: u32) -> Result<Array2<f32>> {
    if scene.primitive(object_id).is_none() {
        return Err(Error::invalid(format!("unknown object id {object_id}")));
    }
    Ok(render_with_hits(scene, pose).object_mask(object_id))
}

/// Thresholds for choosing an object to remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRules {
    /// Minimum visible fraction of the frame, per view.
    pub min_area: f64,
    /// Minimum visible / unoccluded silhouette ratio, per view.
    pub min_unoccluded: f64,
}

impl Default for TargetRules {
    fn default() -> Self {
        Self {
            min_area: 0.01,
            min_unoccluded: 0.5,
        }
    }
}

/// Per-view statistics of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    pub area: f64,
    pub touches_border: bool,
    pub unoccluded_ratio: f64,
}

pub fn visibility(scene: &SceneSpec, pose: &CameraPose<f64>, id: u32, full: &Rendered) -> Visibility {
    let mask = full.object_mask(id);
    let (h, w) = mask.dim();
    let visible = mask.sum() as f64;
    let alone = render_with_hits(&scene.isolate(id).expect("id exists"), pose).object_mask(id);
    let unoccluded = alone.sum() as f64;
    let border = (0..w).any(|u| mask[[0, u]] > 0.0 || mask[[h - 1, u]] > 0.0)
        || (0..h).any(|v| mask[[v, 0]] > 0.0 || mask[[v, w - 1]] > 0.0);
    Visibility {
        area: visible / (h * w) as f64,
        touches_border: border,
        unoccluded_ratio: if unoccluded > 0.0 { visible / unoccluded } else { 0.0 },
    }
}

/// An object that is large enough, untruncated and mostly unoccluded in
/// every view; ties go to the largest mean visible area.
pub fn propose_removal_target(scene: &SceneSpec, poses: &[CameraPose<f64>]) -> Option<u32> {
    propose_target_with(scene, poses, TargetRules::default())
}

pub fn propose_target_with(scene: &SceneSpec, poses: &[CameraPose<f64>], rules: TargetRules) -> Option<u32> {
    if poses.is_empty() {
        return None;
    }
    let renders: Vec<Rendered> = poses.iter().map(|p| render_with_hits(scene, p)).collect();
    let mut best: Option<(u32, f64)> = None;
    for prim in &scene.primitives {
        let mut total = 0.0;
        let ok = poses.iter().zip(&renders).all(|(pose, full)| {
            let vis = visibility(scene, pose, prim.id, full);
            total += vis.area;
            vis.area >= rules.min_area && !vis.touches_border && vis.unoccluded_ratio >= rules.min_unoccluded
        });
        if ok && best.is_none_or(|(_, a)| total > a) {
            best = Some((prim.id, total));
        }
    }
    best.map(|(id, _)| id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Remove { object_id: u32 },
    Add { new_primitive: Primitive },
    Recolor { object_id: u32, new_albedo: [f64; 3] },
}

/// Structured edit with a human-readable rendering for logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditInstruction {
    #[serde(flatten)]
    pub op: EditOp,
    pub text: String,
}

fn describe(p: &Primitive) -> String {
    let kind = match p.shape {
        Shape::Sphere { .. } => "sphere",
        Shape::Box { .. } => "box",
    };
    format!("{} {kind}", color_name(p.albedo))
}

pub fn color_name(c: [f64; 3]) -> String {
    const NAMES: [&str; 12] = [
        "red", "green", "blue", "yellow", "orange", "purple", "cyan", "pink", "brown", "white", "black", "lime",
    ];
    let (i, _) = PALETTE
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("palette is non-empty");
    NAMES[i].to_string()
}

impl EditInstruction {
    pub fn remove(scene: &SceneSpec, object_id: u32) -> Result<Self> {
        let p = scene
            .primitive(object_id)
            .ok_or_else(|| Error::invalid(format!("unknown object id {object_id}")))?;
        Ok(Self {
            text: format!("Remove the {}.", describe(p)),
            op: EditOp::Remove { object_id },
        })
    }

    pub fn recolor(scene: &SceneSpec, object_id: u32, new_albedo: [f64; 3]) -> Result<Self> {
        let p = scene
            .primitive(object_id)
            .ok_or_else(|| Error::invalid(format!("unknown object id {object_id}")))?;
        Ok(Self {
            text: format!("Make the {} {}.", describe(p), color_name(new_albedo)),
            op: EditOp::Recolor { object_id, new_albedo },
        })
    }

    pub fn add(new_primitive: Primitive) -> Self {
        Self {
            text: format!("Add a {} to the scene.", describe(&new_primitive)),
            op: EditOp::Add { new_primitive },
        }
    }

    pub fn validate_for(&self, scene: &SceneSpec) -> Result<()> {
        match &self.op {
            EditOp::Remove { object_id } | EditOp::Recolor { object_id, .. } => {
                ensure!(
                    scene.primitive(*object_id).is_some(),
                    "instruction references missing object {object_id}"
                );
            }
            EditOp::Add { new_primitive } => new_primitive.validate()?,
        }
        if let EditOp::Recolor { new_albedo, .. } = &self.op {
            ensure!(
                new_albedo.iter().all(|a| (0.0..=1.0).contains(a)),
                "recolor albedo outside [0, 1]"
            );
        }
        Ok(())
    }
}

/// Ground-truth edited scene.
pub fn apply_edit(scene: &SceneSpec, instr: &EditInstruction) -> Result<SceneSpec> {
    instr.validate_for(scene)?;
    let mut out = scene.clone();
    match &instr.op {
        EditOp::Remove { object_id } => out.primitives.retain(|p| p.id != *object_id),
        EditOp::Recolor { object_id, new_albedo } => {
            let p = out
                .primitives
                .iter_mut()
                .find(|p| p.id == *object_id)
                .expect("validated");
            p.albedo = *new_albedo;
        }
        EditOp::Add { new_primitive } => {
            let mut p = new_primitive.clone();
            p.id = scene.next_id();
            out.primitives.push(p);
        }
    }
    Ok(out)
}

/// Placement gap kept between bounding spheres.
const PLACEMENT_MARGIN: f64 = 0.05;

/// 2–5 non-overlapping primitives resting on the floor.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e000);
    let n = rng.random_range(2..=5usize);
    let floor_height = 0.0;
    let mut primitives: Vec<Primitive> = Vec::new();
    let mut attempts = 0;
    while primitives.len() < n && attempts < 500 {
        attempts += 1;
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere {
                radius: rng.random_range(0.3..0.55),
            }
        } else {
            Shape::Box {
                half_extents: std::array::from_fn(|_| rng.random_range(0.22..0.42)),
            }
        };
        let r = 1.2 * rng.random_range(0.0..1.0f64).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let lift = match shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => half_extents[1],
        };
        let candidate = Primitive {
            id: primitives.len() as u32,
            shape,
            center: [r * phi.cos(), floor_height + lift, r * phi.sin()],
            albedo: std::array::from_fn(|_| rng.random_range(0.15..0.95)),
        };
        let clear = primitives.iter().all(|p| {
            norm(sub(p.center, candidate.center))
                >= p.bounding_radius() + candidate.bounding_radius() + PLACEMENT_MARGIN
        });
        if clear {
            primitives.push(candidate);
        }
    }
    let tint: f64 = rng.random_range(-0.05..0.05);
    let gray = rng.random_range(0.45..0.7);
    let elev = rng.random_range(40f64..70.0).to_radians();
    let azim = rng.random_range(0.0..std::f64::consts::TAU);
    SceneSpec {
        primitives,
        floor: Floor {
            height: floor_height,
            albedo: [gray + tint, gray, gray - tint],
        },
        background: Background {
            bottom: [
                rng.random_range(0.75..0.9),
                rng.random_range(0.8..0.92),
                rng.random_range(0.85..0.95),
            ],
            top: [
                rng.random_range(0.25..0.45),
                rng.random_range(0.4..0.6),
                rng.random_range(0.7..0.9),
            ],
        },
        light: normalize([elev.cos() * azim.cos(), elev.sin(), elev.cos() * azim.sin()]),
    }
}

/// `n` look-at cameras on a randomized arc around the scene.
pub fn orbit_poses(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<CameraPose<f64>>> {
    ensure!(n >= 1, "need at least one view");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b17_0000);
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let span = rng.random_range(120f64..220.0).to_radians();
    let step = if n > 1 { span / (n - 1) as f64 } else { 0.0 };
    let focal = 1.1 * width as f64;
    let k = Intrinsics {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    };
    (0..n)
        .map(|i| {
            let azim = start + step * i as f64 + rng.random_range(-0.05..0.05);
            let elev = rng.random_range(22f64..38.0).to_radians();
            let radius = rng.random_range(4.3..5.0);
            let eye = [
                radius * elev.cos() * azim.cos(),
                radius * elev.sin(),
                radius * elev.cos() * azim.sin(),
            ];
            let target = [
                rng.random_range(-0.1..0.1),
                rng.random_range(0.2..0.35),
                rng.random_range(-0.1..0.1),
            ];
            CameraPose::look_at(eye, target, k, height, width)
        })
        .collect()
}

/// Unit normal of the plane spanned by two directions.
pub fn plane_normal(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    normalize(cross(a, b))
}
