//! Procedural multi-view RGB-D scenes built from analytic primitives.
//!
//! Every scene carries an exact occupancy oracle: the closed-form distance
//! to the union of its primitive surfaces.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{
    check_rotation, random_rotation, CameraIntrinsics, Mat3, Pose, RgbdFrame, Vec3, UNKNOWN_DEPTH,
};

/// Radius of the ball that contains every object-mode scene.
pub const OBJECT_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Cylinder,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [Self::Sphere, Self::Box, Self::Cylinder];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Box => "box",
            Self::Cylinder => "cylinder",
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "box" => Ok(Self::Box),
            "cylinder" => Ok(Self::Cylinder),
            _ => Err(Error::invalid(format!("unknown primitive kind {s:?}"))),
        }
    }
}

/// Object-centric or camera-centric reconstruction setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneMode {
    Object,
    Scene,
}

impl fmt::Display for SceneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Object => "object",
            Self::Scene => "scene",
        })
    }
}

impl FromStr for SceneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Self::Object),
            "scene" => Ok(Self::Scene),
            _ => Err(Error::invalid(format!(
                "mode must be object or scene, got {s:?}"
            ))),
        }
    }
}

/// A solid with an analytic surface.
///
/// `params` holds the radius (sphere), half-extents (box), or
/// `(radius, half-height, _)` (cylinder, axis along local z).
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub params: [f64; 3],
    pub albedo: [f64; 3],
    pub orientation: Mat3,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let used = match self.kind {
            PrimitiveKind::Sphere => 1,
            PrimitiveKind::Box => 3,
            PrimitiveKind::Cylinder => 2,
        };
        if !self.params[..used].iter().all(|&p| p > 0.0 && p.is_finite()) {
            return Err(Error::invalid(format!(
                "{} has non-positive size {:?}",
                self.kind.as_str(),
                self.params
            )));
        }
        if !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::invalid("albedo must lie in [0, 1]"));
        }
        check_rotation(&self.orientation, 1e-9)
    }

    /// Radius of a ball around `center` containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        let [a, b, c] = self.params;
        match self.kind {
            PrimitiveKind::Sphere => a,
            PrimitiveKind::Box => (a * a + b * b + c * c).sqrt(),
            PrimitiveKind::Cylinder => (a * a + b * b).sqrt(),
        }
    }

    fn to_local(&self, p: &Vec3) -> Vec3 {
        self.orientation.transpose() * (p - self.center)
    }

    /// Signed distance to the surface, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let l = self.to_local(p);
        let [a, b, c] = self.params;
        match self.kind {
            PrimitiveKind::Sphere => l.norm() - a,
            PrimitiveKind::Box => {
                let q = Vec3::new(l.x.abs() - a, l.y.abs() - b, l.z.abs() - c);
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            PrimitiveKind::Cylinder => {
                let dx = (l.x * l.x + l.y * l.y).sqrt() - a;
                let dz = l.z.abs() - b;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dx.max(dz).min(0.0)
            }
        }
    }

    /// Nearest ray hit with `t > t_min` and the outward surface normal (world frame).
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
        let o = self.to_local(origin);
        let d = self.orientation.transpose() * dir;
        let [a, b, c] = self.params;
        let local = match self.kind {
            PrimitiveKind::Sphere => {
                let qa = d.dot(&d);
                let qb = 2.0 * d.dot(&o);
                let qc = o.dot(&o) - a * a;
                smallest_root(qa, qb, qc, t_min).map(|t| (t, (o + d * t) / a))
            }
            PrimitiveKind::Box => {
                let h = [a, b, c];
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                let mut axis1 = 0;
                for i in 0..3 {
                    let inv = 1.0 / d[i];
                    let (mut ta, mut tb) = ((-h[i] - o[i]) * inv, (h[i] - o[i]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = i;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = i;
                    }
                }
                if t0 > t1 {
                    None
                } else {
                    let (t, axis) = if t0 > t_min { (t0, axis0) } else { (t1, axis1) };
                    if t > t_min {
                        let p = o + d * t;
                        let mut n = Vec3::zeros();
                        n[axis] = p[axis].signum();
                        Some((t, n))
                    } else {
                        None
                    }
                }
            }
            PrimitiveKind::Cylinder => {
                let mut best: Option<(f64, Vec3)> = None;
                let qa = d.x * d.x + d.y * d.y;
                if qa > 0.0 {
                    let qb = 2.0 * (o.x * d.x + o.y * d.y);
                    let qc = o.x * o.x + o.y * o.y - a * a;
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa)] {
                            let p = o + d * t;
                            if t > t_min && p.z.abs() <= b && best.is_none_or(|(bt, _)| t < bt) {
                                best = Some((t, Vec3::new(p.x / a, p.y / a, 0.0)));
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for zc in [-b, b] {
                        let t = (zc - o.z) / d.z;
                        let p = o + d * t;
                        if t > t_min
                            && p.x * p.x + p.y * p.y <= a * a
                            && best.is_none_or(|(bt, _)| t < bt)
                        {
                            best = Some((t, Vec3::new(0.0, 0.0, zc.signum())));
                        }
                    }
                }
                best
            }
        };
        local.map(|(t, n)| (t, (self.orientation * n).normalize()))
    }
}

fn smallest_root(a: f64, b: f64, c: f64, t_min: f64) -> Option<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = (-b - s) / (2.0 * a);
    let t1 = (-b + s) / (2.0 * a);
    if t0 > t_min {
        Some(t0)
    } else if t1 > t_min {
        Some(t1)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
    pub mode: SceneMode,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        for p in &self.primitives {
            p.validate()?;
            if self.mode == SceneMode::Object
                && p.center.norm() + p.bounding_radius() > OBJECT_BOUND + 1e-9
            {
                return Err(Error::invalid(
                    "object-mode primitive leaves the bounding ball",
                ));
            }
        }
        Ok(())
    }
}

/// Ranges for [`generate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub mode: SceneMode,
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Characteristic size (radius or half-extent) range.
    pub size: (f64, f64),
    pub albedo: (f64, f64),
    pub kinds: Vec<PrimitiveKind>,
}

impl SceneParams {
    pub fn object() -> Self {
        Self {
            mode: SceneMode::Object,
            min_primitives: 1,
            max_primitives: 3,
            size: (0.4, 1.0),
            albedo: (0.1, 0.9),
            kinds: PrimitiveKind::ALL.to_vec(),
        }
    }

    pub fn scene() -> Self {
        Self {
            mode: SceneMode::Scene,
            min_primitives: 4,
            max_primitives: 8,
            size: (0.4, 1.2),
            albedo: (0.1, 0.9),
            kinds: PrimitiveKind::ALL.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_primitives == 0 || self.max_primitives < self.min_primitives {
            return Err(Error::invalid(format!(
                "primitive count range [{}, {}] is empty or zero",
                self.min_primitives, self.max_primitives
            )));
        }
        if !(self.size.0 > 0.0 && self.size.1 >= self.size.0) {
            return Err(Error::invalid("size range must be positive and ordered"));
        }
        if !(0.0 <= self.albedo.0 && self.albedo.0 <= self.albedo.1 && self.albedo.1 <= 1.0) {
            return Err(Error::invalid("albedo range must be ordered within [0, 1]"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("no primitive kinds allowed"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Deterministic random scene for `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(params.min_primitives..=params.max_primitives);
    let mut prims: Vec<Primitive> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..1000 {
            let kind = params.kinds[rng.random_range(0..params.kinds.len())];
            let s = uniform(&mut rng, params.size);
            let p = match kind {
                PrimitiveKind::Sphere => [s, 0.0, 0.0],
                PrimitiveKind::Box => [
                    s * rng.random_range(0.6..=1.0),
                    s * rng.random_range(0.6..=1.0),
                    s * rng.random_range(0.6..=1.0),
                ],
                PrimitiveKind::Cylinder => [s * rng.random_range(0.6..=1.0), s, 0.0],
            };
            let albedo = [
                uniform(&mut rng, params.albedo),
                uniform(&mut rng, params.albedo),
                uniform(&mut rng, params.albedo),
            ];
            let orientation = random_rotation(&mut rng, [(-180.0, 180.0); 3]);
            let mut prim = Primitive {
                kind,
                center: Vec3::zeros(),
                params: p,
                albedo,
                orientation,
            };
            let br = prim.bounding_radius();
            let center = match params.mode {
                SceneMode::Object => {
                    let room = OBJECT_BOUND - br;
                    if room < 0.0 {
                        continue;
                    }
                    // First primitive sits near the middle so single-primitive scenes stay centred.
                    let reach = if prims.is_empty() { room.min(0.3) } else { room };
                    random_direction(&mut rng) * (reach * rng.random::<f64>().cbrt())
                }
                SceneMode::Scene => {
                    let dir = random_direction(&mut rng);
                    dir * rng.random_range((2.0 + br)..(5.0 + br))
                }
            };
            prim.center = center;
            let clear = prims
                .iter()
                .all(|q| (q.center - center).norm() >= q.bounding_radius() + br);
            if clear {
                prims.push(prim);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {count} non-overlapping primitives with sizes {:?}",
                params.size
            )));
        }
    }
    let scene = SceneSpec {
        primitives: prims,
        seed,
        mode: params.mode,
    };
    scene.validate()?;
    Ok(scene)
}

/// Exact unsigned distance from `p` to the union of primitive surfaces.
pub fn analytic_distance(scene: &SceneSpec, p: &Vec3) -> f64 {
    scene
        .primitives
        .iter()
        .map(|prim| prim.signed_distance(p).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn oracle_occupancy(scene: &SceneSpec, q: &Vec3, tau: f64) -> bool {
    analytic_distance(scene, q) <= tau
}

/// Camera placements and shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
}

/// Field of view used by the default camera rigs, in degrees.
pub const DEFAULT_FOV_DEG: f64 = 50.0;
/// Distance of object-mode cameras from the origin.
pub const OBJECT_CAMERA_DISTANCE: f64 = 5.0;

/// `count` cameras on a Fibonacci sphere of `radius`, all looking at the origin.
pub fn object_views(count: usize, radius: f64, image_size: usize) -> Result<ViewSpec> {
    if count == 0 {
        return Err(Error::invalid("need at least one view"));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let eye = Vec3::new(r * th.cos(), y, r * th.sin()) * radius;
        poses.push(Pose::look_at(eye, Vec3::zeros(), Vec3::y())?);
    }
    Ok(ViewSpec {
        poses,
        intrinsics: CameraIntrinsics::from_fov(DEFAULT_FOV_DEG, image_size, image_size)?,
    })
}

/// Cameras near the origin looking outward toward primitives of a scene-mode scene.
pub fn scene_views(scene: &SceneSpec, count: usize, image_size: usize, seed: u64) -> Result<ViewSpec> {
    if count == 0 {
        return Err(Error::invalid("need at least one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let eye = random_direction(&mut rng) * rng.random_range(0.0..0.5);
        let target = scene.primitives[i % scene.primitives.len()].center
            + random_direction(&mut rng) * 0.5;
        poses.push(Pose::look_at(eye, target, Vec3::y())?);
    }
    Ok(ViewSpec {
        poses,
        intrinsics: CameraIntrinsics::from_fov(70.0, image_size, image_size)?,
    })
}

/// Direction toward the single directional light (world frame).
pub fn light_direction() -> Vec3 {
    Vec3::new(0.3, 0.8, -0.5).normalize()
}

const AMBIENT: f64 = 0.35;

/// Rasterizes one RGB-D frame per pose by casting a ray through every pixel center.
pub fn render_views<R: Rng>(
    scene: &SceneSpec,
    views: &ViewSpec,
    noise_std: f64,
    unknown_frac: f64,
    rng: &mut R,
) -> Result<Vec<RgbdFrame>> {
    if !(0.0..1.0).contains(&unknown_frac) {
        return Err(Error::invalid(format!(
            "unknown fraction {unknown_frac} outside [0, 1)"
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("depth noise must be non-negative"));
    }
    views.intrinsics.validate()?;
    let light = light_direction();
    let k = views.intrinsics;
    let mut frames = Vec::with_capacity(views.poses.len());
    for (vi, pose) in views.poses.iter().enumerate() {
        if scene
            .primitives
            .iter()
            .any(|p| p.signed_distance(&pose.translation) <= 0.0)
        {
            return Err(Error::invalid(format!("camera {vi} is inside a primitive")));
        }
        let mut image = vec![[0.0; 3]; k.width * k.height];
        let mut depth = vec![UNKNOWN_DEPTH; k.width * k.height];
        for v in 0..k.height {
            for u in 0..k.width {
                let d_cam = Vec3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let dir = pose.rotation * d_cam;
                let mut best: Option<(f64, Vec3, &Primitive)> = None;
                for prim in &scene.primitives {
                    if let Some((t, n)) = prim.intersect(&pose.translation, &dir, 1e-9) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, n, prim));
                        }
                    }
                }
                let i = v * k.width + u;
                if let Some((t, n, prim)) = best {
                    let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&light).max(0.0);
                    image[i] = prim.albedo.map(|a| (a * shade).clamp(0.0, 1.0));
                    let mut z = t;
                    if noise_std > 0.0 {
                        let e: f64 = StandardNormal.sample(rng);
                        z = (z + noise_std * e).max(1e-6);
                    }
                    if unknown_frac > 0.0 && rng.random::<f64>() < unknown_frac {
                        z = UNKNOWN_DEPTH;
                    }
                    // Stored depth is 32-bit so bundles roundtrip exactly.
                    depth[i] = z as f32 as f64;
                }
            }
        }
        frames.push(RgbdFrame {
            image,
            depth,
            intrinsics: k,
            pose: *pose,
        });
    }
    Ok(frames)
}
