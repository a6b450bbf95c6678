//! Pinhole cameras, RGB-D unprojection, rigid transforms, normalization,
//! occupancy labeling and query lattices.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::spatial::HashGrid;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Depth value marking pixels whose depth is unknown.
pub const UNKNOWN_DEPTH: f64 = f64::NAN;

/// Pinhole intrinsics. Integer pixel coordinates are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at `(width/2, height/2)`.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame point for pixel `(u, v)` at z-depth `d`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vec3 {
        Vec3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    /// Pixel coordinates and z-depth of a camera-frame point.
    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (
            p.x * self.fx / p.z + self.cx,
            p.y * self.fy / p.z + self.cy,
            p.z,
        )
    }
}

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation, 1e-9)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`; camera x is image-right, y is image-down.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let fwd = target - eye;
        if !(fwd.norm() > 1e-12) || !fwd.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("look-at target coincides with eye"));
        }
        let z = fwd.normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::new(0.0, 0.0, 1.0));
            if x.norm() < 1e-9 {
                x = z.cross(&Vec3::new(1.0, 0.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: eye,
        })
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Checks orthonormality and unit determinant to `tol`.
pub fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if !(err <= tol) || !((r.determinant() - 1.0).abs() <= tol) {
        return Err(Error::invalid(format!(
            "matrix is not a rotation (|RtR-I|={err:.3e}, det={:.12})",
            r.determinant()
        )));
    }
    Ok(())
}

/// One posed RGB-D view. Images are row-major, `image[v * width + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub image: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl RgbdFrame {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.width() * self.height();
        if self.image.len() != n || self.depth.len() != n {
            return Err(Error::shape(
                "RgbdFrame",
                &[self.image.len(), self.depth.len()],
                &[n, n],
            ));
        }
        if self
            .image
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        if self.depth.iter().any(|d| d.is_finite() && *d <= 0.0) {
            return Err(Error::invalid("finite depth values must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::shape("PointCloud", &[positions.len()], &[c.len()]));
            }
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point cloud positions".into()));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(f).collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Training queries and their supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Vec3>,
    pub occupied: Vec<bool>,
    /// Per-channel color bins; only meaningful where `occupied`.
    pub color_bins: Vec<[u8; 3]>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Maps `p` to `(p - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub centroid: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            centroid: Vec3::zeros(),
            scale: 1.0,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid) / self.scale
    }

    #[inline]
    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid
    }
}

/// Unprojected view: the cloud of valid pixels plus a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct Unprojection {
    pub cloud: PointCloud,
    pub valid: Vec<bool>,
}

pub fn unproject(frame: &RgbdFrame, to_world: bool) -> Result<Unprojection> {
    let (points, valid) = unproject_map(frame, to_world)?;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (i, ok) in valid.iter().enumerate() {
        if *ok {
            positions.push(points[i]);
            colors.push(frame.image[i]);
        }
    }
    Ok(Unprojection {
        cloud: PointCloud {
            positions,
            colors: Some(colors),
        },
        valid,
    })
}

/// Dense per-pixel positions (zero where invalid) and the validity mask.
pub fn unproject_map(frame: &RgbdFrame, to_world: bool) -> Result<(Vec<Vec3>, Vec<bool>)> {
    let (w, h) = (frame.width(), frame.height());
    if frame.image.len() != w * h || frame.depth.len() != w * h {
        return Err(Error::shape(
            "unproject",
            &[frame.image.len(), frame.depth.len()],
            &[h, w],
        ));
    }
    let mut points = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let d = frame.depth[i];
            if !d.is_finite() {
                continue;
            }
            let pc = frame.intrinsics.unproject(u as f64, v as f64, d);
            points[i] = if to_world { frame.pose.apply(&pc) } else { pc };
            valid[i] = true;
        }
    }
    Ok((points, valid))
}

/// World-frame union (concatenation) of every frame's valid pixels.
pub fn build_gt_cloud(frames: &[RgbdFrame]) -> Result<PointCloud> {
    if frames.is_empty() {
        return Err(Error::invalid("ground truth needs at least one frame"));
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for f in frames {
        let u = unproject(f, true)?;
        positions.extend(u.cloud.positions);
        colors.extend(u.cloud.colors.unwrap_or_default());
    }
    Ok(PointCloud {
        positions,
        colors: Some(colors),
    })
}

/// Centroid and isotropic scale such that the normalized cloud has zero mean
/// and pooled coordinate variance one.
pub fn normalization_of(positions: &[Vec3]) -> Result<NormalizationTransform> {
    if positions.len() < 2 {
        return Err(Error::invalid(format!(
            "normalization needs at least 2 points, got {}",
            positions.len()
        )));
    }
    let n = positions.len() as f64;
    let centroid = positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let ss: f64 = positions
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum();
    let scale = (ss / (3.0 * n)).sqrt();
    if !(scale >= 1e-12) {
        return Err(Error::invalid("degenerate cloud: all points coincide"));
    }
    Ok(NormalizationTransform { centroid, scale })
}

pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    let t = normalization_of(&cloud.positions)?;
    Ok((cloud.transformed(|p| t.apply(p)), t))
}

/// Occupancy labels and color targets of `queries` against a ground-truth cloud.
pub fn label_queries(queries: &[Vec3], gt: &PointCloud, tau: f64) -> Result<QueryBatch> {
    if gt.is_empty() {
        return Err(Error::invalid("ground-truth cloud is empty"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let grid = HashGrid::new(&gt.positions, tau);
    Ok(label_with_grid(queries, &grid, gt.colors.as_deref(), tau))
}

/// Labeling against a prebuilt grid whose cell size is at least `tau`.
pub fn label_with_grid(
    queries: &[Vec3],
    grid: &HashGrid<'_>,
    colors: Option<&[[f64; 3]]>,
    tau: f64,
) -> QueryBatch {
    let mut occupied = Vec::with_capacity(queries.len());
    let mut color_bins = Vec::with_capacity(queries.len());
    for q in queries {
        match grid.nearest_within(q, tau) {
            Some((j, _)) => {
                occupied.push(true);
                let c = colors.map(|c| c[j]).unwrap_or([0.0; 3]);
                color_bins.push(c.map(color_bin_clamped));
            }
            None => {
                occupied.push(false);
                color_bins.push([0; 3]);
            }
        }
    }
    QueryBatch {
        points: queries.to_vec(),
        occupied,
        color_bins,
    }
}

/// Axis-aligned lattice from `min` to `max` inclusive, x varying fastest.
pub fn make_grid(min: Vec3, max: Vec3, granularity: f64) -> Result<Vec<Vec3>> {
    if !(granularity > 0.0) || !granularity.is_finite() {
        return Err(Error::invalid(format!(
            "granularity must be positive, got {granularity}"
        )));
    }
    if !(0..3).all(|a| max[a] > min[a]) {
        return Err(Error::invalid("grid max must exceed min on every axis"));
    }
    let counts: Vec<usize> = (0..3).map(|a| grid_count(min[a], max[a], granularity)).collect();
    let mut out = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                out.push(Vec3::new(
                    min.x + i as f64 * granularity,
                    min.y + j as f64 * granularity,
                    min.z + k as f64 * granularity,
                ));
            }
        }
    }
    Ok(out)
}

/// Lattice points along one axis; tolerant of binary rounding in `extent / step`.
pub fn grid_count(min: f64, max: f64, granularity: f64) -> usize {
    ((max - min) / granularity + 1e-9).floor() as usize + 1
}

/// Rotation `Rz(c) * Ry(b) * Rx(a)` from angles in radians.
pub fn rotation_from_euler(ax: f64, ay: f64, az: f64) -> Mat3 {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Mat3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Mat3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Per-axis angles drawn uniformly from `range_deg` (degrees) and composed as Rz·Ry·Rx.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, range_deg: [(f64, f64); 3]) -> Mat3 {
    let mut ang = [0.0; 3];
    for (a, (lo, hi)) in ang.iter_mut().zip(range_deg) {
        let lo = lo.max(-180.0);
        let hi = hi.min(180.0);
        *a = if hi > lo {
            rng.random_range(lo..=hi).to_radians()
        } else {
            lo.to_radians()
        };
    }
    rotation_from_euler(ang[0], ang[1], ang[2])
}

/// Quantizes a channel value in `[0, 1]` to one of 256 bins (round half up).
pub fn color_bin(c: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!("color value {c} outside [0, 1]")));
    }
    Ok(color_bin_clamped(c))
}

#[inline]
pub(crate) fn color_bin_clamped(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[inline]
pub fn bin_color(b: u8) -> f64 {
    b as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame_1px(d: f64) -> RgbdFrame {
        RgbdFrame {
            image: vec![[0.5; 3]; 4 * 4],
            depth: vec![d; 16],
            intrinsics: CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap(),
            pose: Pose::identity(),
        }
    }

    #[test]
    fn pinhole_examples() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        assert_eq!(k.unproject(2.0, 3.0, 2.0), Vec3::new(4.0, 6.0, 2.0));
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(k.unproject(75.0, 50.0, 2.0).x, 0.5);
    }

    #[test]
    fn sentinel_pixels_are_excluded() {
        let mut f = frame_1px(2.0);
        f.depth[5] = UNKNOWN_DEPTH;
        let u = unproject(&f, false).unwrap();
        assert_eq!(u.cloud.len(), 15);
        assert!(!u.valid[5]);
        assert!(u.valid[4]);
    }

    #[test]
    fn unproject_rejects_dimension_mismatch() {
        let mut f = frame_1px(1.0);
        f.depth.pop();
        assert!(matches!(unproject(&f, true), Err(Error::Shape { .. })));
    }

    #[test]
    fn gt_union_keeps_duplicates() {
        let f = frame_1px(1.0);
        assert_eq!(build_gt_cloud(&[f.clone()]).unwrap().len(), 16);
        assert_eq!(build_gt_cloud(&[f.clone(), f]).unwrap().len(), 32);
        assert!(build_gt_cloud(&[]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let c = PointCloud::new(
            vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            None,
        )
        .unwrap();
        let (n, t) = normalize_cloud(&c).unwrap();
        assert!((t.scale - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((n.positions[1].x - 3f64.sqrt()).abs() < 1e-12);
        let (_, t2) = normalize_cloud(&n).unwrap();
        assert!(t2.centroid.norm() < 1e-12 && (t2.scale - 1.0).abs() < 1e-12);

        let same = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 5], None).unwrap();
        assert!(normalize_cloud(&same).is_err());
        let one = PointCloud::new(vec![Vec3::zeros()], None).unwrap();
        assert!(normalize_cloud(&one).is_err());
    }

    #[test]
    fn label_examples() {
        let gt = PointCloud::new(vec![Vec3::new(0.05, 0.0, 0.0)], Some(vec![[1.0, 0.5, 0.0]]))
            .unwrap();
        let q = [Vec3::zeros(), Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.15, 0.0, 0.0)];
        let b = label_queries(&q, &gt, 0.1).unwrap();
        assert_eq!(b.occupied, vec![true, false, true]);
        assert_eq!(b.color_bins[0], [255, 128, 0]);
        assert!(label_queries(&q, &PointCloud::default(), 0.1).is_err());
    }

    #[test]
    fn label_boundary_is_inclusive() {
        // 0.1 + 0.2 style sums are inexact; use a dyadic distance.
        let gt = PointCloud::new(vec![Vec3::new(0.5, 0.0, 0.0)], None).unwrap();
        let b = label_queries(&[Vec3::zeros()], &gt, 0.5).unwrap();
        assert!(b.occupied[0]);
    }

    #[test]
    fn grid_counts() {
        let g = make_grid(Vec3::repeat(-3.0), Vec3::repeat(3.0), 0.1).unwrap();
        assert_eq!(g.len(), 226_981);
        let g = make_grid(Vec3::zeros(), Vec3::repeat(1.0), 0.5).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(g[1], Vec3::new(0.5, 0.0, 0.0));
        assert!(make_grid(Vec3::zeros(), Vec3::repeat(1.0), 0.0).is_err());
    }

    #[test]
    fn rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_rotation(&mut rng, [(0.0, 0.0); 3]);
        assert_eq!(r, Mat3::identity());
        let r = rotation_from_euler(0.0, 0.0, 90f64.to_radians());
        assert!((r * Vec3::x() - Vec3::y()).norm() < 1e-15);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng, [(-180.0, 180.0); 3]);
            check_rotation(&r, 1e-9).unwrap();
        }
    }

    #[test]
    fn color_bins() {
        assert_eq!(color_bin(0.0).unwrap(), 0);
        assert_eq!(color_bin(1.0).unwrap(), 255);
        assert_eq!(color_bin(0.5).unwrap(), 128);
        assert!(color_bin(1.01).is_err());
        assert!(color_bin(-0.01).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let c: f64 = rng.random();
            assert!((bin_color(color_bin(c).unwrap()) - c).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn look_at_is_a_rotation() {
        let p = Pose::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y()).unwrap();
        check_rotation(&p.rotation, 1e-12).unwrap();
        assert!((p.apply(&Vec3::new(0.0, 0.0, 2.0)) - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let p = Pose::look_at(Vec3::new(0.0, 5.0, 0.0), Vec3::zeros(), Vec3::y()).unwrap();
        check_rotation(&p.rotation, 1e-12).unwrap();
    }
}
