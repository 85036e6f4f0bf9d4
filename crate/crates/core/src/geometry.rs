//! Pinhole camera model and LiDAR/camera projective geometry.
//!
//! Pixel coordinates are continuous with pixel centers at integer positions:
//! pixel `(col, row)` covers `[col - 0.5, col + 0.5) x [row - 0.5, row + 0.5)`.
//! The LiDAR frame is x forward, y left, z up; the camera frame is x right,
//! y down, z along the optical axis.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
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
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("focal lengths must be positive: {self:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!("principal point outside image: {self:?}")));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a camera-frame point, or `None` when it
    /// is behind the camera or falls outside the image.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let inside = (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        inside.then_some((u, v))
    }

    /// Camera-frame ray through `(u, v)` with unit z component, so the ray
    /// parameter equals depth.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Flattened camera description `(fx, fy, cx, cy, width, height)` scaled by
    /// the image diagonal.
    pub fn embedding(&self) -> [f64; 6] {
        let diag = ((self.width * self.width + self.height * self.height) as f64).sqrt();
        [
            self.fx / diag,
            self.fy / diag,
            self.cx / diag,
            self.cy / diag,
            self.width as f64 / diag,
            self.height as f64 / diag,
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rounds a continuous coordinate to its pixel index. Ties go to the smaller
/// index; coordinates in `[extent - 0.5, extent)` clamp to the last pixel.
pub fn round_to_pixel(coord: f64, extent: usize) -> usize {
    let idx = (coord - 0.5).ceil().max(0.0) as usize;
    idx.min(extent.saturating_sub(1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(ortho <= ORTHO_TOL) || !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invalid(format!(
                "rotation is not proper orthonormal (ortho err {ortho:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(())
    }

    /// Extrinsic for a camera at `position` (LiDAR frame) looking along the
    /// heading `yaw` (radians about +z) pitched down by `pitch` radians.
    pub fn camera_looking(position: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        RigidTransform { rotation, translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, labels: Option<Vec<u8>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::shape("PointCloud", format!("{} labels for {} points", l.len(), points.len())));
            }
        }
        Ok(PointCloud { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud of the listed indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point_index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// `(col, row)` of the pixel this projection rounds into.
    pub fn pixel(&self, width: usize, height: usize) -> (usize, usize) {
        (round_to_pixel(self.u, width), round_to_pixel(self.v, height))
    }
}

pub fn project_points(
    cloud: &PointCloud,
    extrinsic: &RigidTransform,
    intrinsic: &CameraIntrinsics,
) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let pc = extrinsic.apply(p);
            intrinsic.project(&pc).map(|(u, v)| Projection { point_index: i, u, v, depth: pc.z })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<Option<f64>>,
}

impl SparseDepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        SparseDepthMap { width, height, depth: vec![None; width * height] }
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.depth[row * self.width + col]
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_some()).count()
    }

    /// Z-buffer insert: keeps the nearer depth.
    pub fn insert(&mut self, col: usize, row: usize, depth: f64) {
        let cell = &mut self.depth[row * self.width + col];
        match cell {
            Some(d) if *d <= depth => {}
            _ => *cell = Some(depth),
        }
    }
}

pub fn render_sparse_depth(projections: &[Projection], width: usize, height: usize) -> SparseDepthMap {
    let mut map = SparseDepthMap::empty(width, height);
    for p in projections {
        let (c, r) = p.pixel(width, height);
        map.insert(c, r, p.depth);
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBinning {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl DepthBinning {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
            return Err(Error::invalid(format!("need 0 < d_min < d_max, got [{d_min}, {d_max}]")));
        }
        if bins < 2 {
            return Err(Error::invalid("need at least two depth bins"));
        }
        Ok(DepthBinning { d_min, d_max, bins })
    }

    pub fn bin_width(&self) -> f64 {
        (self.d_max - self.d_min) / self.bins as f64
    }

    /// Uniform bin index; out-of-range depths clamp to the boundary bins.
    pub fn discretize(&self, depth: f64) -> Result<usize> {
        if !depth.is_finite() {
            return Err(Error::NonFinite("depth".into()));
        }
        let x = ((depth - self.d_min) / (self.d_max - self.d_min) * self.bins as f64).floor();
        Ok(x.clamp(0.0, (self.bins - 1) as f64) as usize)
    }

    pub fn bin_center(&self, index: usize) -> Result<f64> {
        if index >= self.bins {
            return Err(Error::invalid(format!("bin {index} out of range for {} bins", self.bins)));
        }
        Ok(self.d_min + (index as f64 + 0.5) * self.bin_width())
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|k| self.d_min + (k as f64 + 0.5) * self.bin_width()).collect()
    }
}

pub fn discretize_depth(depth: f64, binning: &DepthBinning) -> Result<usize> {
    binning.discretize(depth)
}

pub fn bin_center(index: usize, binning: &DepthBinning) -> Result<f64> {
    binning.bin_center(index)
}

/// Back-projects pixel `(u, v)` at camera depth `depth` into the LiDAR frame.
pub fn lift_pixel(
    u: f64,
    v: f64,
    depth: f64,
    intrinsic: &CameraIntrinsics,
    extrinsic: &RigidTransform,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("lift depth must be positive, got {depth}")));
    }
    let pc = intrinsic.ray(u, v) * depth;
    Ok(extrinsic.rotation.transpose() * (pc - extrinsic.translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0)], None).unwrap();
        let p = project_points(&cloud, &RigidTransform::identity(), &toy_camera());
        assert_eq!(p, vec![Projection { point_index: 0, u: 50.0, v: 50.0, depth: 5.0 }]);
    }

    #[test]
    fn behind_camera_is_dropped() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, -5.0)], None).unwrap();
        assert!(project_points(&cloud, &RigidTransform::identity(), &toy_camera()).is_empty());
    }

    #[test]
    fn off_axis_projection() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, -0.5, 5.0)], None).unwrap();
        let p = project_points(&cloud, &RigidTransform::identity(), &toy_camera());
        assert_eq!(p.len(), 1);
        assert!((p[0].u - 70.0).abs() < 1e-12);
        assert!((p[0].v - 40.0).abs() < 1e-12);
        assert_eq!(p[0].depth, 5.0);
    }

    #[test]
    fn out_of_image_is_dropped() {
        let cloud = PointCloud::new(vec![Vector3::new(10.0, 0.0, 5.0)], None).unwrap();
        assert!(project_points(&cloud, &RigidTransform::identity(), &toy_camera()).is_empty());
    }

    #[test]
    fn rounding_ties_go_down() {
        assert_eq!(round_to_pixel(2.5, 10), 2);
        assert_eq!(round_to_pixel(2.5000001, 10), 3);
        assert_eq!(round_to_pixel(0.0, 10), 0);
        assert_eq!(round_to_pixel(9.7, 10), 9);
    }

    #[test]
    fn sparse_depth_keeps_nearest() {
        let a = Projection { point_index: 0, u: 3.1, v: 2.2, depth: 9.0 };
        let b = Projection { point_index: 1, u: 2.9, v: 1.8, depth: 4.0 };
        let m = render_sparse_depth(&[a, b], 8, 8);
        assert_eq!(m.get(3, 2), Some(4.0));
        assert_eq!(m.valid_count(), 1);
        assert_eq!(render_sparse_depth(&[], 4, 4).valid_count(), 0);
    }

    #[test]
    fn sparse_depth_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let projs: Vec<Projection> = (0..10)
            .map(|i| Projection {
                point_index: i,
                u: rng.random_range(0.0..8.0),
                v: rng.random_range(0.0..8.0),
                depth: rng.random_range(1.0..10.0),
            })
            .collect();
        let map = render_sparse_depth(&projs, 8, 8);
        for row in 0..8 {
            for col in 0..8 {
                // nearest pixel center by explicit distance, ties to the lower index
                let owner = |c: f64, n: usize| {
                    (0..n)
                        .min_by(|&a, &b| {
                            let da = (c - a as f64).abs();
                            let db = (c - b as f64).abs();
                            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                        })
                        .unwrap()
                };
                let expect = projs
                    .iter()
                    .filter(|p| owner(p.u, 8) == col && owner(p.v, 8) == row)
                    .map(|p| p.depth)
                    .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
                assert_eq!(map.get(col, row), expect);
            }
        }
    }

    #[test]
    fn binning_examples() {
        let b = DepthBinning::new(2.0, 60.0, 118).unwrap();
        assert_eq!(b.discretize(2.0).unwrap(), 0);
        assert_eq!(b.discretize(60.0 - 1e-9).unwrap(), 117);
        assert_eq!(b.discretize(31.0).unwrap(), 59);
        assert_eq!(b.discretize(100.0).unwrap(), 117);
        assert_eq!(b.discretize(0.5).unwrap(), 0);
        assert!(b.discretize(f64::NAN).is_err());
        let c0 = b.bin_center(0).unwrap();
        assert!((c0 - (2.0 + 0.5 * 58.0 / 118.0)).abs() < 1e-12);
        assert!((c0 - 2.2458).abs() < 1e-4);
        let last = b.bin_center(117).unwrap();
        assert!((last - (60.0 - 0.5 * b.bin_width())).abs() < 1e-12);
        assert!(b.bin_center(118).is_err());
        for k in 0..118 {
            assert_eq!(b.discretize(b.bin_center(k).unwrap()).unwrap(), k);
        }
        assert!(DepthBinning::new(0.0, 1.0, 4).is_err());
        assert!(DepthBinning::new(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn lift_examples() {
        let p = lift_pixel(50.0, 50.0, 5.0, &toy_camera(), &RigidTransform::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 5.0));
        assert!(lift_pixel(1.0, 1.0, 0.0, &toy_camera(), &RigidTransform::identity()).is_err());
    }

    #[test]
    fn camera_looking_is_valid_rotation() {
        let t = RigidTransform::camera_looking(Vector3::new(0.1, 0.0, 0.2), 0.7, 0.15);
        t.validate().unwrap();
        // a point straight ahead lands on the optical axis
        let ahead = Vector3::new(0.1, 0.0, 0.2) + 4.0 * Vector3::new(0.7f64.cos() * 0.15f64.cos(), 0.7f64.sin() * 0.15f64.cos(), -0.15f64.sin());
        let pc = t.apply(&ahead);
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && (pc.z - 4.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = RigidTransform> {
        (-3.2f64..3.2, -0.5f64..0.5, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(yaw, pitch, x, y, z)| {
            RigidTransform::camera_looking(Vector3::new(x, y, z), yaw, pitch)
        })
    }

    proptest! {
        #[test]
        fn project_lift_round_trip(
            pose in arb_pose(),
            fx in 20.0f64..200.0, fy in 20.0f64..200.0,
            u in 0.0f64..64.0, v in 0.0f64..48.0, d in 0.5f64..50.0,
        ) {
            let k = CameraIntrinsics::new(fx, fy, 31.5, 23.5, 64, 48).unwrap();
            let p = lift_pixel(u, v, d, &k, &pose).unwrap();
            let cloud = PointCloud::new(vec![p], None).unwrap();
            let proj = project_points(&cloud, &pose, &k);
            prop_assert_eq!(proj.len(), 1);
            let back = lift_pixel(proj[0].u, proj[0].v, proj[0].depth, &k, &pose).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn rigid_invariants_survive_composition(a in arb_pose(), b in arb_pose()) {
            let c = a.compose(&b.inverse());
            prop_assert!(c.validate().is_ok());
            let id = c.compose(&c.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }

        #[test]
        fn zbuffer_is_monotone(
            pts in proptest::collection::vec((0.0f64..8.0, 0.0f64..8.0, 0.5f64..20.0), 1..20),
            extra in (0.0f64..8.0, 0.0f64..8.0, 0.5f64..20.0),
        ) {
            let projs: Vec<Projection> = pts.iter().enumerate()
                .map(|(i, &(u, v, d))| Projection { point_index: i, u, v, depth: d }).collect();
            let before = render_sparse_depth(&projs, 8, 8);
            let mut more = projs.clone();
            more.push(Projection { point_index: 99, u: extra.0, v: extra.1, depth: extra.2 });
            let after = render_sparse_depth(&more, 8, 8);
            for (b, a) in before.depth.iter().zip(&after.depth) {
                if let Some(b) = b {
                    prop_assert!(a.unwrap() <= *b);
                }
            }
        }

        #[test]
        fn binning_monotone(d1 in 0.0f64..80.0, d2 in 0.0f64..80.0) {
            let b = DepthBinning::new(2.0, 60.0, 118).unwrap();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(b.discretize(lo).unwrap() <= b.discretize(hi).unwrap());
        }
    }
}
