//! Ray-cast synthetic scenes: a walled yard with a ground plane, boxes and
//! cylinders, seen by a spinning LiDAR and a ring of pinhole cameras.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform};
use crate::image::RgbImage;
use crate::nn::{ParamStore, Tensor};

pub const CLASS_GROUND: u8 = 0;
pub const CLASS_WALL: u8 = 1;
pub const CLASS_BOX: u8 = 2;
pub const CLASS_CYLINDER: u8 = 3;
pub const NUM_CLASSES: usize = 4;

const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [[0.30, 0.60, 0.20], [0.70, 0.70, 0.70], [0.90, 0.20, 0.15], [0.15, 0.30, 0.90]];
const HIT_EPS: f64 = 1e-9;
pub const DEPTH_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    /// Heading about +z, radians.
    pub yaw: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Walls stand at `x, y = ±half_extent`.
    pub half_extent: f64,
    pub ground_z: f64,
    pub boxes: usize,
    pub cylinders: usize,
    /// Objects are placed with centers at this range of distances from the sensor.
    pub placement_radius: (f64, f64),
    pub max_attempts: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub cameras: Vec<CameraPose>,
    pub lidar_azimuth: usize,
    pub lidar_elevation: usize,
    /// Lowest and highest beam elevation, radians.
    pub elevation_range: (f64, f64),
    pub max_range: f64,
    pub color_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let pitch = 10f64.to_radians();
        let cam = |yaw: f64| CameraPose { yaw, pitch, position: [0.1 * yaw.cos(), 0.1 * yaw.sin(), 0.2] };
        SceneConfig {
            half_extent: 8.0,
            ground_z: -1.5,
            boxes: 4,
            cylinders: 4,
            placement_radius: (2.5, 7.0),
            max_attempts: 1000,
            image_width: 48,
            image_height: 32,
            focal: 24.0,
            cameras: vec![cam(0.0), cam(std::f64::consts::PI)],
            lidar_azimuth: 128,
            lidar_elevation: 16,
            elevation_range: ((-25f64).to_radians(), 5f64.to_radians()),
            max_range: 40.0,
            color_noise: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("scene needs at least one camera"));
        }
        if !(self.max_range > 0.0) || !(self.half_extent > 0.0) || !(self.focal > 0.0) {
            return Err(Error::invalid("range, extent and focal length must be positive"));
        }
        if self.image_width == 0 || self.image_height == 0 || self.lidar_azimuth == 0 || self.lidar_elevation == 0 {
            return Err(Error::invalid("image and LiDAR resolutions must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.image_width as f64 - 1.0) / 2.0,
            (self.image_height as f64 - 1.0) / 2.0,
            self.image_width,
            self.image_height,
        )
    }

    pub fn extrinsic(&self, pose: &CameraPose) -> RigidTransform {
        RigidTransform::camera_looking(Vector3::from(pose.position), pose.yaw, pose.pitch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Yawed box standing on the ground.
    Box { half: [f64; 2], yaw: f64 },
    Cylinder { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: [f64; 2],
    pub height: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn class(&self) -> u8 {
        match self.shape {
            Shape::Box { .. } => CLASS_BOX,
            Shape::Cylinder { .. } => CLASS_CYLINDER,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { half, .. } => (half[0] * half[0] + half[1] * half[1]).sqrt(),
            Shape::Cylinder { radius } => radius,
        }
    }
}

/// Static geometry shared by the LiDAR and camera renderers.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub half_extent: f64,
    pub ground_z: f64,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub class: u8,
    /// `None` for ground and walls.
    pub object: Option<usize>,
    pub normal: Vector3<f64>,
}

impl World {
    /// First hit along `origin + t * dir` with `t > 0`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut offer = |h: Hit| {
            if h.t > HIT_EPS && best.is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        if dir.z < 0.0 {
            offer(Hit { t: (self.ground_z - origin.z) / dir.z, class: CLASS_GROUND, object: None, normal: Vector3::z() });
        }
        for a in 0..2 {
            if dir[a] != 0.0 {
                let wall = self.half_extent * dir[a].signum();
                let mut n = Vector3::zeros();
                n[a] = -dir[a].signum();
                offer(Hit { t: (wall - origin[a]) / dir[a], class: CLASS_WALL, object: None, normal: n });
            }
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, normal)) = self.intersect(obj, origin, dir) {
                offer(Hit { t, class: obj.class(), object: Some(i), normal });
            }
        }
        best
    }

    fn intersect(&self, obj: &SceneObject, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let (z0, z1) = (self.ground_z, self.ground_z + obj.height);
        match obj.shape {
            Shape::Box { half, yaw } => {
                let (s, c) = yaw.sin_cos();
                // world -> box frame rotation
                let r = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
                let lo = r * (o - Vector3::new(obj.center[0], obj.center[1], 0.0));
                let ld = r * d;
                let lo_b = [-half[0], -half[1], z0];
                let hi_b = [half[0], half[1], z1];
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if ld[a] == 0.0 {
                        if lo[a] < lo_b[a] || lo[a] > hi_b[a] {
                            return None;
                        }
                        continue;
                    }
                    let (ta, tb) = ((lo_b[a] - lo[a]) / ld[a], (hi_b[a] - lo[a]) / ld[a]);
                    let (ta, tb) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if ta > t_near {
                        t_near = ta;
                        axis = a;
                    }
                    t_far = t_far.min(tb);
                }
                if t_near > t_far || t_near <= HIT_EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -ld[axis].signum();
                Some((t_near, r.transpose() * n))
            }
            Shape::Cylinder { radius } => {
                let (px, py) = (o.x - obj.center[0], o.y - obj.center[1]);
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = 2.0 * (px * d.x + py * d.y);
                    let c = px * px + py * py - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let z = o.z + t * d.z;
                        if t > HIT_EPS && z >= z0 && z <= z1 {
                            best = Some((t, Vector3::new(px + t * d.x, py + t * d.y, 0.0) / radius));
                        }
                    }
                }
                if d.z < 0.0 {
                    let t = (z1 - o.z) / d.z;
                    let (x, y) = (px + t * d.x, py + t * d.y);
                    if t > HIT_EPS && x * x + y * y <= radius * radius && best.is_none_or(|b| t < b.0) {
                        best = Some((t, Vector3::z()));
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub image: RgbImage,
    pub intrinsics: CameraIntrinsics,
    /// LiDAR frame to camera frame.
    pub extrinsic: RigidTransform,
    /// Row-major ground-truth depth at pixel centers.
    pub depth: Vec<f64>,
    pub classes: Vec<u8>,
    /// Per LiDAR point: visible from this camera.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub views: Vec<CameraView>,
    pub world: World,
}

impl SceneSample {
    pub fn labels(&self) -> &[u8] {
        self.cloud.labels.as_deref().unwrap_or(&[])
    }
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::new();
    let tint = Normal::new(0.0, 0.06).unwrap();
    let kinds = std::iter::repeat_n(true, cfg.boxes).chain(std::iter::repeat_n(false, cfg.cylinders));
    for is_box in kinds {
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let shape = if is_box {
                Shape::Box { half: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)], yaw: rng.random_range(0.0..std::f64::consts::PI) }
            } else {
                Shape::Cylinder { radius: rng.random_range(0.25..0.45) }
            };
            let height = if is_box { rng.random_range(0.8..1.5) } else { rng.random_range(2.0..3.5) };
            let dist = rng.random_range(cfg.placement_radius.0..cfg.placement_radius.1);
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let center = [dist * ang.cos(), dist * ang.sin()];
            let class = if is_box { CLASS_BOX } else { CLASS_CYLINDER };
            let base = BASE_COLORS[class as usize];
            let color = [0, 1, 2].map(|k| (base[k] + tint.sample(rng)).clamp(0.0, 1.0));
            let cand = SceneObject { shape, center, height, color };
            let r = cand.bounding_radius();
            let inside = center[0].abs() + r < cfg.half_extent - 0.3 && center[1].abs() + r < cfg.half_extent - 0.3;
            let clear = objects.iter().all(|o| {
                let dx = o.center[0] - center[0];
                let dy = o.center[1] - center[1];
                (dx * dx + dy * dy).sqrt() > o.bounding_radius() + r + 0.3
            });
            if inside && clear {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(cfg.max_attempts));
        }
    }
    Ok(objects)
}

fn shade(world: &World, hit: &Hit, wall_color: [f64; 3]) -> [f64; 3] {
    let base = match hit.object {
        Some(i) => world.objects[i].color,
        None if hit.class == CLASS_WALL => wall_color,
        None => BASE_COLORS[CLASS_GROUND as usize],
    };
    let light = Vector3::new(0.3, 0.5, 0.8).normalize();
    let lambert = hit.normal.dot(&light).abs();
    let s = 0.75 + 0.25 * lambert;
    base.map(|c| c * s)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World { half_extent: cfg.half_extent, ground_z: cfg.ground_z, objects: place_objects(cfg, &mut rng)? };
    let wall_tint = Normal::new(0.0, 0.04).unwrap();
    let wall_color = BASE_COLORS[CLASS_WALL as usize].map(|c| (c + wall_tint.sample(&mut rng)).clamp(0.0, 1.0));

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let (e_lo, e_hi) = cfg.elevation_range;
    for e in 0..cfg.lidar_elevation {
        let el = if cfg.lidar_elevation == 1 { e_lo } else { e_lo + (e_hi - e_lo) * e as f64 / (cfg.lidar_elevation - 1) as f64 };
        for a in 0..cfg.lidar_azimuth {
            let az = std::f64::consts::TAU * a as f64 / cfg.lidar_azimuth as f64;
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            if let Some(h) = world.cast(&Vector3::zeros(), &dir) {
                if h.t <= cfg.max_range {
                    points.push(dir * h.t);
                    labels.push(h.class);
                }
            }
        }
    }
    let cloud = PointCloud::new(points, Some(labels))?;

    let k = cfg.intrinsics()?;
    let noise = Normal::new(0.0, cfg.color_noise.max(0.0)).unwrap();
    let mut views = Vec::with_capacity(cfg.cameras.len());
    for pose in &cfg.cameras {
        let ext = cfg.extrinsic(pose);
        let inv = ext.inverse();
        let origin = inv.translation;
        let mut image = RgbImage::filled(k.width, k.height, [0.0; 3]);
        let mut depth = vec![0.0; k.pixel_count()];
        let mut classes = vec![0u8; k.pixel_count()];
        for row in 0..k.height {
            for col in 0..k.width {
                let dir = inv.rotation * k.ray(col as f64, row as f64);
                let h = world.cast(&origin, &dir).ok_or_else(|| Error::invalid("camera ray escaped the scene"))?;
                let c = shade(&world, &h, wall_color);
                let c = c.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                image.set_pixel(col, row, c);
                depth[row * k.width + col] = h.t;
                classes[row * k.width + col] = h.class;
            }
        }
        let visible = cloud
            .points
            .iter()
            .map(|p| {
                let pc = ext.apply(p);
                match k.project(&pc) {
                    Some((u, v)) => {
                        let dir = inv.rotation * k.ray(u, v);
                        world.cast(&origin, &dir).is_some_and(|h| (h.t - pc.z).abs() <= DEPTH_TOLERANCE)
                    }
                    None => false,
                }
            })
            .collect();
        views.push(CameraView { image, intrinsics: k, extrinsic: ext, depth, classes, visible });
    }
    Ok(SceneSample { cloud, views, world })
}

/// `count` scenes with seeds derived from `cfg.seed`.
pub fn generate_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| generate_scene(&SceneConfig { seed: derive_seed(cfg.seed, &[i as u64]), ..cfg.clone() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub max_discrepancy: Vec<f64>,
    pub violations: usize,
}

/// Re-casts every pixel ray, every visible point's camera ray and every
/// LiDAR ray against the stored geometry.
pub fn scene_consistency_check(sample: &SceneSample) -> ConsistencyReport {
    let mut max_discrepancy = Vec::new();
    let mut violations = 0;
    for view in &sample.views {
        let k = &view.intrinsics;
        let inv = view.extrinsic.inverse();
        let mut worst: f64 = 0.0;
        let mut check = |diff: f64, violations: &mut usize| {
            worst = worst.max(diff);
            if !(diff <= DEPTH_TOLERANCE) {
                *violations += 1;
            }
        };
        for row in 0..k.height {
            for col in 0..k.width {
                let dir = inv.rotation * k.ray(col as f64, row as f64);
                let t = sample.world.cast(&inv.translation, &dir).map_or(f64::INFINITY, |h| h.t);
                check((t - view.depth[row * k.width + col]).abs(), &mut violations);
            }
        }
        for (p, _) in sample.cloud.points.iter().zip(&view.visible).filter(|(_, &v)| v) {
            let pc = view.extrinsic.apply(p);
            let diff = match k.project(&pc) {
                Some((u, v)) => {
                    let dir = inv.rotation * k.ray(u, v);
                    sample.world.cast(&inv.translation, &dir).map_or(f64::INFINITY, |h| (h.t - pc.z).abs())
                }
                None => f64::INFINITY,
            };
            check(diff, &mut violations);
        }
        max_discrepancy.push(worst);
    }
    for p in &sample.cloud.points {
        let r = p.norm();
        let ok = sample.world.cast(&Vector3::zeros(), &(p / r)).is_some_and(|h| (h.t - r).abs() <= DEPTH_TOLERANCE);
        if !ok {
            violations += 1;
        }
    }
    ConsistencyReport { max_discrepancy, violations }
}

fn transform_to_vec(t: &RigidTransform) -> Vec<f64> {
    let mut v: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| t.rotation[(r, c)]).collect();
    v.extend(t.translation.iter());
    v
}

impl SceneSample {
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        let n = self.cloud.len();
        s.insert("points", Tensor::new(vec![n, 3], self.cloud.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap());
        s.insert("labels", Tensor::from_vec(self.labels().iter().map(|&l| l as f64).collect()));
        s.insert("world", Tensor::from_vec(vec![self.world.half_extent, self.world.ground_z]));
        let objects: Vec<f64> = self
            .world
            .objects
            .iter()
            .flat_map(|o| {
                let (kind, a, b, yaw) = match o.shape {
                    Shape::Box { half, yaw } => (0.0, half[0], half[1], yaw),
                    Shape::Cylinder { radius } => (1.0, radius, 0.0, 0.0),
                };
                [kind, o.center[0], o.center[1], a, b, yaw, o.height, o.color[0], o.color[1], o.color[2]]
            })
            .collect();
        s.insert("objects", Tensor::new(vec![self.world.objects.len(), 10], objects).unwrap());
        for (i, v) in self.views.iter().enumerate() {
            let (h, w) = (v.intrinsics.height, v.intrinsics.width);
            let k = &v.intrinsics;
            s.insert(format!("view{i}.image"), v.image.to_tensor());
            s.insert(format!("view{i}.intrinsics"), Tensor::from_vec(vec![k.fx, k.fy, k.cx, k.cy, w as f64, h as f64]));
            s.insert(format!("view{i}.extrinsic"), Tensor::from_vec(transform_to_vec(&v.extrinsic)));
            s.insert(format!("view{i}.depth"), Tensor::new(vec![h, w], v.depth.clone()).unwrap());
            s.insert(format!("view{i}.classes"), Tensor::new(vec![h, w], v.classes.iter().map(|&c| c as f64).collect()).unwrap());
            s.insert(format!("view{i}.visible"), Tensor::from_vec(v.visible.iter().map(|&b| b as u8 as f64).collect()));
        }
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        let pts = s.get("points")?;
        let points = pts.data().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let labels = s.get("labels")?.data().iter().map(|&l| l as u8).collect();
        let cloud = PointCloud::new(points, Some(labels))?;
        let w = s.get("world")?.data();
        if w.len() != 2 {
            return Err(Error::Checkpoint("world record must hold 2 values".into()));
        }
        let objs = s.get("objects")?;
        let objects = objs
            .data()
            .chunks(10)
            .map(|o| SceneObject {
                shape: if o[0] == 0.0 { Shape::Box { half: [o[3], o[4]], yaw: o[5] } } else { Shape::Cylinder { radius: o[3] } },
                center: [o[1], o[2]],
                height: o[6],
                color: [o[7], o[8], o[9]],
            })
            .collect();
        let world = World { half_extent: w[0], ground_z: w[1], objects };
        let mut views = Vec::new();
        for i in 0.. {
            let key = format!("view{i}.image");
            if !s.contains(&key) {
                break;
            }
            let kd = s.get(&format!("view{i}.intrinsics"))?.data();
            if kd.len() != 6 {
                return Err(Error::Checkpoint(format!("view{i}.intrinsics must hold 6 values")));
            }
            let intrinsics = CameraIntrinsics::new(kd[0], kd[1], kd[2], kd[3], kd[4] as usize, kd[5] as usize)?;
            let e = s.get(&format!("view{i}.extrinsic"))?.data();
            if e.len() != 12 {
                return Err(Error::Checkpoint(format!("view{i}.extrinsic must hold 12 values")));
            }
            let extrinsic = RigidTransform::new(Matrix3::from_row_slice(&e[..9]), Vector3::new(e[9], e[10], e[11]))?;
            let image = RgbImage::new(intrinsics.width, intrinsics.height, s.get(&key)?.data().to_vec())?;
            views.push(CameraView {
                image,
                intrinsics,
                extrinsic,
                depth: s.get(&format!("view{i}.depth"))?.data().to_vec(),
                classes: s.get(&format!("view{i}.classes"))?.data().iter().map(|&c| c as u8).collect(),
                visible: s.get(&format!("view{i}.visible"))?.data().iter().map(|&b| b != 0.0).collect(),
            });
        }
        Ok(SceneSample { cloud, views, world })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SceneSample::from_store(&ParamStore::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_points;

    fn bare_config() -> SceneConfig {
        SceneConfig { boxes: 0, cylinders: 0, ..SceneConfig::default() }
    }

    #[test]
    fn ground_only_depth_is_analytic() {
        let cfg = SceneConfig { half_extent: 1e6, max_range: 1e7, ..bare_config() };
        let s = generate_scene(&cfg).unwrap();
        for v in &s.views {
            let inv = v.extrinsic.inverse();
            let k = &v.intrinsics;
            for row in 0..k.height {
                for col in 0..k.width {
                    let dir = inv.rotation * k.ray(col as f64, row as f64);
                    if dir.z < -1e-3 {
                        let t = (cfg.ground_z - inv.translation.z) / dir.z;
                        assert!((v.depth[row * k.width + col] - t).abs() < 1e-6);
                        assert_eq!(v.classes[row * k.width + col], CLASS_GROUND);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SceneConfig { seed: 5, ..SceneConfig::default() };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let mut hashes = std::collections::BTreeSet::new();
        for seed in 0..100 {
            let s = generate_scene(&SceneConfig { seed, ..SceneConfig::default() }).unwrap();
            assert!(hashes.insert(s.to_store().checksum()));
        }
    }

    #[test]
    fn fresh_scenes_are_consistent() {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let s = generate_scene(&SceneConfig { seed, ..SceneConfig::default() }).unwrap();
            let r = scene_consistency_check(&s);
            assert_eq!(r.violations, 0);
            worst = r.max_discrepancy.iter().fold(worst, |a, &b| a.max(b));
            for v in &s.views {
                assert!(v.depth.iter().all(|&d| d > 0.0 && d <= SceneConfig::default().max_range));
                assert!(v.visible.iter().any(|&b| b));
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn corrupted_depth_is_caught() {
        let mut s = generate_scene(&SceneConfig::default()).unwrap();
        s.views[0].depth[100] += 1.0;
        assert_eq!(scene_consistency_check(&s).violations, 1);
    }

    #[test]
    fn lidar_and_camera_labels_agree() {
        let (mut agree, mut total) = (0, 0);
        for seed in 0..10 {
            let s = generate_scene(&SceneConfig { seed, ..SceneConfig::default() }).unwrap();
            for v in &s.views {
                let (w, h) = (v.intrinsics.width, v.intrinsics.height);
                let boundary = |c: usize, r: usize| {
                    let lab = v.classes[r * w + c];
                    (r.saturating_sub(1)..=(r + 1).min(h - 1))
                        .any(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).any(|cc| v.classes[rr * w + cc] != lab))
                };
                for p in project_points(&s.cloud, &v.extrinsic, &v.intrinsics) {
                    if !v.visible[p.point_index] {
                        continue;
                    }
                    let (c, r) = p.pixel(w, h);
                    if boundary(c, r) {
                        continue;
                    }
                    total += 1;
                    agree += (v.classes[r * w + c] == s.labels()[p.point_index]) as usize;
                }
            }
        }
        assert!(total > 100);
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn every_class_appears() {
        let s = generate_scene(&SceneConfig { seed: 3, ..SceneConfig::default() }).unwrap();
        for c in 0..NUM_CLASSES as u8 {
            assert!(s.labels().contains(&c), "class {c} missing");
        }
    }

    #[test]
    fn placement_failure_reported() {
        let cfg = SceneConfig { boxes: 200, max_attempts: 20, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg), Err(Error::Placement(20))));
    }

    #[test]
    fn store_round_trip() {
        let s = generate_scene(&SceneConfig { seed: 9, ..SceneConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.hvd");
        s.save(&path).unwrap();
        let back = SceneSample::load(&path).unwrap();
        assert_eq!(back, s);
    }
}
