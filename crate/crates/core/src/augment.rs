//! Point and image augmentations with replayable records, and the BEV
//! resampling that undoes the point-side spatial transforms.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{BevFeatureMap, BevGridConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud};
use crate::image::RgbImage;
use crate::nn::Tensor;

/// SplitMix64 over a global seed and a path of stream ids.
pub fn derive_seed(global: u64, streams: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    streams.iter().fold(mix(global), |acc, &s| mix(acc.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ mix(s)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentOp {
    RotateZ(f64),
    Flip { x: bool, y: bool },
    Scale(f64),
    Translate([f64; 3]),
    /// Points inside the axis-aligned box (augmented frame) are removed.
    DropCuboid { min: [f64; 3], max: [f64; 3] },
    /// Crop window in source pixels, resampled to `out_width x out_height`.
    CropResize { x0: f64, y0: f64, width: f64, height: f64, out_width: usize, out_height: usize },
    HorizontalFlip,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentRecord {
    pub ops: Vec<AugmentOp>,
    /// Original indices of the surviving points, in output order.
    pub kept: Option<Vec<usize>>,
}

impl AugmentRecord {
    pub fn identity() -> Self {
        AugmentRecord::default()
    }

    /// Applies the spatial point ops (rotation, flip, scale, translation).
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut q = *p;
        for op in &self.ops {
            q = match op {
                AugmentOp::RotateZ(t) => rot_z(*t) * q,
                AugmentOp::Flip { x, y } => Vector3::new(if *x { -q.x } else { q.x }, if *y { -q.y } else { q.y }, q.z),
                AugmentOp::Scale(s) => q * *s,
                AugmentOp::Translate(t) => q + Vector3::from(*t),
                _ => q,
            };
        }
        q
    }

    pub fn invert_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut q = *p;
        for op in self.ops.iter().rev() {
            q = match op {
                AugmentOp::RotateZ(t) => rot_z(-*t) * q,
                AugmentOp::Flip { x, y } => Vector3::new(if *x { -q.x } else { q.x }, if *y { -q.y } else { q.y }, q.z),
                AugmentOp::Scale(s) => q / *s,
                AugmentOp::Translate(t) => q - Vector3::from(*t),
                _ => q,
            };
        }
        q
    }

    /// Replays the point ops on `cloud`, recomputing which points survive.
    pub fn apply_to_points(&self, cloud: &PointCloud) -> (PointCloud, Vec<usize>) {
        let moved: Vec<Vector3<f64>> = cloud.points.iter().map(|p| self.transform_point(p)).collect();
        let kept: Vec<usize> = (0..moved.len())
            .filter(|&i| {
                !self.ops.iter().any(|op| match op {
                    AugmentOp::DropCuboid { min, max } => (0..3).all(|a| moved[i][a] >= min[a] && moved[i][a] <= max[a]),
                    _ => false,
                })
            })
            .collect();
        let out = PointCloud {
            points: kept.iter().map(|&i| moved[i]).collect(),
            labels: cloud.labels.as_ref().map(|l| kept.iter().map(|&i| l[i]).collect()),
        };
        (out, kept)
    }

    /// Maps a source pixel coordinate to the augmented patch.
    pub fn transform_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let (mut u, mut v) = (u, v);
        for op in &self.ops {
            match op {
                AugmentOp::CropResize { x0, y0, width, height, out_width, out_height } => {
                    let (sx, sy) = (*out_width as f64 / width, *out_height as f64 / height);
                    u = (u - x0 + 0.5) * sx - 0.5;
                    v = (v - y0 + 0.5) * sy - 0.5;
                }
                AugmentOp::HorizontalFlip => u = self.patch_width().unwrap_or(0) as f64 - 1.0 - u,
                _ => {}
            }
        }
        (u, v)
    }

    fn patch_width(&self) -> Option<usize> {
        self.ops.iter().rev().find_map(|op| match op {
            AugmentOp::CropResize { out_width, .. } => Some(*out_width),
            _ => None,
        })
    }

    pub fn is_flipped(&self) -> bool {
        self.ops.iter().filter(|op| matches!(op, AugmentOp::HorizontalFlip)).count() % 2 == 1
    }

    /// Intrinsics of the cropped and resized (unflipped) patch.
    pub fn adjust_intrinsics(&self, k: &CameraIntrinsics) -> Result<CameraIntrinsics> {
        let mut out = *k;
        for op in &self.ops {
            if let AugmentOp::CropResize { x0, y0, width, height, out_width, out_height } = op {
                let (sx, sy) = (*out_width as f64 / width, *out_height as f64 / height);
                out = CameraIntrinsics::new(
                    out.fx * sx,
                    out.fy * sy,
                    (out.cx - x0 + 0.5) * sx - 0.5,
                    (out.cy - y0 + 0.5) * sy - 0.5,
                    *out_width,
                    *out_height,
                )?;
            }
        }
        Ok(out)
    }
}

fn rot_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointAugmentConfig {
    /// Rotation angle drawn from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub flip_probability: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    /// Cuboid edge lengths drawn per axis from this range; zero disables.
    pub cuboid_size: (f64, f64),
    /// Cuboid center drawn uniformly from `[-cuboid_reach, cuboid_reach]` in x and y.
    pub cuboid_reach: f64,
}

impl Default for PointAugmentConfig {
    fn default() -> Self {
        PointAugmentConfig {
            max_rotation: std::f64::consts::PI,
            flip_probability: 0.5,
            scale_range: (0.95, 1.05),
            max_translation: 0.5,
            cuboid_size: (1.0, 3.0),
            cuboid_reach: 7.0,
        }
    }
}

impl PointAugmentConfig {
    pub fn disabled() -> Self {
        PointAugmentConfig {
            max_rotation: 0.0,
            flip_probability: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
            cuboid_size: (0.0, 0.0),
            cuboid_reach: 0.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Rotation, flips, scale, translation, then removal of one random cuboid.
pub fn augment_points(cloud: &PointCloud, seed: u64, config: &PointAugmentConfig) -> (PointCloud, AugmentRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = uniform(&mut rng, -config.max_rotation, config.max_rotation);
    let fx = rng.random_bool(config.flip_probability.clamp(0.0, 1.0));
    let fy = rng.random_bool(config.flip_probability.clamp(0.0, 1.0));
    let scale = uniform(&mut rng, config.scale_range.0, config.scale_range.1);
    let t = config.max_translation;
    let translation = [0, 1, 2].map(|_| uniform(&mut rng, -t, t));
    let mut ops = vec![AugmentOp::RotateZ(theta), AugmentOp::Flip { x: fx, y: fy }, AugmentOp::Scale(scale), AugmentOp::Translate(translation)];
    if config.cuboid_size.1 > 0.0 {
        let r = config.cuboid_reach;
        let center = [uniform(&mut rng, -r, r), uniform(&mut rng, -r, r), uniform(&mut rng, -1.5, 1.5)];
        let size = [0, 1, 2].map(|_| uniform(&mut rng, config.cuboid_size.0, config.cuboid_size.1));
        ops.push(AugmentOp::DropCuboid {
            min: [0, 1, 2].map(|a| center[a] - size[a] / 2.0),
            max: [0, 1, 2].map(|a| center[a] + size[a] / 2.0),
        });
    }
    let mut record = AugmentRecord { ops, kept: None };
    let (out, kept) = record.apply_to_points(cloud);
    record.kept = Some(kept);
    (out, record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAugmentConfig {
    /// Crop side as a fraction of the image side, drawn from this range.
    pub crop_fraction: (f64, f64),
    pub flip_probability: f64,
    pub out_width: usize,
    pub out_height: usize,
}

impl Default for ImageAugmentConfig {
    fn default() -> Self {
        ImageAugmentConfig { crop_fraction: (0.7, 1.0), flip_probability: 0.5, out_width: 48, out_height: 32 }
    }
}

/// Bilinear sample with edge clamping at continuous pixel coordinates.
fn sample(image: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let x = x.clamp(0.0, (image.width - 1) as f64);
    let y = y.clamp(0.0, (image.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(image.width - 1), (y0 + 1).min(image.height - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (image.pixel(x0, y0), image.pixel(x1, y0), image.pixel(x0, y1), image.pixel(x1, y1));
    [0, 1, 2].map(|k| (a[k] * (1.0 - ax) + b[k] * ax) * (1.0 - ay) + (c[k] * (1.0 - ax) + d[k] * ax) * ay)
}

/// Replays image ops; the output is the final (possibly flipped) patch.
pub fn apply_to_image(record: &AugmentRecord, image: &RgbImage) -> Result<RgbImage> {
    let mut out = image.clone();
    for op in &record.ops {
        match op {
            AugmentOp::CropResize { x0, y0, width, height, out_width, out_height } => {
                if !(*width > 0.0) || !(*height > 0.0) || *out_width == 0 || *out_height == 0 {
                    return Err(Error::invalid("degenerate crop window"));
                }
                let (sx, sy) = (*out_width as f64 / width, *out_height as f64 / height);
                let src = out;
                out = RgbImage::filled(*out_width, *out_height, [0.0; 3]);
                for row in 0..*out_height {
                    for col in 0..*out_width {
                        let x = x0 + (col as f64 + 0.5) / sx - 0.5;
                        let y = y0 + (row as f64 + 0.5) / sy - 0.5;
                        out.set_pixel(col, row, sample(&src, x, y));
                    }
                }
            }
            AugmentOp::HorizontalFlip => out = out.flipped(),
            _ => {}
        }
    }
    Ok(out)
}

/// Random crop containing the principal point, resize and optional flip.
/// Returns the patch, the intrinsics of the unflipped patch, and the record.
pub fn augment_image(
    image: &RgbImage,
    intrinsics: &CameraIntrinsics,
    seed: u64,
    config: &ImageAugmentConfig,
) -> Result<(RgbImage, CameraIntrinsics, AugmentRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width as f64, image.height as f64);
    let frac = uniform(&mut rng, config.crop_fraction.0, config.crop_fraction.1);
    if !(frac > 0.0) {
        return Err(Error::invalid("degenerate crop window"));
    }
    let (cw, ch) = (w * frac, h * frac);
    // window edges in continuous coordinates span [x0 - 0.5, x0 - 0.5 + cw];
    // keep the principal point strictly inside
    let lo_x = (intrinsics.cx + 1.0 - cw).max(0.0);
    let hi_x = intrinsics.cx.min(w - cw);
    let lo_y = (intrinsics.cy + 1.0 - ch).max(0.0);
    let hi_y = intrinsics.cy.min(h - ch);
    let x0 = uniform(&mut rng, lo_x.min(hi_x), hi_x);
    let y0 = uniform(&mut rng, lo_y.min(hi_y), hi_y);
    let flip = rng.random_bool(config.flip_probability.clamp(0.0, 1.0));
    let mut ops = vec![AugmentOp::CropResize { x0, y0, width: cw, height: ch, out_width: config.out_width, out_height: config.out_height }];
    if flip {
        ops.push(AugmentOp::HorizontalFlip);
    }
    let record = AugmentRecord { ops, kept: None };
    let patch = apply_to_image(&record, image)?;
    let k = record.adjust_intrinsics(intrinsics)?;
    Ok((patch, k, record))
}

/// Source cell for every target cell: the target cell center pushed through
/// the record's point transform, then looked up in the grid. Image-only
/// records leave the grid untouched.
pub fn bev_gather_index(record: &AugmentRecord, grid: &BevGridConfig) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(grid.cell_count());
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let (x, y) = grid.cell_center(i, j);
            let q = record.transform_point(&Vector3::new(x, y, 0.0));
            index.push(grid.cell_of(q.x, q.y).map(|(a, b)| a * grid.cols + b));
        }
    }
    index
}

/// Resamples a BEV map produced from augmented points back into the
/// original frame with nearest-cell lookup.
pub fn invert_for_bev(record: &AugmentRecord, grid: &BevGridConfig, bev: &BevFeatureMap) -> Result<BevFeatureMap> {
    let e = bev.channels();
    if bev.rows() != grid.rows || bev.cols() != grid.cols {
        return Err(Error::shape("invert_for_bev", format!("map {:?} for grid {}x{}", bev.features.shape(), grid.rows, grid.cols)));
    }
    let index = bev_gather_index(record, grid);
    let mut data = vec![0.0; grid.cell_count() * e];
    let mut mask = vec![false; grid.cell_count()];
    for (t, src) in index.iter().enumerate() {
        if let Some(s) = *src {
            data[t * e..(t + 1) * e].copy_from_slice(&bev.features.data()[s * e..(s + 1) * e]);
            mask[t] = bev.mask[s];
        }
    }
    Ok(BevFeatureMap { features: Tensor::new(vec![grid.rows, grid.cols, e], data)?, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::nonzero_grid_indices;
    use crate::geometry::{project_points, RigidTransform};
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| Vector3::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-1.5..2.0))).collect();
        PointCloud::new(pts, Some((0..n).map(|i| (i % 4) as u8).collect())).unwrap()
    }

    #[test]
    fn identity_record_is_identity() {
        let c = cloud(50, 1);
        let r = AugmentRecord {
            ops: vec![
                AugmentOp::RotateZ(0.0),
                AugmentOp::Flip { x: false, y: false },
                AugmentOp::Scale(1.0),
                AugmentOp::Translate([0.0; 3]),
                AugmentOp::DropCuboid { min: [100.0; 3], max: [100.0; 3] },
            ],
            kept: None,
        };
        let (out, kept) = r.apply_to_points(&c);
        assert_eq!(out, c);
        assert_eq!(kept, (0..50).collect::<Vec<_>>());
        let (same, _) = augment_points(&c, 3, &PointAugmentConfig::disabled());
        assert_eq!(same, c);
    }

    #[test]
    fn rotation_inverts() {
        let r = AugmentRecord { ops: vec![AugmentOp::RotateZ(1.234)], kept: None };
        let c = cloud(20, 2);
        for p in &c.points {
            assert!((r.invert_point(&r.transform_point(p)) - p).abs().max() < 1e-12);
        }
    }

    #[test]
    fn everything_dropped() {
        let c = cloud(30, 3);
        let r = AugmentRecord { ops: vec![AugmentOp::DropCuboid { min: [-1e9; 3], max: [1e9; 3] }], kept: None };
        let (out, kept) = r.apply_to_points(&c);
        assert!(out.is_empty());
        assert!(kept.is_empty());
    }

    #[test]
    fn point_replay_is_bit_exact() {
        let c = cloud(200, 4);
        let (a, rec) = augment_points(&c, 77, &PointAugmentConfig::default());
        let (b, kept) = rec.apply_to_points(&c);
        assert_eq!(a, b);
        assert_eq!(rec.kept.as_ref().unwrap(), &kept);
        assert_eq!(augment_points(&c, 77, &PointAugmentConfig::default()), (a, rec));
    }

    fn test_image(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h, (0..w * h * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn full_window_is_identity() {
        let im = test_image(12, 8);
        let k = CameraIntrinsics::new(10.0, 10.0, 5.5, 3.5, 12, 8).unwrap();
        let r = AugmentRecord {
            ops: vec![AugmentOp::CropResize { x0: 0.0, y0: 0.0, width: 12.0, height: 8.0, out_width: 12, out_height: 8 }],
            kept: None,
        };
        assert_eq!(apply_to_image(&r, &im).unwrap(), im);
        assert_eq!(r.adjust_intrinsics(&k).unwrap(), k);
    }

    #[test]
    fn double_flip_is_identity() {
        let im = test_image(12, 8);
        let r = AugmentRecord { ops: vec![AugmentOp::HorizontalFlip, AugmentOp::HorizontalFlip], kept: None };
        assert_eq!(apply_to_image(&r, &im).unwrap(), im);
        assert!(!r.is_flipped());
    }

    #[test]
    fn degenerate_window_rejected() {
        let r = AugmentRecord {
            ops: vec![AugmentOp::CropResize { x0: 0.0, y0: 0.0, width: 0.0, height: 8.0, out_width: 12, out_height: 8 }],
            kept: None,
        };
        assert!(apply_to_image(&r, &test_image(12, 8)).is_err());
        let cfg = ImageAugmentConfig { crop_fraction: (0.0, 0.0), ..ImageAugmentConfig::default() };
        let k = CameraIntrinsics::new(10.0, 10.0, 5.5, 3.5, 12, 8).unwrap();
        assert!(augment_image(&test_image(12, 8), &k, 1, &cfg).is_err());
    }

    #[test]
    fn adjusted_intrinsics_follow_the_record() {
        let k = CameraIntrinsics::new(24.0, 24.0, 23.5, 15.5, 48, 32).unwrap();
        let e = RigidTransform::camera_looking(Vector3::zeros(), 0.3, 0.1);
        let c = cloud(400, 5);
        for seed in 0..20 {
            let (patch, k2, rec) = augment_image(&test_image(48, 32), &k, seed, &ImageAugmentConfig::default()).unwrap();
            assert_eq!((patch.width, patch.height), (48, 32));
            let orig = project_points(&c, &e, &k);
            let aug = project_points(&c, &e, &k2);
            let mut checked = 0;
            for p in &orig {
                if let Some(q) = aug.iter().find(|q| q.point_index == p.point_index) {
                    let (u, v) = rec.transform_pixel(p.u, p.v);
                    let qu = if rec.is_flipped() { 47.0 - q.u } else { q.u };
                    assert!((u - qu).abs() < 0.5 && (v - q.v).abs() < 0.5);
                    checked += 1;
                }
            }
            assert!(checked > 0);
        }
    }

    fn grid() -> BevGridConfig {
        BevGridConfig { x_min: -4.0, y_min: -4.0, rows: 8, cols: 8, cell: 1.0, channels: 2 }
    }

    fn single_cell_map(i: usize, j: usize) -> BevFeatureMap {
        let g = grid();
        let mut m = BevFeatureMap::empty(&g);
        let k = i * g.cols + j;
        m.features.data_mut()[k * 2..k * 2 + 2].copy_from_slice(&[0.6, 0.8]);
        m.mask[k] = true;
        m
    }

    #[test]
    fn bev_inversion_examples() {
        let g = grid();
        let m = single_cell_map(2, 1);
        assert_eq!(invert_for_bev(&AugmentRecord::identity(), &g, &m).unwrap(), m);

        let flip = AugmentRecord { ops: vec![AugmentOp::Flip { x: true, y: false }], kept: None };
        let f = invert_for_bev(&flip, &g, &m).unwrap();
        assert_eq!(nonzero_grid_indices(&f), vec![(2, 6)]);
        assert_eq!(invert_for_bev(&flip, &g, &f).unwrap(), m);

        // content at augmented cell (2, 1) came from the original cell whose
        // center rotates onto it by +90 degrees: x' = -y, y' = x
        let rot = AugmentRecord { ops: vec![AugmentOp::RotateZ(std::f64::consts::FRAC_PI_2)], kept: None };
        let r = invert_for_bev(&rot, &g, &m).unwrap();
        // center of (2,1) is (x,y) = (-2.5,-1.5); its preimage is (-1.5, 2.5) -> cell (6, 2)
        assert_eq!(nonzero_grid_indices(&r), vec![(6, 2)]);
        assert_eq!(r.cell(6, 2), m.cell(2, 1));
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for a in 0..20 {
            for b in 0..20 {
                assert!(seen.insert(derive_seed(a, &[b, 1])));
            }
        }
    }

    proptest! {
        #[test]
        fn point_records_invert(seed in 0u64..10_000) {
            let c = cloud(20, seed);
            let (out, rec) = augment_points(&c, seed, &PointAugmentConfig::default());
            for (q, &i) in out.points.iter().zip(rec.kept.as_ref().unwrap()) {
                prop_assert!((rec.invert_point(q) - c.points[i]).abs().max() < 1e-9);
            }
        }
    }
}
