//! Model bundle and the batched forward pass that produces every loss term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_image, augment_points, bev_gather_index, derive_seed, AugmentRecord, ImageAugmentConfig, PointAugmentConfig};
use crate::bev::{lift_cells, lift_splat_graph, BevGridConfig, PointBevHead};
use crate::error::{Error, Result};
use crate::geometry::{project_points, render_sparse_depth, CameraIntrinsics, DepthBinning, PointCloud, RigidTransform};
use crate::losses::{depth_bce_sum_graph, depth_targets, info_nce_graph, LossConfig};
use crate::nn::{Bound, DepthHead, DepthHeadConfig, EncoderConfig2D, EncoderConfig3D, Graph, ImageEncoder, ParamStore, PointEncoder, Tensor, Var};
use crate::superpixel::{group_superpoints, pool_normalized_mean, pool_normalized_mean_graph, slic_segment, superpixel_members, SegmentFeatures, SlicParams};
use crate::synth::SceneSample;

pub const TEACHER: &str = "teacher";
pub const STUDENT: &str = "student";
pub const DEPTH: &str = "depth";
pub const BEV_HEAD: &str = "bevhead";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: EncoderConfig2D,
    pub points: EncoderConfig3D,
    pub depth: DepthHeadConfig,
    pub grid: BevGridConfig,
    pub bev_hidden: usize,
    pub binning: DepthBinning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: EncoderConfig2D::default(),
            points: EncoderConfig3D::default(),
            depth: DepthHeadConfig::default(),
            grid: BevGridConfig::default(),
            bev_hidden: 16,
            binning: DepthBinning { d_min: 1.0, d_max: 11.0, bins: 48 },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub teacher: ImageEncoder,
    pub student: PointEncoder,
    pub depth: DepthHead,
    pub bev: PointBevHead,
}

impl Models {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let c = config;
        if c.image.out_channels != c.points.out_channels || c.image.out_channels != c.grid.channels {
            return Err(Error::invalid("teacher, student and BEV channel counts must agree"));
        }
        if c.depth.in_channels != c.image.out_channels || c.depth.bins != c.binning.bins {
            return Err(Error::invalid("depth head must read teacher features and emit one channel per depth bin"));
        }
        DepthBinning::new(c.binning.d_min, c.binning.d_max, c.binning.bins)?;
        Ok(Models {
            config: c.clone(),
            teacher: ImageEncoder::new(c.image.clone(), TEACHER)?,
            student: PointEncoder::new(c.points.clone(), STUDENT)?,
            depth: DepthHead::new(c.depth.clone(), DEPTH)?,
            bev: PointBevHead::new(c.grid.clone(), &c.points, c.bev_hidden, BEV_HEAD)?,
        })
    }

    /// All parameters; each network draws from its own stream of `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        s.extend(&self.teacher.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]))));
        s.extend(&self.student.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]))));
        s.extend(&self.depth.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]))));
        s.extend(&self.bev.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]))));
        s
    }

    /// Fails unless `params` holds every tensor of these models with the
    /// expected shape.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        for (name, t) in self.init(0).iter() {
            let got = params.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(())
    }

    /// Teacher features of an `[H, W, 3]` image.
    pub fn teacher_features(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.teacher.encode(params, image)
    }

    /// `[H, W, T]` bin probabilities from teacher features.
    pub fn predict_depth(&self, params: &ParamStore, features: &Tensor, k: &CameraIntrinsics) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.with_prefix(DEPTH).bind(&mut g, false);
        let f = g.constant(features.clone());
        let d = self.depth.forward(&mut g, &p, f, k)?;
        Ok(g.value(d).clone())
    }
}

/// Which parts of the objective are live.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub ipv: bool,
    pub bev: bool,
    pub depth: bool,
}

impl Objective {
    pub fn from_flags(enable_ipv: bool, enable_bev: bool, loss: &LossConfig) -> Self {
        Objective { ipv: enable_ipv && loss.alpha > 0.0, bev: enable_bev && loss.beta > 0.0, depth: loss.gamma > 0.0 }
    }

    fn needs_depth_head(&self) -> bool {
        self.bev || self.depth
    }
}

#[derive(Clone, Debug)]
pub struct PreparedView {
    /// Teacher features of the cropped patch, in unflipped orientation.
    pub features: Tensor,
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidTransform,
    pub superpixels: SegmentFeatures,
    /// Augmented-cloud point indices per superpixel.
    pub superpoints: Vec<Vec<usize>>,
    pub depth_targets: Vec<(usize, usize)>,
    pub cells: Vec<Option<u32>>,
}

#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub record: AugmentRecord,
    pub views: Vec<PreparedView>,
    /// Point-BEV source cell for every cell of the original frame.
    pub bev_index: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSettings {
    pub enabled: bool,
    pub points: PointAugmentConfig,
    pub image: ImageAugmentConfig,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings { enabled: true, points: PointAugmentConfig::default(), image: ImageAugmentConfig::default() }
    }
}

fn flip_columns(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.len()];
    for r in 0..h {
        for col in 0..w {
            let src = (r * w + col) * c;
            let dst = (r * w + (w - 1 - col)) * c;
            out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Augmentation, teacher encoding, superpixels, correspondences and depth
/// targets for one scene; everything that does not need gradients.
pub fn prepare_scene(
    models: &Models,
    params: &ParamStore,
    scene: &SceneSample,
    seed: u64,
    augment: &AugmentSettings,
    slic: &SlicParams,
    objective: &Objective,
) -> Result<PreparedScene> {
    let cfg = &models.config;
    let (cloud, record) = if augment.enabled {
        augment_points(&scene.cloud, derive_seed(seed, &[0]), &augment.points)
    } else {
        let r = AugmentRecord { ops: Vec::new(), kept: Some((0..scene.cloud.len()).collect()) };
        (scene.cloud.clone(), r)
    };
    let kept = record.kept.clone().unwrap_or_default();
    let survivors = scene.cloud.select(&kept);
    let mut views = Vec::with_capacity(scene.views.len());
    for (vi, view) in scene.views.iter().enumerate() {
        let (patch, k, flipped) = if augment.enabled {
            let (patch, k, rec) = augment_image(&view.image, &view.intrinsics, derive_seed(seed, &[1, vi as u64]), &augment.image)?;
            let flipped = rec.is_flipped();
            (patch, k, flipped)
        } else {
            (view.image.clone(), view.intrinsics, false)
        };
        let mut features = models.teacher_features(params, &patch.to_tensor())?;
        let upright = if flipped {
            features = flip_columns(&features);
            patch.flipped()
        } else {
            patch
        };
        let map = slic_segment(&upright, slic)?;
        let c = features.last_dim();
        let flat = features.clone().reshape(&[k.pixel_count(), c])?;
        let superpixels = pool_normalized_mean(&flat, &superpixel_members(&map))?;
        let projections = project_points(&survivors, &view.extrinsic, &k);
        let superpoints = group_superpoints(&projections, &map).groups;
        let targets = if objective.needs_depth_head() {
            let sparse = render_sparse_depth(&project_points(&scene.cloud, &view.extrinsic, &k), k.width, k.height);
            depth_targets(&sparse, &cfg.binning)?
        } else {
            Vec::new()
        };
        let cells = if objective.bev { lift_cells(&k, &view.extrinsic, &cfg.binning, &cfg.grid)? } else { Vec::new() };
        views.push(PreparedView { features, intrinsics: k, extrinsic: view.extrinsic, superpixels, superpoints, depth_targets: targets, cells });
    }
    let bev_index = bev_gather_index(&record, &cfg.grid);
    Ok(PreparedScene { cloud, record, views, bev_index })
}

/// Graph handles of one batch's loss terms.
pub struct BatchLosses {
    pub total: Var,
    pub ipv: Option<Var>,
    pub bev: Option<Var>,
    pub depth: Option<Var>,
    pub ipv_pairs: usize,
    pub bev_pairs: usize,
    pub depth_pixels: usize,
}

/// Builds the full objective over a batch of prepared scenes. `p` must hold
/// the student, depth and BEV-head parameters.
pub fn batch_losses(
    g: &mut Graph,
    p: &Bound,
    models: &Models,
    batch: &[PreparedScene],
    objective: &Objective,
    loss: &LossConfig,
) -> Result<BatchLosses> {
    let grid = &models.config.grid;
    let mut ipv_t = Vec::new();
    let mut ipv_s = Vec::new();
    let mut bev_t = Vec::new();
    let mut bev_s = Vec::new();
    let mut depth_sums = Vec::new();
    let mut depth_pixels = 0;
    for scene in batch {
        let enc = models.student.forward(g, p, &scene.cloud)?;
        let mut image_bev: Option<Var> = None;
        for view in &scene.views {
            if objective.ipv && !scene.cloud.is_empty() {
                let (pooled, kept) = pool_normalized_mean_graph(g, enc.point_features, &view.superpoints)?;
                let kept: Vec<usize> = kept.into_iter().filter(|&m| view.superpixels.valid[m]).collect();
                if !kept.is_empty() {
                    let rows: Vec<f64> = kept.iter().flat_map(|&m| view.superpixels.features.row(m).to_vec()).collect();
                    let c = view.superpixels.features.last_dim();
                    ipv_t.push(g.constant(Tensor::new(vec![kept.len(), c], rows)?));
                    // pooled rows follow the order of non-empty superpoints
                    let all: Vec<usize> = (0..view.superpoints.len()).filter(|&m| !view.superpoints[m].is_empty()).collect();
                    let pick = kept.iter().map(|m| all.binary_search(m).ok()).collect();
                    ipv_s.push(g.gather_rows(pooled, pick)?);
                }
            }
            if objective.needs_depth_head() {
                let f = g.constant(view.features.clone());
                let d = models.depth.forward(g, p, f, &view.intrinsics)?;
                if objective.depth {
                    if let Some(s) = depth_bce_sum_graph(g, d, &view.depth_targets)? {
                        depth_sums.push(s);
                        depth_pixels += view.depth_targets.len();
                    }
                }
                if objective.bev {
                    let raw = lift_splat_graph(g, f, d, view.cells.clone(), grid)?;
                    image_bev = Some(match image_bev {
                        Some(acc) => g.add(acc, raw)?,
                        None => raw,
                    });
                }
            }
        }
        if let (true, Some(raw)) = (objective.bev, image_bev) {
            if !scene.cloud.is_empty() {
                let image_bev = g.l2_normalize(raw, 1)?;
                let (point_bev, mask) = models.bev.forward(g, p, enc.voxel_features, &enc.voxelization)?;
                // cells outside every camera frustum have no image feature to match
                let mut lifted = vec![false; grid.cell_count()];
                scene.views.iter().flat_map(|v| v.cells.iter().flatten()).for_each(|&c| lifted[c as usize] = true);
                let cells: Vec<usize> =
                    (0..grid.cell_count()).filter(|&t| lifted[t] && scene.bev_index[t].is_some_and(|s| mask[s])).collect();
                if !cells.is_empty() {
                    bev_t.push(g.gather_rows(image_bev, cells.iter().map(|&t| Some(t)).collect())?);
                    bev_s.push(g.gather_rows(point_bev, cells.iter().map(|&t| scene.bev_index[t]).collect())?);
                }
            }
        }
    }
    let mut terms = Vec::new();
    let ipv = if ipv_t.is_empty() {
        None
    } else {
        let t = g.concat_rows(&ipv_t)?;
        let s = g.concat_rows(&ipv_s)?;
        let l = info_nce_graph(g, t, s, loss.tau_ipv)?;
        terms.push(g.scale(l, loss.alpha));
        Some(l)
    };
    let ipv_pairs = ipv_t.iter().map(|&v| g.shape(v)[0]).sum();
    let bev = if bev_t.is_empty() {
        None
    } else {
        let t = g.concat_rows(&bev_t)?;
        let s = g.concat_rows(&bev_s)?;
        let l = info_nce_graph(g, t, s, loss.tau_bev)?;
        terms.push(g.scale(l, loss.beta));
        Some(l)
    };
    let bev_pairs = bev_t.iter().map(|&v| g.shape(v)[0]).sum();
    let depth = if depth_sums.is_empty() {
        None
    } else {
        let mut acc = depth_sums[0];
        for &s in &depth_sums[1..] {
            acc = g.add(acc, s)?;
        }
        let l = g.scale(acc, 1.0 / depth_pixels as f64);
        terms.push(g.scale(l, loss.gamma));
        Some(l)
    };
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(BatchLosses { total, ipv, bev, depth, ipv_pairs, bev_pairs, depth_pixels })
}
