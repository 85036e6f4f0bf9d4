//! Central finite-difference checks of every autodiff primitive, the loss
//! composites and a full training objective.
//!
//! Each case maps named input tensors to a scalar. Primitives with tensor
//! outputs are reduced with a fixed random weighting so every output entry
//! feeds the gradient. Inputs are drawn away from kinks (ReLU at zero, clamp
//! bounds) so the one-sided limits agree within the step size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::bev::{lift_splat_graph, BevGridConfig, PointBevHead};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, DepthBinning, PointCloud};
use crate::losses::{depth_bce_sum_graph, info_nce_graph, LossConfig};
use crate::nn::models::{EncoderConfig2D, EncoderConfig3D, PointEncoder};
use crate::nn::{Bound, DepthHead, DepthHeadConfig, Graph, ImageEncoder, ParamStore, Tensor, Var};
use crate::pipeline::{batch_losses, prepare_scene, AugmentSettings, ModelConfig, Models, Objective, PreparedScene, BEV_HEAD, DEPTH, STUDENT};
use crate::superpixel::{pool_normalized_mean_graph, SlicParams};
use crate::synth::{generate_scene, SceneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seeds: u64,
    pub eps: f64,
    pub rel_tol: f64,
    /// Coordinates checked per seed when an input set is larger.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { seeds: 10, eps: 1e-5, rel_tol: 1e-4, max_coords: 24 }
    }
}

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub seeds: u64,
    pub coords: usize,
    pub worst_rel: f64,
    /// Input name, flat index, analytic and numeric derivative at the worst
    /// coordinate.
    pub worst_at: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Inputs = Box<dyn Fn(u64) -> Result<ParamStore>>;
type Build = Box<dyn Fn(&mut Graph, &Bound, u64) -> Result<Var>>;

pub struct Case {
    pub name: String,
    inputs: Inputs,
    build: Build,
}

impl Case {
    fn new(
        name: &str,
        inputs: impl Fn(u64) -> Result<ParamStore> + 'static,
        build: impl Fn(&mut Graph, &Bound, u64) -> Result<Var> + 'static,
    ) -> Self {
        Case { name: name.to_string(), inputs: Box::new(inputs), build: Box::new(build) }
    }

    fn eval(&self, store: &ParamStore, seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let out = (self.build)(&mut g, &p, seed)?;
        Ok(g.value(out).item())
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<CheckReport> {
        let mut worst = 0.0f64;
        let mut worst_at = None;
        let mut coords = 0;
        for seed in 0..opts.seeds {
            let store = (self.inputs)(seed)?;
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let out = (self.build)(&mut g, &p, seed)?;
            let grads = g.backward(out)?;

            let mut all: Vec<(String, usize)> =
                store.iter().flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i))).collect();
            if all.len() > opts.max_coords {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
                rand::seq::SliceRandom::shuffle(all.as_mut_slice(), &mut rng);
                all.truncate(opts.max_coords);
            }
            for (name, i) in all {
                let var = p.var(&name)?;
                let analytic = grads.get(var).map_or(0.0, |t| t.data()[i]);
                let mut shifted = store.clone();
                shifted.get_mut(&name)?.data_mut()[i] += opts.eps;
                let up = self.eval(&shifted, seed)?;
                shifted.get_mut(&name)?.data_mut()[i] -= 2.0 * opts.eps;
                let down = self.eval(&shifted, seed)?;
                let numeric = (up - down) / (2.0 * opts.eps);
                let rel = relative_error(analytic, numeric);
                if rel >= worst {
                    worst = rel;
                    worst_at = Some((name, i, analytic, numeric));
                }
                coords += 1;
            }
        }
        Ok(CheckReport { name: self.name.clone(), seeds: opts.seeds, coords, worst_rel: worst, worst_at, passed: worst <= opts.rel_tol })
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream]))
}

fn uniform(seed: u64, stream: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed, stream);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[gap, 1]` and random sign.
fn off_zero(seed: u64, stream: u64, shape: &[usize], gap: f64) -> Tensor {
    let mut r = rng(seed, stream);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(gap..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Zero-initialized biases put units with all-zero inputs (empty cells, dead
/// units) exactly on the ReLU kink; checks run at a generic point instead.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let names: Vec<(String, usize)> = store.iter().filter(|(k, _)| k.ends_with(".b")).map(|(k, t)| (k.clone(), t.len())).collect();
    for (i, (name, n)) in names.into_iter().enumerate() {
        let t = off_zero(seed, 1000 + i as u64, &[n], 0.25);
        let scaled = Tensor::from_vec(t.data().iter().map(|v| 0.2 * v).collect());
        store.insert(name, scaled);
    }
}

fn store(items: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    items.into_iter().for_each(|(k, t)| s.insert(k, t));
    Ok(s)
}

/// Random weighted sum of all entries of `y`.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(seed, 99, &shape, -1.0, 1.0));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn unary(name: &str, draw: fn(u64) -> Tensor, f: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case::new(name, move |s| store(vec![("x", draw(s))]), move |g, p, s| {
        let y = f(g, p.var("x")?)?;
        reduce(g, y, s)
    })
}

fn binary(name: &str, a: &'static [usize], b: &'static [usize], f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case::new(
        name,
        move |s| store(vec![("a", uniform(s, 1, a, -1.0, 1.0)), ("b", uniform(s, 2, b, -1.0, 1.0))]),
        move |g, p, s| {
            let y = f(g, p.var("a")?, p.var("b")?)?;
            reduce(g, y, s)
        },
    )
}

fn primitive_cases() -> Vec<Case> {
    let m34 = |s| uniform(s, 1, &[3, 4], -1.0, 1.0);
    vec![
        binary("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)),
        binary("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        binary("add_bias", &[2, 3, 4], &[4], |g, a, b| g.add_bias(a, b)),
        binary("mul_channels", &[2, 3, 4], &[4], |g, a, b| g.mul_channels(a, b)),
        binary("matmul", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b)),
        binary("concat_rows", &[2, 3], &[4, 3], |g, a, b| g.concat_rows(&[a, b])),
        binary("concat_cols", &[3, 2], &[3, 4], |g, a, b| g.concat_cols(&[a, b])),
        unary("scale", m34, |g, x| Ok(g.scale(x, -1.7))),
        unary("add_scalar", m34, |g, x| Ok(g.add_scalar(x, 0.3))),
        unary("neg", m34, |g, x| Ok(g.neg(x))),
        unary("transpose", m34, |g, x| g.transpose(x)),
        unary("relu", |s| off_zero(s, 1, &[3, 4], 0.05), |g, x| Ok(g.relu(x))),
        unary("sigmoid", |s| uniform(s, 1, &[3, 4], -3.0, 3.0), |g, x| Ok(g.sigmoid(x))),
        unary("exp", |s| uniform(s, 1, &[3, 4], -2.0, 2.0), |g, x| Ok(g.exp(x))),
        unary("log", |s| uniform(s, 1, &[3, 4], 0.2, 2.0), |g, x| Ok(g.log(x))),
        unary(
            "clamp",
            |s| {
                // magnitudes clear of the ±0.5 bounds
                let t = off_zero(s, 1, &[3, 4], 0.0);
                Tensor::new(vec![3, 4], t.data().iter().map(|&v| if v.abs() < 0.5 { v * 0.9 } else { v * 1.1 }).collect()).unwrap()
            },
            |g, x| Ok(g.clamp(x, -0.5, 0.5)),
        ),
        unary("softmax_axis0", m34, |g, x| g.softmax(x, 0)),
        unary("softmax_axis1", m34, |g, x| g.softmax(x, 1)),
        unary("log_softmax", m34, |g, x| g.log_softmax(x, 1)),
        unary("l2_normalize_axis0", m34, |g, x| g.l2_normalize(x, 0)),
        unary("l2_normalize_axis1", m34, |g, x| g.l2_normalize(x, 1)),
        unary("sum", m34, |g, x| Ok(g.sum(x))),
        unary("mean", m34, |g, x| g.mean(x)),
        unary("mean_rows", m34, |g, x| g.mean_rows(x)),
        unary("global_avg_pool", |s| uniform(s, 1, &[3, 4, 2], -1.0, 1.0), |g, x| g.global_avg_pool(x)),
        unary("reshape", m34, |g, x| g.reshape(x, &[2, 6])),
        unary("gather_rows", m34, |g, x| g.gather_rows(x, vec![Some(2), None, Some(0), Some(2)])),
        unary("segment_sum", m34, |g, x| g.segment_sum(x, vec![1, 0, 1], 3)),
        unary("scale_rows", m34, |g, x| g.scale_rows(x, vec![0.5, -2.0, 1.5])),
        unary("pick", m34, |g, x| g.pick(x, vec![3, 0, 2])),
        Case::new(
            "conv2d_dilation1",
            |s| store(vec![("x", uniform(s, 1, &[5, 6, 3], -1.0, 1.0)), ("w", uniform(s, 2, &[4, 3, 3, 3], -0.5, 0.5)), ("b", uniform(s, 3, &[4], -0.5, 0.5))]),
            |g, p, s| {
                let y = g.conv2d(p.var("x")?, p.var("w")?, p.var("b")?, 1)?;
                reduce(g, y, s)
            },
        ),
        Case::new(
            "conv2d_dilation2",
            |s| store(vec![("x", uniform(s, 1, &[5, 6, 2], -1.0, 1.0)), ("w", uniform(s, 2, &[3, 3, 3, 2], -0.5, 0.5)), ("b", uniform(s, 3, &[3], -0.5, 0.5))]),
            |g, p, s| {
                let y = g.conv2d(p.var("x")?, p.var("w")?, p.var("b")?, 2)?;
                reduce(g, y, s)
            },
        ),
        Case::new(
            "lift_splat",
            |s| store(vec![("f", uniform(s, 1, &[6, 3], -1.0, 1.0)), ("d", uniform(s, 2, &[6, 4], 0.0, 1.0))]),
            |g, p, s| {
                let mut r = rng(s, 3);
                let cells = (0..24).map(|_| r.random_bool(0.8).then(|| r.random_range(0..5u32))).collect();
                let y = g.lift_splat(p.var("f")?, p.var("d")?, cells, 5)?;
                reduce(g, y, s)
            },
        ),
    ]
}

fn small_binning() -> DepthBinning {
    DepthBinning::new(1.0, 7.0, 6).unwrap()
}

fn loss_cases() -> Vec<Case> {
    vec![
        Case::new(
            "info_nce_tau_0.07",
            |s| store(vec![("t", uniform(s, 1, &[5, 4], -1.0, 1.0)), ("s", uniform(s, 2, &[5, 4], -1.0, 1.0))]),
            |g, p, _| {
                let t = g.l2_normalize(p.var("t")?, 1)?;
                let st = g.l2_normalize(p.var("s")?, 1)?;
                info_nce_graph(g, t, st, 0.07)
            },
        ),
        Case::new(
            "info_nce_tau_1",
            |s| store(vec![("t", uniform(s, 1, &[5, 4], -1.0, 1.0)), ("s", uniform(s, 2, &[5, 4], -1.0, 1.0))]),
            |g, p, _| info_nce_graph(g, p.var("t")?, p.var("s")?, 1.0),
        ),
        // superpoint pooling of normalized point features against superpixels
        Case::new(
            "ipv_loss",
            |s| store(vec![("points", uniform(s, 1, &[9, 4], -1.0, 1.0)), ("pixels", uniform(s, 2, &[4, 4], -1.0, 1.0))]),
            |g, p, s| {
                let mut r = rng(s, 3);
                let mut groups = vec![Vec::new(); 4];
                (0..9).for_each(|i| groups[r.random_range(0..4)].push(i));
                let (pooled, kept) = pool_normalized_mean_graph(g, p.var("points")?, &groups)?;
                let pixels = g.gather_rows(p.var("pixels")?, kept.iter().map(|&m| Some(m)).collect())?;
                let pixels = g.l2_normalize(pixels, 1)?;
                info_nce_graph(g, pixels, pooled, 0.07)
            },
        ),
        // lifted image BEV against a point BEV head, on occupied cells only
        Case::new(
            "bev_loss",
            |s| {
                let mut st = bev_head().init(&mut rng(s, 4));
                jitter_biases(&mut st, s);
                st.insert("f", uniform(s, 1, &[2, 3, 3], -1.0, 1.0));
                st.insert("logits", uniform(s, 2, &[2, 3, 6], -1.0, 1.0));
                st.insert("dense", off_zero(s, 3, &[4, 4, 6], 0.05));
                Ok(st)
            },
            |g, p, s| {
                let head = bev_head();
                let grid = &head.grid;
                let mut r = rng(s, 5);
                let cells = (0..36).map(|_| r.random_bool(0.9).then(|| r.random_range(0..grid.cell_count() as u32))).collect();
                let d = g.softmax(p.var("logits")?, 2)?;
                let raw = lift_splat_graph(g, p.var("f")?, d, cells, grid)?;
                let image = g.l2_normalize(raw, 1)?;
                let (point, mask) = head.forward_dense(g, p, p.var("dense")?)?;
                let used: Vec<usize> = (0..grid.cell_count()).filter(|&c| mask[c]).take(8).collect();
                let t = g.gather_rows(image, used.iter().map(|&c| Some(c)).collect())?;
                let st = g.gather_rows(point, used.iter().map(|&c| Some(c)).collect())?;
                info_nce_graph(g, t, st, 0.07)
            },
        ),
        Case::new(
            "depth_bce",
            |s| store(vec![("logits", uniform(s, 1, &[3, 4, 6], -2.0, 2.0))]),
            |g, p, s| {
                let mut r = rng(s, 2);
                let targets: Vec<(usize, usize)> = (0..12).filter_map(|i| r.random_bool(0.6).then(|| (i, r.random_range(0..6)))).collect();
                let targets = if targets.is_empty() { vec![(0, 0)] } else { targets };
                let probs = g.softmax(p.var("logits")?, 2)?;
                Ok(depth_bce_sum_graph(g, probs, &targets)?.expect("targets are non-empty"))
            },
        ),
    ]
}

fn bev_head() -> PointBevHead {
    let voxels = EncoderConfig3D { min: [-2.0, -2.0, -1.0], voxel_size: [1.0, 1.0, 1.0], dims: [4, 4, 2], hidden: 4, rounds: 1, out_channels: 3 };
    let grid = BevGridConfig { x_min: -2.0, y_min: -2.0, rows: 4, cols: 4, cell: 1.0, channels: 3 };
    PointBevHead::new(grid, &voxels, 4, "bev").unwrap()
}

fn model_cases() -> Vec<Case> {
    let image_cfg = EncoderConfig2D { channels: vec![4], kernels: vec![3], dilations: vec![2], out_channels: 3 };
    let enc = ImageEncoder::new(image_cfg, "img").unwrap();
    let depth_cfg = DepthHeadConfig { in_channels: 3, mlp_hidden: 4, se_ratio: 2, width: 4, res_blocks: 2, bins: 5 };
    let head = DepthHead::new(depth_cfg, "dh").unwrap();
    let point_cfg = EncoderConfig3D { min: [-2.0, -2.0, -1.0], voxel_size: [1.0, 1.0, 1.0], dims: [4, 4, 2], hidden: 4, rounds: 2, out_channels: 3 };
    let points = PointEncoder::new(point_cfg, "pt").unwrap();
    let k = CameraIntrinsics::new(4.0, 4.0, 2.5, 1.5, 6, 4).unwrap();
    let (e1, e2, h1, h2, p1, p2) = (enc.clone(), enc, head.clone(), head, points.clone(), points);
    vec![
        Case::new(
            "image_encoder",
            move |s| {
                let mut st = e1.init(&mut rng(s, 1));
                jitter_biases(&mut st, s);
                st.insert("image", uniform(s, 2, &[4, 5, 3], 0.0, 1.0));
                Ok(st)
            },
            move |g, p, s| {
                let y = e2.forward(g, p, p.var("image")?)?;
                reduce(g, y, s)
            },
        ),
        Case::new(
            "depth_head",
            move |s| {
                let mut st = h1.init(&mut rng(s, 1));
                jitter_biases(&mut st, s);
                st.insert("features", uniform(s, 2, &[4, 6, 3], -1.0, 1.0));
                Ok(st)
            },
            move |g, p, s| {
                let y = h2.forward(g, p, p.var("features")?, &k)?;
                reduce(g, y, s)
            },
        ),
        Case::new(
            "point_encoder",
            move |s| {
                let mut st = p1.init(&mut rng(s, 1));
                jitter_biases(&mut st, s);
                st.insert("coords", point_coords(s));
                Ok(st)
            },
            move |g, p, s| {
                let coords = point_coords(s);
                let cloud = PointCloud::new(coords.data().chunks(3).map(|c| nalgebra::Vector3::new(c[0], c[1], c[2])).collect(), None)?;
                let enc = p2.forward_coords(g, p, p.var("coords")?, &cloud)?;
                let backbone = g_gather(g, enc.backbone, &enc.voxelization.point_voxel)?;
                let both = g.concat_cols(&[enc.point_features, backbone])?;
                reduce(g, both, s)
            },
        ),
    ]
}

fn g_gather(g: &mut Graph, v: Var, rows: &[usize]) -> Result<Var> {
    g.gather_rows(v, rows.iter().map(|&k| Some(k)).collect())
}

/// Points strictly inside voxels so the assignment does not move under the
/// perturbation.
fn point_coords(seed: u64) -> Tensor {
    let mut r = rng(seed, 2);
    let data = (0..10)
        .flat_map(|_| {
            let cell = [r.random_range(-2..2) as f64, r.random_range(-2..2) as f64, r.random_range(-1..1) as f64];
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = cell[a] + r.random_range(0.1..0.9);
            }
            p
        })
        .collect();
    Tensor::new(vec![10, 3], data).unwrap()
}

/// A tiny world and models so the whole objective (IPV, BEV and depth terms
/// with their weights) can be differentiated numerically in well under a
/// second per seed.
pub fn tiny_setup() -> (Models, SceneConfig, AugmentSettings, SlicParams) {
    let model = ModelConfig {
        image: EncoderConfig2D { channels: vec![4], kernels: vec![3], dilations: vec![1], out_channels: 4 },
        points: EncoderConfig3D { min: [-4.0, -4.0, -2.0], voxel_size: [1.0, 1.0, 1.0], dims: [8, 8, 4], hidden: 4, rounds: 1, out_channels: 4 },
        depth: DepthHeadConfig { in_channels: 4, mlp_hidden: 4, se_ratio: 2, width: 4, res_blocks: 1, bins: 6 },
        grid: BevGridConfig { x_min: -4.0, y_min: -4.0, rows: 8, cols: 8, cell: 1.0, channels: 4 },
        bev_hidden: 4,
        binning: small_binning(),
    };
    let scene = SceneConfig {
        half_extent: 4.0,
        boxes: 1,
        cylinders: 1,
        placement_radius: (1.8, 3.2),
        image_width: 12,
        image_height: 8,
        focal: 6.0,
        lidar_azimuth: 48,
        lidar_elevation: 6,
        ..SceneConfig::default()
    };
    let mut augment = AugmentSettings::default();
    augment.image.out_width = 12;
    augment.image.out_height = 8;
    let slic = SlicParams { segments: 6, compactness: 10.0, iterations: 5 };
    (Models::new(&model).unwrap(), scene, augment, slic)
}

fn objective_case() -> Case {
    let (models, scene_cfg, augment, slic) = tiny_setup();
    let loss = LossConfig { tau_ipv: 0.5, tau_bev: 0.5, ..LossConfig::default() };
    let objective = Objective::from_flags(true, true, &loss);
    let prepare = {
        let models = models.clone();
        let objective = objective.clone();
        move |seed: u64| -> Result<(ParamStore, PreparedScene)> {
            let params = models.init(seed);
            let scene = generate_scene(&SceneConfig { seed, ..scene_cfg.clone() })?;
            let prepared = prepare_scene(&models, &params, &scene, seed, &augment, &slic, &objective)?;
            let mut trainable = ParamStore::new();
            for pre in [STUDENT, DEPTH, BEV_HEAD] {
                trainable.extend(&params.with_prefix(&format!("{pre}.")));
            }
            jitter_biases(&mut trainable, seed);
            Ok((trainable, prepared))
        }
    };
    let prepare2 = prepare.clone();
    Case::new("total_objective", move |s| Ok(prepare(s)?.0), move |g, p, s| {
        // the preparation is a pure function of the seed
        let (_, prepared) = prepare2(s)?;
        let l = batch_losses(g, p, &models, &[prepared], &objective, &loss)?;
        Ok(l.total)
    })
}

pub fn all_cases() -> Vec<Case> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases());
    cases.extend(model_cases());
    cases.push(objective_case());
    cases
}

pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<CheckReport>> {
    all_cases().iter().map(|c| c.check(opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // the taped graph computes 2x while the probed one computes x
        let case = Case::new("broken", |s| store(vec![("x", uniform(s, 1, &[3], -1.0, 1.0))]), |g, p, s| {
            let x = p.var("x")?;
            let y = if g.requires_grad(x) { g.scale(x, 2.0) } else { x };
            reduce(g, y, s)
        });
        let r = case.check(&GradCheckOptions { seeds: 2, ..GradCheckOptions::default() }).unwrap();
        assert!(!r.passed);
    }
}
