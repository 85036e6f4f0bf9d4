//! Toy backbones and heads built on the autodiff graph.
//!
//! All feature maps are channels-last: `[H, W, C]` for images and BEV grids,
//! `[rows, C]` for points and voxels.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{he_normal, Bound, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud};

fn conv_params(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), he_normal(&[cout, k, k, cin], cin * k * k, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn linear_params(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), he_normal(&[cin, cout], cin, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv2d(x, w, b, dilation)
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig2D {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub out_channels: usize,
}

impl Default for EncoderConfig2D {
    fn default() -> Self {
        EncoderConfig2D { channels: vec![16, 16], kernels: vec![3, 3], dilations: vec![1, 2], out_channels: 16 }
    }
}

const INPUT_MEAN: f64 = 0.5;
const INPUT_GAIN: f64 = 4.0;

/// Resolution-preserving conv stack followed by a 1x1 projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: EncoderConfig2D,
    pub prefix: String,
}

impl ImageEncoder {
    pub fn new(config: EncoderConfig2D, prefix: &str) -> Result<Self> {
        let c = &config;
        if c.channels.len() != c.kernels.len() || c.channels.len() != c.dilations.len() {
            return Err(Error::invalid("image encoder layer lists differ in length"));
        }
        if c.kernels.iter().any(|k| k % 2 == 0) || c.dilations.contains(&0) || c.out_channels == 0 {
            return Err(Error::invalid("image encoder needs odd kernels, dilation >= 1 and C >= 1"));
        }
        Ok(ImageEncoder { config, prefix: prefix.to_string() })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        let mut cin = 3;
        for (i, (&c, &k)) in self.config.channels.iter().zip(&self.config.kernels).enumerate() {
            conv_params(&mut s, &format!("{}.conv{i}", self.prefix), cin, c, k, rng);
            cin = c;
        }
        conv_params(&mut s, &format!("{}.proj", self.prefix), cin, self.config.out_channels, 1, rng);
        s
    }

    /// `[H, W, 3]` image in `[0, 1]` to `[H, W, C]` features. Inputs are
    /// centered and scaled to roughly unit spread first.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let x = g.add_scalar(image, -INPUT_MEAN);
        let mut x = g.scale(x, INPUT_GAIN);
        for (i, &d) in self.config.dilations.iter().enumerate() {
            x = conv(g, p, &format!("{}.conv{i}", self.prefix), x, d)?;
            x = g.relu(x);
        }
        conv(g, p, &format!("{}.proj", self.prefix), x, 1)
    }

    /// Forward pass outside any training graph.
    pub fn encode(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig3D {
    /// Lower corner of the voxelized volume (LiDAR frame, meters).
    pub min: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub hidden: usize,
    /// Rounds of 26-neighborhood aggregation after the voxel embedding.
    pub rounds: usize,
    pub out_channels: usize,
}

impl Default for EncoderConfig3D {
    fn default() -> Self {
        EncoderConfig3D { min: [-8.0, -8.0, -2.0], voxel_size: [0.5, 0.5, 1.0], dims: [32, 32, 6], hidden: 32, rounds: 2, out_channels: 16 }
    }
}

impl EncoderConfig3D {
    pub fn extent(&self, axis: usize) -> f64 {
        self.voxel_size[axis] * self.dims[axis] as f64
    }

    /// Voxel coordinates of a point, clamped into the grid.
    pub fn voxel_of(&self, p: &nalgebra::Vector3<f64>) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / self.voxel_size[a]).floor();
            out[a] = f.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        out
    }

    /// Linear id with x fastest: `(z * Y + y) * X + x`.
    pub fn linear_id(&self, v: [usize; 3]) -> usize {
        (v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.min[a] + (v[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

/// Voxelization of a cloud: occupied voxels in ascending linear-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelization {
    pub voxels: Vec<[usize; 3]>,
    pub point_voxel: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Voxelization {
    pub fn new(cloud: &PointCloud, cfg: &EncoderConfig3D) -> Self {
        let coords: Vec<[usize; 3]> = cloud.points.iter().map(|p| cfg.voxel_of(p)).collect();
        let mut ids: Vec<usize> = coords.iter().map(|&v| cfg.linear_id(v)).collect();
        let raw = ids.clone();
        ids.sort_unstable();
        ids.dedup();
        let mut voxels = vec![[0; 3]; ids.len()];
        let mut counts = vec![0; ids.len()];
        let point_voxel: Vec<usize> = raw
            .iter()
            .zip(&coords)
            .map(|(id, &v)| {
                let k = ids.binary_search(id).unwrap();
                voxels[k] = v;
                counts[k] += 1;
                k
            })
            .collect();
        Voxelization { voxels, point_voxel, counts }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// `(target, neighbor)` pairs over the occupied 3x3x3 neighborhood
    /// (including the voxel itself), target-major.
    pub fn neighbor_pairs(&self, cfg: &EncoderConfig3D) -> Vec<(usize, usize)> {
        let ids: Vec<usize> = self.voxels.iter().map(|&v| cfg.linear_id(v)).collect();
        let mut pairs = Vec::new();
        for (t, v) in self.voxels.iter().enumerate() {
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                        if (0..3).any(|a| n[a] < 0 || n[a] >= cfg.dims[a] as i64) {
                            continue;
                        }
                        let id = cfg.linear_id([n[0] as usize, n[1] as usize, n[2] as usize]);
                        if let Ok(k) = ids.binary_search(&id) {
                            pairs.push((t, k));
                        }
                    }
                }
            }
        }
        pairs
    }
}

pub struct PointEncoding {
    /// `[V, C]` features of occupied voxels.
    pub voxel_features: Var,
    /// `[N, C]` per-point features (each point inherits its voxel's row).
    pub point_features: Var,
    /// `[V, hidden]` backbone output ahead of the projection layer.
    pub backbone: Var,
    pub voxelization: Voxelization,
}

/// Voxel MLP with 3x3x3 neighborhood aggregation and a linear projection.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub config: EncoderConfig3D,
    pub prefix: String,
}

pub const POINT_INPUTS: usize = 6;

impl PointEncoder {
    pub fn new(config: EncoderConfig3D, prefix: &str) -> Result<Self> {
        if config.dims.contains(&0) || config.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("voxel grid needs positive sizes and extents"));
        }
        if config.hidden == 0 || config.out_channels == 0 {
            return Err(Error::invalid("point encoder widths must be positive"));
        }
        Ok(PointEncoder { config, prefix: prefix.to_string() })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let h = self.config.hidden;
        let mut s = ParamStore::new();
        linear_params(&mut s, &format!("{}.embed", self.prefix), POINT_INPUTS + 1, h, rng);
        for r in 0..self.config.rounds {
            linear_params(&mut s, &format!("{}.mix{r}", self.prefix), 2 * h, h, rng);
        }
        linear_params(&mut s, &format!("{}.proj", self.prefix), h, self.config.out_channels, rng);
        s
    }

    pub fn coords_tensor(cloud: &PointCloud) -> Tensor {
        Tensor::new(vec![cloud.len(), 3], cloud.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, cloud: &PointCloud) -> Result<PointEncoding> {
        let coords = g.constant(Self::coords_tensor(cloud));
        self.forward_coords(g, p, coords, cloud)
    }

    /// Same as [`forward`](Self::forward) with coordinates supplied as a graph
    /// variable `[N, 3]`; voxel assignment is taken from `cloud`.
    pub fn forward_coords(&self, g: &mut Graph, p: &Bound, coords: Var, cloud: &PointCloud) -> Result<PointEncoding> {
        let cfg = &self.config;
        let n = cloud.len();
        let vox = Voxelization::new(cloud, cfg);
        let c = cfg.out_channels;
        if n == 0 {
            let empty = g.constant(Tensor::zeros(&[0, c]));
            let backbone = g.constant(Tensor::zeros(&[0, cfg.hidden]));
            return Ok(PointEncoding { voxel_features: empty, point_features: empty, backbone, voxelization: vox });
        }
        // local offset in voxel units and globally normalized position
        let inv_size = g.constant(Tensor::from_vec(cfg.voxel_size.iter().map(|s| 1.0 / s).collect()));
        let scaled = g.mul_channels(coords, inv_size)?;
        let centers: Vec<f64> = vox
            .point_voxel
            .iter()
            .flat_map(|&k| {
                let ctr = cfg.voxel_center(vox.voxels[k]);
                [0, 1, 2].map(|a| ctr[a] / cfg.voxel_size[a])
            })
            .collect();
        let centers = g.constant(Tensor::new(vec![n, 3], centers)?);
        let local = g.sub(scaled, centers)?;
        let gain = g.constant(Tensor::from_vec((0..3).map(|a| 2.0 / cfg.extent(a)).collect()));
        let offset = g.constant(Tensor::from_vec((0..3).map(|a| -2.0 * cfg.min[a] / cfg.extent(a) - 1.0).collect()));
        let global = g.mul_channels(coords, gain)?;
        let global = g.add_bias(global, offset)?;
        let inputs = g.concat_cols(&[local, global])?;

        let v = vox.len();
        let pooled = g.segment_sum(inputs, vox.point_voxel.clone(), v)?;
        let pooled = g.scale_rows(pooled, vox.counts.iter().map(|&k| 1.0 / k as f64).collect())?;
        let density = g.constant(Tensor::new(vec![v, 1], vox.counts.iter().map(|&k| (1.0 + k as f64).ln()).collect())?);
        let stats = g.concat_cols(&[pooled, density])?;

        let h1 = linear(g, p, &format!("{}.embed", self.prefix), stats)?;
        let mut h = g.relu(h1);
        let pairs = vox.neighbor_pairs(cfg);
        let mut fan = vec![0usize; v];
        pairs.iter().for_each(|&(t, _)| fan[t] += 1);
        for r in 0..cfg.rounds {
            let gathered = g.gather_rows(h, pairs.iter().map(|&(_, k)| Some(k)).collect())?;
            let agg = g.segment_sum(gathered, pairs.iter().map(|&(t, _)| t).collect(), v)?;
            let agg = g.scale_rows(agg, fan.iter().map(|&f| 1.0 / f as f64).collect())?;
            let both = g.concat_cols(&[h, agg])?;
            let next = linear(g, p, &format!("{}.mix{r}", self.prefix), both)?;
            h = g.relu(next);
        }
        let voxel_features = linear(g, p, &format!("{}.proj", self.prefix), h)?;
        let point_features = g.gather_rows(voxel_features, vox.point_voxel.iter().map(|&k| Some(k)).collect())?;
        Ok(PointEncoding { voxel_features, point_features, backbone: h, voxelization: vox })
    }

    /// Per-point features outside any training graph.
    pub fn encode(&self, params: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let enc = self.forward(&mut g, &p, cloud)?;
        Ok(g.value(enc.point_features).clone())
    }

    /// Per-point `[N, hidden]` backbone features, without the projection.
    pub fn encode_backbone(&self, params: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let enc = self.forward(&mut g, &p, cloud)?;
        let rows = enc.voxelization.point_voxel.iter().map(|&k| Some(k)).collect();
        let points = g.gather_rows(enc.backbone, rows)?;
        Ok(g.value(points).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthHeadConfig {
    pub in_channels: usize,
    pub mlp_hidden: usize,
    pub se_ratio: usize,
    pub width: usize,
    pub res_blocks: usize,
    pub bins: usize,
}

impl Default for DepthHeadConfig {
    fn default() -> Self {
        DepthHeadConfig { in_channels: 16, mlp_hidden: 16, se_ratio: 2, width: 12, res_blocks: 3, bins: 48 }
    }
}

/// Number of per-pixel camera inputs: six intrinsics terms plus the ray slope.
pub const CAMERA_INPUTS: usize = 8;

/// Camera-aware depth head.
///
/// A per-pixel MLP over the intrinsics embedding and the pixel's ray slope
/// produces a squeeze signal; an excitation bottleneck turns it into a
/// sigmoid gate over the channels of a 3x3 projection of the image features,
/// and a linear map of the same embedding is added to the gated result.
/// Residual blocks, block `i` dilated by `2^i`, and a 1x1 classifier then
/// give softmax bin probabilities.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub config: DepthHeadConfig,
    pub prefix: String,
}

impl DepthHead {
    pub fn new(config: DepthHeadConfig, prefix: &str) -> Result<Self> {
        if config.bins < 2 || config.width == 0 || config.se_ratio == 0 || config.mlp_hidden == 0 {
            return Err(Error::invalid("depth head needs T >= 2 and positive widths"));
        }
        Ok(DepthHead { config, prefix: prefix.to_string() })
    }

    fn squeeze_width(&self) -> usize {
        (self.config.width / self.config.se_ratio).max(1)
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.config;
        let mut s = ParamStore::new();
        let pre = &self.prefix;
        linear_params(&mut s, &format!("{pre}.cam"), CAMERA_INPUTS, c.mlp_hidden, rng);
        linear_params(&mut s, &format!("{pre}.se_down"), c.mlp_hidden, self.squeeze_width(), rng);
        linear_params(&mut s, &format!("{pre}.se_up"), self.squeeze_width(), c.width, rng);
        linear_params(&mut s, &format!("{pre}.ctx"), c.mlp_hidden, c.width, rng);
        conv_params(&mut s, &format!("{pre}.reduce"), c.in_channels, c.width, 3, rng);
        for i in 0..c.res_blocks {
            conv_params(&mut s, &format!("{pre}.res{i}.a"), c.width, c.width, 3, rng);
            conv_params(&mut s, &format!("{pre}.res{i}.b"), c.width, c.width, 3, rng);
        }
        conv_params(&mut s, &format!("{pre}.classifier"), c.width, c.bins, 1, rng);
        s
    }

    /// Per-pixel `[H*W, 8]` camera input: intrinsics embedding and ray slope.
    pub fn camera_input(k: &CameraIntrinsics) -> Tensor {
        let e = k.embedding();
        let mut data = Vec::with_capacity(k.pixel_count() * CAMERA_INPUTS);
        for row in 0..k.height {
            for col in 0..k.width {
                let r = k.ray(col as f64, row as f64);
                data.extend_from_slice(&e);
                data.extend_from_slice(&[r.x, r.y]);
            }
        }
        Tensor::new(vec![k.pixel_count(), CAMERA_INPUTS], data).unwrap()
    }

    /// `[H, W, C]` features to `[H, W, T]` bin probabilities.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var, k: &CameraIntrinsics) -> Result<Var> {
        let cam = g.constant(Self::camera_input(k));
        self.forward_with_camera(g, p, features, cam)
    }

    pub fn forward_with_camera(&self, g: &mut Graph, p: &Bound, features: Var, camera: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[2] != self.config.in_channels {
            return Err(Error::shape("depth_head", format!("features {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        if g.shape(camera) != [h * w, CAMERA_INPUTS] {
            return Err(Error::shape("depth_head", format!("camera input {:?}", g.shape(camera))));
        }
        let pre = &self.prefix;
        let m = linear(g, p, &format!("{pre}.cam"), camera)?;
        let m = g.relu(m);
        let s = linear(g, p, &format!("{pre}.se_down"), m)?;
        let s = g.relu(s);
        let s = linear(g, p, &format!("{pre}.se_up"), s)?;
        let gate = g.sigmoid(s);
        let gate = g.reshape(gate, &[h, w, self.config.width])?;

        let ctx = linear(g, p, &format!("{pre}.ctx"), m)?;
        let ctx = g.reshape(ctx, &[h, w, self.config.width])?;

        let x = conv(g, p, &format!("{pre}.reduce"), features, 1)?;
        let x = g.mul(x, gate)?;
        let mut x = g.add(x, ctx)?;
        for i in 0..self.config.res_blocks {
            let dilation = 1 << i;
            let a = conv(g, p, &format!("{pre}.res{i}.a"), x, dilation)?;
            let a = g.relu(a);
            let b = conv(g, p, &format!("{pre}.res{i}.b"), a, dilation)?;
            let sum = g.add(x, b)?;
            x = g.relu(sum);
        }
        let logits = conv(g, p, &format!("{pre}.classifier"), x, 1)?;
        g.softmax(logits, 2)
    }
}
