//! Bird's-eye-view grids: lift-splat of image features along camera rays and
//! vertical collapse of voxel features.
//!
//! Cell `(i, j)` covers `y` in `[y_min + i*r, y_min + (i+1)*r)` and `x` in
//! `[x_min + j*r, x_min + (j+1)*r)`; grids are stored row-major as
//! `[rows, cols, E]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{lift_pixel, CameraIntrinsics, DepthBinning, RigidTransform};
use crate::nn::models::conv;
use crate::nn::params::he_normal;
use crate::nn::{Bound, EncoderConfig3D, Graph, ParamStore, Tensor, Var, Voxelization};

#[derive(Clone, Debug, PartialEq)]
pub struct BevGridConfig {
    pub x_min: f64,
    pub y_min: f64,
    pub rows: usize,
    pub cols: usize,
    /// Cell size `r` in meters.
    pub cell: f64,
    pub channels: usize,
}

impl Default for BevGridConfig {
    fn default() -> Self {
        BevGridConfig { x_min: -8.0, y_min: -8.0, rows: 32, cols: 32, cell: 0.5, channels: 16 }
    }
}

impl BevGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.cell > 0.0) || self.channels == 0 {
            return Err(Error::invalid(format!("degenerate BEV grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let j = ((x - self.x_min) / self.cell).floor();
        let i = ((y - self.y_min) / self.cell).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < self.rows && (j as usize) < self.cols {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x_min + (j as f64 + 0.5) * self.cell, self.y_min + (i as f64 + 0.5) * self.cell)
    }

    /// Errors unless the voxel grid's x/y layout matches this grid cell for cell.
    pub fn check_aligned(&self, voxels: &EncoderConfig3D) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        let ok = close(voxels.min[0], self.x_min)
            && close(voxels.min[1], self.y_min)
            && close(voxels.voxel_size[0], self.cell)
            && close(voxels.voxel_size[1], self.cell)
            && voxels.dims[0] == self.cols
            && voxels.dims[1] == self.rows;
        if !ok {
            return Err(Error::invalid("voxel grid is not aligned with the BEV grid"));
        }
        Ok(())
    }
}

/// `[rows, cols, E]` features with an occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureMap {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl BevFeatureMap {
    pub fn empty(grid: &BevGridConfig) -> Self {
        BevFeatureMap { features: Tensor::zeros(&[grid.rows, grid.cols, grid.channels]), mask: vec![false; grid.cell_count()] }
    }

    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels();
        let k = i * self.cols() + j;
        &self.features.data()[k * c..(k + 1) * c]
    }

    /// Masks cells with any nonzero entry and L2-normalizes them; all other
    /// cells are zeroed. `raw` is `[rows, cols, E]` or `[rows*cols, E]`.
    pub fn finalize(raw: &Tensor, rows: usize, cols: usize) -> Result<Self> {
        let e = raw.last_dim();
        if raw.len() != rows * cols * e {
            return Err(Error::shape("BevFeatureMap", format!("{:?} for a {rows}x{cols} grid", raw.shape())));
        }
        let mut data = raw.data().to_vec();
        let mut mask = vec![false; rows * cols];
        for (m, cell) in mask.iter_mut().zip(data.chunks_mut(e.max(1))) {
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                *m = true;
                cell.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(BevFeatureMap { features: Tensor::new(vec![rows, cols, e], data)?, mask })
    }
}

/// Occupied cells in row-major order.
pub fn nonzero_grid_indices(map: &BevFeatureMap) -> Vec<(usize, usize)> {
    let cols = map.cols();
    map.mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| (k / cols, k % cols)).collect()
}

/// Destination cell of every `(pixel, bin)` pair, pixel-major. Pixel `(col,
/// row)` is lifted from its center `(u, v) = (col, row)`.
pub fn lift_cells(
    intrinsic: &CameraIntrinsics,
    extrinsic: &RigidTransform,
    binning: &DepthBinning,
    grid: &BevGridConfig,
) -> Result<Vec<Option<u32>>> {
    let centers = binning.centers();
    let mut cells = Vec::with_capacity(intrinsic.pixel_count() * centers.len());
    for row in 0..intrinsic.height {
        for col in 0..intrinsic.width {
            for &d in &centers {
                let p = lift_pixel(col as f64, row as f64, d, intrinsic, extrinsic)?;
                cells.push(grid.cell_of(p.x, p.y).map(|(i, j)| (i * grid.cols + j) as u32));
            }
        }
    }
    Ok(cells)
}

/// Differentiable lift-splat of `[H, W, C]` features weighted by `[H, W, T]`
/// bin probabilities into an unnormalized `[rows*cols, C]` grid.
pub fn lift_splat_graph(g: &mut Graph, features: Var, depth: Var, cells: Vec<Option<u32>>, grid: &BevGridConfig) -> Result<Var> {
    let (fs, ds) = (g.shape(features).to_vec(), g.shape(depth).to_vec());
    if fs.len() != 3 || ds.len() != 3 || fs[..2] != ds[..2] {
        return Err(Error::shape("lift_splat", format!("features {fs:?} vs depth {ds:?}")));
    }
    let f = g.reshape(features, &[fs[0] * fs[1], fs[2]])?;
    let d = g.reshape(depth, &[ds[0] * ds[1], ds[2]])?;
    g.lift_splat(f, d, cells, grid.cell_count())
}

/// Lift-splat of one view followed by per-cell normalization.
pub fn lift_splat(
    features: &Tensor,
    depth: &Tensor,
    intrinsic: &CameraIntrinsics,
    extrinsic: &RigidTransform,
    binning: &DepthBinning,
    grid: &BevGridConfig,
) -> Result<BevFeatureMap> {
    let raw = lift_splat_raw(features, depth, intrinsic, extrinsic, binning, grid)?;
    BevFeatureMap::finalize(&raw, grid.rows, grid.cols)
}

/// Pre-normalization `[rows*cols, C]` sums.
pub fn lift_splat_raw(
    features: &Tensor,
    depth: &Tensor,
    intrinsic: &CameraIntrinsics,
    extrinsic: &RigidTransform,
    binning: &DepthBinning,
    grid: &BevGridConfig,
) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || s[0] != intrinsic.height || s[1] != intrinsic.width {
        return Err(Error::shape("lift_splat", format!("features {s:?} for a {}x{} camera", intrinsic.height, intrinsic.width)));
    }
    if depth.shape().len() != 3 || depth.shape()[..2] != s[..2] || depth.shape()[2] != binning.bins {
        return Err(Error::shape("lift_splat", format!("depth {:?} with {} bins", depth.shape(), binning.bins)));
    }
    let cells = lift_cells(intrinsic, extrinsic, binning, grid)?;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let d = g.constant(depth.clone());
    let out = lift_splat_graph(&mut g, f, d, cells, grid)?;
    Ok(g.value(out).clone())
}

/// Point-pathway BEV head: voxel columns folded into channels, three
/// convolutions, per-cell normalization.
#[derive(Clone, Debug)]
pub struct PointBevHead {
    pub grid: BevGridConfig,
    pub in_channels: usize,
    pub z_layers: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl PointBevHead {
    pub fn new(grid: BevGridConfig, voxels: &EncoderConfig3D, hidden: usize, prefix: &str) -> Result<Self> {
        grid.validate()?;
        grid.check_aligned(voxels)?;
        Ok(PointBevHead { grid, in_channels: voxels.out_channels, z_layers: voxels.dims[2], hidden, prefix: prefix.to_string() })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        let zc = self.z_layers * self.in_channels;
        let layers = [(zc, self.hidden, 1), (self.hidden, self.hidden, 3), (self.hidden, self.grid.channels, 3)];
        for (i, &(cin, cout, k)) in layers.iter().enumerate() {
            s.insert(format!("{}.conv{i}.w", self.prefix), he_normal(&[cout, k, k, cin], cin * k * k, rng));
            s.insert(format!("{}.conv{i}.b", self.prefix), Tensor::zeros(&[cout]));
        }
        s
    }

    /// Row index into the voxel feature matrix for every `(row, col, z)`.
    pub fn column_index(&self, vox: &Voxelization) -> Vec<Option<usize>> {
        let g = &self.grid;
        let mut index = vec![None; g.cell_count() * self.z_layers];
        for (k, v) in vox.voxels.iter().enumerate() {
            index[(v[1] * g.cols + v[0]) * self.z_layers + v[2]] = Some(k);
        }
        index
    }

    /// `[V, C]` voxel features to a `[rows, cols, Z*C]` dense grid.
    pub fn densify(&self, g: &mut Graph, voxel_features: Var, vox: &Voxelization) -> Result<Var> {
        let index = self.column_index(vox);
        let rows = if vox.is_empty() {
            g.constant(Tensor::zeros(&[index.len(), self.in_channels]))
        } else {
            g.gather_rows(voxel_features, index)?
        };
        g.reshape(rows, &[self.grid.rows, self.grid.cols, self.z_layers * self.in_channels])
    }

    /// `[rows, cols, Z*C]` to normalized `[rows*cols, E]` and the mask of
    /// cells whose input column has any nonzero value.
    pub fn forward_dense(&self, g: &mut Graph, p: &Bound, dense: Var) -> Result<(Var, Vec<bool>)> {
        let s = g.shape(dense).to_vec();
        if s != [self.grid.rows, self.grid.cols, self.z_layers * self.in_channels] {
            return Err(Error::shape("point_bev_collapse", format!("input {s:?}")));
        }
        let zc = s[2];
        let mask: Vec<bool> = g.value(dense).data().chunks(zc).map(|c| c.iter().any(|&v| v != 0.0)).collect();
        let mut x = dense;
        for i in 0..3 {
            x = conv(g, p, &format!("{}.conv{i}", self.prefix), x, 1)?;
            if i < 2 {
                x = g.relu(x);
            }
        }
        let x = g.reshape(x, &[self.grid.cell_count(), self.grid.channels])?;
        let x = g.l2_normalize(x, 1)?;
        let keep = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok((g.scale_rows(x, keep)?, mask))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, voxel_features: Var, vox: &Voxelization) -> Result<(Var, Vec<bool>)> {
        let dense = self.densify(g, voxel_features, vox)?;
        self.forward_dense(g, p, dense)
    }

    /// Collapse of a dense `[rows, cols, Z, C]` voxel tensor outside training.
    pub fn collapse(&self, params: &ParamStore, voxels: &Tensor) -> Result<BevFeatureMap> {
        let s = voxels.shape();
        if s != [self.grid.rows, self.grid.cols, self.z_layers, self.in_channels] {
            return Err(Error::shape("point_bev_collapse", format!("voxels {s:?}")));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(voxels.clone().reshape(&[s[0], s[1], s[2] * s[3]])?);
        let (out, mask) = self.forward_dense(&mut g, &p, x)?;
        let features = g.value(out).clone().reshape(&[self.grid.rows, self.grid.cols, self.grid.channels])?;
        Ok(BevFeatureMap { features, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bin_center;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> BevGridConfig {
        BevGridConfig { x_min: -4.0, y_min: -4.0, rows: 8, cols: 8, cell: 1.0, channels: 3 }
    }

    /// Camera at the origin looking along +x, level.
    fn level_camera() -> (CameraIntrinsics, RigidTransform) {
        (CameraIntrinsics::new(2.0, 2.0, 1.0, 0.5, 2, 2).unwrap(), RigidTransform::camera_looking(Vector3::zeros(), 0.0, 0.0))
    }

    fn random_inputs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, t: usize) -> (Tensor, Tensor) {
        let f = he_normal(&[h, w, c], 1, rng);
        let mut d = he_normal(&[h, w, t], 1, rng);
        for row in d.data_mut().chunks_mut(t) {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            row.iter_mut().for_each(|v| *v = v.abs() / s);
        }
        (f, d)
    }

    /// Direct loop over cells, pixels and bins.
    fn brute_force(features: &Tensor, depth: &Tensor, k: &CameraIntrinsics, e: &RigidTransform, b: &DepthBinning, grid: &BevGridConfig) -> Vec<f64> {
        let c = features.last_dim();
        let mut out = vec![0.0; grid.cell_count() * c];
        for ci in 0..grid.rows {
            for cj in 0..grid.cols {
                for row in 0..k.height {
                    for col in 0..k.width {
                        for t in 0..b.bins {
                            let p = lift_pixel(col as f64, row as f64, bin_center(t, b).unwrap(), k, e).unwrap();
                            let (x0, y0) = (grid.x_min + cj as f64 * grid.cell, grid.y_min + ci as f64 * grid.cell);
                            if p.x >= x0 && p.x < x0 + grid.cell && p.y >= y0 && p.y < y0 + grid.cell {
                                let px = row * k.width + col;
                                for ch in 0..c {
                                    out[(ci * grid.cols + cj) * c + ch] += features.data()[px * c + ch] * depth.data()[px * b.bins + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_features_give_empty_map() {
        let (k, e) = level_camera();
        let b = DepthBinning::new(0.5, 3.5, 3).unwrap();
        let grid = small_grid();
        let depth = Tensor::full(&[2, 2, 3], 1.0 / 3.0);
        let map = lift_splat(&Tensor::zeros(&[2, 2, 3]), &depth, &k, &e, &b, &grid).unwrap();
        assert!(nonzero_grid_indices(&map).is_empty());
        assert!(map.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_depth_hits_one_cell() {
        let k = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0, 1, 1).unwrap();
        let e = RigidTransform::camera_looking(Vector3::new(0.3, -0.2, 0.0), 0.4, 0.1);
        let b = DepthBinning::new(0.5, 3.5, 3).unwrap();
        let grid = small_grid();
        let f = Tensor::new(vec![1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let d = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let raw = lift_splat_raw(&f, &d, &k, &e, &b, &grid).unwrap();
        let p = lift_pixel(0.0, 0.0, 2.0, &k, &e).unwrap();
        let (i, j) = grid.cell_of(p.x, p.y).unwrap();
        for cell in 0..grid.cell_count() {
            let row = raw.row(cell);
            if cell == i * grid.cols + j {
                assert_eq!(row, f.data());
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
        let map = BevFeatureMap::finalize(&raw, grid.rows, grid.cols).unwrap();
        assert_eq!(nonzero_grid_indices(&map), vec![(i, j)]);
    }

    #[test]
    fn matches_triple_loop() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, e) = level_camera();
            let b = DepthBinning::new(0.5, 3.5, 5).unwrap();
            let grid = small_grid();
            let (f, d) = random_inputs(&mut rng, 2, 2, 3, 5);
            let raw = lift_splat_raw(&f, &d, &k, &e, &b, &grid).unwrap();
            let oracle = brute_force(&f, &d, &k, &e, &b, &grid);
            for (a, o) in raw.data().iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-12);
            }
            assert!(lift_cells(&k, &e, &b, &grid).unwrap().iter().all(Option::is_some));
        }
    }

    #[test]
    fn mass_is_conserved_for_nonnegative_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, e) = level_camera();
        let b = DepthBinning::new(0.5, 3.5, 4).unwrap();
        let grid = small_grid();
        let (f, d) = random_inputs(&mut rng, 2, 2, 3, 4);
        let f = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v.abs()).collect()).unwrap();
        let raw = lift_splat_raw(&f, &d, &k, &e, &b, &grid).unwrap();
        let cells: f64 = raw.data().iter().map(|v| v.abs()).sum();
        let mut expected = 0.0;
        for px in 0..4 {
            for t in 0..4 {
                expected += (0..3).map(|c| (f.data()[px * 3 + c] * d.data()[px * 4 + t]).abs()).sum::<f64>();
            }
        }
        assert!((cells - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_depth_spreads_along_ray() {
        let k = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0, 1, 1).unwrap();
        let e = RigidTransform::camera_looking(Vector3::zeros(), 0.0, 0.0);
        let b = DepthBinning::new(0.5, 3.5, 3).unwrap();
        let f = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let d = Tensor::full(&[1, 1, 3], 1.0 / 3.0);
        let map = lift_splat(&f, &d, &k, &e, &b, &small_grid()).unwrap();
        let n = nonzero_grid_indices(&map).len();
        assert!((1..=3).contains(&n));
    }

    #[test]
    fn nonzero_indices_examples() {
        let grid = BevGridConfig { x_min: 0.0, y_min: 0.0, rows: 6, cols: 8, cell: 1.0, channels: 2 };
        let mut map = BevFeatureMap::empty(&grid);
        assert!(nonzero_grid_indices(&map).is_empty());
        map.mask[3 * 8 + 5] = true;
        assert_eq!(nonzero_grid_indices(&map), vec![(3, 5)]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        map.mask.iter_mut().for_each(|m| *m = rng.random_bool(0.3));
        let mut brute = Vec::new();
        for i in 0..6 {
            for j in 0..8 {
                if map.mask[i * 8 + j] {
                    brute.push((i, j));
                }
            }
        }
        assert_eq!(nonzero_grid_indices(&map), brute);
    }

    fn toy_head() -> (PointBevHead, EncoderConfig3D) {
        let voxels = EncoderConfig3D { min: [-8.0, -8.0, -2.0], voxel_size: [1.0, 1.0, 1.0], dims: [16, 16, 4], hidden: 8, rounds: 1, out_channels: 16 };
        let grid = BevGridConfig { x_min: -8.0, y_min: -8.0, rows: 16, cols: 16, cell: 1.0, channels: 16 };
        (PointBevHead::new(grid, &voxels, 8, "bevhead").unwrap(), voxels)
    }

    #[test]
    fn collapse_shapes_and_zero_input() {
        let (head, _) = toy_head();
        let params = head.init(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(params.get("bevhead.conv0.w").unwrap().shape(), &[8, 1, 1, 64]);
        let map = head.collapse(&params, &Tensor::zeros(&[16, 16, 4, 16])).unwrap();
        assert_eq!(map.features.shape(), &[16, 16, 16]);
        assert!(nonzero_grid_indices(&map).is_empty());
        assert!(map.features.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vox = Tensor::zeros(&[16, 16, 4, 16]);
        let hot = (5 * 16 + 9) * 4 * 16 + 2 * 16;
        for c in 0..16 {
            vox.data_mut()[hot + c] = rng.random_range(-1.0..1.0);
        }
        let map = head.collapse(&params, &vox).unwrap();
        assert_eq!(nonzero_grid_indices(&map), vec![(5, 9)]);
        let norm: f64 = map.cell(5, 9).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9 || norm == 0.0);
    }

    #[test]
    fn misaligned_grids_rejected() {
        let (_, voxels) = toy_head();
        let grid = BevGridConfig { x_min: -8.0, y_min: -8.0, rows: 16, cols: 16, cell: 0.5, channels: 16 };
        assert!(PointBevHead::new(grid, &voxels, 8, "b").is_err());
    }

    proptest! {
        #[test]
        fn shift_by_whole_cells_shifts_columns(k in -2i32..=2, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (kk, _) = level_camera();
            let b = DepthBinning::new(0.5, 2.5, 3).unwrap();
            let grid = BevGridConfig { x_min: -6.0, y_min: -4.0, rows: 8, cols: 12, cell: 1.0, channels: 3 };
            let (f, d) = random_inputs(&mut rng, 2, 2, 3, 3);
            let e0 = RigidTransform::camera_looking(Vector3::new(0.0, 0.3, 0.0), 0.0, 0.0);
            let e1 = RigidTransform::camera_looking(Vector3::new(k as f64, 0.3, 0.0), 0.0, 0.0);
            let a = lift_splat(&f, &d, &kk, &e0, &b, &grid).unwrap();
            let s = lift_splat(&f, &d, &kk, &e1, &b, &grid).unwrap();
            for (i, j) in nonzero_grid_indices(&a) {
                let j2 = (j as i32 + k) as usize;
                prop_assert!(s.mask[i * 12 + j2]);
                prop_assert_eq!(a.cell(i, j), s.cell(i, j2));
            }
            prop_assert_eq!(nonzero_grid_indices(&a).len(), nonzero_grid_indices(&s).len());
        }
    }
}
