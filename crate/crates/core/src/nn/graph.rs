//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for [`Graph::backward`]. A graph lives for one
//! training step; parameters are re-bound as fresh leaves every step.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulChannels(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var, dilation: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    GatherRows(Var, Vec<Option<usize>>),
    SegmentSum(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick(Var, Vec<usize>),
    LiftSplat { features: Var, depth: Var, cells: Vec<Option<u32>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn conv_dims(x: &[usize], w: &[usize]) -> (usize, usize, usize, usize, usize, usize) {
    (x[0], x[1], x[2], w[0], w[1], w[2])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn broadcast_last(&self, op: &'static str, x: Var, b: Var) -> Result<(Tensor, usize)> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.last_dim();
        if vb.len() != c || vx.rank() == 0 {
            return Err(Error::shape(op, format!("{:?} with channel vector {:?}", vx.shape(), vb.shape())));
        }
        Ok((vx.clone(), c))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (mut out, c) = self.broadcast_last("add_bias", x, b)?;
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// Multiplies each trailing-axis channel by a per-channel factor.
    pub fn mul_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (mut out, c) = self.broadcast_last("mul_channels", x, g)?;
        let gate = self.value(g).data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(gate).for_each(|(o, &gv)| *o *= gv);
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(out, Op::MulChannels(x, g), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = map(self.value(x), |v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = map(self.value(x), |v| v + s);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", vx.shape())));
        }
        let (n, m) = (vx.shape()[0], vx.shape()[1]);
        let d = vx.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(x), ng))
    }

    /// Stride-1 "same" convolution over an `[H, W, Cin]` map with weights
    /// `[Cout, kh, kw, Cin]`, bias `[Cout]`, odd kernels and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[3] != vx.shape()[2] || vb.len() != vw.shape()[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}, bias {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        if vw.shape()[1] % 2 == 0 || vw.shape()[2] % 2 == 0 || dilation == 0 {
            return Err(Error::shape("conv2d", "kernels must be odd and dilation >= 1"));
        }
        let (h, wd, ci, co, kh, kw) = conv_dims(vx.shape(), vw.shape());
        let (ph, pw) = ((kh / 2 * dilation) as isize, (kw / 2 * dilation) as isize);
        let (xd, wdat, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; h * wd * co];
        for y in 0..h {
            for xx in 0..wd {
                let o = &mut out[(y * wd + xx) * co..(y * wd + xx + 1) * co];
                o.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = y as isize + (ky * dilation) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = xx as isize + (kx * dilation) as isize - pw;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * ci;
                        let xin = &xd[base..base + ci];
                        for (oc, ov) in o.iter_mut().enumerate() {
                            let wbase = ((oc * kh + ky) * kw + kx) * ci;
                            let wrow = &wdat[wbase..wbase + ci];
                            *ov += wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(vec![h, wd, co], out)?, Op::Conv2d { x, w, b, dilation }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::exp);
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::ln);
        let ng = self.needs(x);
        self.push(out, Op::Log(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(x), |v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis("softmax", vx.shape(), axis)?;
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (d[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let ng = self.needs(x);
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis("log_softmax", vx.shape(), axis)?;
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (d[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[idx(k)] = d[idx(k)] - lse;
                }
            }
        }
        let ng = self.needs(x);
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x, axis), ng))
    }

    /// L2 normalization along `axis`; zero vectors stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis("l2_normalize", vx.shape(), axis)?;
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| d[idx(k)] * d[idx(k)]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for k in 0..n {
                        out[idx(k)] = d[idx(k)] / norm;
                    }
                }
            }
        }
        let ng = self.needs(x);
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize(x, axis), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Mean over every axis but the last: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.last_dim());
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; c];
        for r in vx.data().chunks(c) {
            out.iter_mut().zip(r).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(x), ng))
    }

    /// Global average pooling of an `[H, W, C]` map to `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", self.shape(x))));
        }
        self.mean_rows(x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.last_dim());
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let mut out = vec![0.0; index.len() * c];
        for (k, i) in index.iter().enumerate() {
            if let Some(i) = i {
                out[k * c..(k + 1) * c].copy_from_slice(vx.row(*i));
            }
        }
        let ng = self.needs(x);
        let t = Tensor::new(vec![index.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(x, index), ng))
    }

    /// Scatter-add of row `r` into output row `segments[r]`, ascending `r`.
    pub fn segment_sum(&mut self, x: Var, segments: Vec<usize>, count: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.last_dim());
        if segments.len() != rows || segments.iter().any(|&s| s >= count) {
            return Err(Error::shape("segment_sum", format!("{} segment ids for {rows} rows, {count} segments", segments.len())));
        }
        let mut out = vec![0.0; count * c];
        for (r, &s) in segments.iter().enumerate() {
            out[s * c..(s + 1) * c].iter_mut().zip(vx.row(r)).for_each(|(o, &v)| *o += v);
        }
        let ng = self.needs(x);
        let t = Tensor::new(vec![count, c], out)?;
        Ok(self.push(t, Op::SegmentSum(x, segments), ng))
    }

    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        if factors.len() != out.rows() {
            return Err(Error::shape("scale_rows", format!("{} factors for {} rows", factors.len(), out.rows())));
        }
        for (row, f) in out.data_mut().chunks_mut(c).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::ScaleRows(x, factors), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.value(p).last_dim()).ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != c || v.rank() != 2 {
                return Err(Error::shape("concat_rows", format!("{:?} vs width {c}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows || self.value(p).rank() != 2) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[i] = x[i, index[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || index.len() != vx.shape()[0] || index.iter().any(|&j| j >= vx.shape()[1]) {
            return Err(Error::shape("pick", format!("{} indices into {:?}", index.len(), vx.shape())));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| vx.row(i)[j]).collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(out), Op::Pick(x, index), ng))
    }

    /// Weighted splat of per-pixel features into cells.
    ///
    /// `features` is `[P, C]`, `depth` is `[P, T]`, and `cells[p * T + t]`
    /// names the destination cell of pixel `p` lifted to bin `t`. The output
    /// is `[n_cells, C]` with `out[c] = Σ features[p] * depth[p, t]` over all
    /// `(p, t)` landing in `c`, accumulated pixel-major then bin.
    pub fn lift_splat(&mut self, features: Var, depth: Var, cells: Vec<Option<u32>>, n_cells: usize) -> Result<Var> {
        let (vf, vd) = (self.value(features), self.value(depth));
        let (p, c, t) = (vf.rows(), vf.last_dim(), vd.last_dim());
        if vd.rows() != p || cells.len() != p * t || cells.iter().flatten().any(|&k| k as usize >= n_cells) {
            return Err(Error::shape(
                "lift_splat",
                format!("features {:?}, depth {:?}, {} cell ids", vf.shape(), vd.shape(), cells.len()),
            ));
        }
        let mut out = vec![0.0; n_cells * c];
        let (fd, dd) = (vf.data(), vd.data());
        for px in 0..p {
            let f = &fd[px * c..(px + 1) * c];
            for b in 0..t {
                if let Some(cell) = cells[px * t + b] {
                    let wgt = dd[px * t + b];
                    let o = &mut out[cell as usize * c..(cell as usize + 1) * c];
                    o.iter_mut().zip(f).for_each(|(o, &fv)| *o += wgt * fv);
                }
            }
        }
        let ng = self.needs(features) || self.needs(depth);
        let tensor = Tensor::new(vec![n_cells, c], out)?;
        Ok(self.push(tensor, Op::LiftSplat { features, depth, cells }, ng))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor::new(self.value(v).shape().to_vec(), contrib).unwrap()),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulChannels(x, s) => {
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                let c = vs.len();
                if self.needs(*x) {
                    let dx = gd.chunks(c).flat_map(|row| row.iter().zip(vs).map(|(g, s)| g * s)).collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let mut ds = vec![0.0; c];
                    for (grow, xrow) in gd.chunks(c).zip(vx.chunks(c)) {
                        for k in 0..c {
                            ds[k] += grow[k] * xrow[k];
                        }
                    }
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gd.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let (ad, bd) = (va.data(), vb.data());
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            db[p * m..(p + 1) * m].iter_mut().zip(grow).for_each(|(d, &gv)| *d += aip * gv);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = gd[j * n + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, dilation } => self.conv2d_backward(*x, *w, *b, *dilation, gd, grads),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, gd.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Exp(x) => self.accumulate(grads, *x, gd.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, gd.iter().zip(vx).map(|(g, v)| g / v).collect());
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x).data();
                let dx = gd.iter().zip(vx).map(|(g, v)| if v >= lo && v <= hi { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let gs: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * gs;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize(x, axis) => {
                let vx = self.value(*x).data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let norm = (0..n).map(|k| vx[idx(k)] * vx[idx(k)]).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] = (gd[idx(k)] - y[idx(k)] * dot) / norm;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let (rows, c) = (vx.rows(), vx.last_dim());
                let scaled: Vec<f64> = gd.iter().map(|v| v / rows as f64).collect();
                let dx = (0..rows).flat_map(|_| scaled.iter().copied()).collect::<Vec<_>>();
                debug_assert_eq!(dx.len(), rows * c);
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows(x, index) => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let mut dx = vec![0.0; vx.len()];
                for (k, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        dx[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]).for_each(|(d, &v)| *d += v);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentSum(x, segments) => {
                let c = self.value(*x).last_dim();
                let dx = segments.iter().flat_map(|&s| gd[s * c..(s + 1) * c].iter().copied()).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::ScaleRows(x, factors) => {
                let c = node.value.last_dim();
                let dx = gd.chunks(c).zip(factors).flat_map(|(row, f)| row.iter().map(move |v| v * f)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let dx = (0..rows).flat_map(|r| gd[r * total + off..r * total + off + w].iter().copied()).collect();
                    self.accumulate(grads, p, dx);
                    off += w;
                }
            }
            Op::Pick(x, index) => {
                let vx = self.value(*x);
                let m = vx.shape()[1];
                let mut dx = vec![0.0; vx.len()];
                for (i, &j) in index.iter().enumerate() {
                    dx[i * m + j] += gd[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LiftSplat { features, depth, cells } => {
                let (vf, vd) = (self.value(*features), self.value(*depth));
                let (p, c, t) = (vf.rows(), vf.last_dim(), vd.last_dim());
                let (fd, dd) = (vf.data(), vd.data());
                let mut df = vec![0.0; fd.len()];
                let mut ddep = vec![0.0; dd.len()];
                for px in 0..p {
                    let f = &fd[px * c..(px + 1) * c];
                    for b in 0..t {
                        if let Some(cell) = cells[px * t + b] {
                            let gcell = &gd[cell as usize * c..(cell as usize + 1) * c];
                            let wgt = dd[px * t + b];
                            df[px * c..(px + 1) * c].iter_mut().zip(gcell).for_each(|(d, &gv)| *d += wgt * gv);
                            ddep[px * t + b] = f.iter().zip(gcell).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                self.accumulate(grads, *features, df);
                self.accumulate(grads, *depth, ddep);
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, dilation: usize, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (h, wd, ci, co, kh, kw) = conv_dims(vx.shape(), vw.shape());
        let (ph, pw) = ((kh / 2 * dilation) as isize, (kw / 2 * dilation) as isize);
        let (xd, wdat) = (vx.data(), vw.data());
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
        for y in 0..h {
            for xx in 0..wd {
                let g = &gd[(y * wd + xx) * co..(y * wd + xx + 1) * co];
                for ky in 0..kh {
                    let iy = y as isize + (ky * dilation) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = xx as isize + (kx * dilation) as isize - pw;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * ci;
                        for (oc, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let wbase = ((oc * kh + ky) * kw + kx) * ci;
                            if need_x {
                                let wrow = &wdat[wbase..wbase + ci];
                                dx[base..base + ci].iter_mut().zip(wrow).for_each(|(d, &wv)| *d += gv * wv);
                            }
                            if need_w {
                                let xin = &xd[base..base + ci];
                                dw[wbase..wbase + ci].iter_mut().zip(xin).for_each(|(d, &xv)| *d += gv * xv);
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, dx);
        }
        if need_w {
            self.accumulate(grads, w, dw);
        }
        if self.needs(b) {
            let mut db = vec![0.0; co];
            for row in gd.chunks(co) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            self.accumulate(grads, b, db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_of_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0; 3]));
        let s = g.softmax(x, 0).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let first = g.pick_first(s);
        let grads = g.backward(first).unwrap();
        let d = grads.get(x).unwrap().data();
        assert!((d[0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((d[1] + 1.0 / 9.0).abs() < 1e-15);
        assert!((d[2] + 1.0 / 9.0).abs() < 1e-15);
    }

    impl Graph {
        fn pick_first(&mut self, v: Var) -> Var {
            let r = self.reshape(v, &[1, 3]).unwrap();
            let p = self.pick(r, vec![0]).unwrap();
            self.sum(p)
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        let m = g.matmul(a, b).unwrap();
        assert!(matches!(g.backward(m), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
