//! InfoNCE objectives for superpixel/superpoint and BEV cell pairs, the
//! depth BCE, and their weighted sum.
//!
//! Each loss has a graph form used in training and a value form built on it.
//! Empty inputs produce `None` from the graph form and a flagged zero from
//! the value form.

use crate::bev::{nonzero_grid_indices, BevFeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{DepthBinning, SparseDepthMap};
use crate::nn::{Graph, Tensor, Var};
use crate::superpixel::SegmentFeatures;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau_ipv: f64,
    pub tau_bev: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau_ipv: 0.07, tau_bev: 0.07, alpha: 0.25, beta: 1.0, gamma: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_ipv > 0.0) || !(self.tau_bev > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Where a pair row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairTag {
    pub scene: usize,
    pub view: usize,
    pub index: usize,
}

/// Row-aligned teacher/student features; row `k` of each forms a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub teacher: Tensor,
    pub student: Tensor,
    pub tags: Vec<PairTag>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.teacher.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A loss value with a flag set when there was nothing to compare.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

impl LossValue {
    fn empty() -> Self {
        LossValue { value: 0.0, empty: true }
    }
}

/// `-(1/P) Σ_k log softmax_i(t_k · s_i / τ)[k]` anchored on teacher rows.
pub fn info_nce_graph(g: &mut Graph, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let (ts, ss) = (g.shape(teacher).to_vec(), g.shape(student).to_vec());
    if ts.len() != 2 || ts != ss {
        return Err(Error::shape("info_nce", format!("teacher {ts:?} vs student {ss:?}")));
    }
    if ts[0] == 0 {
        return Err(Error::invalid("info_nce needs at least one pair"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let st = g.transpose(student)?;
    let logits = g.matmul(teacher, st)?;
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax(logits, 1)?;
    let diag = g.pick(logp, (0..ts[0]).collect())?;
    let m = g.mean(diag)?;
    Ok(g.neg(m))
}

pub fn info_nce(batch: &PairBatch, tau: f64) -> Result<f64> {
    if !batch.teacher.is_finite() || !batch.student.is_finite() {
        return Err(Error::NonFinite("info_nce features".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(batch.teacher.clone());
    let s = g.constant(batch.student.clone());
    let l = info_nce_graph(&mut g, t, s, tau)?;
    Ok(g.value(l).item())
}

/// Rows valid on both sides, as `(segment id, teacher row, student row)`.
pub fn ipv_pairs(superpixels: &SegmentFeatures, superpoints: &SegmentFeatures) -> Result<Vec<usize>> {
    if superpixels.valid.len() != superpoints.valid.len() || superpixels.features.last_dim() != superpoints.features.last_dim() {
        return Err(Error::shape(
            "ipv_loss",
            format!("{:?} vs {:?}", superpixels.features.shape(), superpoints.features.shape()),
        ));
    }
    Ok((0..superpixels.valid.len()).filter(|&m| superpixels.valid[m] && superpoints.valid[m]).collect())
}

/// Builds the cross-view, cross-scene pair batch from per-view segment
/// features; `views[i] = (scene, view, superpixels, superpoints)`.
pub fn ipv_batch(views: &[(usize, usize, &SegmentFeatures, &SegmentFeatures)]) -> Result<PairBatch> {
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    let mut tags = Vec::new();
    let mut c = 0;
    for &(scene, view, sp, pt) in views {
        c = sp.features.last_dim();
        for m in ipv_pairs(sp, pt)? {
            teacher.extend_from_slice(sp.features.row(m));
            student.extend_from_slice(pt.features.row(m));
            tags.push(PairTag { scene, view, index: m });
        }
    }
    let p = tags.len();
    Ok(PairBatch { teacher: Tensor::new(vec![p, c], teacher)?, student: Tensor::new(vec![p, c], student)?, tags })
}

pub fn ipv_loss(views: &[(usize, usize, &SegmentFeatures, &SegmentFeatures)], tau: f64) -> Result<LossValue> {
    let batch = ipv_batch(views)?;
    if batch.is_empty() {
        return Ok(LossValue::empty());
    }
    Ok(LossValue { value: info_nce(&batch, tau)?, empty: false })
}

/// Pairs the image and point maps of every scene at the point map's occupied
/// cells; negatives span all scenes.
pub fn bev_batch(scenes: &[(&BevFeatureMap, &BevFeatureMap)]) -> Result<PairBatch> {
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    let mut tags = Vec::new();
    let mut c = 0;
    for (s, &(image, point)) in scenes.iter().enumerate() {
        if image.features.shape() != point.features.shape() {
            return Err(Error::shape("bev_loss", format!("{:?} vs {:?}", image.features.shape(), point.features.shape())));
        }
        c = image.channels();
        for (i, j) in nonzero_grid_indices(point) {
            teacher.extend_from_slice(image.cell(i, j));
            student.extend_from_slice(point.cell(i, j));
            tags.push(PairTag { scene: s, view: 0, index: i * point.cols() + j });
        }
    }
    let p = tags.len();
    Ok(PairBatch { teacher: Tensor::new(vec![p, c], teacher)?, student: Tensor::new(vec![p, c], student)?, tags })
}

pub fn bev_loss(scenes: &[(&BevFeatureMap, &BevFeatureMap)], tau: f64) -> Result<LossValue> {
    let batch = bev_batch(scenes)?;
    if batch.is_empty() {
        return Ok(LossValue::empty());
    }
    Ok(LossValue { value: info_nce(&batch, tau)?, empty: false })
}

/// `(pixel index, target bin)` for every supervised pixel, in pixel order.
pub fn depth_targets(target: &SparseDepthMap, binning: &DepthBinning) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (p, d) in target.depth.iter().enumerate() {
        if let Some(d) = d {
            out.push((p, binning.discretize(*d)?));
        }
    }
    Ok(out)
}

/// Summed (not averaged) BCE over the listed pixels of `[H, W, T]`
/// probabilities: `Σ -log p_t - Σ_{j≠t} log(1 - p_j)`.
pub fn depth_bce_sum_graph(g: &mut Graph, pred: Var, targets: &[(usize, usize)]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let s = g.shape(pred).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("depth_bce_loss", format!("prediction {s:?}")));
    }
    let t = s[2];
    if targets.iter().any(|&(_, b)| b >= t) {
        return Err(Error::shape("depth_bce_loss", format!("target bin beyond {t} bins")));
    }
    let flat = g.reshape(pred, &[s[0] * s[1], t])?;
    let rows = g.gather_rows(flat, targets.iter().map(|&(p, _)| Some(p)).collect())?;
    let p = g.clamp(rows, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let logp = g.log(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let logq = g.log(q);
    let bins: Vec<usize> = targets.iter().map(|&(_, b)| b).collect();
    let pos = g.pick(logp, bins.clone())?;
    let neg_at_target = g.pick(logq, bins)?;
    let pos = g.sum(pos);
    let neg_all = g.sum(logq);
    let neg_t = g.sum(neg_at_target);
    let neg = g.sub(neg_all, neg_t)?;
    let total = g.add(pos, neg)?;
    Ok(Some(g.neg(total)))
}

/// Mean BCE over supervised pixels of one view.
pub fn depth_bce_loss(pred: &Tensor, target: &SparseDepthMap, binning: &DepthBinning) -> Result<LossValue> {
    let s = pred.shape();
    if s.len() != 3 || s[0] != target.height || s[1] != target.width || s[2] != binning.bins {
        return Err(Error::shape(
            "depth_bce_loss",
            format!("prediction {s:?} vs {}x{} target with {} bins", target.height, target.width, binning.bins),
        ));
    }
    let targets = depth_targets(target, binning)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    match depth_bce_sum_graph(&mut g, p, &targets)? {
        None => Ok(LossValue::empty()),
        Some(v) => Ok(LossValue { value: g.value(v).item() / targets.len() as f64, empty: false }),
    }
}

/// BCE of the uniform `1/T` predictor on any supervised pixel.
pub fn uniform_depth_bce(bins: usize) -> f64 {
    let p = 1.0 / bins as f64;
    -p.ln() - (bins as f64 - 1.0) * (1.0 - p).ln()
}

pub fn total_loss(l_ipv: f64, l_bev: f64, l_depth: f64, config: &LossConfig) -> f64 {
    config.alpha * l_ipv + config.beta * l_bev + config.gamma * l_depth
}
