//! SLIC superpixels, superpoint grouping and normalized mean pooling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Projection;
use crate::image::RgbImage;
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn label(&self, col: usize, row: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.count];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams { segments: 64, compactness: 10.0, iterations: 10 }
    }
}

/// Grid of `(columns, rows)` seeds whose product is close to `k` and whose
/// aspect follows the image.
fn seed_grid(k: usize, width: usize, height: usize) -> (usize, usize) {
    let aspect = (width as f64 / height as f64).ln();
    let mut best = (k, 1);
    let mut best_err = f64::INFINITY;
    for ny in 1..=k {
        if k % ny != 0 {
            continue;
        }
        let nx = k / ny;
        let err = ((nx as f64 / ny as f64).ln() - aspect).abs();
        // ties prefer more columns
        if err < best_err - 1e-12 || ((err - best_err).abs() <= 1e-12 && nx > best.0) {
            best = (nx, ny);
            best_err = err;
        }
    }
    if best_err > std::f64::consts::LN_2 + 1e-9 {
        let nx = ((k as f64 * width as f64 / height as f64).sqrt().round() as usize).max(1);
        let ny = ((k as f64 / nx as f64).round() as usize).max(1);
        best = (nx, ny);
    }
    (best.0.min(width), best.1.min(height))
}

fn color_at(image: &RgbImage, col: usize, row: usize) -> [f64; 3] {
    image.pixel(col, row).map(|v| v * 255.0)
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn gradient_at(image: &RgbImage, col: usize, row: usize) -> f64 {
    let (w, h) = (image.width, image.height);
    let l = color_at(image, col.saturating_sub(1), row);
    let r = color_at(image, (col + 1).min(w - 1), row);
    let u = color_at(image, col, row.saturating_sub(1));
    let d = color_at(image, col, (row + 1).min(h - 1));
    dist3(&l, &r).powi(2) + dist3(&u, &d).powi(2)
}

#[derive(Clone, Copy, Debug)]
struct Center {
    color: [f64; 3],
    x: f64,
    y: f64,
}

/// SLIC over RGB (0-255 scale) with distance `d_color + (m / S) * d_xy`.
pub fn slic_segment(image: &RgbImage, params: &SlicParams) -> Result<SuperpixelMap> {
    let (w, h) = (image.width, image.height);
    let n = w * h;
    let k = params.segments;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("superpixel count {k} must be in [1, {n}]")));
    }
    if params.iterations == 0 {
        return Err(Error::invalid("SLIC needs at least one iteration"));
    }
    let s = (n as f64 / k as f64).sqrt();
    let (nx, ny) = seed_grid(k, w, h);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let c0 = (((i as f64 + 0.5) * sx).floor() as usize).min(w - 1);
            let r0 = (((j as f64 + 0.5) * sy).floor() as usize).min(h - 1);
            let (mut bc, mut br, mut bg) = (c0, r0, gradient_at(image, c0, r0));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (c, r) = (c0 as i64 + dc, r0 as i64 + dr);
                    if c < 0 || r < 0 || c >= w as i64 || r >= h as i64 {
                        continue;
                    }
                    let gr = gradient_at(image, c as usize, r as usize);
                    if gr < bg {
                        (bc, br, bg) = (c as usize, r as usize, gr);
                    }
                }
            }
            centers.push(Center { color: color_at(image, bc, br), x: bc as f64, y: br as f64 });
        }
    }

    let spatial = params.compactness / s;
    let distance = |c: &Center, col: usize, row: usize| {
        let dc = dist3(&c.color, &color_at(image, col, row));
        let dxy = ((c.x - col as f64).powi(2) + (c.y - row as f64).powi(2)).sqrt();
        dc + spatial * dxy
    };
    let mut labels = vec![usize::MAX; n];
    for _ in 0..params.iterations {
        let mut best = vec![f64::INFINITY; n];
        labels.iter_mut().for_each(|l| *l = usize::MAX);
        for (ci, c) in centers.iter().enumerate() {
            let c_lo = (c.x - s).floor().max(0.0) as usize;
            let c_hi = ((c.x + s).ceil() as usize).min(w - 1);
            let r_lo = (c.y - s).floor().max(0.0) as usize;
            let r_hi = ((c.y + s).ceil() as usize).min(h - 1);
            for row in r_lo..=r_hi {
                for col in c_lo..=c_hi {
                    let d = distance(c, col, row);
                    let p = row * w + col;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        // pixels no window reached go to the globally nearest center
        for p in 0..n {
            if labels[p] == usize::MAX {
                let (col, row) = (p % w, p / w);
                labels[p] = (0..centers.len())
                    .min_by(|&a, &b| distance(&centers[a], col, row).total_cmp(&distance(&centers[b], col, row)))
                    .unwrap();
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let col = color_at(image, p % w, p / w);
            let a = &mut acc[l];
            a[0] += col[0];
            a[1] += col[1];
            a[2] += col[2];
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = Center { color: [a[0] / a[5], a[1] / a[5], a[2] / a[5]], x: a[3] / a[5], y: a[4] / a[5] };
            }
        }
    }
    let min_size = ((s * s / 4.0) as usize).max(1);
    Ok(enforce_connectivity(&labels, w, h, min_size))
}

/// Splits labels into 4-connected components, merges orphan fragments (every
/// component but the largest of its label, and anything below `min_size`)
/// into the neighbor sharing the longest border, then relabels densely in
/// scan order.
fn enforce_connectivity(labels: &[usize], w: usize, h: usize, min_size: usize) -> SuperpixelMap {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let lab = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (c, r) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == lab {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
        }
        comp_label.push(lab);
        sizes.push(size);
    }

    let mut primary: BTreeMap<usize, usize> = BTreeMap::new();
    for (id, &lab) in comp_label.iter().enumerate() {
        let e = primary.entry(lab).or_insert(id);
        if sizes[id] > sizes[*e] {
            *e = id;
        }
    }
    let mut orphan: Vec<bool> = (0..sizes.len()).map(|id| primary[&comp_label[id]] != id || sizes[id] < min_size).collect();
    let mut alive = vec![true; sizes.len()];

    loop {
        let next = (0..sizes.len()).filter(|&i| alive[i] && orphan[i]).min_by_key(|&i| (sizes[i], i));
        let Some(o) = next else { break };
        let mut border: BTreeMap<usize, usize> = BTreeMap::new();
        for p in 0..n {
            if comp[p] != o {
                continue;
            }
            let (c, r) = (p % w, p / w);
            let mut touch = |q: usize| {
                if comp[q] != o {
                    *border.entry(comp[q]).or_insert(0) += 1;
                }
            };
            if c > 0 {
                touch(p - 1);
            }
            if c + 1 < w {
                touch(p + 1);
            }
            if r > 0 {
                touch(p - w);
            }
            if r + 1 < h {
                touch(p + w);
            }
        }
        // BTreeMap iteration is ascending, so ties go to the lower id
        let target = border.iter().fold(None, |best: Option<(usize, usize)>, (&id, &cnt)| match best {
            Some((_, bc)) if bc >= cnt => best,
            _ => Some((id, cnt)),
        });
        match target {
            None => orphan[o] = false,
            Some((t, _)) => {
                comp.iter_mut().filter(|c| **c == o).for_each(|c| *c = t);
                sizes[t] += sizes[o];
                alive[o] = false;
            }
        }
    }

    let mut remap = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    let labels = comp
        .iter()
        .map(|&c| {
            if remap[c] == usize::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect();
    SuperpixelMap { width: w, height: h, labels, count: next }
}

/// Point indices per segment for one view, ascending within each segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointGroups {
    pub groups: Vec<Vec<usize>>,
}

impl SuperpointGroups {
    pub fn member_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

pub fn group_superpoints(projections: &[Projection], map: &SuperpixelMap) -> SuperpointGroups {
    let mut groups = vec![Vec::new(); map.count];
    for p in projections {
        let (c, r) = p.pixel(map.width, map.height);
        groups[map.label(c, r)].push(p.point_index);
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    SuperpointGroups { groups }
}

/// Pixel indices (row-major) of every superpixel.
pub fn superpixel_members(map: &SuperpixelMap) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); map.count];
    map.labels.iter().enumerate().for_each(|(p, &l)| groups[l].push(p));
    groups
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    /// `[M, C]`; invalid rows are zero.
    pub features: Tensor,
    pub valid: Vec<bool>,
}

/// `(1/|S|) Σ x/‖x‖` over each member set `S` of rows of `features`.
pub fn pool_normalized_mean(features: &Tensor, groups: &[Vec<usize>]) -> Result<SegmentFeatures> {
    let c = features.last_dim();
    if features.rank() != 2 {
        return Err(Error::shape("pool_normalized_mean", format!("{:?}", features.shape())));
    }
    let mut out = vec![0.0; groups.len() * c];
    let mut valid = vec![false; groups.len()];
    for (m, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        valid[m] = true;
        let mut sorted = members.clone();
        sorted.sort_unstable();
        let o = &mut out[m * c..(m + 1) * c];
        for &i in &sorted {
            if i >= features.rows() {
                return Err(Error::shape("pool_normalized_mean", format!("member {i} of {} rows", features.rows())));
            }
            let row = features.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                o.iter_mut().zip(row).for_each(|(a, &v)| *a += v / norm);
            }
        }
        let inv = 1.0 / sorted.len() as f64;
        o.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(SegmentFeatures { features: Tensor::new(vec![groups.len(), c], out)?, valid })
}

/// Differentiable pooling of `[N, C]` rows into only the non-empty groups,
/// returned in group order together with the ids of those groups.
pub fn pool_normalized_mean_graph(g: &mut Graph, features: Var, groups: &[Vec<usize>]) -> Result<(Var, Vec<usize>)> {
    let kept: Vec<usize> = (0..groups.len()).filter(|&m| !groups[m].is_empty()).collect();
    let normalized = g.l2_normalize(features, 1)?;
    let mut index = Vec::new();
    let mut segment = Vec::new();
    for (slot, &m) in kept.iter().enumerate() {
        let mut members = groups[m].clone();
        members.sort_unstable();
        for i in members {
            index.push(Some(i));
            segment.push(slot);
        }
    }
    let gathered = g.gather_rows(normalized, index)?;
    let summed = g.segment_sum(gathered, segment, kept.len())?;
    let scale = kept.iter().map(|&m| 1.0 / groups[m].len() as f64).collect();
    Ok((g.scale_rows(summed, scale)?, kept))
}
