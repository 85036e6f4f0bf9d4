//! Linear probing of frozen point features, segmentation metrics and the
//! view / loss-ratio ablation sweep.

use std::fmt::Write as _;

use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::pipeline::Models;
use crate::synth::{generate_scenes, SceneConfig, SceneSample, NUM_CLASSES};
use crate::train::{pretrain, TrainConfig};

/// `counts[truth * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_labels(classes: usize, truth: &[u8], pred: &[u8]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape { op: "confusion", detail: format!("{} labels vs {} predictions", truth.len(), pred.len()) });
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t as usize, p as usize)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!("label ({truth}, {pred}) outside {} classes", self.classes)));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn truth_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// `None` when a class is absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
}

impl ProbeResult {
    /// mIoU averages over classes present in the ground truth; fwIoU weights
    /// them by ground-truth frequency.
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let total = m.total();
        if total == 0 {
            return Err(Error::invalid("no evaluated points"));
        }
        let mut per_class_iou = Vec::with_capacity(m.classes);
        let (mut sum, mut present, mut fw) = (0.0, 0usize, 0.0);
        for c in 0..m.classes {
            let tp = m.get(c, c);
            let truth = m.truth_count(c);
            let union = truth + m.pred_count(c) - tp;
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            if truth > 0 {
                let iou = iou.unwrap_or(0.0);
                sum += iou;
                present += 1;
                fw += truth as f64 / total as f64 * iou;
            }
            per_class_iou.push(iou);
        }
        Ok(ProbeResult { per_class_iou, miou: sum / present as f64, fwiou: fw })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 300, lr: 0.5, momentum: 0.9, classes: NUM_CLASSES }
    }
}

/// A trained linear head over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[C, K]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let k = self.bias.len();
        out.copy_from_slice(&self.bias);
        for (i, &x) in row.iter().enumerate() {
            let z = (x - self.mean[i]) * self.inv_std[i];
            if z != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.weight[i * k..(i + 1) * k]) {
                    *o += z * w;
                }
            }
        }
    }

    pub fn predict(&self, features: &Tensor) -> Vec<u8> {
        let c = self.mean.len();
        let mut out = vec![0.0; self.bias.len()];
        features
            .data()
            .chunks(c)
            .map(|row| {
                self.logits(row, &mut out);
                argmax(&out) as u8
            })
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_pair(features: &Tensor, labels: &[u8]) -> Result<usize> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape { op: "linear_probe", detail: format!("features {shape:?} for {} labels", labels.len()) });
    }
    Ok(shape[1])
}

/// Full-batch softmax regression by gradient descent with momentum, from a
/// zero initialization.
pub fn fit_linear_probe(data: &[(Tensor, Vec<u8>)], cfg: &ProbeConfig) -> Result<LinearProbe> {
    let k = cfg.classes;
    let mut c = None;
    let mut n = 0usize;
    for (f, l) in data {
        let width = check_pair(f, l)?;
        if *c.get_or_insert(width) != width {
            return Err(Error::invalid("feature widths differ between scenes"));
        }
        if let Some(&bad) = l.iter().find(|&&x| x as usize >= k) {
            return Err(Error::invalid(format!("label {bad} outside {k} classes")));
        }
        n += l.len();
    }
    let c = c.ok_or_else(|| Error::invalid("probe needs training data"))?;
    if n == 0 {
        return Err(Error::invalid("probe needs training points"));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (f, _) in data {
        for row in f.data().chunks(c) {
            row.iter().zip(&mut mean).for_each(|(x, m)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for (f, _) in data {
        for row in f.data().chunks(c) {
            row.iter().zip(&mean).zip(&mut var).for_each(|((x, m), v)| *v += (x - m) * (x - m));
        }
    }
    let inv_std = var.iter().map(|v| {
        let s = (v / n as f64).sqrt();
        if s > 1e-12 { 1.0 / s } else { 0.0 }
    }).collect();
    let mut probe = LinearProbe { mean, inv_std, weight: vec![0.0; c * k], bias: vec![0.0; k] };
    let mut vel_w = vec![0.0; c * k];
    let mut vel_b = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut z = vec![0.0; c];
    for _ in 0..cfg.iterations {
        let mut grad_w = vec![0.0; c * k];
        let mut grad_b = vec![0.0; k];
        for (f, labels) in data {
            for (row, &y) in f.data().chunks(c).zip(labels) {
                probe.logits(row, &mut logits);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                logits.iter_mut().for_each(|l| {
                    *l = (*l - max).exp();
                    denom += *l;
                });
                for (j, l) in logits.iter_mut().enumerate() {
                    *l /= denom;
                    if j == y as usize {
                        *l -= 1.0;
                    }
                }
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = (row[i] - probe.mean[i]) * probe.inv_std[i];
                }
                for (i, &zi) in z.iter().enumerate() {
                    if zi != 0.0 {
                        for (gw, &e) in grad_w[i * k..(i + 1) * k].iter_mut().zip(&logits) {
                            *gw += zi * e;
                        }
                    }
                }
                grad_b.iter_mut().zip(&logits).for_each(|(gb, e)| *gb += e);
            }
        }
        for (p, (v, gr)) in probe.weight.iter_mut().zip(vel_w.iter_mut().zip(&grad_w)) {
            *v = cfg.momentum * *v + gr / n as f64;
            *p -= cfg.lr * *v;
        }
        for (p, (v, gr)) in probe.bias.iter_mut().zip(vel_b.iter_mut().zip(&grad_b)) {
            *v = cfg.momentum * *v + gr / n as f64;
            *p -= cfg.lr * *v;
        }
    }
    Ok(probe)
}

pub fn evaluate_probe(probe: &LinearProbe, data: &[(Tensor, Vec<u8>)], classes: usize) -> Result<ProbeResult> {
    let mut m = ConfusionMatrix::new(classes);
    for (f, labels) in data {
        check_pair(f, labels)?;
        for (&t, p) in labels.iter().zip(probe.predict(f)) {
            m.add(t as usize, p as usize)?;
        }
    }
    ProbeResult::from_confusion(&m)
}

/// Per-point student backbone features paired with their labels; the
/// projection layer used for distillation is not part of the probe input.
pub fn labeled_features(models: &Models, params: &ParamStore, scenes: &[SceneSample]) -> Result<Vec<(Tensor, Vec<u8>)>> {
    scenes
        .iter()
        .map(|s| {
            if s.labels().len() != s.cloud.len() {
                return Err(Error::invalid("probe scenes must carry per-point labels"));
            }
            Ok((models.student.encode_backbone(params, &s.cloud)?, s.labels().to_vec()))
        })
        .collect()
}

/// Fits on `train` scenes and scores on held-out `test` scenes with the
/// student frozen.
pub fn linear_probe(
    models: &Models,
    params: &ParamStore,
    train: &[SceneSample],
    test: &[SceneSample],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let probe = fit_linear_probe(&labeled_features(models, params, train)?, cfg)?;
    evaluate_probe(&probe, &labeled_features(models, params, test)?, cfg.classes)
}

/// One row of the sweep: which views train and with what weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetting {
    pub name: String,
    /// `None` is the untrained baseline.
    pub train: Option<(bool, bool, f64, f64, f64)>,
}

impl SweepSetting {
    pub fn scratch() -> Self {
        SweepSetting { name: "scratch".into(), train: None }
    }

    fn trained(name: &str, ipv: bool, bev: bool, alpha: f64, beta: f64, gamma: f64) -> Self {
        SweepSetting { name: name.into(), train: Some((ipv, bev, alpha, beta, gamma)) }
    }

    /// Scratch, IPV only, BEV only and the hybrid with the configured weights.
    pub fn views(base: &TrainConfig) -> Vec<Self> {
        vec![
            Self::scratch(),
            Self::trained("ipv-only", true, false, 1.0, 0.0, 0.0),
            Self::trained("bev-only", false, true, 0.0, 1.0, base.loss.gamma),
            Self::trained("hybrid", true, true, base.loss.alpha, base.loss.beta, base.loss.gamma),
        ]
    }

    /// α:β of 4:1, 2:1, 1:1 and 1:2 with β fixed at 1.
    pub fn ratios(base: &TrainConfig) -> Vec<Self> {
        [(4.0, "4:1"), (2.0, "2:1"), (1.0, "1:1"), (0.5, "1:2")]
            .iter()
            .map(|&(a, name)| Self::trained(&format!("ratio-{name}"), true, true, a, 1.0, base.loss.gamma))
            .collect()
    }

    pub fn apply(&self, base: &TrainConfig) -> Option<TrainConfig> {
        self.train.map(|(ipv, bev, alpha, beta, gamma)| {
            let mut cfg = base.clone();
            cfg.enable_ipv = ipv;
            cfg.enable_bev = bev;
            cfg.loss.alpha = alpha;
            cfg.loss.beta = beta;
            cfg.loss.gamma = gamma;
            cfg
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub scenes: SceneConfig,
    pub pretrain_scenes: usize,
    pub probe_train_scenes: usize,
    pub probe_test_scenes: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub settings: Vec<SweepSetting>,
}

/// Pool ids for [`scene_pool`].
pub const POOL_PRETRAIN: u64 = 0;
pub const POOL_PROBE_TRAIN: u64 = 1;
pub const POOL_PROBE_TEST: u64 = 2;

/// `count` scenes of pool `id`; pools never share a scene seed.
pub fn scene_pool(scenes: &SceneConfig, id: u64, count: usize) -> Result<Vec<SceneSample>> {
    generate_scenes(&SceneConfig { seed: derive_seed(scenes.seed, &[100, id]), ..scenes.clone() }, count)
}

/// Disjoint scene pools for pretraining, probe fitting and probe scoring.
pub struct ScenePools {
    pub pretrain: Vec<SceneSample>,
    pub probe_train: Vec<SceneSample>,
    pub probe_test: Vec<SceneSample>,
}

impl ScenePools {
    pub fn generate(cfg: &SweepConfig) -> Result<Self> {
        Ok(ScenePools {
            pretrain: scene_pool(&cfg.scenes, POOL_PRETRAIN, cfg.pretrain_scenes)?,
            probe_train: scene_pool(&cfg.scenes, POOL_PROBE_TRAIN, cfg.probe_train_scenes)?,
            probe_test: scene_pool(&cfg.scenes, POOL_PROBE_TEST, cfg.probe_test_scenes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub seed: u64,
    pub result: ProbeResult,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Mean mIoU per setting, in first-appearance order.
    pub fn mean_miou(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(n, _, _)| *n == r.setting) {
                Some(e) => {
                    e.1 += r.result.miou;
                    e.2 += 1;
                }
                None => out.push((r.setting.clone(), r.result.miou, 1)),
            }
        }
        out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
    }

    pub fn mean_of(&self, setting: &str) -> Option<f64> {
        self.mean_miou().into_iter().find(|(n, _)| n == setting).map(|(_, m)| m)
    }

    /// Per-run rows followed by one `mean` row per setting.
    pub fn to_csv(&self, classes: usize) -> String {
        let mut out = String::from("setting,seed,miou,fwiou");
        for c in 0..classes {
            let _ = write!(out, ",iou_{c}");
        }
        out.push_str(",final_loss\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{:.6},{:.6}", r.setting, r.seed, r.result.miou, r.result.fwiou);
            for c in 0..classes {
                match r.result.per_class_iou.get(c).copied().flatten() {
                    Some(v) => { let _ = write!(out, ",{v:.6}"); }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{}", r.final_loss.map(|l| format!("{l:.6}")).unwrap_or_default());
        }
        for (name, m) in self.mean_miou() {
            let _ = write!(out, "{name},mean,{m:.6},");
            out.push_str(&",".repeat(classes + 1));
            out.push('\n');
        }
        out
    }
}

/// Pretrains and probes every setting for every seed on shared scene pools.
/// `progress` sees each row as it completes.
pub fn ablation_sweep(models: &Models, cfg: &SweepConfig, mut progress: impl FnMut(&SweepRow)) -> Result<SweepTable> {
    let pools = ScenePools::generate(cfg)?;
    let mut table = SweepTable::default();
    for &seed in &cfg.seeds {
        let init = models.init(seed);
        for setting in &cfg.settings {
            let (params, final_loss) = match setting.apply(&cfg.train) {
                None => (init.clone(), None),
                Some(mut train) => {
                    train.seed = seed;
                    let out = pretrain(models, &init, &pools.pretrain, &train)?;
                    let last = out.history.steps.last().map(|r| r.total);
                    (out.params, last)
                }
            };
            let result = linear_probe(models, &params, &pools.probe_train, &pools.probe_test, &cfg.probe)?;
            let row = SweepRow { setting: setting.name.clone(), seed, result, final_loss };
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_iou(truth: &[u8], pred: &[u8], c: u8) -> Option<f64> {
        let mut inter = 0;
        let mut union = 0;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == c && p == c {
                inter += 1;
            }
            if t == c || p == c {
                union += 1;
            }
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    #[test]
    fn one_class_predictor_on_balanced_pair() {
        let truth = [0u8, 0, 1, 1];
        let m = ConfusionMatrix::from_labels(2, &truth, &[0; 4]).unwrap();
        let r = ProbeResult::from_confusion(&m).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
        assert_eq!(r.fwiou, 0.25);
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = ConfusionMatrix::from_labels(4, &[0, 1, 1], &[0, 1, 1]).unwrap();
        let r = ProbeResult::from_confusion(&m).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn oracle_features_probe_perfectly() {
        let make = |labels: Vec<u8>| {
            let mut data = vec![0.0; labels.len() * NUM_CLASSES];
            for (i, &l) in labels.iter().enumerate() {
                data[i * NUM_CLASSES + l as usize] = 1.0;
            }
            (Tensor::new(vec![labels.len(), NUM_CLASSES], data).unwrap(), labels)
        };
        let train = vec![make((0..200).map(|i| (i * 7 % 4) as u8).collect())];
        let test = vec![make((0..97).map(|i| (i * 3 % 4) as u8).collect())];
        let probe = fit_linear_probe(&train, &ProbeConfig::default()).unwrap();
        let r = evaluate_probe(&probe, &test, NUM_CLASSES).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.fwiou, 1.0);
    }

    #[test]
    fn oracle_encoder_on_scenes() {
        let scenes = generate_scenes(&SceneConfig { seed: 3, ..SceneConfig::default() }, 2).unwrap();
        let data: Vec<_> = scenes
            .iter()
            .map(|s| {
                let l = s.labels().to_vec();
                let mut f = vec![0.0; l.len() * NUM_CLASSES];
                l.iter().enumerate().for_each(|(i, &c)| f[i * NUM_CLASSES + c as usize] = 1.0);
                (Tensor::new(vec![l.len(), NUM_CLASSES], f).unwrap(), l)
            })
            .collect();
        let probe = fit_linear_probe(&data[..1], &ProbeConfig::default()).unwrap();
        assert_eq!(evaluate_probe(&probe, &data[1..], NUM_CLASSES).unwrap().miou, 1.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(ConfusionMatrix::from_labels(2, &[0, 1], &[0]).is_err());
        assert!(ConfusionMatrix::from_labels(2, &[0, 2], &[0, 0]).is_err());
        assert!(ProbeResult::from_confusion(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn sweep_settings_cover_grid() {
        let base = TrainConfig::default();
        let views = SweepSetting::views(&base);
        assert_eq!(views[0].apply(&base), None);
        let ipv = views[1].apply(&base).unwrap();
        assert!(ipv.enable_ipv && !ipv.enable_bev && ipv.loss.gamma == 0.0);
        let ratios = SweepSetting::ratios(&base);
        let alphas: Vec<f64> = ratios.iter().map(|s| s.apply(&base).unwrap().loss.alpha).collect();
        assert_eq!(alphas, vec![4.0, 2.0, 1.0, 0.5]);
    }

    #[test]
    fn table_means_and_csv() {
        let r = |m| ProbeResult { per_class_iou: vec![Some(m), None], miou: m, fwiou: m };
        let table = SweepTable {
            rows: vec![
                SweepRow { setting: "a".into(), seed: 0, result: r(0.2), final_loss: None },
                SweepRow { setting: "b".into(), seed: 0, result: r(0.5), final_loss: Some(1.0) },
                SweepRow { setting: "a".into(), seed: 1, result: r(0.4), final_loss: None },
            ],
        };
        let means = table.mean_miou();
        assert_eq!(means[0].0, "a");
        assert!((means[0].1 - 0.3).abs() < 1e-15);
        let csv = table.to_csv(2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "setting,seed,miou,fwiou,iou_0,iou_1,final_loss");
        assert_eq!(lines[2], "b,0,0.500000,0.500000,0.500000,,1.000000");
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
    }

    proptest! {
        #[test]
        fn confusion_matches_tally(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..200)) {
            let truth: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let m = ConfusionMatrix::from_labels(4, &truth, &pred).unwrap();
            let r = ProbeResult::from_confusion(&m).unwrap();
            let mut sum = 0.0;
            let mut present = 0;
            let mut fw = 0.0;
            for c in 0..4u8 {
                let iou = brute_iou(&truth, &pred, c);
                prop_assert_eq!(r.per_class_iou[c as usize], iou);
                if let Some(v) = iou {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let n = truth.iter().filter(|&&t| t == c).count();
                if n > 0 {
                    sum += iou.unwrap();
                    present += 1;
                    fw += n as f64 / truth.len() as f64 * iou.unwrap();
                }
            }
            prop_assert!((r.miou - sum / present as f64).abs() < 1e-12);
            prop_assert!((r.fwiou - fw).abs() < 1e-12);
        }
    }
}
