//! Pretraining loop: frozen teacher, SGD with momentum under a cosine
//! schedule, per-component loss history.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{cosine_lr, Graph, ParamStore, Sgd, Tensor};
use crate::pipeline::{batch_losses, prepare_scene, AugmentSettings, Models, Objective, PreparedScene, BEV_HEAD, DEPTH, STUDENT, TEACHER};
use crate::superpixel::SlicParams;
use crate::synth::SceneSample;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier on the learning rate of the depth head.
    pub depth_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub enable_ipv: bool,
    pub enable_bev: bool,
    pub augment: AugmentSettings,
    pub slic: SlicParams,
    pub seed: u64,
    /// Workers for per-scene preparation; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 800,
            batch_size: 2,
            lr0: 0.03,
            depth_lr_scale: 0.333,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            enable_ipv: true,
            enable_bev: true,
            augment: AugmentSettings::default(),
            slic: SlicParams::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr0 >= 0.0) || !(self.depth_lr_scale >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr0, momentum and weight decay must be finite and in range"));
        }
        self.loss.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective::from_flags(self.enable_ipv, self.enable_bev, &self.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ipv: Option<f64>,
    pub bev: Option<f64>,
    pub depth: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub steps: Vec<StepRecord>,
}

impl LossHistory {
    /// Missing components are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,total,ipv,bev,depth\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.lr, r.total, opt(r.ipv), opt(r.bev), opt(r.depth));
        }
        out
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: LossHistory,
}

/// Scene order for the whole run: one shuffled pass after another.
fn schedule(n: usize, steps: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = Vec::new();
    let mut epoch = 0u64;
    while order.len() < steps * batch {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10, epoch])));
        order.extend(perm);
        epoch += 1;
    }
    order.chunks(batch).take(steps).map(<[usize]>::to_vec).collect()
}

fn prepare_all(
    models: &Models,
    params: &ParamStore,
    scenes: &[SceneSample],
    ids: &[usize],
    step: usize,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<Vec<PreparedScene>> {
    let job = |slot: usize, id: usize| {
        let seed = derive_seed(config.seed, &[20, step as u64, slot as u64]);
        prepare_scene(models, params, &scenes[id], seed, &config.augment, &config.slic, objective)
    };
    if config.threads <= 1 || ids.len() <= 1 {
        return ids.iter().enumerate().map(|(slot, &id)| job(slot, id)).collect();
    }
    let workers = config.threads.min(ids.len());
    let mut results: Vec<Option<Result<PreparedScene>>> = (0..ids.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let job = &job;
                s.spawn(move || {
                    (w..ids.len()).step_by(workers).map(|slot| (slot, job(slot, ids[slot]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (slot, r) in h.join().expect("preparation worker panicked") {
                results[slot] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every slot is filled")).collect()
}

fn check_finite(name: &str, value: Option<f64>, step: usize) -> Result<()> {
    match value {
        Some(v) if !v.is_finite() => Err(Error::NonFinite(format!("{name} loss at step {step}"))),
        _ => Ok(()),
    }
}

/// Trains the student, depth head and BEV head; teacher tensors are never
/// bound as trainable and are returned untouched.
pub fn pretrain(models: &Models, init: &ParamStore, scenes: &[SceneSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = init.clone();
    let mut history = LossHistory::default();
    if config.steps == 0 {
        return Ok(TrainOutcome { params, history });
    }
    if scenes.is_empty() {
        return Err(Error::invalid("pretraining needs at least one scene"));
    }
    let objective = config.objective();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let trainable: Vec<&str> = [(objective.ipv || objective.bev, STUDENT), (objective.bev || objective.depth, DEPTH), (objective.bev, BEV_HEAD)]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, name)| name)
        .collect();
    for (step, ids) in schedule(scenes.len(), config.steps, config.batch_size, config.seed).into_iter().enumerate() {
        let lr = cosine_lr(step, config.steps, config.lr0)?;
        let batch = prepare_all(models, &params, scenes, &ids, step, config, &objective)?;

        let mut g = Graph::new();
        let mut live = ParamStore::new();
        let mut frozen = ParamStore::new();
        for name in [STUDENT, DEPTH, BEV_HEAD] {
            let part = params.with_prefix(&format!("{name}."));
            if trainable.contains(&name) { live.extend(&part) } else { frozen.extend(&part) }
        }
        let mut bound = live.bind(&mut g, true);
        let trainable_names: Vec<String> = live.iter().map(|(k, _)| k.clone()).collect();
        bound.merge(frozen.bind(&mut g, false));
        let losses = batch_losses(&mut g, &bound, models, &batch, &objective, &config.loss)?;
        let value = |v: Option<crate::nn::Var>| v.map(|v| g.value(v).item());
        let record = StepRecord {
            step,
            lr,
            total: g.value(losses.total).item(),
            ipv: value(losses.ipv),
            bev: value(losses.bev),
            depth: value(losses.depth),
        };
        check_finite("ipv", record.ipv, step)?;
        check_finite("bev", record.bev, step)?;
        check_finite("depth", record.depth, step)?;
        check_finite("total", Some(record.total), step)?;
        history.steps.push(record);

        if g.requires_grad(losses.total) {
            let mut grads = g.backward(losses.total)?;
            let mut body: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut depth: BTreeMap<String, Tensor> = BTreeMap::new();
            let depth_prefix = format!("{DEPTH}.");
            for name in &trainable_names {
                let var = bound.var(name)?;
                let grad = grads.take(var).unwrap_or_else(|| Tensor::zeros(g.shape(var)));
                let group = if name.starts_with(&depth_prefix) { &mut depth } else { &mut body };
                group.insert(name.clone(), grad);
            }
            sgd.step(&mut params, &body, lr)?;
            sgd.step(&mut params, &depth, lr * config.depth_lr_scale)?;
        }
    }
    debug_assert!(params.with_prefix(&format!("{TEACHER}.")) == init.with_prefix(&format!("{TEACHER}.")));
    Ok(TrainOutcome { params, history })
}
