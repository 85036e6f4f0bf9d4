//! Flat `key = value` run configuration with two presets.
//!
//! Lines are `key = value`; `#` starts a comment. An optional `preset` key
//! selects the base values and must come before every other key. Every key
//! is listed by [`RunConfig::dump`], and dumping then parsing reproduces the
//! configuration exactly.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, Models};
use crate::probe::{ProbeConfig, SweepConfig, SweepSetting};
use crate::synth::{CameraPose, SceneConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Toy scale that trains in minutes on one core.
    Desk,
    /// Sizes of the full-scale setup: 64 channels, 118 depth bins, a
    /// 256x256 BEV grid, 416x224 crops, batch 16 at lr 0.5.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk-scale",
            Preset::Paper => "paper-scale",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk-scale" => Ok(Preset::Desk),
            "paper-scale" => Ok(Preset::Paper),
            _ => Err(Error::invalid(format!("unknown preset `{s}` (expected desk-scale or paper-scale)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub pretrain_scenes: usize,
    pub probe_train_scenes: usize,
    pub probe_test_scenes: usize,
    /// The sweep runs seeds `0..sweep_seeds`.
    pub sweep_seeds: usize,
    /// Add the α:β grid to the view ablation.
    pub sweep_ratios: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

/// Evenly spaced headings, first camera looking along +x.
fn ring_cameras(count: usize, pitch: f64) -> Vec<CameraPose> {
    (0..count)
        .map(|k| {
            let yaw = std::f64::consts::TAU * k as f64 / count as f64;
            CameraPose { yaw, pitch, position: [0.1 * yaw.cos(), 0.1 * yaw.sin(), 0.2] }
        })
        .collect()
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig {
            preset,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            pretrain_scenes: 16,
            probe_train_scenes: 8,
            probe_test_scenes: 8,
            sweep_seeds: 3,
            sweep_ratios: false,
        };
        if preset == Preset::Desk {
            // 4:1 wins the ratio ablation at this scale; a softer BEV
            // temperature keeps BEV training from collapsing the student
            c.train.loss.alpha = 1.0;
            c.train.loss.beta = 0.25;
            c.train.loss.tau_bev = 0.5;
        }
        if preset == Preset::Paper {
            set_channels(&mut c, 64);
            set_bins(&mut c, 118);
            c.model.binning.d_min = 2.0;
            c.model.binning.d_max = 60.0;
            set_grid(&mut c, 256);
            set_image(&mut c, Some(416), Some(224));
            c.scene.focal = 200.0;
            c.scene.half_extent = 60.0;
            c.scene.placement_radius = (3.0, 50.0);
            c.scene.boxes = 40;
            c.scene.cylinders = 40;
            c.scene.cameras = ring_cameras(6, c.scene.cameras[0].pitch);
            c.scene.lidar_azimuth = 1024;
            c.scene.lidar_elevation = 32;
            c.scene.max_range = 80.0;
            c.model.points.hidden = 64;
            c.model.bev_hidden = 64;
            c.train.batch_size = 16;
            c.train.lr0 = 0.5;
            c.pretrain_scenes = 512;
            // 50 passes over the pretraining pool
            c.train.steps = 50 * c.pretrain_scenes / c.train.batch_size;
            c.probe_train_scenes = 64;
            c.probe_test_scenes = 64;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        Models::new(&self.model)?;
        if self.pretrain_scenes == 0 || self.probe_train_scenes == 0 || self.probe_test_scenes == 0 {
            return Err(Error::invalid("scene pools must be non-empty"));
        }
        Ok(())
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let mut settings = SweepSetting::views(&self.train);
        if self.sweep_ratios {
            settings.extend(SweepSetting::ratios(&self.train));
        }
        SweepConfig {
            scenes: self.scene.clone(),
            pretrain_scenes: self.pretrain_scenes,
            probe_train_scenes: self.probe_train_scenes,
            probe_test_scenes: self.probe_test_scenes,
            seeds: (0..self.sweep_seeds as u64).collect(),
            train: self.train.clone(),
            probe: self.probe.clone(),
            settings,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let keys = keys();
        let mut config = RunConfig::default();
        let mut seen_key = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line, msg };
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if seen_key {
                    return Err(err("`preset` must come before every other key".into()));
                }
                config = RunConfig::preset(value.parse().map_err(|e: Error| err(e.to_string()))?);
                seen_key = true;
                continue;
            }
            seen_key = true;
            let entry = keys.iter().find(|k| k.name == key).ok_or_else(|| err(format!("unknown key `{key}`")))?;
            (entry.set)(&mut config, value).map_err(|msg| err(format!("{key}: {msg}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Every key with its current value, preset first.
    pub fn dump(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset.name());
        for k in keys() {
            out.push_str(&format!("{} = {}\n", k.name, (k.get)(self)));
        }
        out
    }

    /// Applies one `key = value` override, as the CLI `--set` flag does.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let keys = keys();
        let entry = keys.iter().find(|k| k.name == key).ok_or_else(|| Error::invalid(format!("unknown key `{key}`")))?;
        (entry.set)(self, value).map_err(|msg| Error::invalid(format!("{key}: {msg}")))
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

struct Key {
    name: &'static str,
    get: fn(&RunConfig) -> String,
    set: Setter,
}

fn value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn set_channels(c: &mut RunConfig, ch: usize) {
    let m = &mut c.model;
    m.image.out_channels = ch;
    m.points.out_channels = ch;
    m.grid.channels = ch;
    m.depth.in_channels = ch;
}

fn set_bins(c: &mut RunConfig, bins: usize) {
    c.model.binning.bins = bins;
    c.model.depth.bins = bins;
}

/// The BEV grid and the voxel grid share their horizontal layout, centered
/// on the sensor.
fn set_grid(c: &mut RunConfig, cells: usize) {
    let m = &mut c.model;
    m.grid.rows = cells;
    m.grid.cols = cells;
    m.points.dims[0] = cells;
    m.points.dims[1] = cells;
    recenter(m);
}

fn set_cell(c: &mut RunConfig, cell: f64) {
    let m = &mut c.model;
    m.grid.cell = cell;
    m.points.voxel_size[0] = cell;
    m.points.voxel_size[1] = cell;
    recenter(m);
}

fn recenter(m: &mut ModelConfig) {
    let half = m.grid.cell * m.grid.rows as f64 / 2.0;
    m.grid.x_min = -half;
    m.grid.y_min = -half;
    m.points.min[0] = -half;
    m.points.min[1] = -half;
}

/// Scene images and augmented crops keep the same size.
fn set_image(c: &mut RunConfig, width: Option<usize>, height: Option<usize>) {
    if let Some(w) = width {
        c.scene.image_width = w;
        c.train.augment.image.out_width = w;
    }
    if let Some(h) = height {
        c.scene.image_height = h;
        c.train.augment.image.out_height = h;
    }
}

macro_rules! field {
    ($name:literal, $c:ident => $place:expr, $ty:ty) => {
        Key {
            name: $name,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = value::<$ty>(v)?;
                Ok(())
            },
        }
    };
}

fn keys() -> Vec<Key> {
    vec![
        field!("scene.seed", c => c.scene.seed, u64),
        field!("scene.boxes", c => c.scene.boxes, usize),
        field!("scene.cylinders", c => c.scene.cylinders, usize),
        Key {
            name: "scene.cameras",
            get: |c| c.scene.cameras.len().to_string(),
            set: |c, v| {
                let n: usize = value(v)?;
                if n == 0 {
                    return Err("at least one camera".into());
                }
                c.scene.cameras = ring_cameras(n, c.scene.cameras.first().map_or(10f64.to_radians(), |p| p.pitch));
                Ok(())
            },
        },
        Key {
            name: "scene.width",
            get: |c| c.scene.image_width.to_string(),
            set: |c, v| Ok(set_image(c, Some(value(v)?), None)),
        },
        Key {
            name: "scene.height",
            get: |c| c.scene.image_height.to_string(),
            set: |c, v| Ok(set_image(c, None, Some(value(v)?))),
        },
        field!("scene.focal", c => c.scene.focal, f64),
        field!("scene.half_extent", c => c.scene.half_extent, f64),
        field!("scene.placement_min", c => c.scene.placement_radius.0, f64),
        field!("scene.placement_max", c => c.scene.placement_radius.1, f64),
        field!("scene.lidar_azimuth", c => c.scene.lidar_azimuth, usize),
        field!("scene.lidar_elevation", c => c.scene.lidar_elevation, usize),
        field!("scene.max_range", c => c.scene.max_range, f64),
        field!("scene.color_noise", c => c.scene.color_noise, f64),
        Key {
            name: "model.channels",
            get: |c| c.model.image.out_channels.to_string(),
            set: |c, v| Ok(set_channels(c, value(v)?)),
        },
        field!("model.point_hidden", c => c.model.points.hidden, usize),
        field!("model.point_rounds", c => c.model.points.rounds, usize),
        Key { name: "model.grid", get: |c| c.model.grid.rows.to_string(), set: |c, v| Ok(set_grid(c, value(v)?)) },
        Key { name: "model.cell", get: |c| c.model.grid.cell.to_string(), set: |c, v| Ok(set_cell(c, value(v)?)) },
        field!("model.z_min", c => c.model.points.min[2], f64),
        field!("model.z_size", c => c.model.points.voxel_size[2], f64),
        field!("model.z_layers", c => c.model.points.dims[2], usize),
        field!("model.bev_hidden", c => c.model.bev_hidden, usize),
        Key { name: "model.bins", get: |c| c.model.binning.bins.to_string(), set: |c, v| Ok(set_bins(c, value(v)?)) },
        field!("model.d_min", c => c.model.binning.d_min, f64),
        field!("model.d_max", c => c.model.binning.d_max, f64),
        field!("model.depth_width", c => c.model.depth.width, usize),
        field!("model.depth_blocks", c => c.model.depth.res_blocks, usize),
        field!("loss.tau_ipv", c => c.train.loss.tau_ipv, f64),
        field!("loss.tau_bev", c => c.train.loss.tau_bev, f64),
        field!("loss.alpha", c => c.train.loss.alpha, f64),
        field!("loss.beta", c => c.train.loss.beta, f64),
        field!("loss.gamma", c => c.train.loss.gamma, f64),
        field!("train.seed", c => c.train.seed, u64),
        field!("train.steps", c => c.train.steps, usize),
        field!("train.batch", c => c.train.batch_size, usize),
        field!("train.lr0", c => c.train.lr0, f64),
        field!("train.depth_lr_scale", c => c.train.depth_lr_scale, f64),
        field!("train.momentum", c => c.train.momentum, f64),
        field!("train.weight_decay", c => c.train.weight_decay, f64),
        field!("train.enable_ipv", c => c.train.enable_ipv, bool),
        field!("train.enable_bev", c => c.train.enable_bev, bool),
        field!("train.augment", c => c.train.augment.enabled, bool),
        field!("slic.segments", c => c.train.slic.segments, usize),
        field!("slic.compactness", c => c.train.slic.compactness, f64),
        field!("slic.iterations", c => c.train.slic.iterations, usize),
        field!("probe.iterations", c => c.probe.iterations, usize),
        field!("probe.lr", c => c.probe.lr, f64),
        field!("probe.momentum", c => c.probe.momentum, f64),
        field!("sweep.pretrain_scenes", c => c.pretrain_scenes, usize),
        field!("sweep.probe_train_scenes", c => c.probe_train_scenes, usize),
        field!("sweep.probe_test_scenes", c => c.probe_test_scenes, usize),
        field!("sweep.seeds", c => c.sweep_seeds, usize),
        field!("sweep.ratios", c => c.sweep_ratios, bool),
    ]
}
