//! Command-line entry point.
//!
//! Exit codes: 0 ok, 2 usage or config, 3 io, 4 numeric failure, 5
//! checkpoint mismatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::depth_eval::{held_out_depth_bce, render_view, DepthMae};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GradCheckOptions};
use crate::nn::ParamStore;
use crate::pipeline::Models;
use crate::probe::{ablation_sweep, linear_probe, scene_pool, SweepRow, SweepTable, POOL_PRETRAIN, POOL_PROBE_TEST, POOL_PROBE_TRAIN};
use crate::synth::SceneSample;
use crate::train::pretrain;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

pub const CHECKPOINT_FILE: &str = "checkpoint.hvd";
pub const LOSS_FILE: &str = "loss.csv";
pub const DEPTH_MAE_FILE: &str = "depth_mae.csv";

#[derive(Parser, Debug)]
#[command(name = "hybridview", version, about = "Image-to-point-cloud contrastive distillation on synthetic scenes")]
struct Cli {
    /// Flat `key = value` config file; without it the preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// desk-scale or paper-scale; ignored when --config is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one config key, as in `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for scene preparation; results do not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Pool {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

impl Pool {
    fn id(self) -> u64 {
        match self {
            Pool::Pretrain => POOL_PRETRAIN,
            Pool::ProbeTrain => POOL_PROBE_TRAIN,
            Pool::ProbeTest => POOL_PROBE_TEST,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, one file each.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configured size of the pool.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value_t = Pool::Pretrain)]
        pool: Pool,
    },
    /// Pretrain, writing the checkpoint and the per-step loss CSV.
    Pretrain {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory of scene files; defaults to the generated pretraining pool.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Linear probe on the frozen student of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// View ablation over the configured seeds, optionally with the α:β grid.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ratios: bool,
    },
    /// Sparse, predicted and RGB depth panels with depth MAE on held-out scenes.
    RenderDepth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        count: usize,
    },
    /// Finite-difference checks of every primitive, loss and model.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Print every config key with its value.
    DumpConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        Error::BadMagic(_) | Error::Checkpoint(_) | Error::MissingTensor(_) => EXIT_CHECKPOINT,
        Error::NonFinite(_) | Error::Shape { .. } | Error::NonScalarRoot(_) | Error::Placement(_) => EXIT_NUMERIC,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::preset(cli.preset.as_deref().unwrap_or("desk-scale").parse()?),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.train.threads = cli.threads.max(1);
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(models: &Models, path: &Path) -> Result<ParamStore> {
    let params = ParamStore::load(path)?;
    models.check_params(&params)?;
    Ok(params)
}

fn load_scenes(dir: &Path) -> Result<Vec<SceneSample>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "hvd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .hvd scene files in {}", dir.display())));
    }
    files.iter().map(|p| SceneSample::load(p)).collect()
}

fn execute(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::DumpConfig { out } => {
            let text = cfg.dump();
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::GradCheck { seeds } => {
            let reports = run_suite(&GradCheckOptions { seeds, ..GradCheckOptions::default() })?;
            let mut failed = 0;
            for r in &reports {
                println!("{:<8} {:<22} worst rel {:.2e} over {} coords", if r.passed { "pass" } else { "FAIL" }, r.name, r.worst_rel, r.coords);
                if !r.passed {
                    failed += 1;
                    if let Some((name, i, a, n)) = &r.worst_at {
                        println!("         at {name}[{i}]: analytic {a:e}, numeric {n:e}");
                    }
                }
            }
            println!("{} of {} checks passed", reports.len() - failed, reports.len());
            if failed > 0 {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::SynthGen { out, count, pool } => {
            let n = count.unwrap_or(match pool {
                Pool::Pretrain => cfg.pretrain_scenes,
                Pool::ProbeTrain => cfg.probe_train_scenes,
                Pool::ProbeTest => cfg.probe_test_scenes,
            });
            fs::create_dir_all(&out)?;
            for (i, scene) in scene_pool(&cfg.scene, pool.id(), n)?.iter().enumerate() {
                scene.save(&out.join(format!("scene_{i:04}.hvd")))?;
            }
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Pretrain { out, steps, seed, scenes } => {
            let mut train = cfg.train.clone();
            train.steps = steps.unwrap_or(train.steps);
            train.seed = seed.unwrap_or(train.seed);
            let models = Models::new(&cfg.model)?;
            let scenes = match scenes {
                Some(dir) => load_scenes(&dir)?,
                None => scene_pool(&cfg.scene, POOL_PRETRAIN, cfg.pretrain_scenes)?,
            };
            let init = models.init(train.seed);
            let outcome = pretrain(&models, &init, &scenes, &train)?;
            fs::create_dir_all(&out)?;
            outcome.params.save(&out.join(CHECKPOINT_FILE))?;
            fs::write(out.join(LOSS_FILE), outcome.history.to_csv())?;
            if let (Some(first), Some(last)) = (outcome.history.steps.first(), outcome.history.steps.last()) {
                println!("{} steps, total loss {:.4} -> {:.4}", outcome.history.steps.len(), first.total, last.total);
            }
            println!("wrote {}", out.display());
        }
        Command::Probe { checkpoint, out } => {
            let models = Models::new(&cfg.model)?;
            let params = load_checkpoint(&models, &checkpoint)?;
            let train = scene_pool(&cfg.scene, POOL_PROBE_TRAIN, cfg.probe_train_scenes)?;
            let test = scene_pool(&cfg.scene, POOL_PROBE_TEST, cfg.probe_test_scenes)?;
            let result = linear_probe(&models, &params, &train, &test, &cfg.probe)?;
            println!("mIoU {:.4}  fwIoU {:.4}", result.miou, result.fwiou);
            let row = SweepRow { setting: "checkpoint".into(), seed: cfg.train.seed, result, final_loss: None };
            let table = SweepTable { rows: vec![row] };
            fs::write(&out, table.to_csv(cfg.probe.classes))?;
        }
        Command::Sweep { out, ratios } => {
            let models = Models::new(&cfg.model)?;
            let mut sweep_cfg = cfg.clone();
            sweep_cfg.sweep_ratios |= ratios;
            let table = ablation_sweep(&models, &sweep_cfg.sweep_config(), |r| {
                eprintln!("{:<12} seed {}  mIoU {:.4}", r.setting, r.seed, r.result.miou);
            })?;
            for (name, m) in table.mean_miou() {
                println!("{name:<12} mean mIoU {m:.4}");
            }
            fs::write(&out, table.to_csv(cfg.probe.classes))?;
        }
        Command::RenderDepth { checkpoint, out, count } => {
            let models = Models::new(&cfg.model)?;
            let params = load_checkpoint(&models, &checkpoint)?;
            let scenes = scene_pool(&cfg.scene, POOL_PROBE_TEST, count)?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("scene,view,pixels,mae,uniform_mae\n");
            let mut total = DepthMae::default();
            for (i, scene) in scenes.iter().enumerate() {
                for (j, view) in scene.views.iter().enumerate() {
                    let r = render_view(&models, &params, &scene.cloud, view)?;
                    r.panels.write_ppm(&out.join(format!("depth_{i:02}_{j}.ppm")))?;
                    csv.push_str(&format!("{i},{j},{},{},{}\n", r.mae.pixels, r.mae.mean_predicted(), r.mae.mean_uniform()));
                    total.add(&r.mae);
                }
            }
            csv.push_str(&format!("all,all,{},{},{}\n", total.pixels, total.mean_predicted(), total.mean_uniform()));
            fs::write(out.join(DEPTH_MAE_FILE), csv)?;
            let bce = held_out_depth_bce(&models, &params, &scenes)?;
            println!("depth MAE {:.4} m (uniform expectation {:.4} m)", total.mean_predicted(), total.mean_uniform());
            println!("depth BCE {:.4} (uniform {:.4})", bce.mean, bce.uniform);
        }
    }
    Ok(0)
}
