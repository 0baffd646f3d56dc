use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gnerf_core::config::Config;
use gnerf_core::eval::{
    ablation_suite, eval_targets, evaluate_model, sweep_csv, truncation_sweep, EvalSettings,
};
use gnerf_core::image::Image;
use gnerf_core::io::{load_checkpoint, read_png, write_png};
use gnerf_core::losses::FeatureExtractor;
use gnerf_core::{Error, Model, Pose, RgbImage};

#[derive(Parser, Debug)]
#[command(name = "gnerf", version, about = "Single-image radiance fields from geometry-guided synthetic views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    device: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a triplet dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Which pool to write.
        #[arg(long, default_value = "synthetic", value_parser = ["synthetic", "real", "test"])]
        split: String,
    },
    /// Train a model; writes checkpoints and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out test pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a yaw orbit and its depth from one input image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG; defaults to the first test-pool image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 9)]
        views: usize,
    },
    /// Diversity and geometry error across truncation values.
    SweepTruncation {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the four ablation configurations over the seed list.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Render { common, .. }
            | Command::SweepTruncation { common }
            | Command::Ablate { common } => common,
        }
    }

    fn verb(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Render { .. } => "render",
            Command::SweepTruncation { .. } => "sweep-truncation",
            Command::Ablate { .. } => "ablate",
        }
    }
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn resolve(common: &Common) -> Result<Config, Failure> {
    let base = match &common.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => Config::default(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &common.device {
        overrides.push(format!("device={}", toml_string(d)));
    }
    base.with_overrides(&overrides)
        .map_err(|e| Failure::Config(e.to_string()))
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn configure_threads() -> Result<usize, Failure> {
    let threads = match std::env::var("GNERF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Config(format!("GNERF_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => return Ok(rayon::current_num_threads()),
    };
    // A pool may already exist when running in-process; the cap then stays as it was.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(rayon::current_num_threads())
}

fn write_run_json(cmd: &Command, cfg: &Config, threads: usize) -> anyhow::Result<()> {
    let common = cmd.common();
    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let doc = json!({
        "verb": cmd.verb(),
        "config_file": common.config.as_ref().map(|p| p.display().to_string()),
        "overrides": common.overrides,
        "seed_flag": common.seed,
        "device_flag": common.device,
        "threads": threads,
        "config_hash": cfg.hash(),
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_model(cfg: &Config, path: &Path) -> Result<Model, Failure> {
    let ck = load_checkpoint(path)?;
    let hash = cfg.hash();
    if ck.config_hash != hash {
        eprintln!(
            "warning: checkpoint {} was written under config {} but the current config is {hash}",
            path.display(),
            ck.config_hash
        );
    }
    let mut model = Model::new(cfg.model_config())?;
    model.load_tensors(&ck.tensors)?;
    Ok(model)
}

fn gray_to_rgb(depth: &RgbImage, mask: &[bool]) -> anyhow::Result<RgbImage> {
    let valid: Vec<f64> = depth.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plane: Vec<f64> = depth
        .data
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m { 1.0 - (d - lo) / span } else { 0.0 })
        .collect();
    let data = [plane.clone(), plane.clone(), plane].concat();
    Ok(Image::new(depth.width, depth.height, 3, data)?)
}

fn run(cmd: &Command) -> Result<(), Failure> {
    let common = cmd.common();
    let cfg = resolve(common)?;
    let threads = configure_threads()?;
    write_run_json(cmd, &cfg, threads)?;
    let out = common.out.as_path();
    match cmd {
        Command::SynthData { split, .. } => {
            let setup = cfg.synthesis_setup()?;
            let spec = match split.as_str() {
                "real" => cfg.real_pool(),
                "test" => cfg.test_pool(),
                _ => cfg.synthetic_pool(),
            };
            let manifest = setup.write_dataset(out, &spec, true)?;
            println!("wrote {} triplets to {}", manifest.count, out.display());
        }
        Command::Train { .. } => {
            let setup = cfg.synthesis_setup()?;
            let data = cfg.training_data(&setup)?.cast::<f32>();
            let mut trainer = cfg.trainer::<f32>()?;
            let hash = cfg.hash();
            let summary = trainer.fit(&data, Some((out, &hash)))?;
            let last = summary.records.last();
            println!(
                "trained {} steps; synthetic fraction {:.3}; final total {}",
                summary.records.len(),
                summary.synthetic_fraction(),
                last.map_or("n/a".to_string(), |r| format!("{:.5}", r.total))
            );
        }
        Command::Eval { checkpoint, .. } => {
            let model = load_model(&cfg, checkpoint)?;
            let setup = cfg.synthesis_setup()?;
            let test = cfg.pool(&setup, &cfg.test_pool(), cfg.test_dir.as_deref())?;
            let targets = eval_targets(&setup, &test, &cfg.eval_yaws)?;
            let hash = cfg.hash();
            let report = evaluate_model(
                &model,
                &targets,
                &setup.intrinsics,
                &setup.render,
                &EvalSettings::from_config(&cfg),
                &hash,
            )?;
            let path = out.join(format!("report_{hash}_s{}.json", cfg.seed));
            fs::write(&path, serde_json::to_string_pretty(&report).context("serializing report")?)
                .with_context(|| format!("writing {}", path.display()))?;
            for r in [&report.all, &report.frontal, &report.side] {
                println!("{:?}: {:?}", r.split, r.metrics);
            }
        }
        Command::Render {
            checkpoint, image, views, ..
        } => {
            if *views < 2 {
                return Err(Failure::Config("render needs at least 2 views".into()));
            }
            let model = load_model(&cfg, checkpoint)?;
            let setup = cfg.synthesis_setup()?;
            let input: RgbImage = match image {
                Some(p) => read_png(p)?,
                None => {
                    let spec = cfg.test_pool();
                    setup.triplet(&spec, 0)?.image_f
                }
            };
            let intr = setup.intrinsics.cast::<f32>();
            if input.width != intr.width || input.height != intr.height || input.channels != 3 {
                return Err(Failure::Config(format!(
                    "input image is {}×{}×{} but the model expects {}×{}×3",
                    input.width, input.height, input.channels, intr.width, intr.height
                )));
            }
            let rcfg = setup.render.cast::<f32>();
            let offsets = vec![0.5; intr.pixel_count() * rcfg.samples];
            let emb = model.encode(&input.cast())?;
            let [lo, hi] = setup.poses.yaw_range;
            let mut frames = Vec::new();
            let mut depths = Vec::new();
            for i in 0..*views {
                let yaw = lo + (hi - lo) * i as f64 / (*views - 1) as f64;
                let pose: Pose = setup.poses.pose_from_angles(yaw, 0.0)?;
                let v = model.generate(&pose.cast(), &emb, &intr, &rcfg, &offsets)?;
                let mask = v.mask();
                frames.push(v.image.cast::<f64>());
                depths.push(gray_to_rgb(&v.depth.cast(), &mask)?);
            }
            write_png(&out.join("input.png"), &input)?;
            write_png(&out.join("orbit.png"), &Image::hstack(&frames)?)?;
            write_png(&out.join("depth.png"), &Image::hstack(&depths)?)?;
            println!("rendered {views} views over yaw [{lo}, {hi}] to {}", out.display());
        }
        Command::SweepTruncation { .. } => {
            let setup = cfg.synthesis_setup()?;
            let features = FeatureExtractor::new(&cfg.loss_config(), 3)?;
            let rows = truncation_sweep(
                &setup,
                &cfg.sweep_psis,
                cfg.sweep_count,
                cfg.seed,
                &features,
                cfg.depth_align,
            )?;
            let csv = sweep_csv(&rows);
            let path = out.join(format!("truncation_sweep_{}_s{}.csv", cfg.hash(), cfg.seed));
            fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
        }
        Command::Ablate { .. } => {
            let report = ablation_suite(&cfg, &cfg.ablation_seeds, |name, seed, r| {
                eprintln!(
                    "{name} seed {seed}: depth {:.5} side {:.5}",
                    r.all.metrics["depth_mse"], r.side.metrics["depth_mse"]
                );
            })?;
            let hash = cfg.hash();
            let csv = report.csv();
            fs::write(out.join(format!("ablation_{hash}.csv")), &csv).context("writing ablation CSV")?;
            fs::write(
                out.join(format!("ablation_{hash}.json")),
                serde_json::to_string_pretty(&report).context("serializing ablation report")?,
            )
            .context("writing ablation JSON")?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
