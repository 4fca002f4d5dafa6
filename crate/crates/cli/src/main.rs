//! `trajkit`: generate synthetic driving data, train and evaluate the
//! trajectory model, search scaling coefficients and plot predictions.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O or missing scene/frame,
//! 3 non-finite loss, 4 scaling constraint or empty search grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use trajkit::checkpoint::{load_checkpoint, Checkpoint};
use trajkit::model::{HeadConfig, HybridModel, ModelSpec};
use trajkit::optim::{Optimizer, OptimizerKind};
use trajkit::prediction::{render_svg, PredictionFile};
use trajkit::scaling::{BaseArchitecture, GridSpec, ScalingCoefficients, DEFAULT_CONSTRAINT_TOL, DEFAULT_GRID_STEP};
use trajkit::scene::{
    generate_mask, generate_synthetic, rasterize, read_mask, read_scenes, write_mask, write_scenes, AgentsMask, Motion,
    RasterConfig, Scene,
};
use trajkit::train::{evaluate, scale_search, split, train, TrainConfig};
use trajkit::{Error, Result};

const SCENES_FILE: &str = "scenes.jsonl";
const MASK_FILE: &str = "mask.csv";

#[derive(Parser)]
#[command(name = "trajkit", version, about = "Multimodal ego trajectory prediction toolkit")]
struct Cli {
    /// Print one JSON object on stdout instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus and agent mask.
    Gen(GenArgs),
    /// Train a model and write checkpoints and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Write the prediction for one anchor frame.
    Predict(FrameArgs),
    /// Plot ground truth and predictions for one anchor frame as SVG.
    Plot(FrameArgs),
    /// Grid-search scaling coefficients.
    ScaleSearch(SearchArgs),
    /// Summarize a corpus or a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// constant_velocity, constant_turn or lane_change
    #[arg(long, default_value = "constant_velocity")]
    motion: String,
    /// Probability that an agent is marked usable.
    #[arg(long, default_value_t = 0.9)]
    usable_fraction: f64,
    /// Output directory for scenes.jsonl and mask.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Corpus directory (scenes.jsonl, optional mask.csv) or scene file.
    #[arg(long)]
    data: PathBuf,
    /// Mask file; defaults to mask.csv next to the scenes.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Residual blocks per stage.
    #[arg(long, value_delimiter = ',', default_value = "2,2,2,2")]
    layers: Vec<usize>,
    /// Channels per stage.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    channels: Vec<usize>,
    /// Base raster size in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Meters per pixel at the base resolution.
    #[arg(long, default_value_t = 0.5)]
    pixel_size: f64,
    #[arg(long, default_value_t = 4)]
    history: usize,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    #[arg(long, default_value_t = 3)]
    modes: usize,
}

impl ModelArgs {
    fn raster(&self) -> RasterConfig {
        RasterConfig {
            size_px: self.resolution,
            resolution: self.pixel_size,
            history_frames: self.history,
            future_frames: self.horizon,
            ..RasterConfig::default()
        }
    }

    fn base(&self) -> Result<BaseArchitecture> {
        BaseArchitecture::new(
            self.layers.clone(),
            self.channels.clone(),
            self.resolution,
            self.raster().channels(),
        )
    }

    fn head(&self) -> HeadConfig {
        HeadConfig {
            modes: self.modes,
            horizon: self.horizon,
        }
    }
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// radam or sgd
    #[arg(long, default_value = "radam")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
    /// Frames between consecutive anchors within a scene.
    #[arg(long, default_value_t = 10)]
    sample_stride: usize,
}

impl FitArgs {
    fn config(&self, epochs: usize, raster: RasterConfig, out: Option<PathBuf>) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs,
            seed: self.seed,
            optimizer: self.optimizer.parse::<OptimizerKind>()?,
            eval_fraction: self.eval_fraction,
            sample_stride: self.sample_stride,
            raster,
            out_dir: out,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    phi: f64,
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    #[arg(long, default_value_t = 1.1)]
    beta: f64,
    #[arg(long, default_value_t = 1.15)]
    gamma: f64,
    /// Pick alpha, beta and gamma by grid search before training.
    #[arg(long, conflicts_with_all = ["alpha", "beta", "gamma"])]
    search: bool,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    #[arg(long, default_value_t = DEFAULT_CONSTRAINT_TOL)]
    tol: f64,
    /// Epochs per grid point when searching.
    #[arg(long, default_value_t = 2)]
    search_epochs: usize,
    /// Output directory for checkpoints, log and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// eval, train or all
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
    #[arg(long, default_value_t = 10)]
    sample_stride: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct FrameArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    scene: String,
    /// Anchor frame index within the scene.
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    #[arg(long, default_value_t = DEFAULT_CONSTRAINT_TOL)]
    tol: f64,
    /// Training epochs per grid point.
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Write the per-point report here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required_unless_present = "ckpt")]
    data: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) | Error::Scene { .. } => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::Constraint { .. } | Error::EmptyGrid { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if std::env::args().any(|a| a == "--json") {
                println!("{}", json!({"error": e.kind().to_string(), "exit_code": 1}));
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Plot(a) => cmd_plot(a),
        Command::ScaleSearch(a) => cmd_scale_search(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(out) => {
            let text = if json { format!("{}\n", out.json) } else { out.text };
            print!("{text}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            if json {
                println!("{}", json!({"error": e.to_string(), "exit_code": code}));
            }
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

/// Human-readable and machine-readable renderings of a command result.
struct Output {
    text: String,
    json: Value,
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn load_data(d: &DataArgs) -> Result<(Vec<Scene>, AgentsMask)> {
    let scenes_path = if d.data.is_dir() {
        d.data.join(SCENES_FILE)
    } else {
        d.data.clone()
    };
    let scenes = read_scenes(&scenes_path)?;
    let mask_path = d
        .mask
        .clone()
        .unwrap_or_else(|| scenes_path.parent().unwrap_or(Path::new(".")).join(MASK_FILE));
    let mask = if d.mask.is_some() || mask_path.exists() {
        read_mask(&mask_path)?
    } else {
        AgentsMask::new()
    };
    Ok((scenes, mask))
}

fn cmd_gen(a: GenArgs) -> Result<Output> {
    let motion: Motion = a.motion.parse()?;
    if !(0.0..=1.0).contains(&a.usable_fraction) {
        return Err(Error::InvalidArgument(format!(
            "usable fraction must lie in [0, 1], got {}",
            a.usable_fraction
        )));
    }
    let scenes = generate_synthetic(a.seed, a.scenes, a.frames, motion);
    let mask = generate_mask(&scenes, a.seed, a.usable_fraction);
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    write_scenes(&scenes, &a.out.join(SCENES_FILE))?;
    write_mask(&mask, &a.out.join(MASK_FILE))?;
    Ok(Output {
        text: format!("generated {} scenes into {}\n", scenes.len(), a.out.display()),
        json: json!({"scenes": scenes.len(), "frames": a.frames, "motion": motion.as_str(), "out": a.out}),
    })
}

fn coeffs_json(c: &ScalingCoefficients) -> Value {
    json!({"alpha": c.alpha, "beta": c.beta, "gamma": c.gamma, "phi": c.phi, "product": c.product()})
}

fn cmd_train(a: TrainArgs) -> Result<Output> {
    let (scenes, mask) = load_data(&a.data)?;
    let (train_scenes, eval_scenes) = split(&scenes, a.fit.eval_fraction, a.fit.seed)?;
    let base = a.model.base()?;
    let head = a.model.head();
    let mut coeffs = ScalingCoefficients::new(a.alpha, a.beta, a.gamma, a.phi)?;
    let mut text = String::new();
    if a.search {
        let cfg = a.fit.config(a.search_epochs, a.model.raster(), None)?;
        let grid = GridSpec::new(a.grid_step)?;
        let report = scale_search(
            &base,
            head,
            &grid,
            a.tol,
            &cfg,
            a.fit.seed,
            &train_scenes,
            &eval_scenes,
            &mask,
        )?;
        coeffs = report.best.with_phi(a.phi);
        text.push_str(&format!(
            "search picked alpha {} beta {} gamma {} (product {:.6}, score {:.6})\n",
            coeffs.alpha,
            coeffs.beta,
            coeffs.gamma,
            coeffs.product(),
            report.best_score
        ));
    }
    let spec = ModelSpec {
        base,
        coeffs,
        head,
        tolerance: a.tol,
    };
    let mut model = HybridModel::build(spec, a.fit.seed)?;
    let cfg = a.fit.config(a.epochs, a.model.raster(), Some(a.out.clone()))?;
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let log_path = a.out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(io_err(format!("creating {}", log_path.display())))?;
    let report = train(&cfg, &mut model, &train_scenes, &eval_scenes, &mask, &mut log)?;

    text.push_str(&format!(
        "model: {} parameters, input {}px, layers {:?}, channels {:?}\n",
        model.parameter_count(),
        model.input_resolution(),
        model.architecture().stage_layers,
        model.architecture().stage_channels
    ));
    text.push_str(&report.to_table());
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({"epoch": r.epoch, "train_loss": r.train_loss, "eval_loss": r.eval_loss, "ade": r.ade, "fde": r.fde}))
        .collect();
    Ok(Output {
        text,
        json: json!({
            "coefficients": coeffs_json(&coeffs),
            "parameters": model.parameter_count(),
            "initial_train_loss": report.initial_train_loss,
            "epochs": rows,
            "steps": report.steps,
            "final_checkpoint": report.final_checkpoint,
        }),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<Output> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (scenes, mask) = load_data(&a.data)?;
    let chosen = match a.split.as_str() {
        "all" => scenes,
        "train" => split(&scenes, a.eval_fraction, a.seed)?.0,
        "eval" => split(&scenes, a.eval_fraction, a.seed)?.1,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected eval, train or all)"
            )))
        }
    };
    let cfg = TrainConfig {
        batch_size: a.batch,
        sample_stride: a.sample_stride,
        raster: ck.raster.clone(),
        ..TrainConfig::default()
    };
    let m = evaluate(&ck.model, &chosen, &mask, &cfg)?;
    Ok(Output {
        text: format!(
            "samples {}\nnll {:.6}\nade {:.6}\nfde {:.6}\n",
            m.samples, m.nll, m.ade, m.fde
        ),
        json: json!({"samples": m.samples, "nll": m.nll, "ade": m.ade, "fde": m.fde}),
    })
}

/// Loads the checkpoint and rasterizes the requested anchor frame.
fn frame_prediction(a: &FrameArgs) -> Result<(Checkpoint, PredictionFile, Vec<[f64; 2]>)> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (scenes, mask) = load_data(&a.data)?;
    let scene = scenes.iter().find(|s| s.id == a.scene).ok_or_else(|| Error::Scene {
        scene: a.scene.clone(),
        message: "not found in corpus".into(),
    })?;
    let sample = rasterize(scene, a.frame, &ck.raster, &mask)?;
    let pred = ck.model.predict(&sample.raster)?;
    Ok((ck, PredictionFile::from_prediction(&pred), sample.target))
}

fn cmd_predict(a: FrameArgs) -> Result<Output> {
    let (_, pred, _) = frame_prediction(&a)?;
    pred.write(&a.out)?;
    Ok(Output {
        text: format!(
            "wrote {} modes x {} steps to {}\nconfidences {:?}\n",
            pred.modes(),
            pred.horizon(),
            a.out.display(),
            pred.confidences
        ),
        json: json!({"out": a.out, "confidences": pred.confidences, "trajectories": pred.trajectories}),
    })
}

fn cmd_plot(a: FrameArgs) -> Result<Output> {
    let (_, pred, gt) = frame_prediction(&a)?;
    let svg = render_svg(&pred, Some(&gt));
    fs::write(&a.out, svg).map_err(io_err(format!("writing {}", a.out.display())))?;
    Ok(Output {
        text: format!("wrote {}\n", a.out.display()),
        json: json!({"out": a.out, "polylines": pred.modes() + 1}),
    })
}

fn cmd_scale_search(a: SearchArgs) -> Result<Output> {
    let (scenes, mask) = load_data(&a.data)?;
    let (train_scenes, eval_scenes) = split(&scenes, a.fit.eval_fraction, a.fit.seed)?;
    let base = a.model.base()?;
    let cfg = a.fit.config(a.epochs, a.model.raster(), None)?;
    let grid = GridSpec::new(a.grid_step)?;
    let report = scale_search(
        &base,
        a.model.head(),
        &grid,
        a.tol,
        &cfg,
        a.fit.seed,
        &train_scenes,
        &eval_scenes,
        &mask,
    )?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_csv()).map_err(io_err(format!("writing {}", out.display())))?;
    }
    let mut text = format!(
        "{:>6} {:>6} {:>6} {:>9} {:>14} feasible\n",
        "alpha", "beta", "gamma", "product", "score"
    );
    for r in &report.rows {
        let score = r.score.map_or_else(|| "-".to_string(), |s| format!("{s:.6}"));
        text.push_str(&format!(
            "{:>6.3} {:>6.3} {:>6.3} {:>9.5} {:>14} {}\n",
            r.coeffs.alpha, r.coeffs.beta, r.coeffs.gamma, r.product, score, r.feasible
        ));
    }
    let b = report.best;
    text.push_str(&format!(
        "best alpha {} beta {} gamma {} product {:.6} score {:.6}\n",
        b.alpha,
        b.beta,
        b.gamma,
        b.product(),
        report.best_score
    ));
    Ok(Output {
        text,
        json: json!({
            "best": coeffs_json(&b),
            "score": report.best_score,
            "rows": report.rows.len(),
            "feasible": report.rows.iter().filter(|r| r.feasible).count(),
            "tolerance": report.tolerance,
        }),
    })
}

fn cmd_inspect(a: InspectArgs) -> Result<Output> {
    let mut text = String::new();
    let mut out = serde_json::Map::new();
    if let Some(data) = &a.data {
        let (scenes, mask) = load_data(&DataArgs {
            data: data.clone(),
            mask: a.mask.clone(),
        })?;
        let frames: usize = scenes.iter().map(|s| s.frames.len()).sum();
        let tracks: usize = scenes.iter().map(|s| s.track_ids().len()).sum();
        text.push_str(&format!(
            "scenes {}\nframes {}\ntracks {}\nmask entries {}\nmasked out {}\n",
            scenes.len(),
            frames,
            tracks,
            mask.len(),
            mask.masked_out()
        ));
        out.insert(
            "data".into(),
            json!({"scenes": scenes.len(), "frames": frames, "tracks": tracks,
                   "mask_entries": mask.len(), "masked_out": mask.masked_out()}),
        );
    }
    if let Some(path) = &a.ckpt {
        let ck = load_checkpoint(path)?;
        let m = &ck.model;
        let arch = m.architecture();
        let (opt, steps) = ck.optimizer.as_ref().map_or(("none".to_string(), 0), |o: &Optimizer| {
            (o.kind().to_string(), o.steps())
        });
        let c = m.spec().coeffs;
        text.push_str(&format!(
            "parameters {}\nlayers {:?}\nchannels {:?}\ninput {}x{}x{}\nmodes {} horizon {}\nalpha {} beta {} gamma {} phi {}\noptimizer {} steps {}\n",
            m.parameter_count(),
            arch.stage_layers,
            arch.stage_channels,
            arch.input_channels,
            arch.input_resolution,
            arch.input_resolution,
            m.head().modes,
            m.head().horizon,
            c.alpha,
            c.beta,
            c.gamma,
            c.phi,
            opt,
            steps
        ));
        out.insert(
            "checkpoint".into(),
            json!({"parameters": m.parameter_count(), "layers": arch.stage_layers, "channels": arch.stage_channels,
                   "input_resolution": arch.input_resolution, "input_channels": arch.input_channels,
                   "modes": m.head().modes, "horizon": m.head().horizon, "coefficients": coeffs_json(&c),
                   "optimizer": opt, "steps": steps}),
        );
    }
    Ok(Output {
        text,
        json: Value::Object(out),
    })
}
