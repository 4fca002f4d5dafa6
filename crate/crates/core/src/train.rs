//! Dataset splitting, the training loop, evaluation and reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::loss::{ade, batch_nll, fde, nll_loss, GroundTruth, TrajectoryPrediction};
use crate::model::{HeadConfig, HybridModel, ModelSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scaling::{grid_search, BaseArchitecture, GridSearchReport, GridSpec};
use crate::scene::{rasterize, AgentsMask, RasterConfig, Sample, Scene};
use crate::tensor::Graph;

/// Splits whole scenes into `(train, eval)` after a seeded shuffle. The eval
/// side gets `round(n·eval_fraction)` scenes, clamped so both sides are
/// non-empty.
pub fn split(scenes: &[Scene], eval_fraction: f64, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "eval fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let n = scenes.len();
    if n < 2 {
        return Err(Error::invalid(format!("splitting needs at least 2 scenes, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let eval = order[..n_eval].iter().map(|&i| scenes[i].clone()).collect();
    let train = order[n_eval..].iter().map(|&i| scenes[i].clone()).collect();
    Ok((train, eval))
}

/// Anchor frames over a set of scenes, rasterized on demand.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    scenes: &'a [Scene],
    mask: &'a AgentsMask,
    raster: RasterConfig,
    anchors: Vec<(usize, usize)>,
}

impl<'a> Dataset<'a> {
    /// Anchors every `stride`-th frame that has full history and future.
    pub fn new(scenes: &'a [Scene], mask: &'a AgentsMask, raster: RasterConfig, stride: usize) -> Result<Self> {
        raster.validate()?;
        if stride == 0 {
            return Err(Error::invalid("sample stride must be positive"));
        }
        let (h, t) = (raster.history_frames, raster.future_frames);
        let mut anchors = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            let mut f = h;
            while f + t < scene.frames.len() {
                anchors.push((s, f));
                f += stride;
            }
        }
        Ok(Dataset {
            scenes,
            mask,
            raster,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn raster_config(&self) -> &RasterConfig {
        &self.raster
    }

    /// `(scene id, frame index)` of sample `i`.
    pub fn anchor(&self, i: usize) -> (&str, usize) {
        let (s, f) = self.anchors[i];
        (&self.scenes[s].id, f)
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let (s, f) = self.anchors[i];
        rasterize(&self.scenes[s], f, &self.raster, self.mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub eval_fraction: f64,
    /// Distance in frames between consecutive anchors of one scene.
    pub sample_stride: usize,
    /// Raster settings; the pixel count is replaced by the model resolution.
    pub raster: RasterConfig,
    /// Checkpoints, logs and reports go here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            optimizer: OptimizerKind::Radam,
            eval_fraction: 0.2,
            sample_stride: 10,
            raster: RasterConfig::default(),
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.sample_stride == 0 {
            return Err(Error::invalid("sample stride must be positive"));
        }
        self.raster.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub ade: f64,
    pub fde: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean batch loss over the epoch's optimizer steps.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub ade: f64,
    pub fde: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the training set before the first step.
    pub initial_train_loss: f64,
    pub rows: Vec<EpochRow>,
    pub steps: u64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Row-per-epoch CSV. Wall time is left out so identical runs give
    /// identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_loss,ade,fde\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.eval_loss, r.ade, r.fde);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("initial train loss {:.6}\n", self.initial_train_loss);
        let _ = writeln!(
            s,
            "{:>5}  {:>12}  {:>12}  {:>10}  {:>10}  {:>8}",
            "epoch", "train_loss", "eval_loss", "ade", "fde", "wall_s"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5}  {:>12.6}  {:>12.6}  {:>10.4}  {:>10.4}  {:>8.2}",
                r.epoch, r.train_loss, r.eval_loss, r.ade, r.fde, r.wall_s
            );
        }
        if let Some(p) = &self.final_checkpoint {
            let _ = writeln!(s, "final checkpoint {}", p.display());
        }
        s
    }
}

/// Ground truth for a sample.
pub fn ground_truth(sample: &Sample) -> Result<GroundTruth> {
    GroundTruth::new(sample.target.clone(), sample.availability.clone())
}

/// Mean NLL, ADE and FDE of `model` over `data`, in batches of `batch_size`.
pub fn evaluate_dataset(model: &HybridModel, data: &Dataset<'_>, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::NoSamples("evaluation set yields no samples".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut nll, mut sum_ade, mut sum_fde) = (0.0, 0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let samples = chunk.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
        let rasters: Vec<_> = samples.iter().map(|s| &s.raster).collect();
        let mut g = Graph::new();
        let preds = model.forward(&mut g, &rasters)?;
        for (p, s) in preds.iter().zip(&samples) {
            let gt = ground_truth(s)?;
            let l = nll_loss(&mut g, p, &gt)?;
            nll += g.value(l).item()?;
            let tp = TrajectoryPrediction::from_vars(&g, p)?;
            sum_ade += ade(&tp, &gt)?;
            sum_fde += fde(&tp, &gt)?;
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        nll: nll / n,
        ade: sum_ade / n,
        fde: sum_fde / n,
        samples: data.len(),
    })
}

/// Evaluates `model` on `scenes` with the raster settings and stride of `cfg`.
pub fn evaluate(model: &HybridModel, scenes: &[Scene], mask: &AgentsMask, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let raster = model.raster_config(&cfg.raster)?;
    let data = Dataset::new(scenes, mask, raster, cfg.sample_stride)?;
    evaluate_dataset(model, &data, cfg.batch_size)
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-{epoch:03}.ckpt"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sample order for `epoch`, seeded independently per epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Gradient step on one batch: forward, mean NLL, backward, optimizer update.
/// Returns the batch loss; parameters are left untouched when it is not finite.
pub fn train_step(model: &mut HybridModel, optimizer: &mut Optimizer, samples: &[Sample]) -> Result<f64> {
    let rasters: Vec<_> = samples.iter().map(|s| &s.raster).collect();
    let gts = samples.iter().map(ground_truth).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let preds = model.forward(&mut g, &rasters)?;
    let loss = batch_nll(&mut g, &preds, &gts)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&g);
    optimizer.step(&mut model.params)?;
    Ok(value)
}

/// Trains on `train_scenes`, evaluating on `eval_scenes` after each epoch.
///
/// Log lines `epoch {e} step {s} loss {l}` go to `log`. With an output
/// directory, writes `checkpoint-000.ckpt` before training, one checkpoint
/// per epoch, `report.txt` and `report.csv`. A non-finite batch loss aborts
/// with [`Error::NonFiniteLoss`] after recording the batch in `nan_abort.txt`.
pub fn train(
    cfg: &TrainConfig,
    model: &mut HybridModel,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    mask: &AgentsMask,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    let raster = model.raster_config(&cfg.raster)?;
    let train_set = Dataset::new(train_scenes, mask, raster.clone(), cfg.sample_stride)?;
    let eval_set = Dataset::new(eval_scenes, mask, raster.clone(), cfg.sample_stride)?;
    if train_set.is_empty() {
        return Err(Error::NoSamples("training set yields no samples".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params)?;
    let dir = cfg.out_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        save_checkpoint(&checkpoint_path(d, 0), model, Some(&optimizer), &raster)?;
    }
    let log_err = |e| Error::io("writing training log".to_string(), e);

    let mut report = TrainReport {
        initial_train_loss: evaluate_dataset(model, &train_set, cfg.batch_size)?.nll,
        rows: Vec::new(),
        steps: 0,
        final_checkpoint: dir.map(|d| checkpoint_path(d, 0)),
    };

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut losses = Vec::new();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk.iter().map(|&i| train_set.sample(i)).collect::<Result<Vec<_>>>()?;
            let loss = train_step(model, &mut optimizer, &samples)?;
            if !loss.is_finite() {
                if let Some(d) = dir {
                    let mut s = format!("epoch {epoch}\nbatch {batch}\nloss {loss}\n");
                    for &i in chunk {
                        let (scene, frame) = train_set.anchor(i);
                        let _ = writeln!(s, "sample {scene} {frame}");
                    }
                    write_file(&d.join("nan_abort.txt"), &s)?;
                }
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            report.steps += 1;
            writeln!(log, "epoch {epoch:>3} step {:>5} loss {loss:.6}", report.steps).map_err(log_err)?;
            losses.push(loss);
        }
        let metrics = if eval_set.is_empty() {
            EvalMetrics {
                nll: f64::NAN,
                ade: f64::NAN,
                fde: f64::NAN,
                samples: 0,
            }
        } else {
            evaluate_dataset(model, &eval_set, cfg.batch_size)?
        };
        if let Some(d) = dir {
            let path = checkpoint_path(d, epoch);
            save_checkpoint(&path, model, Some(&optimizer), &raster)?;
            report.final_checkpoint = Some(path);
        }
        report.rows.push(EpochRow {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            eval_loss: metrics.nll,
            ade: metrics.ade,
            fde: metrics.fde,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }

    if let Some(d) = dir {
        write_file(&d.join("report.txt"), &report.to_table())?;
        write_file(&d.join("report.csv"), &report.to_csv())?;
    }
    Ok(report)
}

/// Grid search over scaling coefficients. Each feasible point builds a model
/// from `seed`, trains it for `cfg.epochs` on `train_scenes` and scores
/// `-(mean eval NLL)`.
#[allow(clippy::too_many_arguments)]
pub fn scale_search(
    base: &BaseArchitecture,
    head: HeadConfig,
    grid: &GridSpec,
    tol: f64,
    cfg: &TrainConfig,
    seed: u64,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    mask: &AgentsMask,
) -> Result<GridSearchReport> {
    let cfg = TrainConfig {
        out_dir: None,
        ..cfg.clone()
    };
    grid_search(base, grid, tol, |_, coeffs| {
        let spec = ModelSpec {
            base: base.clone(),
            coeffs: *coeffs,
            head,
            tolerance: tol,
        };
        let mut model = HybridModel::build(spec, seed)?;
        train(&cfg, &mut model, train_scenes, &[], mask, &mut std::io::sink())?;
        Ok(-evaluate(&model, eval_scenes, mask, &cfg)?.nll)
    })
}
