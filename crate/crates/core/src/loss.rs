//! Multimodal trajectory negative log-likelihood and displacement metrics.
//!
//! For hypotheses `k` with confidences `c = softmax(logits)` and squared
//! error `SSE_k = Σ_t [(x̄ₜᵏ − xₜ)² + (ȳₜᵏ − yₜ)²]` over available steps,
//!
//! ```text
//! L = −log Σ_k exp(log c_k − ½·SSE_k)
//!   = logsumexp(logits) − logsumexp(logits − ½·SSE)
//! ```
//!
//! The second form is what gets evaluated: it is exactly zero when every
//! SSE is zero.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles for one sample's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionVars {
    /// `K × T × 2`.
    pub hypotheses: Var,
    /// `K`.
    pub logits: Var,
}

/// Detached prediction: `modes × horizon × 2` coordinates and `modes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrediction {
    pub modes: usize,
    pub horizon: usize,
    pub hypotheses: Vec<f64>,
    pub confidence_logits: Vec<f64>,
}

impl TrajectoryPrediction {
    pub fn new(modes: usize, horizon: usize, hypotheses: Vec<f64>, confidence_logits: Vec<f64>) -> Result<Self> {
        if modes == 0 || horizon == 0 {
            return Err(Error::invalid("prediction needs K >= 1 and T >= 1"));
        }
        if hypotheses.len() != modes * horizon * 2 || confidence_logits.len() != modes {
            return Err(Error::shape(format!(
                "prediction with K={modes}, T={horizon} needs {} coordinates and {modes} logits, got {} and {}",
                modes * horizon * 2,
                hypotheses.len(),
                confidence_logits.len()
            )));
        }
        Ok(TrajectoryPrediction {
            modes,
            horizon,
            hypotheses,
            confidence_logits,
        })
    }

    pub fn point(&self, mode: usize, t: usize) -> [f64; 2] {
        let i = (mode * self.horizon + t) * 2;
        [self.hypotheses[i], self.hypotheses[i + 1]]
    }

    pub fn trajectory(&self, mode: usize) -> Vec<[f64; 2]> {
        (0..self.horizon).map(|t| self.point(mode, t)).collect()
    }

    /// Softmax of the logits.
    pub fn confidences(&self) -> Vec<f64> {
        let m = self.confidence_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.confidence_logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    /// Index of the most confident mode (first on ties).
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (k, l) in self.confidence_logits.iter().enumerate() {
            if *l > self.confidence_logits[best] {
                best = k;
            }
        }
        best
    }

    /// Reads the values behind graph handles.
    pub fn from_vars(g: &Graph, vars: &PredictionVars) -> Result<Self> {
        let h = g.value(vars.hypotheses);
        let [modes, horizon, 2] = h.shape() else {
            return Err(Error::shape(format!("hypotheses must be K×T×2, got {:?}", h.shape())));
        };
        Self::new(
            *modes,
            *horizon,
            h.data().to_vec(),
            g.value(vars.logits).data().to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub positions: Vec<[f64; 2]>,
    pub availability: Vec<bool>,
}

impl GroundTruth {
    pub fn new(positions: Vec<[f64; 2]>, availability: Vec<bool>) -> Result<Self> {
        if positions.len() != availability.len() {
            return Err(Error::shape(format!(
                "ground truth has {} positions but {} availability flags",
                positions.len(),
                availability.len()
            )));
        }
        Ok(GroundTruth {
            positions,
            availability,
        })
    }

    pub fn fully_available(positions: Vec<[f64; 2]>) -> Self {
        let n = positions.len();
        GroundTruth {
            positions,
            availability: vec![true; n],
        }
    }

    pub fn horizon(&self) -> usize {
        self.positions.len()
    }

    pub fn any_available(&self) -> bool {
        self.availability.iter().any(|a| *a)
    }

    fn check(&self, modes: usize, horizon: usize) -> Result<()> {
        if modes == 0 {
            return Err(Error::invalid("prediction has no hypotheses (K = 0)"));
        }
        if horizon != self.horizon() || self.availability.len() != self.horizon() {
            return Err(Error::shape(format!(
                "prediction horizon {horizon} does not match ground truth horizon {}",
                self.horizon()
            )));
        }
        if !self.any_available() {
            return Err(Error::invalid("ground truth has no available timestep"));
        }
        Ok(())
    }
}

/// Negative log-likelihood of `gt` under the mixture `pred`, as a scalar
/// graph node differentiable in hypotheses and logits.
pub fn nll_loss(g: &mut Graph, pred: &PredictionVars, gt: &GroundTruth) -> Result<Var> {
    let (modes, horizon) = match g.value(pred.hypotheses).shape() {
        [k, t, 2] => (*k, *t),
        s => return Err(Error::shape(format!("hypotheses must be K×T×2, got {s:?}"))),
    };
    if g.value(pred.logits).shape() != [modes] {
        return Err(Error::shape(format!(
            "expected {modes} confidence logits, got shape {:?}",
            g.value(pred.logits).shape()
        )));
    }
    gt.check(modes, horizon)?;

    let mut target = Vec::with_capacity(horizon * 2);
    let mut weight = Vec::with_capacity(horizon * 2);
    for (p, &a) in gt.positions.iter().zip(&gt.availability) {
        let w = if a { 1.0 } else { 0.0 };
        // unavailable rows may hold garbage; keep them out of the arithmetic
        target.extend(if a { *p } else { [0.0, 0.0] });
        weight.extend([w, w]);
    }
    let target = g.constant(Tensor::new(vec![horizon, 2], target)?);
    let weight = g.constant(Tensor::new(vec![horizon, 2], weight)?);

    let diff = g.sub(pred.hypotheses, target)?;
    let diff = g.mul(diff, weight)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.reshape(sq, &[modes, horizon * 2])?;
    let sse = g.sum_axis(sq, 1)?;
    let half_sse = g.scale(sse, 0.5);
    let penalized = g.sub(pred.logits, half_sse)?;
    let normalizer = g.logsumexp(pred.logits, 0)?;
    let evidence = g.logsumexp(penalized, 0)?;
    g.sub(normalizer, evidence)
}

/// Mean of per-sample [`nll_loss`].
pub fn batch_nll(g: &mut Graph, preds: &[PredictionVars], gts: &[GroundTruth]) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::invalid("batch_nll needs a non-empty batch"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} predictions but {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = nll_loss(g, &preds[0], &gts[0])?;
    for (p, gt) in preds.iter().zip(gts).skip(1) {
        let l = nll_loss(g, p, gt)?;
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / preds.len() as f64))
}

/// Loss value for a detached prediction.
pub fn nll_value(pred: &TrajectoryPrediction, gt: &GroundTruth) -> Result<f64> {
    let mut g = Graph::new();
    let vars = PredictionVars {
        hypotheses: g.constant(Tensor::new(vec![pred.modes, pred.horizon, 2], pred.hypotheses.clone())?),
        logits: g.constant(Tensor::new(vec![pred.modes], pred.confidence_logits.clone())?),
    };
    let l = nll_loss(&mut g, &vars, gt)?;
    g.value(l).item()
}

fn displacements(pred: &TrajectoryPrediction, gt: &GroundTruth, mode: usize) -> Vec<f64> {
    (0..gt.horizon())
        .filter(|&t| gt.availability[t])
        .map(|t| {
            let p = pred.point(mode, t);
            (p[0] - gt.positions[t][0]).hypot(p[1] - gt.positions[t][1])
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average displacement of the most confident hypothesis over available steps.
pub fn ade(pred: &TrajectoryPrediction, gt: &GroundTruth) -> Result<f64> {
    gt.check(pred.modes, pred.horizon)?;
    Ok(mean(&displacements(pred, gt, pred.best_mode())))
}

/// Displacement of the most confident hypothesis at the last available step.
pub fn fde(pred: &TrajectoryPrediction, gt: &GroundTruth) -> Result<f64> {
    gt.check(pred.modes, pred.horizon)?;
    Ok(*displacements(pred, gt, pred.best_mode())
        .last()
        .expect("checked non-empty"))
}

/// Best-of-K average displacement.
pub fn min_ade(pred: &TrajectoryPrediction, gt: &GroundTruth) -> Result<f64> {
    gt.check(pred.modes, pred.horizon)?;
    Ok((0..pred.modes)
        .map(|k| mean(&displacements(pred, gt, k)))
        .fold(f64::INFINITY, f64::min))
}

/// Best-of-K final displacement.
pub fn min_fde(pred: &TrajectoryPrediction, gt: &GroundTruth) -> Result<f64> {
    gt.check(pred.modes, pred.horizon)?;
    Ok((0..pred.modes)
        .map(|k| *displacements(pred, gt, k).last().expect("checked non-empty"))
        .fold(f64::INFINITY, f64::min))
}
