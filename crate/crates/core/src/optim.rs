//! Rectified Adam and plain SGD over parameter tensors.
//!
//! Both optimizers read the gradient stored on each tensor. A tensor without
//! a gradient (it took no part in the last backward pass) is treated as
//! having a zero gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RadamConfig {
    pub fn with_lr(lr: f64) -> Self {
        RadamConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid RAdam hyperparameters {self:?}")))
        }
    }

    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// `ρₜ` for step `t ≥ 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powf(t as f64);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Whether step `t` takes the variance-rectified branch.
    pub fn is_rectified(&self, t: u64) -> bool {
        self.rho(t) > 4.0
    }

    /// Rectification factor `rₜ`; only meaningful when [`Self::is_rectified`].
    pub fn rectification(&self, t: u64) -> f64 {
        let (ri, rt) = (self.rho_inf(), self.rho(t));
        (((rt - 4.0) * (rt - 2.0) * ri) / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt()
    }
}

impl Default for RadamConfig {
    fn default() -> Self {
        RadamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments and step counter for [`radam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: RadamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn new(config: RadamConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Rebuilds a state from stored parts.
    pub fn from_parts(config: RadamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("first and second moments differ in shape"));
        }
        Ok(OptimizerState { config, step, m, v })
    }

    pub fn config(&self) -> &RadamConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    fn check(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, m)) in params.iter().zip(&self.m).enumerate() {
            if p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "parameter {i} has shape {:?}, optimizer state has {:?}",
                    p.shape(),
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One RAdam update of every tensor in `params`.
pub fn radam_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let t = state.step;
    let c = state.config;
    let bias1 = 1.0 - c.beta1.powf(t as f64);
    let bias2 = 1.0 - c.beta2.powf(t as f64);
    let rectified = c.is_rectified(t);
    let r = if rectified { c.rectification(t) } else { 0.0 };

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bias1;
            if rectified {
                let v_hat = v[i] / bias2;
                *x -= c.lr * r * m_hat / (v_hat.sqrt() + c.eps);
            } else {
                *x -= c.lr * m_hat;
            }
        }
    }
    Ok(())
}

/// `p ← p − lr·g` for every tensor in `params`.
pub fn sgd_step(params: &mut [Tensor], lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    for p in params.iter_mut() {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        if grad.len() != p.numel() {
            return Err(Error::shape(format!(
                "gradient has {} entries for a tensor of shape {:?}",
                grad.len(),
                p.shape()
            )));
        }
        for (x, g) in p.data_mut().iter_mut().zip(grad) {
            *x -= lr * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Radam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(OptimizerKind::Radam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(format!(
                "unknown optimizer `{other}` (expected radam or sgd)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Radam => "radam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Either optimizer behind one interface. SGD keeps a step count only.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Radam(OptimizerState),
    Sgd { lr: f64, step: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Result<Self> {
        match kind {
            OptimizerKind::Radam => {
                let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
                Ok(Optimizer::Radam(OptimizerState::new(
                    RadamConfig::with_lr(lr),
                    &tensors,
                )?))
            }
            OptimizerKind::Sgd => {
                if !(lr.is_finite() && lr >= 0.0) {
                    return Err(Error::invalid(format!("invalid learning rate {lr}")));
                }
                Ok(Optimizer::Sgd { lr, step: 0 })
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Radam(_) => OptimizerKind::Radam,
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Radam(s) => s.config.lr,
            Optimizer::Sgd { lr, .. } => *lr,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Radam(s) => s.step,
            Optimizer::Sgd { step, .. } => *step,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Radam(s) => radam_step(params.tensors_mut(), s),
            Optimizer::Sgd { lr, step } => {
                sgd_step(params.tensors_mut(), *lr)?;
                *step += 1;
                Ok(())
            }
        }
    }
}
