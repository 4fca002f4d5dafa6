//! Compound scaling of depth, width and input resolution.
//!
//! Depth, width and resolution multipliers are `alpha^phi`, `beta^phi` and
//! `gamma^phi`, with the base coefficients constrained so that
//! `alpha * beta^2 * gamma^2` stays close to 2. The coefficients themselves
//! come from a grid search at `phi = 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance on `|alpha*beta^2*gamma^2 - 2|`.
pub const DEFAULT_CONSTRAINT_TOL: f64 = 0.1;
pub const DEFAULT_GRID_STEP: f64 = 0.05;

/// Channel counts are rounded up to a multiple of this.
pub const CHANNEL_MULTIPLE: usize = 8;
/// Input resolution is rounded up to a multiple of this.
pub const RESOLUTION_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl ScalingCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Result<Self> {
        let c = ScalingCoefficients {
            alpha,
            beta,
            gamma,
            phi,
        };
        c.validate()?;
        Ok(c)
    }

    /// Coefficients that leave any architecture unchanged.
    pub fn identity() -> Self {
        ScalingCoefficients {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            phi: 0.0,
        }
    }

    /// `(1.2, 1.1, 1.15)` at `phi = 0`: feasible at the default tolerance.
    pub fn balanced() -> Self {
        ScalingCoefficients {
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            phi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 1, got {v}")));
            }
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::invalid(format!("phi must be finite and >= 0, got {}", self.phi)));
        }
        Ok(())
    }

    pub fn with_phi(self, phi: f64) -> Self {
        ScalingCoefficients { phi, ..self }
    }

    /// `alpha * beta^2 * gamma^2`.
    pub fn product(&self) -> f64 {
        self.alpha * self.beta * self.beta * self.gamma * self.gamma
    }

    pub fn constraint_residual(&self) -> f64 {
        (self.product() - 2.0).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingMultipliers {
    pub depth: f64,
    pub width: f64,
    pub resolution: f64,
}

impl ScalingMultipliers {
    pub const IDENTITY: ScalingMultipliers = ScalingMultipliers {
        depth: 1.0,
        width: 1.0,
        resolution: 1.0,
    };
}

pub fn derive_multipliers(c: &ScalingCoefficients) -> ScalingMultipliers {
    ScalingMultipliers {
        depth: c.alpha.powf(c.phi),
        width: c.beta.powf(c.phi),
        resolution: c.gamma.powf(c.phi),
    }
}

/// True iff `|alpha*beta^2*gamma^2 - 2| <= tol`.
pub fn check_constraint(c: &ScalingCoefficients, tol: f64) -> bool {
    c.constraint_residual() <= tol
}

/// The unscaled network: per-stage block counts and channels, input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseArchitecture {
    pub stage_layers: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub input_resolution: usize,
    /// Raster channels fed to the stem.
    pub input_channels: usize,
}

impl BaseArchitecture {
    pub fn new(
        stage_layers: Vec<usize>,
        stage_channels: Vec<usize>,
        input_resolution: usize,
        input_channels: usize,
    ) -> Result<Self> {
        let arch = BaseArchitecture {
            stage_layers,
            stage_channels,
            input_resolution,
            input_channels,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Four stages of two blocks, 16→128 channels, 64 px, 11 raster channels.
    pub fn default_base() -> Self {
        BaseArchitecture {
            stage_layers: vec![2, 2, 2, 2],
            stage_channels: vec![16, 32, 64, 128],
            input_resolution: 64,
            input_channels: 11,
        }
    }

    /// The smallest configuration used for gradient checks and smoke tests.
    pub fn tiny(input_channels: usize) -> Self {
        BaseArchitecture {
            stage_layers: vec![1, 1],
            stage_channels: vec![8, 8],
            input_resolution: 32,
            input_channels,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_layers.len()
    }

    /// The stem and every stage after the first halve the spatial size.
    pub fn striding_layers(&self) -> usize {
        self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_layers.is_empty() || self.stage_layers.len() != self.stage_channels.len() {
            return Err(Error::invalid(format!(
                "stage lists must be non-empty and equal length, got {} layers and {} channels",
                self.stage_layers.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_layers.contains(&0) || self.input_channels == 0 {
            return Err(Error::invalid("stage layers and input channels must be positive"));
        }
        if let Some(c) = self
            .stage_channels
            .iter()
            .find(|&&c| c == 0 || !c.is_multiple_of(CHANNEL_MULTIPLE))
        {
            return Err(Error::invalid(format!(
                "stage channels must be positive multiples of {CHANNEL_MULTIPLE}, got {c}"
            )));
        }
        let divisor = 1usize << self.striding_layers();
        if self.input_resolution == 0
            || !self.input_resolution.is_multiple_of(RESOLUTION_MULTIPLE)
            || !self.input_resolution.is_multiple_of(divisor)
        {
            return Err(Error::invalid(format!(
                "input resolution {} must be a positive multiple of {RESOLUTION_MULTIPLE} and of 2^{}",
                self.input_resolution,
                self.striding_layers()
            )));
        }
        Ok(())
    }

    /// Σ layers·channels²·(resolution/2^stage)².
    pub fn flops_proxy(&self) -> f64 {
        self.stage_layers
            .iter()
            .zip(&self.stage_channels)
            .enumerate()
            .map(|(i, (&l, &c))| {
                let spatial = self.input_resolution as f64 / (1u64 << i) as f64;
                l as f64 * (c * c) as f64 * spatial * spatial
            })
            .sum()
    }
}

fn round_up_to(value: usize, multiple: usize) -> usize {
    value.div_ceil(multiple) * multiple
}

/// `ceil` that ignores representation noise just above an integer.
fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Scales every stage: layers by `ceil(d·l)`, channels by `round(w·c)` up to
/// a multiple of 8, resolution by `round(r·res)` up to a multiple of 32.
pub fn apply_scaling(base: &BaseArchitecture, m: &ScalingMultipliers) -> Result<BaseArchitecture> {
    for (name, v) in [("depth", m.depth), ("width", m.width), ("resolution", m.resolution)] {
        if !(v >= 1.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} multiplier must be >= 1, got {v}")));
        }
    }
    let scaled = BaseArchitecture {
        stage_layers: base
            .stage_layers
            .iter()
            .map(|&l| ceil_tolerant(m.depth * l as f64).max(1))
            .collect(),
        stage_channels: base
            .stage_channels
            .iter()
            .map(|&c| round_up_to((m.width * c as f64).round() as usize, CHANNEL_MULTIPLE).max(CHANNEL_MULTIPLE))
            .collect(),
        input_resolution: round_up_to(
            (m.resolution * base.input_resolution as f64).round() as usize,
            RESOLUTION_MULTIPLE,
        ),
        input_channels: base.input_channels,
    };
    scaled.validate()?;
    Ok(scaled)
}

/// Grid bounds for the coefficient search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn new(step: f64) -> Result<Self> {
        let g = GridSpec {
            lower: 1.0,
            upper: 2.0,
            step,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.lower >= 1.0) || !(self.upper >= self.lower) {
            return Err(Error::invalid(format!(
                "grid needs step > 0 and 1 <= lower <= upper, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `lower, lower+step, …` up to `upper`, computed as `lower + i·step`.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.upper - self.lower) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lower + i as f64 * self.step).collect()
    }

    pub fn cardinality(&self) -> usize {
        self.values().len().pow(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub coeffs: ScalingCoefficients,
    pub product: f64,
    /// `None` for points that violate the constraint and were not scored.
    pub score: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchReport {
    pub best: ScalingCoefficients,
    pub best_score: f64,
    pub rows: Vec<GridRow>,
    pub tolerance: f64,
}

impl GridSearchReport {
    /// CSV with one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,gamma,product,score,feasible\n");
        for r in &self.rows {
            let score = r.score.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.coeffs.alpha, r.coeffs.beta, r.coeffs.gamma, r.product, score, r.feasible
            );
        }
        s
    }
}

/// Searches `alpha, beta, gamma` over `grid` at `phi = 1`, keeping points
/// within `tol` of the constraint and maximising `evaluate`. Ties go to the
/// lexicographically smallest triple; NaN scores never win.
pub fn grid_search<F>(base: &BaseArchitecture, grid: &GridSpec, tol: f64, mut evaluate: F) -> Result<GridSearchReport>
where
    F: FnMut(&BaseArchitecture, &ScalingCoefficients) -> Result<f64>,
{
    grid.validate()?;
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let values = grid.values();
    let mut rows = Vec::with_capacity(values.len().pow(3));
    let mut best: Option<(ScalingCoefficients, f64)> = None;
    for &alpha in &values {
        for &beta in &values {
            for &gamma in &values {
                let coeffs = ScalingCoefficients {
                    alpha,
                    beta,
                    gamma,
                    phi: 1.0,
                };
                let feasible = check_constraint(&coeffs, tol);
                let score = if feasible {
                    let scaled = apply_scaling(base, &derive_multipliers(&coeffs))?;
                    Some(evaluate(&scaled, &coeffs)?)
                } else {
                    None
                };
                if let Some(s) = score.filter(|s| !s.is_nan()) {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((coeffs, s));
                    }
                }
                rows.push(GridRow {
                    coeffs,
                    product: coeffs.product(),
                    score,
                    feasible,
                });
            }
        }
    }
    let (best, best_score) = best.ok_or(Error::EmptyGrid { tolerance: tol })?;
    Ok(GridSearchReport {
        best,
        best_score,
        rows,
        tolerance: tol,
    })
}
