//! Residual backbone sized by compound scaling, with a multimodal
//! trajectory head.
//!
//! Layout: a 3×3 stride-2 stem, one residual stage per scaled stage (the
//! first at stride 1, the rest at stride 2), global average pooling, and a
//! dense layer producing `K·T·2` coordinates followed by `K` logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{PredictionVars, TrajectoryPrediction};
use crate::nn::{conv_param_count, make_stage, stage_forward, stage_param_count, Activation, ConvBlock, ResidualBlock};
use crate::scaling::{apply_scaling, check_constraint, derive_multipliers, BaseArchitecture, ScalingCoefficients};
use crate::scene::RasterConfig;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Number of hypotheses `K`.
    pub modes: usize,
    /// Future steps `T`.
    pub horizon: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { modes: 3, horizon: 16 }
    }
}

impl HeadConfig {
    pub fn output_len(&self) -> usize {
        self.modes * self.horizon * 2 + self.modes
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub base: BaseArchitecture,
    pub coeffs: ScalingCoefficients,
    pub head: HeadConfig,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    spec: ModelSpec,
    arch: BaseArchitecture,
    pub params: ParamStore,
    stem: ConvBlock,
    stages: Vec<Vec<ResidualBlock>>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Stride of stage `i`.
fn stage_stride(i: usize) -> usize {
    if i == 0 {
        1
    } else {
        2
    }
}

impl HybridModel {
    /// Builds the scaled network with parameters drawn from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.base.validate()?;
        spec.coeffs.validate()?;
        if !check_constraint(&spec.coeffs, spec.tolerance) {
            return Err(Error::Constraint {
                product: spec.coeffs.product(),
                tolerance: spec.tolerance,
            });
        }
        if spec.head.modes == 0 || spec.head.horizon == 0 {
            return Err(Error::invalid("head needs K >= 1 and T >= 1"));
        }
        let arch = apply_scaling(&spec.base, &derive_multipliers(&spec.coeffs))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c0 = arch.stage_channels[0];
        let stem = ConvBlock::new(
            &mut params,
            "stem",
            arch.input_channels,
            c0,
            3,
            2,
            1,
            Activation::Relu,
            &mut rng,
        )?;
        let mut stages = Vec::with_capacity(arch.num_stages());
        let mut cin = c0;
        for (i, (&layers, &cout)) in arch.stage_layers.iter().zip(&arch.stage_channels).enumerate() {
            stages.push(make_stage(
                &mut params,
                &format!("stage{i}"),
                layers,
                cin,
                cout,
                stage_stride(i),
                &mut rng,
            )?);
            cin = cout;
        }
        let out = spec.head.output_len();
        let bound = (1.0 / cin as f64).sqrt();
        let head_weight = params.add("head.weight", Tensor::uniform(&[cin, out], -bound, bound, &mut rng));
        let head_bias = params.add("head.bias", Tensor::uniform(&[out], -bound, bound, &mut rng));

        Ok(HybridModel {
            spec,
            arch,
            params,
            stem,
            stages,
            head_weight,
            head_bias,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// The architecture after scaling.
    pub fn architecture(&self) -> &BaseArchitecture {
        &self.arch
    }

    pub fn head(&self) -> HeadConfig {
        self.spec.head
    }

    pub fn input_resolution(&self) -> usize {
        self.arch.input_resolution
    }

    pub fn input_channels(&self) -> usize {
        self.arch.input_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn flops_proxy(&self) -> f64 {
        self.arch.flops_proxy()
    }

    /// Zeroes the dense head so every hypothesis is at the origin with
    /// uniform confidence.
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.head_weight).data_mut().fill(0.0);
        self.params.get_mut(self.head_bias).data_mut().fill(0.0);
    }

    /// Raster settings matching this model: `template` with the pixel count
    /// replaced by the model resolution, keeping the metric field of view.
    pub fn raster_config(&self, template: &RasterConfig) -> Result<RasterConfig> {
        if template.channels() != self.input_channels() {
            return Err(Error::shape(format!(
                "raster with {} history frames gives {} channels, model expects {}",
                template.history_frames,
                template.channels(),
                self.input_channels()
            )));
        }
        if template.future_frames != self.spec.head.horizon {
            return Err(Error::shape(format!(
                "raster future horizon {} differs from head horizon {}",
                template.future_frames, self.spec.head.horizon
            )));
        }
        let field = template.size_px as f64 * template.resolution;
        let size = self.input_resolution();
        Ok(RasterConfig {
            size_px: size,
            resolution: field / size as f64,
            ..template.clone()
        })
    }

    /// Head output `[N, K·T·2 + K]` for input `[N, C, S, S]`.
    pub fn forward_raw(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let (c, s) = (self.input_channels(), self.input_resolution());
        match g.value(input).shape() {
            [_, ch, h, w] if *ch == c && *h == s && *w == s => {}
            other => {
                return Err(Error::shape(format!(
                    "model expects input [N, {c}, {s}, {s}], received {other:?}"
                )))
            }
        }
        let mut x = self.stem.forward(g, &self.params, input)?;
        for stage in &self.stages {
            x = stage_forward(stage, g, &self.params, x)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let w = g.param(&self.params, self.head_weight);
        let b = g.param(&self.params, self.head_bias);
        let y = g.matmul(pooled, w)?;
        g.add(y, b)
    }

    /// Forward pass over a batch of `[C, S, S]` rasters.
    pub fn forward(&self, g: &mut Graph, rasters: &[&Tensor]) -> Result<Vec<PredictionVars>> {
        if rasters.is_empty() {
            return Err(Error::invalid("forward needs at least one raster"));
        }
        let (c, s) = (self.input_channels(), self.input_resolution());
        let mut data = Vec::with_capacity(rasters.len() * c * s * s);
        for r in rasters {
            if r.shape() != [c, s, s] {
                return Err(Error::shape(format!(
                    "model expects raster [{c}, {s}, {s}], received {:?}",
                    r.shape()
                )));
            }
            data.extend_from_slice(r.data());
        }
        let input = g.constant(Tensor::new(vec![rasters.len(), c, s, s], data)?);
        let out = self.forward_raw(g, input)?;
        split_head_output(g, out, self.spec.head)
    }

    /// Detached prediction for a single raster.
    pub fn predict(&self, raster: &Tensor) -> Result<TrajectoryPrediction> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &[raster])?;
        TrajectoryPrediction::from_vars(&g, &vars[0])
    }

    /// Closed-form parameter count for `spec`.
    pub fn expected_parameter_count(spec: &ModelSpec) -> Result<usize> {
        let arch = apply_scaling(&spec.base, &derive_multipliers(&spec.coeffs))?;
        let c0 = arch.stage_channels[0];
        let mut total = conv_param_count(arch.input_channels, c0, 3);
        let mut cin = c0;
        for (i, (&l, &c)) in arch.stage_layers.iter().zip(&arch.stage_channels).enumerate() {
            total += stage_param_count(l, cin, c, stage_stride(i));
            cin = c;
        }
        let out = spec.head.output_len();
        Ok(total + cin * out + out)
    }
}

/// Splits `[N, K·T·2 + K]` into per-sample hypotheses `[K, T, 2]` and
/// logits `[K]`.
pub fn split_head_output(g: &mut Graph, out: Var, head: HeadConfig) -> Result<Vec<PredictionVars>> {
    let len = head.output_len();
    let n = match g.value(out).shape() {
        [n, l] if *l == len => *n,
        other => {
            return Err(Error::shape(format!(
                "head output must be [N, {len}], received {other:?}"
            )))
        }
    };
    let coords = head.modes * head.horizon * 2;
    (0..n)
        .map(|i| {
            let row = g.narrow(out, 0, i, 1)?;
            let row = g.reshape(row, &[len])?;
            let hyp = g.narrow(row, 0, 0, coords)?;
            let hypotheses = g.reshape(hyp, &[head.modes, head.horizon, 2])?;
            let logits = g.narrow(row, 0, coords, head.modes)?;
            Ok(PredictionVars { hypotheses, logits })
        })
        .collect()
}
