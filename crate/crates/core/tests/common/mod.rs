//! Reference implementations shared by the integration tests. Nothing here
//! uses the crate's own kernels: the finite-difference checker only calls the
//! forward pass, the convolution and the loss are plain loops.

#![allow(dead_code, clippy::cloned_ref_to_slice_refs, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajkit::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding do not produce meaningless ratios.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Same as [`random_tensor`] but with every value at least `gap` away from
/// zero, keeping ReLU kinks out of finite-difference stencils.
pub fn random_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Evaluates `build` on `inputs` and reduces its output to a scalar with
/// fixed random weights.
fn weighted_output(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let y = g.mul(out, w).unwrap();
    g.sum(y)
}

/// Largest relative error between analytic and central-difference gradients
/// of `Σ wᵢ·build(inputs)ᵢ` over every element of every input.
pub fn max_grad_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let weights = random_tensor(&shape, &mut rng(0xfd));
    let loss = weighted_output(&mut g, out, &weights);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = weighted_output(&mut g, out, &weights);
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Direct cross-correlation with zero padding, one output element at a time.
pub fn naive_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
    let [n, c, h, w] = input.shape() else {
        panic!("input rank")
    };
    let [o, kc, kh, kw] = kernel.shape() else {
        panic!("kernel rank")
    };
    assert_eq!(c, kc);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..*n {
        for oc in 0..*o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..*c {
                        for ky in 0..*kh {
                            for kx in 0..*kw {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if iy < 0 || ix < 0 || iy >= *h as i64 || ix >= *w as i64 {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![*n, *o, oh, ow], out).unwrap()
}

/// `−log Σ_k softmax(logits)_k · exp(−½·SSE_k)` with scalar loops.
/// `hyp` is `K × T × 2` row-major.
pub fn nll_oracle(hyp: &[f64], logits: &[f64], gt: &[[f64; 2]], avail: &[bool]) -> f64 {
    let k = logits.len();
    let t = gt.len();
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits {
        z += (l - lmax).exp();
    }
    let log_z = lmax + z.ln();

    let mut terms = Vec::with_capacity(k);
    for m in 0..k {
        let mut sse = 0.0;
        for s in 0..t {
            if !avail[s] {
                continue;
            }
            let dx = hyp[(m * t + s) * 2] - gt[s][0];
            let dy = hyp[(m * t + s) * 2 + 1] - gt[s][1];
            sse += dx * dx + dy * dy;
        }
        terms.push(logits[m] - log_z - 0.5 * sse);
    }
    let tmax = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for v in &terms {
        acc += (v - tmax).exp();
    }
    -(tmax + acc.ln())
}

/// Worst finite-difference error for every differentiable tensor operation,
/// on small random inputs.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(42);
    let a23 = random_tensor(&[2, 3], &mut r);
    let b23 = random_tensor(&[2, 3], &mut r);
    let b3 = random_tensor(&[1, 3], &mut r);
    let m34 = random_tensor(&[3, 4], &mut r);
    let m42 = random_tensor(&[4, 2], &mut r);
    let img = random_tensor(&[2, 2, 5, 5], &mut r);
    let ker = random_tensor(&[3, 2, 3, 3], &mut r);
    let bias = random_tensor(&[2], &mut r);
    let kinked = random_away_from_zero(&[2, 3, 2], 0.05, &mut r);
    let wide = Tensor::uniform(&[3, 4], -4.0, 4.0, &mut r);

    vec![
        (
            "add",
            max_grad_error(&[a23.clone(), b23.clone()], |g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "add_broadcast",
            max_grad_error(&[a23.clone(), b3.clone()], |g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            max_grad_error(&[a23.clone(), b3.clone()], |g, v| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            max_grad_error(&[a23.clone(), b23.clone()], |g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "mul_broadcast",
            max_grad_error(&[a23.clone(), b3], |g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        ("scale", max_grad_error(&[a23.clone()], |g, v| g.scale(v[0], -2.5))),
        ("neg", max_grad_error(&[a23.clone()], |g, v| g.neg(v[0]))),
        (
            "matmul",
            max_grad_error(&[m34.clone(), m42], |g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "conv2d",
            max_grad_error(&[img.clone(), ker.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1).unwrap()),
        ),
        (
            "conv2d_strided",
            max_grad_error(&[img.clone(), ker], |g, v| g.conv2d(v[0], v[1], 2, 0).unwrap()),
        ),
        (
            "add_channel_bias",
            max_grad_error(&[img.clone(), bias], |g, v| g.add_channel_bias(v[0], v[1]).unwrap()),
        ),
        ("relu", max_grad_error(&[kinked.clone()], |g, v| g.relu(v[0]))),
        (
            "global_avg_pool",
            max_grad_error(&[img], |g, v| g.global_avg_pool(v[0]).unwrap()),
        ),
        (
            "reshape",
            max_grad_error(&[kinked.clone()], |g, v| g.reshape(v[0], &[3, 4]).unwrap()),
        ),
        (
            "narrow",
            max_grad_error(&[kinked.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap()),
        ),
        (
            "sum",
            max_grad_error(&[a23.clone()], |g, v| {
                let s = g.sum(v[0]);
                g.reshape(s, &[1]).unwrap()
            }),
        ),
        (
            "mean",
            max_grad_error(&[a23.clone()], |g, v| {
                let s = g.mean(v[0]);
                g.reshape(s, &[1]).unwrap()
            }),
        ),
        (
            "sum_axis",
            max_grad_error(&[kinked.clone()], |g, v| g.sum_axis(v[0], 1).unwrap()),
        ),
        (
            "logsumexp",
            max_grad_error(&[wide.clone()], |g, v| g.logsumexp(v[0], 1).unwrap()),
        ),
        (
            "logsumexp_axis0",
            max_grad_error(&[wide.clone()], |g, v| g.logsumexp(v[0], 0).unwrap()),
        ),
        (
            "softmax",
            max_grad_error(&[wide.clone()], |g, v| g.softmax(v[0], 1).unwrap()),
        ),
        (
            "log_softmax",
            max_grad_error(&[wide], |g, v| g.log_softmax(v[0], 1).unwrap()),
        ),
        (
            "composite",
            max_grad_error(&[m34, a23], |g, v| {
                let t = g.reshape(v[1], &[2, 3]).unwrap();
                let p = g.matmul(t, v[0]).unwrap();
                let s = g.log_softmax(p, 1).unwrap();
                g.mul(s, p).unwrap()
            }),
        ),
    ]
}

/// A random loss instance: `K ≤ max_k`, `T ≤ max_t`, hypotheses and ground
/// truth within ±`spread` meters, some unavailable steps.
#[derive(Debug, Clone)]
pub struct LossCase {
    pub hyp: Vec<f64>,
    pub logits: Vec<f64>,
    pub gt: Vec<[f64; 2]>,
    pub avail: Vec<bool>,
}

impl LossCase {
    pub fn random(r: &mut ChaCha8Rng, max_k: usize, max_t: usize, spread: f64) -> Self {
        let k = r.gen_range(1..=max_k);
        let t = r.gen_range(1..=max_t);
        let hyp = (0..k * t * 2).map(|_| r.gen_range(-spread..spread)).collect();
        let logits = (0..k).map(|_| r.gen_range(-3.0..3.0)).collect();
        let gt = (0..t)
            .map(|_| [r.gen_range(-spread..spread), r.gen_range(-spread..spread)])
            .collect();
        let mut avail: Vec<bool> = (0..t).map(|_| r.gen_bool(0.85)).collect();
        let keep = r.gen_range(0..t);
        avail[keep] = true;
        LossCase { hyp, logits, gt, avail }
    }

    pub fn modes(&self) -> usize {
        self.logits.len()
    }

    pub fn horizon(&self) -> usize {
        self.gt.len()
    }

    pub fn prediction(&self) -> trajkit::loss::TrajectoryPrediction {
        trajkit::loss::TrajectoryPrediction::new(self.modes(), self.horizon(), self.hyp.clone(), self.logits.clone())
            .unwrap()
    }

    pub fn ground_truth(&self) -> trajkit::loss::GroundTruth {
        trajkit::loss::GroundTruth::new(self.gt.clone(), self.avail.clone()).unwrap()
    }

    pub fn oracle(&self) -> f64 {
        nll_oracle(&self.hyp, &self.logits, &self.gt, &self.avail)
    }

    pub fn loss(&self) -> f64 {
        trajkit::loss::nll_value(&self.prediction(), &self.ground_truth()).unwrap()
    }

    /// Same case with modes reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let t = self.horizon();
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.logits[dst] = self.logits[src];
            out.hyp[dst * t * 2..(dst + 1) * t * 2].copy_from_slice(&self.hyp[src * t * 2..(src + 1) * t * 2]);
        }
        out
    }
}

/// FLOPs-proxy growth per unit φ on the default base, for triples whose
/// product is 2 (one step of φ) and for the balanced triple (geometric mean
/// over φ = 0..8, which averages out channel and resolution rounding).
pub fn flops_ratios_per_phi() -> Vec<(String, f64)> {
    use trajkit::scaling::{apply_scaling, derive_multipliers, BaseArchitecture, ScalingCoefficients};
    let base = BaseArchitecture::default_base();
    let flops = |c: ScalingCoefficients| apply_scaling(&base, &derive_multipliers(&c)).unwrap().flops_proxy();
    let mut out = Vec::new();
    let s2 = 2f64.sqrt();
    for (a, b, g) in [(2.0, 1.0, 1.0), (1.0, s2, 1.0), (1.0, 1.0, s2)] {
        let c = ScalingCoefficients::new(a, b, g, 1.0).unwrap();
        out.push((format!("({a:.3},{b:.3},{g:.3})"), flops(c) / flops(c.with_phi(0.0))));
    }
    let c = ScalingCoefficients::balanced();
    let span = 8.0;
    out.push((
        "(1.2,1.1,1.15) mean".to_string(),
        (flops(c.with_phi(span)) / flops(c.with_phi(0.0))).powf(1.0 / span),
    ));
    out
}

/// Scalar RAdam with β = (0.9, 0.999), ε = 1e-8, written out per coordinate.
pub fn radam_oracle<G>(x0: &[f64], grad: G, lr: f64, steps: usize) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for t in 1..=steps {
        let g = grad(&x);
        let b1t = b1.powi(t as i32);
        let b2t = b2.powi(t as i32);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1t);
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                let v_hat = (v[i] / (1.0 - b2t)).sqrt();
                x[i] -= lr * r * m_hat / (v_hat + eps);
            } else {
                x[i] -= lr * m_hat;
            }
        }
    }
    x
}

/// Minimizes `½‖x‖²` from `x0` with the crate's RAdam; returns the iterate
/// after every step.
pub fn radam_quadratic(x0: &[f64], lr: f64, steps: usize) -> Vec<Vec<f64>> {
    use trajkit::optim::{radam_step, OptimizerState, RadamConfig};
    let mut params = vec![Tensor::from_slice(&[x0.len()], x0).unwrap()];
    let mut state = OptimizerState::new(RadamConfig::with_lr(lr), &params).unwrap();
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = params[0].data().to_vec();
        params[0].zero_grad();
        params[0].accumulate_grad(&g);
        radam_step(&mut params, &mut state).unwrap();
        path.push(params[0].data().to_vec());
    }
    path
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Tiny model (two single-block stages of 8 channels at 32 px) with a
/// `modes × horizon` head for rasters with `history` past frames.
pub fn tiny_model(history: usize, modes: usize, horizon: usize, seed: u64) -> trajkit::model::HybridModel {
    use trajkit::model::{HeadConfig, HybridModel, ModelSpec};
    use trajkit::scaling::{BaseArchitecture, ScalingCoefficients, DEFAULT_CONSTRAINT_TOL};
    let spec = ModelSpec {
        base: BaseArchitecture::tiny(2 * history + 3),
        coeffs: ScalingCoefficients::balanced(),
        head: HeadConfig { modes, horizon },
        tolerance: DEFAULT_CONSTRAINT_TOL,
    };
    HybridModel::build(spec, seed).unwrap()
}

/// Raster settings for the tiny model: 32 px at 1 m/px.
pub fn tiny_raster(history: usize, horizon: usize) -> trajkit::scene::RasterConfig {
    trajkit::scene::RasterConfig {
        size_px: 32,
        resolution: 1.0,
        history_frames: history,
        future_frames: horizon,
        ..Default::default()
    }
}

/// One sample per synthetic scene, anchored at the first usable frame.
pub fn synthetic_samples(cfg: &trajkit::scene::RasterConfig, n: usize, seed: u64) -> Vec<trajkit::scene::Sample> {
    use trajkit::scene::{generate_synthetic, rasterize, AgentsMask, Motion};
    let motions = [Motion::ConstantVelocity, Motion::ConstantTurn, Motion::LaneChange];
    (0..n)
        .map(|i| {
            let scene = &generate_synthetic(seed + i as u64, 1, cfg.frames_required() + 2, motions[i % 3])[0];
            rasterize(scene, cfg.history_frames, cfg, &AgentsMask::new()).unwrap()
        })
        .collect()
}

fn batch_loss(model: &trajkit::model::HybridModel, samples: &[trajkit::scene::Sample]) -> (Graph, Var) {
    let mut g = Graph::new();
    let rasters: Vec<&Tensor> = samples.iter().map(|s| &s.raster).collect();
    let preds = model.forward(&mut g, &rasters).unwrap();
    let gts: Vec<_> = samples
        .iter()
        .map(|s| trajkit::train::ground_truth(s).unwrap())
        .collect();
    let loss = trajkit::loss::batch_nll(&mut g, &preds, &gts).unwrap();
    (g, loss)
}

/// Largest relative error between backpropagated and central-difference
/// gradients of the batch loss over every model parameter, and the number
/// of parameters checked.
pub fn model_gradient_error(
    model: &mut trajkit::model::HybridModel,
    samples: &[trajkit::scene::Sample],
) -> (f64, usize) {
    let (mut g, loss) = batch_loss(model, samples);
    g.backward(loss).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    let mut analytic: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; model.params.get(*id).numel()]).collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad.to_vec();
    }
    let eval = |m: &trajkit::model::HybridModel| {
        let (g, l) = batch_loss(m, samples);
        g.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for id in ids {
        for j in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(model);
            model.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(model);
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[id.index()][j], numeric));
            count += 1;
        }
    }
    (worst, count)
}

/// Trains the tiny model (K=3, T=16) with RAdam at lr 1e-3 on four fixed
/// samples, one from each of the first four scenes of the default
/// (constant-velocity) synthetic corpus; returns the batch loss before each
/// step.
pub fn overfit_tiny(steps: usize) -> Vec<f64> {
    use trajkit::optim::{Optimizer, OptimizerKind};
    use trajkit::scene::{generate_synthetic, rasterize, AgentsMask, Motion};
    let cfg = tiny_raster(4, 16);
    let scenes = generate_synthetic(0, 4, 50, Motion::ConstantVelocity);
    let samples: Vec<_> = scenes
        .iter()
        .map(|s| rasterize(s, cfg.history_frames, &cfg, &AgentsMask::new()).unwrap())
        .collect();
    let mut model = tiny_model(4, 3, 16, 0);
    let mut opt = Optimizer::new(OptimizerKind::Radam, 1e-3, &model.params).unwrap();
    (0..steps)
        .map(|_| trajkit::train::train_step(&mut model, &mut opt, &samples).unwrap())
        .collect()
}

/// A three-stage base small enough for multi-epoch runs in tests.
pub fn small_spec(modes: usize, horizon: usize) -> trajkit::model::ModelSpec {
    use trajkit::model::{HeadConfig, ModelSpec};
    use trajkit::scaling::{BaseArchitecture, ScalingCoefficients, DEFAULT_CONSTRAINT_TOL};
    ModelSpec {
        base: BaseArchitecture::new(vec![1, 1, 1], vec![8, 16, 32], 64, 11).unwrap(),
        coeffs: ScalingCoefficients::balanced(),
        head: HeadConfig { modes, horizon },
        tolerance: DEFAULT_CONSTRAINT_TOL,
    }
}

/// `scene` with every world coordinate shifted by `d`.
pub fn translated(scene: &trajkit::scene::Scene, d: [f64; 2]) -> trajkit::scene::Scene {
    let mut s = scene.clone();
    for f in &mut s.frames {
        f.ego.x += d[0];
        f.ego.y += d[1];
        for a in &mut f.agents {
            a.centroid[0] += d[0];
            a.centroid[1] += d[1];
        }
        for l in &mut f.traffic_lights {
            l.x += d[0];
            l.y += d[1];
        }
    }
    s
}
