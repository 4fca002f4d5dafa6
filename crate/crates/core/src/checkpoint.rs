//! Binary checkpoints: model structure, parameters and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "trajkit-ckpt v1\n"
//! u64 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank × u64 dims,
//!             numel × f64 payload
//! ```
//!
//! Names: `param/<name>`, `optim/kind`, `optim/hparams`, `optim/step`,
//! `optim/m/<name>`, `optim/v/<name>` and `meta/*` for the structure.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HeadConfig, HybridModel, ModelSpec};
use crate::optim::{Optimizer, OptimizerState, RadamConfig};
use crate::scaling::{BaseArchitecture, ScalingCoefficients};
use crate::scene::RasterConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"trajkit-ckpt v1\n";

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: HybridModel,
    pub optimizer: Option<Optimizer>,
    pub raster: RasterConfig,
}

/// Serializes named tensors in order.
pub fn encode_tensors(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend((entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("missing `trajkit-ckpt v1` header".into()));
    }
    let count = r.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has implausible shape {shape:?}")))?;
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

fn vector(values: &[f64]) -> Tensor {
    Tensor::from_slice(&[values.len()], values).expect("non-empty vector")
}

fn usizes(values: &[usize]) -> Tensor {
    vector(&values.iter().map(|v| *v as f64).collect::<Vec<_>>())
}

/// Builds the tensor list for a checkpoint.
pub fn checkpoint_entries(
    model: &HybridModel,
    optimizer: Option<&Optimizer>,
    raster: &RasterConfig,
) -> Vec<(String, Tensor)> {
    let spec = model.spec();
    let c = spec.coeffs;
    let b = &spec.base;
    let mut e: Vec<(String, Tensor)> = vec![
        ("meta/coeffs".into(), vector(&[c.alpha, c.beta, c.gamma, c.phi])),
        ("meta/tol".into(), vector(&[spec.tolerance])),
        ("meta/head".into(), usizes(&[spec.head.modes, spec.head.horizon])),
        ("meta/base_layers".into(), usizes(&b.stage_layers)),
        ("meta/base_channels".into(), usizes(&b.stage_channels)),
        (
            "meta/base_input".into(),
            usizes(&[b.input_resolution, b.input_channels]),
        ),
        (
            "meta/raster".into(),
            vector(&[
                raster.size_px as f64,
                raster.resolution,
                raster.history_frames as f64,
                raster.future_frames as f64,
                raster.ego_center[0],
                raster.ego_center[1],
                raster.ego_extent[0],
                raster.ego_extent[1],
            ]),
        ),
    ];
    for (name, t) in model.params.iter() {
        e.push((
            format!("param/{name}"),
            Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"),
        ));
    }
    match optimizer {
        None => {}
        Some(Optimizer::Sgd { lr, step }) => {
            e.push(("optim/kind".into(), vector(&[1.0])));
            e.push(("optim/hparams".into(), vector(&[*lr])));
            e.push(("optim/step".into(), vector(&[*step as f64])));
        }
        Some(Optimizer::Radam(s)) => {
            let h = s.config();
            e.push(("optim/kind".into(), vector(&[0.0])));
            e.push(("optim/hparams".into(), vector(&[h.lr, h.beta1, h.beta2, h.eps])));
            e.push(("optim/step".into(), vector(&[s.step() as f64])));
            for ((name, _), m) in model.params.iter().zip(s.first_moments()) {
                e.push((format!("optim/m/{name}"), m.clone()));
            }
            for ((name, _), v) in model.params.iter().zip(s.second_moments()) {
                e.push((format!("optim/v/{name}"), v.clone()));
            }
        }
    }
    e
}

pub fn checkpoint_bytes(model: &HybridModel, optimizer: Option<&Optimizer>, raster: &RasterConfig) -> Vec<u8> {
    encode_tensors(&checkpoint_entries(model, optimizer, raster))
}

pub fn save_checkpoint(
    path: &Path,
    model: &HybridModel,
    optimizer: Option<&Optimizer>,
    raster: &RasterConfig,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, optimizer, raster))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    checkpoint_from_bytes(&bytes)
}

fn as_usizes(t: &Tensor, name: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|v| {
            if *v >= 0.0 && v.fract() == 0.0 && *v < 1e15 {
                Ok(*v as usize)
            } else {
                Err(Error::Checkpoint(format!("`{name}` holds non-integer {v}")))
            }
        })
        .collect()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let entries = decode_tensors(bytes)?;
    let get = |name: &str, len: Option<usize>| -> Result<&Tensor> {
        let t = entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        match len {
            Some(l) if t.numel() != l => Err(Error::Checkpoint(format!(
                "`{name}` has {} values, expected {l}",
                t.numel()
            ))),
            _ => Ok(t),
        }
    };

    let c = get("meta/coeffs", Some(4))?.data();
    let head = as_usizes(get("meta/head", Some(2))?, "meta/head")?;
    let input = as_usizes(get("meta/base_input", Some(2))?, "meta/base_input")?;
    let spec = ModelSpec {
        base: BaseArchitecture {
            stage_layers: as_usizes(get("meta/base_layers", None)?, "meta/base_layers")?,
            stage_channels: as_usizes(get("meta/base_channels", None)?, "meta/base_channels")?,
            input_resolution: input[0],
            input_channels: input[1],
        },
        coeffs: ScalingCoefficients {
            alpha: c[0],
            beta: c[1],
            gamma: c[2],
            phi: c[3],
        },
        head: HeadConfig {
            modes: head[0],
            horizon: head[1],
        },
        tolerance: get("meta/tol", Some(1))?.data()[0],
    };
    let r = get("meta/raster", Some(8))?.data();
    let ints = as_usizes(&vector(&[r[0], r[2], r[3]]), "meta/raster")?;
    let raster = RasterConfig {
        size_px: ints[0],
        resolution: r[1],
        history_frames: ints[1],
        future_frames: ints[2],
        ego_center: [r[4], r[5]],
        ego_extent: [r[6], r[7]],
    };
    raster.validate()?;

    let mut model = HybridModel::build(spec, 0)?;
    let stored = entries.iter().filter(|(n, _)| n.starts_with("param/")).count();
    if stored != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored} parameters, model has {}",
            model.params.len()
        )));
    }
    for (name, t) in entries
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n, t)))
    {
        model.params.assign(name, t)?;
    }

    let optimizer = match entries.iter().find(|(n, _)| n == "optim/kind") {
        None => None,
        Some((_, kind)) => {
            let step = as_usizes(get("optim/step", Some(1))?, "optim/step")?[0] as u64;
            match kind.data() {
                [k] if *k == 1.0 => Some(Optimizer::Sgd {
                    lr: get("optim/hparams", Some(1))?.data()[0],
                    step,
                }),
                [k] if *k == 0.0 => {
                    let h = get("optim/hparams", Some(4))?.data();
                    let config = RadamConfig {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                    };
                    let mut m = Vec::new();
                    let mut v = Vec::new();
                    for (name, p) in model.params.iter() {
                        for (prefix, out) in [("optim/m/", &mut m), ("optim/v/", &mut v)] {
                            let t = get(&format!("{prefix}{name}"), None)?;
                            if t.shape() != p.shape() {
                                return Err(Error::Checkpoint(format!(
                                    "`{prefix}{name}` has shape {:?}, parameter has {:?}",
                                    t.shape(),
                                    p.shape()
                                )));
                            }
                            out.push(t.clone());
                        }
                    }
                    Some(Optimizer::Radam(OptimizerState::from_parts(config, step, m, v)?))
                }
                other => return Err(Error::Checkpoint(format!("unknown optimizer kind {other:?}"))),
            }
        }
    };

    Ok(Checkpoint {
        model,
        optimizer,
        raster,
    })
}
