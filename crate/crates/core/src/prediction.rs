//! Prediction files and static SVG plots of predicted trajectories.
//!
//! Prediction file: a `trajkit-pred v1` header, then for each mode a
//! `confidence <c>` line followed by `T` lines of `x y`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::TrajectoryPrediction;

pub const PREDICTION_HEADER: &str = "trajkit-pred v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub confidences: Vec<f64>,
    /// One trajectory per mode, all of equal length.
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

impl PredictionFile {
    pub fn from_prediction(p: &TrajectoryPrediction) -> Self {
        PredictionFile {
            confidences: p.confidences(),
            trajectories: (0..p.modes).map(|k| p.trajectory(k)).collect(),
        }
    }

    pub fn modes(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{PREDICTION_HEADER}\n");
        for (c, traj) in self.confidences.iter().zip(&self.trajectories) {
            let _ = writeln!(s, "confidence {c}");
            for [x, y] in traj {
                let _ = writeln!(s, "{x} {y}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == PREDICTION_HEADER => {}
            _ => return Err(err(1, format!("expected header `{PREDICTION_HEADER}`"))),
        }
        let mut out = PredictionFile {
            confidences: Vec::new(),
            trajectories: Vec::new(),
        };
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| err(i + 1, format!("bad number `{s}`: {e}")))
            };
            if let Some(c) = line.strip_prefix("confidence ") {
                out.confidences.push(num(c.trim())?);
                out.trajectories.push(Vec::new());
                continue;
            }
            let Some(traj) = out.trajectories.last_mut() else {
                return Err(err(i + 1, "coordinates before the first confidence line".into()));
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [x, y] = fields[..] else {
                return Err(err(i + 1, format!("expected `x y`, found `{line}`")));
            };
            traj.push([num(x)?, num(y)?]);
        }
        let t = out.horizon();
        if out.trajectories.is_empty() || t == 0 || out.trajectories.iter().any(|tr| tr.len() != t) {
            return Err(err(1, "every mode needs the same, non-zero number of points".into()));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }
}

const CANVAS: f64 = 480.0;
const MARGIN: f64 = 20.0;

/// Top-down SVG in the ego frame (forward is right): the ground truth as a
/// `ground-truth` polyline and each mode as a `prediction` polyline whose
/// opacity follows its confidence. The ego marker sits at the origin.
pub fn render_svg(pred: &PredictionFile, ground_truth: Option<&[[f64; 2]]>) -> String {
    let all = pred
        .trajectories
        .iter()
        .flatten()
        .chain(ground_truth.into_iter().flatten())
        .chain(std::iter::once(&[0.0, 0.0]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for a in 0..2 {
            if p[a].is_finite() {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    let to_px = |p: &[f64; 2]| -> (f64, f64) {
        (
            MARGIN + (p[0] - lo[0]) * scale,
            CANVAS - MARGIN - (p[1] - lo[1]) * scale,
        )
    };
    let points = |traj: &[[f64; 2]]| -> String {
        traj.iter()
            .map(|p| {
                let (x, y) = to_px(p);
                format!("{x:.3},{y:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if let Some(gt) = ground_truth {
        let _ = writeln!(
            s,
            "<polyline class=\"ground-truth\" fill=\"none\" stroke=\"black\" stroke-width=\"2\" points=\"{}\"/>",
            points(gt)
        );
    }
    for (k, (traj, c)) in pred.trajectories.iter().zip(&pred.confidences).enumerate() {
        let _ = writeln!(
            s,
            "<polyline class=\"prediction\" data-mode=\"{k}\" data-confidence=\"{c}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\" stroke-opacity=\"{:.3}\" points=\"{}\"/>",
            0.25 + 0.75 * c.clamp(0.0, 1.0),
            points(traj)
        );
    }
    let (ex, ey) = to_px(&[0.0, 0.0]);
    let _ = writeln!(
        s,
        "<circle class=\"ego\" cx=\"{ex:.3}\" cy=\"{ey:.3}\" r=\"4\" fill=\"steelblue\"/>"
    );
    s.push_str("</svg>\n");
    s
}
