//! Driving episodes: scenes of time-ordered frames holding the ego pose,
//! surrounding agents and traffic lights.

mod io;
mod raster;
mod synth;

pub use io::{
    mask_from_str, read_mask, read_scenes, scenes_from_str, scenes_to_string, write_mask, write_scenes, MASK_HEADER,
    SCENES_HEADER,
};
pub use raster::{rasterize, world_to_raster, RasterConfig, Sample};
pub use synth::{generate_mask, generate_synthetic, Motion, FRAME_DT};

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-π, π]`.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentLabel {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub track_id: String,
    pub centroid: [f64; 2],
    pub yaw: f64,
    /// `(length, width)` in meters.
    pub extent: [f64; 2],
    pub label: AgentLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Red,
    Yellow,
    Green,
}

impl LightState {
    /// Pixel value used in the traffic-light raster channel.
    pub fn raster_value(self) -> f64 {
        match self {
            LightState::Red => 1.0,
            LightState::Yellow => 0.5,
            LightState::Green => 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficLight {
    pub x: f64,
    pub y: f64,
    pub state: LightState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Seconds.
    pub timestamp: f64,
    pub ego: Pose,
    pub agents: Vec<AgentState>,
    pub traffic_lights: Vec<TrafficLight>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frames: Vec<Frame>,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn yaw_ok(yaw: f64) -> bool {
    yaw > -PI && yaw <= PI
}

impl Scene {
    /// Checks ids, time ordering and per-frame invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Scene {
            scene: self.id.clone(),
            message,
        };
        if self.id.is_empty() || self.id.contains([',', '\n', '\r']) {
            return Err(fail(
                "scene id must be non-empty and free of commas and newlines".into(),
            ));
        }
        for (i, pair) in self.frames.windows(2).enumerate() {
            if !(pair[1].timestamp > pair[0].timestamp) {
                return Err(fail(format!(
                    "timestamps must be strictly increasing: frame {} at {} follows {}",
                    i + 1,
                    pair[1].timestamp,
                    pair[0].timestamp
                )));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            let e = f.ego;
            if !f.timestamp.is_finite() || !e.x.is_finite() || !e.y.is_finite() || !yaw_ok(e.yaw) {
                return Err(fail(format!("frame {i}: invalid timestamp or ego pose {e:?}")));
            }
            let mut seen = HashSet::new();
            for a in &f.agents {
                if !seen.insert(a.track_id.as_str()) {
                    return Err(fail(format!("frame {i}: duplicate track id `{}`", a.track_id)));
                }
                if a.track_id.is_empty() || a.track_id.contains([',', '\n', '\r']) {
                    return Err(fail(format!("frame {i}: malformed track id `{}`", a.track_id)));
                }
                if !(a.extent[0] > 0.0 && a.extent[1] > 0.0) || !a.extent.iter().all(|v| v.is_finite()) {
                    return Err(fail(format!(
                        "frame {i}: agent `{}` has non-positive extent",
                        a.track_id
                    )));
                }
                if !a.centroid.iter().all(|v| v.is_finite()) || !yaw_ok(a.yaw) {
                    return Err(fail(format!("frame {i}: agent `{}` has invalid pose", a.track_id)));
                }
            }
            for l in &f.traffic_lights {
                if !l.x.is_finite() || !l.y.is_finite() {
                    return Err(fail(format!("frame {i}: traffic light position not finite")));
                }
            }
        }
        Ok(())
    }

    pub fn track_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .frames
            .iter()
            .flat_map(|f| f.agents.iter().map(|a| a.track_id.as_str()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-(scene, track) usability flags. Agents without an entry are usable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentsMask {
    entries: BTreeMap<(String, String), bool>,
}

impl AgentsMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, scene: &str, track_id: &str, usable: bool) {
        self.entries.insert((scene.to_string(), track_id.to_string()), usable);
    }

    pub fn is_usable(&self, scene: &str, track_id: &str) -> bool {
        self.entries
            .get(&(scene.to_string(), track_id.to_string()))
            .copied()
            .unwrap_or(true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn masked_out(&self) -> usize {
        self.entries.values().filter(|u| !**u).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, bool)> {
        self.entries.iter().map(|((s, t), u)| (s.as_str(), t.as_str(), *u))
    }
}
