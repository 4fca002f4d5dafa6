//! Seeded synthetic driving episodes.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{wrap_angle, AgentLabel, AgentState, AgentsMask, Frame, LightState, Pose, Scene, TrafficLight};
use crate::error::Error;

/// Seconds between consecutive frames.
pub const FRAME_DT: f64 = 0.1;
const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    ConstantVelocity,
    ConstantTurn,
    LaneChange,
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant_velocity" => Ok(Motion::ConstantVelocity),
            "constant_turn" => Ok(Motion::ConstantTurn),
            "lane_change" => Ok(Motion::LaneChange),
            other => Err(Error::invalid(format!(
                "unknown motion `{other}` (expected constant_velocity, constant_turn or lane_change)"
            ))),
        }
    }
}

impl Motion {
    pub fn as_str(self) -> &'static str {
        match self {
            Motion::ConstantVelocity => "constant_velocity",
            Motion::ConstantTurn => "constant_turn",
            Motion::LaneChange => "lane_change",
        }
    }
}

/// Ego trajectory model for one scene.
enum EgoPath {
    Straight,
    Turn { rate: f64 },
    LaneChange { offset: f64, mid: f64, tau: f64 },
}

struct EgoMotion {
    origin: [f64; 2],
    heading: f64,
    speed: f64,
    path: EgoPath,
}

impl EgoMotion {
    fn pose(&self, t: f64) -> Pose {
        let (s0, c0) = self.heading.sin_cos();
        let [x0, y0] = self.origin;
        match self.path {
            EgoPath::Straight => Pose {
                x: x0 + self.speed * t * c0,
                y: y0 + self.speed * t * s0,
                yaw: wrap_angle(self.heading),
            },
            EgoPath::Turn { rate } => {
                let yaw = self.heading + rate * t;
                let r = self.speed / rate;
                Pose {
                    x: x0 + r * (yaw.sin() - s0),
                    y: y0 - r * (yaw.cos() - c0),
                    yaw: wrap_angle(yaw),
                }
            }
            EgoPath::LaneChange { offset, mid, tau } => {
                // sigmoid lateral profile along the initial heading
                let sig = 1.0 / (1.0 + (-(t - mid) / tau).exp());
                let lateral = offset * sig;
                let lateral_rate = offset * sig * (1.0 - sig) / tau;
                let along = self.speed * t;
                Pose {
                    x: x0 + along * c0 - lateral * s0,
                    y: y0 + along * s0 + lateral * c0,
                    yaw: wrap_angle(self.heading + lateral_rate.atan2(self.speed)),
                }
            }
        }
    }
}

struct AgentTrack {
    id: String,
    along: f64,
    lateral: f64,
    speed: f64,
    label: AgentLabel,
    extent: [f64; 2],
}

fn sample_label(rng: &mut ChaCha8Rng) -> AgentLabel {
    match rng.gen_range(0..20) {
        0..=13 => AgentLabel::Vehicle,
        14..=16 => AgentLabel::Cyclist,
        17..=18 => AgentLabel::Pedestrian,
        _ => AgentLabel::Other,
    }
}

fn label_extent_and_speed(label: AgentLabel, rng: &mut ChaCha8Rng) -> ([f64; 2], f64) {
    let (extent, speed) = match label {
        AgentLabel::Vehicle => ([4.5, 1.9], rng.gen_range(4.0..16.0)),
        AgentLabel::Cyclist => ([1.8, 0.6], rng.gen_range(2.0..6.0)),
        AgentLabel::Pedestrian => ([0.6, 0.6], rng.gen_range(0.5..1.8)),
        AgentLabel::Other => ([2.0, 1.0], rng.gen_range(0.0..4.0)),
    };
    let jitter = rng.gen_range(0.9..1.1);
    ([extent[0] * jitter, extent[1] * jitter], speed)
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `num_scenes` episodes of `frames_per_scene` frames each, spaced
/// [`FRAME_DT`] apart. Agents occupy lanes other than the ego's start lane
/// and, for lane changes, other than the target lane.
pub fn generate_synthetic(seed: u64, num_scenes: usize, frames_per_scene: usize, motion: Motion) -> Vec<Scene> {
    (0..num_scenes)
        .map(|i| generate_scene(&mut scene_rng(seed, i), i, frames_per_scene, motion))
        .collect()
}

fn generate_scene(rng: &mut ChaCha8Rng, index: usize, frames: usize, motion: Motion) -> Scene {
    let duration = frames as f64 * FRAME_DT;
    let origin = [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)];
    let heading = wrap_angle(rng.gen_range(-PI..PI));
    let speed = rng.gen_range(5.0..15.0);
    let path = match motion {
        Motion::ConstantVelocity => EgoPath::Straight,
        Motion::ConstantTurn => {
            let magnitude = rng.gen_range(0.1..0.4);
            EgoPath::Turn {
                rate: if rng.gen_bool(0.5) { magnitude } else { -magnitude },
            }
        }
        Motion::LaneChange => EgoPath::LaneChange {
            offset: if rng.gen_bool(0.5) { LANE_WIDTH } else { -LANE_WIDTH },
            mid: rng.gen_range(0.3..0.7) * duration,
            tau: rng.gen_range(0.3..0.6),
        },
    };
    let ego = EgoMotion {
        origin,
        heading,
        speed,
        path,
    };

    let mut lanes: Vec<f64> = vec![-2.0 * LANE_WIDTH, -LANE_WIDTH, LANE_WIDTH, 2.0 * LANE_WIDTH];
    if let EgoPath::LaneChange { offset, .. } = ego.path {
        lanes.retain(|l| *l != offset);
    }
    lanes.shuffle(rng);
    let count = rng.gen_range(0..=lanes.len());
    let agents: Vec<AgentTrack> = lanes[..count]
        .iter()
        .enumerate()
        .map(|(k, &lateral)| {
            let label = sample_label(rng);
            let (extent, speed) = label_extent_and_speed(label, rng);
            AgentTrack {
                id: format!("a{k}"),
                along: rng.gen_range(-15.0..25.0),
                lateral,
                speed,
                label,
                extent,
            }
        })
        .collect();

    let light_count = rng.gen_range(0..=2);
    let lights: Vec<([f64; 2], LightState, LightState, usize)> = (0..light_count)
        .map(|_| {
            let ahead = rng.gen_range(20.0..60.0);
            let side = rng.gen_range(-6.0..6.0);
            let (s, c) = heading.sin_cos();
            let pos = [origin[0] + ahead * c - side * s, origin[1] + ahead * s + side * c];
            let states = [LightState::Red, LightState::Yellow, LightState::Green];
            let first = *states.choose(rng).unwrap();
            let second = *states.choose(rng).unwrap();
            (pos, first, second, rng.gen_range(0..frames.max(1)))
        })
        .collect();

    let (sh, ch) = heading.sin_cos();
    let frames = (0..frames)
        .map(|k| {
            let t = k as f64 * FRAME_DT;
            Frame {
                timestamp: t,
                ego: ego.pose(t),
                agents: agents
                    .iter()
                    .map(|a| {
                        let along = a.along + a.speed * t;
                        AgentState {
                            track_id: a.id.clone(),
                            centroid: [
                                origin[0] + along * ch - a.lateral * sh,
                                origin[1] + along * sh + a.lateral * ch,
                            ],
                            yaw: heading,
                            extent: a.extent,
                            label: a.label,
                        }
                    })
                    .collect(),
                traffic_lights: lights
                    .iter()
                    .map(|(pos, first, second, switch)| TrafficLight {
                        x: pos[0],
                        y: pos[1],
                        state: if k < *switch { *first } else { *second },
                    })
                    .collect(),
            }
        })
        .collect();

    Scene {
        id: format!("scene-{index:05}"),
        frames,
    }
}

/// Marks each agent usable with probability `usable_fraction`.
pub fn generate_mask(scenes: &[Scene], seed: u64, usable_fraction: f64) -> AgentsMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut mask = AgentsMask::new();
    for scene in scenes {
        for tid in scene.track_ids() {
            mask.set(&scene.id, tid, rng.gen_bool(usable_fraction.clamp(0.0, 1.0)));
        }
    }
    mask
}
