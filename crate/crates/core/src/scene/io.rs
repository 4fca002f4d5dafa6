//! Line-delimited scene and mask files.
//!
//! Scenes: a `trajkit-scenes v1` header, then one JSON object per line:
//! `{"id", "frames": [{"t", "ego": [x, y, yaw], "agents": [{"tid", "x",
//! "y", "yaw", "l", "w", "label"}], "lights": [{"x", "y", "state"}]}]}`.
//! Masks: a `trajkit-mask v1` header, then `scene_id,track_id,0|1` lines.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentLabel, AgentState, AgentsMask, Frame, LightState, Pose, Scene, TrafficLight};
use crate::error::{Error, Result};

pub const SCENES_HEADER: &str = "trajkit-scenes v1";
pub const MASK_HEADER: &str = "trajkit-mask v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: String,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    ego: [f64; 3],
    agents: Vec<AgentRecord>,
    lights: Vec<LightRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    tid: String,
    x: f64,
    y: f64,
    yaw: f64,
    l: f64,
    w: f64,
    label: AgentLabel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightRecord {
    x: f64,
    y: f64,
    state: LightState,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            id: s.id.clone(),
            frames: s
                .frames
                .iter()
                .map(|f| FrameRecord {
                    t: f.timestamp,
                    ego: [f.ego.x, f.ego.y, f.ego.yaw],
                    agents: f
                        .agents
                        .iter()
                        .map(|a| AgentRecord {
                            tid: a.track_id.clone(),
                            x: a.centroid[0],
                            y: a.centroid[1],
                            yaw: a.yaw,
                            l: a.extent[0],
                            w: a.extent[1],
                            label: a.label,
                        })
                        .collect(),
                    lights: f
                        .traffic_lights
                        .iter()
                        .map(|l| LightRecord {
                            x: l.x,
                            y: l.y,
                            state: l.state,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl From<SceneRecord> for Scene {
    fn from(r: SceneRecord) -> Self {
        Scene {
            id: r.id,
            frames: r
                .frames
                .into_iter()
                .map(|f| Frame {
                    timestamp: f.t,
                    ego: Pose {
                        x: f.ego[0],
                        y: f.ego[1],
                        yaw: f.ego[2],
                    },
                    agents: f
                        .agents
                        .into_iter()
                        .map(|a| AgentState {
                            track_id: a.tid,
                            centroid: [a.x, a.y],
                            yaw: a.yaw,
                            extent: [a.l, a.w],
                            label: a.label,
                        })
                        .collect(),
                    traffic_lights: f
                        .lights
                        .into_iter()
                        .map(|l| TrafficLight {
                            x: l.x,
                            y: l.y,
                            state: l.state,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn scenes_to_string(scenes: &[Scene]) -> Result<String> {
    let mut out = String::from(SCENES_HEADER);
    out.push('\n');
    for s in scenes {
        s.validate()?;
        let line = serde_json::to_string(&SceneRecord::from(s))
            .map_err(|e| Error::invalid(format!("scene `{}` not serializable: {e}", s.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn scenes_from_str(text: &str, path: &Path) -> Result<Vec<Scene>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCENES_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("expected header `{SCENES_HEADER}`, found `{h}`"))),
        None => return Err(parse_err(1, format!("missing header `{SCENES_HEADER}`"))),
    }
    let mut scenes = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let scene = Scene::from(record);
        scene.validate()?;
        if !ids.insert(scene.id.clone()) {
            return Err(parse_err(i + 1, format!("duplicate scene id `{}`", scene.id)));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let text = scenes_to_string(scenes)?;
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    scenes_from_str(&text, path)
}

pub fn write_mask(mask: &AgentsMask, path: &Path) -> Result<()> {
    let mut out = String::from(MASK_HEADER);
    out.push('\n');
    for (scene, track, usable) in mask.iter() {
        out.push_str(&format!("{scene},{track},{}\n", u8::from(usable)));
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_mask(path: &Path) -> Result<AgentsMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    mask_from_str(&text, path)
}

pub fn mask_from_str(text: &str, path: &Path) -> Result<AgentsMask> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MASK_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{MASK_HEADER}`"))),
    }
    let mut mask = AgentsMask::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let [scene, track, flag] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected 3 fields, found {}", fields.len())));
        };
        let usable = match flag {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(i + 1, format!("usable flag must be 0 or 1, found `{other}`"))),
        };
        if scene.is_empty() || track.is_empty() {
            return Err(parse_err(i + 1, "empty scene or track id".into()));
        }
        mask.set(scene, track, usable);
    }
    Ok(mask)
}
