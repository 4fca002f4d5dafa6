//! Bird's-eye-view rasterization around the ego vehicle.
//!
//! Pixel `(px, py)` has its center at integer coordinates; `px` indexes
//! columns (ego forward is +px) and `py` rows. Channel layout for history
//! length `H`: `0..=H` ego footprints (most recent first), `H+1..=2H+1`
//! agent footprints, `2H+2` traffic lights.

use serde::{Deserialize, Serialize};

use super::{AgentsMask, Pose, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub size_px: usize,
    /// Meters per pixel.
    pub resolution: f64,
    pub history_frames: usize,
    pub future_frames: usize,
    /// Ego position as a fraction of the raster size.
    pub ego_center: [f64; 2],
    /// Ego footprint `(length, width)` in meters.
    pub ego_extent: [f64; 2],
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            size_px: 64,
            resolution: 0.5,
            history_frames: 4,
            future_frames: 16,
            ego_center: [0.25, 0.5],
            ego_extent: [4.5, 1.9],
        }
    }
}

impl RasterConfig {
    pub fn channels(&self) -> usize {
        2 * self.history_frames + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_px == 0 || !(self.resolution > 0.0) || self.future_frames == 0 {
            return Err(Error::invalid(
                "raster needs positive size, resolution and future horizon",
            ));
        }
        if !self.ego_center.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("ego_center fractions must lie in [0, 1]"));
        }
        if !self.ego_extent.iter().all(|e| *e > 0.0) {
            return Err(Error::invalid("ego extent must be positive"));
        }
        Ok(())
    }

    /// Frames needed before and after the anchor frame.
    pub fn frames_required(&self) -> usize {
        self.history_frames + self.future_frames + 1
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(2H+3) × size × size`.
    pub raster: Tensor,
    /// Future ego displacement in meters, in the anchor frame's raster axes.
    pub target: Vec<[f64; 2]>,
    pub availability: Vec<bool>,
}

/// Rotates a world offset into the ego frame (ego heading along +x).
fn to_ego_frame(dx: f64, dy: f64, yaw: f64) -> [f64; 2] {
    let (s, c) = yaw.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Maps a world point (meters) to raster pixel coordinates.
pub fn world_to_raster(point: [f64; 2], ego: &Pose, cfg: &RasterConfig) -> [f64; 2] {
    let [lx, ly] = to_ego_frame(point[0] - ego.x, point[1] - ego.y, ego.yaw);
    let size = cfg.size_px as f64;
    [
        lx / cfg.resolution + cfg.ego_center[0] * size,
        ly / cfg.resolution + cfg.ego_center[1] * size,
    ]
}

struct Canvas<'a> {
    data: &'a mut [f64],
    size: usize,
}

impl Canvas<'_> {
    fn mark(&mut self, px: i64, py: i64, value: f64) {
        let s = self.size as i64;
        if (0..s).contains(&px) && (0..s).contains(&py) {
            let cell = &mut self.data[py as usize * self.size + px as usize];
            *cell = cell.max(value);
        }
    }

    /// Fills an oriented rectangle given its pixel-space center, heading
    /// relative to the raster axes and half extents in pixels. The pixel
    /// nearest the center is always marked.
    fn fill_box(&mut self, center: [f64; 2], heading: f64, half: [f64; 2], value: f64) {
        let (s, c) = heading.sin_cos();
        let reach = half[0].hypot(half[1]);
        let lo_x = (center[0] - reach).floor() as i64;
        let hi_x = (center[0] + reach).ceil() as i64;
        let lo_y = (center[1] - reach).floor() as i64;
        let hi_y = (center[1] + reach).ceil() as i64;
        let size = self.size as i64;
        for py in lo_y.max(0)..=hi_y.min(size - 1) {
            for px in lo_x.max(0)..=hi_x.min(size - 1) {
                let dx = px as f64 - center[0];
                let dy = py as f64 - center[1];
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if u.abs() <= half[0] && v.abs() <= half[1] {
                    self.mark(px, py, value);
                }
            }
        }
        if center.iter().all(|v| v.is_finite()) {
            self.mark(center[0].round() as i64, center[1].round() as i64, value);
        }
    }
}

/// Renders the sample anchored at `frame_index`.
pub fn rasterize(scene: &Scene, frame_index: usize, cfg: &RasterConfig, mask: &AgentsMask) -> Result<Sample> {
    cfg.validate()?;
    let h = cfg.history_frames;
    let t = cfg.future_frames;
    if frame_index < h || frame_index + t >= scene.frames.len() {
        return Err(Error::Scene {
            scene: scene.id.clone(),
            message: format!(
                "frame {frame_index} needs {h} history and {t} future frames; scene has {} frames (need index in [{h}, {}])",
                scene.frames.len(),
                scene.frames.len() as i64 - t as i64 - 1
            ),
        });
    }
    let size = cfg.size_px;
    let plane = size * size;
    let mut data = vec![0.0; cfg.channels() * plane];
    let anchor = scene.frames[frame_index].ego;
    let px_per_m = 1.0 / cfg.resolution;

    for back in 0..=h {
        let frame = &scene.frames[frame_index - back];

        let mut ego_canvas = Canvas {
            data: &mut data[back * plane..][..plane],
            size,
        };
        ego_canvas.fill_box(
            world_to_raster([frame.ego.x, frame.ego.y], &anchor, cfg),
            frame.ego.yaw - anchor.yaw,
            [cfg.ego_extent[0] * 0.5 * px_per_m, cfg.ego_extent[1] * 0.5 * px_per_m],
            1.0,
        );

        let mut agent_canvas = Canvas {
            data: &mut data[(h + 1 + back) * plane..][..plane],
            size,
        };
        for agent in &frame.agents {
            if !mask.is_usable(&scene.id, &agent.track_id) {
                continue;
            }
            agent_canvas.fill_box(
                world_to_raster(agent.centroid, &anchor, cfg),
                agent.yaw - anchor.yaw,
                [agent.extent[0] * 0.5 * px_per_m, agent.extent[1] * 0.5 * px_per_m],
                1.0,
            );
        }
    }

    let mut lights = Canvas {
        data: &mut data[(2 * h + 2) * plane..][..plane],
        size,
    };
    for light in &scene.frames[frame_index].traffic_lights {
        let [px, py] = world_to_raster([light.x, light.y], &anchor, cfg);
        if px.is_finite() && py.is_finite() {
            lights.mark(px.round() as i64, py.round() as i64, light.state.raster_value());
        }
    }

    let target = (0..t)
        .map(|k| {
            let e = scene.frames[frame_index + 1 + k].ego;
            to_ego_frame(e.x - anchor.x, e.y - anchor.y, anchor.yaw)
        })
        .collect();

    Ok(Sample {
        raster: Tensor::new(vec![cfg.channels(), size, size], data)?,
        target,
        availability: vec![true; t],
    })
}
