//! First-person raycast rendering of a corridor.
//!
//! Walls are flat-shaded per panel, the floor optionally carries a
//! checkerboard, the ceiling is a flat colour. Every pixel is the average of
//! a 2×2 supersample and quantized to 8 bits so PNG storage is lossless.

use super::world::{Corridor, Point, WallKind, WorldConfig};
use super::VehicleState;
use crate::error::Result;
use crate::frame::Frame;

const SUPERSAMPLE: usize = 2;

type Rgb = [f64; 3];

const CEILING: Rgb = [0.78, 0.80, 0.84];
const FLOOR_A: Rgb = [0.25, 0.22, 0.20];
const FLOOR_B: Rgb = [0.55, 0.50, 0.42];
const LEFT_WALL: Rgb = [0.75, 0.35, 0.25];
const RIGHT_WALL: Rgb = [0.25, 0.45, 0.75];
const CAP_WALL: Rgb = [0.85, 0.80, 0.25];

/// Camera intrinsics derived from a world config.
#[derive(Clone, Debug)]
pub struct Camera {
    pub height: usize,
    pub width: usize,
    half_tan: f64,
    focal: f64,
    eye: f64,
    wall: f64,
}

impl Camera {
    pub fn new(cfg: &WorldConfig) -> Self {
        let half_tan = (cfg.fov_deg.to_radians() / 2.0).tan();
        Camera {
            height: cfg.image_height,
            width: cfg.image_width,
            half_tan,
            focal: cfg.image_width as f64 / 2.0 / half_tan,
            eye: cfg.camera_height,
            wall: cfg.wall_height,
        }
    }
}

fn shade(c: Rgb, k: f64) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Darkening with distance; gives depth cues to the flat colours.
fn fog(depth: f64) -> f64 {
    1.0 / (1.0 + 0.06 * depth)
}

pub fn render(
    corridor: &Corridor,
    cfg: &WorldConfig,
    cam: &Camera,
    state: &VehicleState,
    tint: Rgb,
) -> Result<Frame<f32>> {
    let (h, w) = (cam.height, cam.width);
    let (sh, sw) = (h * SUPERSAMPLE, w * SUPERSAMPLE);
    let fwd = Point::new(state.heading.cos(), state.heading.sin());
    let right = Point::new(-state.heading.sin(), state.heading.cos());
    let focal = cam.focal * SUPERSAMPLE as f64;
    let cy = sh as f64 / 2.0;
    let mut acc = vec![[0.0f64; 3]; h * w];
    for col in 0..sw {
        let cx = (2.0 * (col as f64 + 0.5) / sw as f64 - 1.0) * cam.half_tan;
        let dir = Point::new(fwd.x + cx * right.x, fwd.y + cx * right.y);
        let hit = corridor.cast(state.position, dir);
        let (top, bottom) = match hit {
            Some(hit) => (
                cy - focal * (cam.wall - cam.eye) / hit.t,
                cy + focal * cam.eye / hit.t,
            ),
            None => (cy, cy),
        };
        for row in 0..sh {
            let y = row as f64 + 0.5;
            let color = if y < top {
                CEILING
            } else if y < bottom {
                let hit = hit.expect("wall span implies a hit");
                let base = match hit.kind {
                    WallKind::Left => LEFT_WALL,
                    WallKind::Right => RIGHT_WALL,
                    WallKind::Cap => CAP_WALL,
                };
                let panel = (hit.along / cfg.panel_length).floor() as i64;
                let k = if panel.rem_euclid(2) == 0 { 1.0 } else { 0.8 };
                shade(base, k * fog(hit.t))
            } else {
                let depth = focal * cam.eye / (y - cy);
                let p = Point::new(state.position.x + depth * dir.x, state.position.y + depth * dir.y);
                let base = if cfg.checkerboard {
                    let ix = (p.x / cfg.tile_size).floor() as i64;
                    let iy = (p.y / cfg.tile_size).floor() as i64;
                    if (ix + iy).rem_euclid(2) == 0 {
                        FLOOR_A
                    } else {
                        FLOOR_B
                    }
                } else {
                    FLOOR_B
                };
                shade(base, fog(depth))
            };
            let cell = &mut acc[(row / SUPERSAMPLE) * w + col / SUPERSAMPLE];
            for c in 0..3 {
                cell[c] += color[c];
            }
        }
    }
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in acc.iter().enumerate() {
        for c in 0..3 {
            let v = (px[c] * inv * tint[c]).clamp(0.0, 1.0);
            data[c * h * w + i] = quantize(v);
        }
    }
    Frame::new(3, h, w, data)
}

/// Rounds to the nearest 8-bit level, matching PNG decoding exactly.
pub fn quantize(v: f64) -> f32 {
    let level = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    level_to_f32(level)
}

pub fn level_to_f32(level: u8) -> f32 {
    level as f32 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_view_is_left_right_mirrored_in_structure() {
        let cfg = WorldConfig {
            checkerboard: false,
            ..WorldConfig::straight(20.0)
        };
        let corridor = cfg.corridor(0).unwrap();
        let cam = Camera::new(&cfg);
        let state = VehicleState {
            position: Point::new(2.0, 0.0),
            heading: 0.0,
            speed: 1.0,
        };
        let f = render(&corridor, &cfg, &cam, &state, [1.0; 3]).unwrap();
        let (h, w) = (f.height(), f.width());
        // Red dominates the left edge, blue the right edge, at the horizon row.
        let row = h / 2 - 2;
        let px = |c: usize, x: usize| f.plane(c)[row * w + x];
        assert!(px(0, 0) > px(2, 0));
        assert!(px(2, w - 1) > px(0, w - 1));
        // Ceiling on top, floor at the bottom.
        assert!(f.plane(0)[w / 2] > 0.6);
        assert!(f.plane(2)[(h - 1) * w + w / 2] < 0.5);
    }

    #[test]
    fn quantization_is_exact_on_levels() {
        for level in 0..=255u8 {
            let v = level_to_f32(level) as f64;
            assert_eq!(quantize(v), level_to_f32(level));
        }
    }
}
