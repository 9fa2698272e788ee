//! Corridor world description and its wall geometry.
//!
//! World coordinates use a y-down plane: heading 0 points along +x and a
//! positive heading change turns the vehicle to the right (clockwise as drawn
//! on screen). Turn angles in the config follow the same sign.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corridor geometry, rendering and controller settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Centerline segment lengths in meters.
    pub segment_lengths: Vec<f64>,
    /// Turn at the end of each segment but the last, degrees, positive = right.
    pub turn_angles_deg: Vec<f64>,
    /// When set, the seed draws a fresh staircase layout of this many segments.
    pub random_segments: Option<usize>,
    pub random_length_range: (f64, f64),
    pub corridor_width: f64,
    pub wall_height: f64,
    pub camera_height: f64,
    pub fov_deg: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Control period, s.
    pub dt: f64,
    /// Yaw rate per unit steering, rad/s.
    pub steer_gain: f64,
    pub max_steer: f64,
    /// Half-width of the uniform noise added to controller output.
    pub steer_noise: f64,
    pub lookahead: f64,
    /// Lateral offset of the start position from the centerline, m (positive = right).
    pub start_offset: f64,
    /// Distance travelled along the first segment before recording, m.
    pub start_distance: f64,
    pub checkerboard: bool,
    pub tile_size: f64,
    pub panel_length: f64,
    /// Maximum relative per-channel lighting tint drawn from the seed.
    pub tint_strength: f64,
    pub collision_radius: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            segment_lengths: vec![8.0, 8.0, 8.0, 8.0, 8.0],
            turn_angles_deg: vec![90.0, -90.0, 90.0, -90.0],
            random_segments: None,
            random_length_range: (6.0, 9.0),
            corridor_width: 2.0,
            wall_height: 1.0,
            camera_height: 0.5,
            fov_deg: 80.0,
            image_height: 64,
            image_width: 80,
            speed: 1.0,
            dt: 0.1,
            steer_gain: 3.0,
            max_steer: 0.3,
            steer_noise: 0.01,
            lookahead: 1.5,
            start_offset: 0.0,
            start_distance: 1.0,
            checkerboard: true,
            tile_size: 0.5,
            panel_length: 1.0,
            tint_strength: 0.1,
            collision_radius: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Single straight corridor of the given length.
    pub fn straight(length: f64) -> Self {
        WorldConfig {
            segment_lengths: vec![length],
            turn_angles_deg: Vec::new(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: WorldConfig = toml::from_str(text).map_err(|e| Error::config(format!("world config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.corridor_width, "corridor_width")?;
        pos(self.wall_height, "wall_height")?;
        pos(self.speed, "speed")?;
        pos(self.dt, "dt")?;
        pos(self.steer_gain, "steer_gain")?;
        pos(self.max_steer, "max_steer")?;
        pos(self.lookahead, "lookahead")?;
        pos(self.tile_size, "tile_size")?;
        pos(self.panel_length, "panel_length")?;
        if !(self.camera_height > 0.0 && self.camera_height < self.wall_height) {
            return Err(Error::config("camera_height must lie between floor and ceiling"));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 170.0) {
            return Err(Error::config(format!("fov_deg {} out of range", self.fov_deg)));
        }
        if self.image_height < 32 || self.image_width < 32 {
            return Err(Error::config(format!(
                "image size {}x{} below 32x32",
                self.image_height, self.image_width
            )));
        }
        if !(self.steer_noise >= 0.0 && self.tint_strength >= 0.0 && self.tint_strength < 1.0) {
            return Err(Error::config("steer_noise and tint_strength must be non-negative"));
        }
        if self.start_offset.abs() + self.collision_radius >= self.corridor_width / 2.0 {
            return Err(Error::config("start_offset places the vehicle inside a wall"));
        }
        if let Some(n) = self.random_segments {
            let (lo, hi) = self.random_length_range;
            if n == 0 || !(lo >= self.corridor_width && hi >= lo) {
                return Err(Error::config("random layout needs >= 1 segment and lengths >= corridor width"));
            }
        }
        Ok(())
    }

    /// Concrete geometry for `seed`: either the configured segment list or a
    /// random staircase drawn from the seed.
    pub fn corridor(&self, seed: u64) -> Result<Corridor> {
        self.validate()?;
        let (lengths, turns) = match self.random_segments {
            None => (
                self.segment_lengths.clone(),
                self.turn_angles_deg.iter().map(|d| d.to_radians()).collect(),
            ),
            Some(n) => {
                let mut rng = super::derived_rng(seed, 1);
                let (lo, hi) = self.random_length_range;
                let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
                (lengths, staircase_turns(&mut rng, n.saturating_sub(1)))
            }
        };
        Corridor::new(&lengths, &turns, self.corridor_width)
    }
}

/// ±90° turns keeping the heading within ±90° of the start direction, so the
/// path advances monotonically and never crosses itself.
fn staircase_turns(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let mut heading = 0i32;
    (0..count)
        .map(|_| {
            let turn = match heading {
                0 => {
                    if rng.gen_bool(0.5) {
                        1
                    } else {
                        -1
                    }
                }
                h => -h,
            };
            heading += turn;
            turn as f64 * PI / 2.0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).dot(self.sub(o)).sqrt()
    }
}

/// What a wall segment belongs to; drives its colour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WallKind {
    Left,
    Right,
    Cap,
}

#[derive(Clone, Copy, Debug)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
    pub kind: WallKind,
}

/// Result of a ray cast against the walls.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Ray parameter; equals depth along the camera axis for camera rays.
    pub t: f64,
    /// Distance from the wall segment start to the hit point.
    pub along: f64,
    pub kind: WallKind,
}

/// Centerline polyline with mitred side walls and end caps.
#[derive(Clone, Debug)]
pub struct Corridor {
    pub centerline: Vec<Point>,
    pub headings: Vec<f64>,
    pub width: f64,
    pub walls: Vec<Wall>,
    cumulative: Vec<f64>,
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let s = if len2 > 0.0 {
        (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.dist(a.add(ab.scale(s))), s)
}

fn segments_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let o1 = b.sub(a).cross(c.sub(a));
    let o2 = b.sub(a).cross(d.sub(a));
    let o3 = d.sub(c).cross(a.sub(c));
    let o4 = d.sub(c).cross(b.sub(c));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .0
        .min(point_segment_distance(b, c, d).0)
        .min(point_segment_distance(c, a, b).0)
        .min(point_segment_distance(d, a, b).0)
}

impl Corridor {
    pub fn new(lengths: &[f64], turns: &[f64], width: f64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::config("corridor needs at least one segment"));
        }
        if turns.len() + 1 != lengths.len() {
            return Err(Error::config(format!(
                "{} segments need {} turn angles, got {}",
                lengths.len(),
                lengths.len() - 1,
                turns.len()
            )));
        }
        for &l in lengths {
            if !(l.is_finite() && l >= width) {
                return Err(Error::config(format!("segment length {l} shorter than corridor width {width}")));
            }
        }
        for &t in turns {
            if !(t.is_finite() && t.abs() <= PI / 2.0 + 1e-9 && t.abs() > 1e-9) {
                return Err(Error::config(format!(
                    "turn of {:.1} deg unsupported (0 < |turn| <= 90)",
                    t.to_degrees()
                )));
            }
        }
        let mut headings = vec![0.0];
        for &t in turns {
            headings.push(headings.last().unwrap() + t);
        }
        let mut centerline = vec![Point::new(0.0, 0.0)];
        for (l, &h) in lengths.iter().zip(&headings) {
            let p = *centerline.last().unwrap();
            centerline.push(p.add(Point::new(h.cos(), h.sin()).scale(*l)));
        }
        // Non-adjacent centerline segments must keep the walls apart.
        for i in 0..lengths.len() {
            for j in i + 2..lengths.len() {
                let d = segments_distance(centerline[i], centerline[i + 1], centerline[j], centerline[j + 1]);
                if d < 1.5 * width {
                    return Err(Error::config(format!(
                        "corridor segments {i} and {j} overlap (distance {d:.2} m)"
                    )));
                }
            }
        }
        let normal = |h: f64| Point::new(-h.sin(), h.cos());
        let side = |offset: f64| -> Vec<Point> {
            let mut pts = vec![centerline[0].add(normal(headings[0]).scale(offset))];
            for i in 1..lengths.len() {
                let (n0, n1) = (normal(headings[i - 1]), normal(headings[i]));
                let miter = n0.add(n1).scale(offset / (1.0 + n0.dot(n1)));
                pts.push(centerline[i].add(miter));
            }
            let last = *headings.last().unwrap();
            pts.push(centerline[lengths.len()].add(normal(last).scale(offset)));
            pts
        };
        let (left, right) = (side(-width / 2.0), side(width / 2.0));
        let mut walls = Vec::new();
        for (pts, kind) in [(&left, WallKind::Left), (&right, WallKind::Right)] {
            for w in pts.windows(2) {
                walls.push(Wall {
                    a: w[0],
                    b: w[1],
                    kind,
                });
            }
        }
        walls.push(Wall {
            a: left[0],
            b: right[0],
            kind: WallKind::Cap,
        });
        walls.push(Wall {
            a: *left.last().unwrap(),
            b: *right.last().unwrap(),
            kind: WallKind::Cap,
        });
        let mut cumulative = vec![0.0];
        for l in lengths {
            cumulative.push(cumulative.last().unwrap() + l);
        }
        Ok(Corridor {
            centerline,
            headings,
            width,
            walls,
            cumulative,
        })
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the centerline point closest to `p`.
    pub fn project(&self, p: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.headings.len() {
            let (d, s) = point_segment_distance(p, self.centerline[i], self.centerline[i + 1]);
            if d < best.0 {
                best = (d, self.cumulative[i] + s * (self.cumulative[i + 1] - self.cumulative[i]));
            }
        }
        best.1
    }

    /// Centerline point and tangent heading at arc length `s` (clamped).
    pub fn point_at(&self, s: f64) -> (Point, f64) {
        let s = s.clamp(0.0, self.total_length());
        let i = (0..self.headings.len())
            .find(|&i| s <= self.cumulative[i + 1])
            .unwrap_or(self.headings.len() - 1);
        let h = self.headings[i];
        let p = self.centerline[i].add(Point::new(h.cos(), h.sin()).scale(s - self.cumulative[i]));
        (p, h)
    }

    pub fn distance_to_walls(&self, p: Point) -> f64 {
        self.walls
            .iter()
            .map(|w| point_segment_distance(p, w.a, w.b).0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest wall hit of the ray `origin + t * dir`, `t > 0`.
    pub fn cast(&self, origin: Point, dir: Point) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for w in &self.walls {
            let e = w.b.sub(w.a);
            let denom = dir.cross(e);
            if denom.abs() < 1e-12 {
                continue;
            }
            let ao = w.a.sub(origin);
            let t = ao.cross(e) / denom;
            let s = ao.cross(dir) / denom;
            if t > 1e-9 && (-1e-9..=1.0 + 1e-9).contains(&s) && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    along: s * e.dot(e).sqrt(),
                    kind: w.kind,
                });
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = WorldConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(WorldConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = WorldConfig::from_toml_str("speed = 2.0\nsegment_lengths = [10.0]\nturn_angles_deg = []\n").unwrap();
        assert_eq!(cfg.speed, 2.0);
        assert_eq!(cfg.image_width, WorldConfig::default().image_width);
        assert!(WorldConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn rejects_invalid_geometry() {
        assert!(Corridor::new(&[], &[], 2.0).is_err());
        assert!(Corridor::new(&[5.0, 5.0], &[], 2.0).is_err());
        assert!(Corridor::new(&[5.0, 1.0], &[PI / 2.0], 2.0).is_err());
        assert!(Corridor::new(&[5.0, 5.0], &[PI], 2.0).is_err());
        // Four right turns close a loop back onto the first segment.
        let square = Corridor::new(&[4.0; 5], &[PI / 2.0; 4], 2.0);
        assert!(square.is_err());
    }

    #[test]
    fn right_turn_geometry() {
        let c = Corridor::new(&[5.0, 5.0], &[PI / 2.0], 2.0).unwrap();
        // Right turn in y-down coordinates heads toward +y.
        let end = *c.centerline.last().unwrap();
        assert!((end.x - 5.0).abs() < 1e-12 && (end.y - 5.0).abs() < 1e-12);
        assert_eq!(c.walls.len(), 6);
        let hit = c.cast(Point::new(0.5, 0.0), Point::new(1.0, 0.0)).unwrap();
        // Straight ahead is the outer wall of the corner at x = 6.
        assert!((hit.t - 5.5).abs() < 1e-9);
        assert!((c.distance_to_walls(Point::new(1.0, 0.0)) - 1.0).abs() < 1e-9);
        assert!((c.project(Point::new(5.0, 2.0)) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn staircase_never_crosses() {
        for seed in 0..50 {
            let cfg = WorldConfig {
                random_segments: Some(8),
                ..WorldConfig::default()
            };
            cfg.corridor(seed).unwrap();
        }
    }
}
