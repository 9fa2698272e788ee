//! Closed-loop corridor driving: pure-pursuit controller, kinematic update,
//! rendering, and human-override anomaly injection.
//!
//! Record `t` stores the command executed over `(t-1, t]` together with the
//! frame rendered at the resulting state, so frame `x_t` reflects `u_t`.

use std::f64::consts::PI;

use rand::Rng;

use super::episode::{Episode, EpisodeMeta, EpisodeRecord, SourceTag};
use super::render::{render, Camera};
use super::world::{Corridor, Point, WorldConfig};
use super::{derived_rng, VehicleState};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Command held during a late-right override.
pub const LATE_RIGHT_COMMAND: f64 = 0.0;
/// Command applied during an early-left override.
pub const EARLY_LEFT_COMMAND: f64 = -0.2;

/// Kind of human override.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Holds straight where the controller would turn right.
    LateRight,
    /// Steers left where the controller would go straight.
    EarlyLeft,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::LateRight => "late-right",
            AnomalyKind::EarlyLeft => "early-left",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "late-right" => Ok(AnomalyKind::LateRight),
            "early-left" => Ok(AnomalyKind::EarlyLeft),
            other => Err(Error::invalid(format!("unknown anomaly kind {other:?}"))),
        }
    }

    pub fn command(self) -> f64 {
        match self {
            AnomalyKind::LateRight => LATE_RIGHT_COMMAND,
            AnomalyKind::EarlyLeft => EARLY_LEFT_COMMAND,
        }
    }
}

/// Override of the executed command over records `[start_t, end_t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyScenario {
    pub kind: AnomalyKind,
    pub start_t: usize,
    pub end_t: usize,
}

impl AnomalyScenario {
    pub fn new(kind: AnomalyKind, start_t: usize, end_t: usize) -> Result<Self> {
        if start_t >= end_t {
            return Err(Error::invalid(format!(
                "override window [{start_t}, {end_t}) is empty"
            )));
        }
        Ok(AnomalyScenario { kind, start_t, end_t })
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start_t..self.end_t).contains(&t)
    }

    /// Executed command at record `t`, if overridden.
    pub fn override_at(&self, t: usize) -> Option<f64> {
        self.contains(t).then(|| self.kind.command())
    }
}

/// Full simulation output including the hidden vehicle trajectory.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub episode: Episode,
    pub states: Vec<VehicleState>,
    /// Controller output (before any override) at every record.
    pub controller: Vec<f64>,
    /// Noise-free pure-pursuit output at every record.
    pub pursuit: Vec<f64>,
    pub corridor: Corridor,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Pure-pursuit steering toward the centerline point `lookahead` ahead.
pub fn pure_pursuit(corridor: &Corridor, cfg: &WorldConfig, state: &VehicleState) -> f64 {
    let s = corridor.project(state.position);
    let (target, _) = corridor.point_at(s + cfg.lookahead);
    let dx = target.x - state.position.x;
    let dy = target.y - state.position.y;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-9 {
        return 0.0;
    }
    let alpha = wrap_angle(dy.atan2(dx) - state.heading);
    let curvature = 2.0 * alpha.sin() / dist;
    (curvature * state.speed / cfg.steer_gain).clamp(-cfg.max_steer, cfg.max_steer)
}

/// Kinematic update with a stop-on-contact wall collision.
pub fn advance(corridor: &Corridor, cfg: &WorldConfig, state: &VehicleState, u: f64) -> VehicleState {
    let heading = wrap_angle(state.heading + cfg.steer_gain * u * cfg.dt);
    let step = state.speed * cfg.dt;
    let next = Point::new(
        state.position.x + step * heading.cos(),
        state.position.y + step * heading.sin(),
    );
    let position = if corridor.distance_to_walls(next) < cfg.collision_radius {
        state.position
    } else {
        next
    };
    VehicleState {
        position,
        heading,
        speed: state.speed,
    }
}

fn start_state(corridor: &Corridor, cfg: &WorldConfig) -> VehicleState {
    let (p, h) = corridor.point_at(cfg.start_distance);
    let normal = Point::new(-h.sin(), h.cos());
    VehicleState {
        position: Point::new(p.x + normal.x * cfg.start_offset, p.y + normal.y * cfg.start_offset),
        heading: h,
        speed: cfg.speed,
    }
}

fn lighting_tint(cfg: &WorldConfig, seed: u64) -> [f64; 3] {
    let mut rng = derived_rng(seed, 2);
    let k = cfg.tint_strength;
    let mut tint = [1.0; 3];
    if k > 0.0 {
        for t in &mut tint {
            *t = rng.gen_range(1.0 - k..=1.0 + k);
        }
    }
    tint
}

/// Runs the closed loop for `length` records, applying `scenario` if given.
pub fn run(cfg: &WorldConfig, seed: u64, length: usize, scenario: Option<&AnomalyScenario>) -> Result<SimRun> {
    if length < 5 {
        return Err(Error::invalid(format!("episode length {length} below 5")));
    }
    if let Some(s) = scenario {
        if s.start_t >= s.end_t || s.end_t > length {
            return Err(Error::invalid(format!(
                "override window [{}, {}) outside episode of {length} records",
                s.start_t, s.end_t
            )));
        }
    }
    let corridor = cfg.corridor(seed)?;
    let needed = cfg.start_distance + cfg.speed * cfg.dt * length as f64;
    if needed > corridor.total_length() {
        return Err(Error::config(format!(
            "corridor of {:.1} m too short for {length} records ({needed:.1} m)",
            corridor.total_length()
        )));
    }
    let cam = Camera::new(cfg);
    let tint = lighting_tint(cfg, seed);
    let mut noise_rng = derived_rng(seed, 3);
    let mut state = start_state(&corridor, cfg);
    let mut records = Vec::with_capacity(length);
    let mut frames: Vec<Frame<f32>> = Vec::with_capacity(length);
    let mut states = Vec::with_capacity(length);
    let mut controller = Vec::with_capacity(length);
    let mut pursuit = Vec::with_capacity(length);
    for t in 0..length {
        // Noise is drawn every step so overridden runs stay aligned.
        let noise = if cfg.steer_noise > 0.0 {
            noise_rng.gen_range(-cfg.steer_noise..=cfg.steer_noise)
        } else {
            0.0
        };
        let clean = pure_pursuit(&corridor, cfg, &state);
        let commanded = (clean + noise).clamp(-cfg.max_steer, cfg.max_steer);
        let overridden = scenario.and_then(|s| s.override_at(t));
        let executed = overridden.unwrap_or(commanded);
        state = advance(&corridor, cfg, &state, executed);
        frames.push(render(&corridor, cfg, &cam, &state, tint)?);
        records.push(EpisodeRecord {
            t,
            timestamp: t as f64 * cfg.dt,
            image: EpisodeRecord::default_image_name(t),
            steering: executed,
            anomaly: Some(overridden.is_some()),
        });
        states.push(state);
        controller.push(commanded);
        pursuit.push(clean);
    }
    let meta = EpisodeMeta {
        height: cfg.image_height,
        width: cfg.image_width,
        steering_range: steering_range(&records),
        source: SourceTag::Synthetic,
    };
    Ok(SimRun {
        episode: Episode::new(records, frames, meta)?,
        states,
        controller,
        pursuit,
        corridor,
    })
}

pub(crate) fn steering_range(records: &[EpisodeRecord]) -> (f64, f64) {
    records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.steering), hi.max(r.steering))
    })
}

/// Nominal closed-loop episode.
pub fn simulate_episode(cfg: &WorldConfig, seed: u64, length: usize) -> Result<Episode> {
    Ok(run(cfg, seed, length, None)?.episode)
}

/// Re-simulates `episode` with the override applied; the result stores the
/// executed commands, the frames they produce, and labels on the override span.
pub fn inject_anomaly(
    episode: &Episode,
    scenario: &AnomalyScenario,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Episode> {
    if scenario.start_t >= scenario.end_t || scenario.end_t > episode.len() {
        return Err(Error::invalid(format!(
            "override window [{}, {}) outside episode of {} records",
            scenario.start_t,
            scenario.end_t,
            episode.len()
        )));
    }
    Ok(run(cfg, seed, episode.len(), Some(scenario))?.episode)
}

/// Nominal and overridden runs of the same seed, index-aligned.
///
/// The monitor pairs overridden commands with nominal frames for the
/// controller check, and nominal commands with overridden frames for the
/// prediction check.
#[derive(Clone, Debug)]
pub struct LinkedPair {
    pub nominal: Episode,
    pub executed: Episode,
}

impl LinkedPair {
    pub fn new(nominal: Episode, executed: Episode) -> Result<Self> {
        if nominal.len() != executed.len() {
            return Err(Error::invalid(format!(
                "linked episodes differ in length: {} vs {}",
                nominal.len(),
                executed.len()
            )));
        }
        if nominal.frame_dims() != executed.frame_dims() {
            return Err(Error::invalid("linked episodes differ in frame size"));
        }
        Ok(LinkedPair { nominal, executed })
    }

    pub fn simulate(cfg: &WorldConfig, seed: u64, length: usize, scenario: &AnomalyScenario) -> Result<Self> {
        let nominal = simulate_episode(cfg, seed, length)?;
        let executed = inject_anomaly(&nominal, scenario, cfg, seed)?;
        Self::new(nominal, executed)
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.executed.records().iter().map(|r| r.anomaly.unwrap_or(false)).collect()
    }
}

/// Picks an override window of `span` records for `kind` in a nominal run:
/// the start of a right turn for late-right, a steady straight for early-left.
/// Returns `None` when the episode has no suitable location.
pub fn find_override_window(run: &SimRun, kind: AnomalyKind, span: usize, margin: usize) -> Option<AnomalyScenario> {
    let u = &run.pursuit;
    let n = u.len();
    if n < span + 2 * margin {
        return None;
    }
    let range = margin..n - span - margin;
    let start = match kind {
        AnomalyKind::LateRight => range.clone().find(|&t| u[t] > 0.1 && (t == 0 || u[t - 1] <= 0.1)),
        AnomalyKind::EarlyLeft => range.clone().find(|&t| (t..t + span).all(|k| u[k].abs() < 0.05)),
    }?;
    AnomalyScenario::new(kind, start, start + span).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> WorldConfig {
        WorldConfig {
            image_height: 32,
            image_width: 40,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn straight_corridor_commands_stay_near_zero() {
        let cfg = WorldConfig {
            image_height: 32,
            image_width: 40,
            ..WorldConfig::straight(40.0)
        };
        let ep = simulate_episode(&cfg, 4, 200).unwrap();
        let worst = ep.records().iter().map(|r| r.steering.abs()).fold(0.0, f64::max);
        assert!(worst <= 0.02, "max |u| = {worst}");
    }

    #[test]
    fn right_turn_produces_sustained_right_steering() {
        let cfg = WorldConfig {
            segment_lengths: vec![6.0, 10.0],
            turn_angles_deg: vec![90.0],
            ..quiet()
        };
        let ep = simulate_episode(&cfg, 1, 120).unwrap();
        let u: Vec<f64> = ep.records().iter().map(|r| r.steering).collect();
        let longest = u
            .split(|&v| v <= 0.1)
            .map(|run| run.len())
            .max()
            .unwrap_or(0);
        assert!(longest >= 5, "longest right-turn span {longest}");
        assert!(u.iter().all(|&v| v > -0.1));
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = quiet();
        let a = simulate_episode(&cfg, 9, 30).unwrap();
        let b = simulate_episode(&cfg, 9, 30).unwrap();
        assert_eq!(a, b);
        let c = simulate_episode(&cfg, 10, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let cfg = WorldConfig {
            segment_lengths: vec![4.0; 5],
            turn_angles_deg: vec![90.0; 4],
            ..quiet()
        };
        assert!(matches!(simulate_episode(&cfg, 0, 10), Err(Error::Config(_))));
        assert!(matches!(simulate_episode(&quiet(), 0, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn late_right_drives_toward_the_wall() {
        let cfg = WorldConfig {
            segment_lengths: vec![6.0, 10.0],
            turn_angles_deg: vec![90.0],
            ..quiet()
        };
        let nominal = run(&cfg, 2, 100, None).unwrap();
        let sc = find_override_window(&nominal, AnomalyKind::LateRight, 12, 5).unwrap();
        let over = run(&cfg, 2, 100, Some(&sc)).unwrap();
        let ahead: Vec<f64> = (sc.start_t..sc.end_t)
            .map(|t| {
                let s = over.states[t];
                let dir = Point::new(s.heading.cos(), s.heading.sin());
                over.corridor.cast(s.position, dir).unwrap().t
            })
            .collect();
        for w in ahead.windows(2) {
            assert!(w[1] < w[0], "distance ahead {:?}", ahead);
        }
    }

    #[test]
    fn injection_labels_exactly_the_override_span() {
        let cfg = quiet();
        let nominal_run = run(&cfg, 3, 80, None).unwrap();
        let sc = find_override_window(&nominal_run, AnomalyKind::EarlyLeft, 10, 5).unwrap();
        let injected = inject_anomaly(&nominal_run.episode, &sc, &cfg, 3).unwrap();
        for r in injected.records() {
            assert_eq!(r.anomaly, Some(sc.contains(r.t)));
            if sc.contains(r.t) {
                assert_eq!(r.steering, EARLY_LEFT_COMMAND);
            }
        }
        for t in 0..sc.start_t {
            assert_eq!(injected.frame(t), nominal_run.episode.frame(t));
            assert_eq!(injected.records()[t], nominal_run.episode.records()[t]);
        }
        assert_ne!(injected.frame(sc.start_t + 1), nominal_run.episode.frame(sc.start_t + 1));
    }

    #[test]
    fn single_record_window() {
        let cfg = quiet();
        let ep = simulate_episode(&cfg, 5, 20).unwrap();
        assert!(AnomalyScenario::new(AnomalyKind::LateRight, 7, 7).is_err());
        let sc = AnomalyScenario::new(AnomalyKind::LateRight, 6, 7).unwrap();
        let inj = inject_anomaly(&ep, &sc, &cfg, 5).unwrap();
        assert_eq!(inj.records().iter().filter(|r| r.anomaly == Some(true)).count(), 1);
        let bad = AnomalyScenario::new(AnomalyKind::LateRight, 15, 25).unwrap();
        assert!(inject_anomaly(&ep, &bad, &cfg, 5).is_err());
    }
}
