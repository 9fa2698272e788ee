//! Episodes on disk, training windows, and the synthetic corridor world.

mod episode;
mod render;
mod sim;
mod windows;
mod world;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use episode::{
    linked_dirs, save_png, Episode, EpisodeMeta, EpisodeRecord, SourceTag, MANIFEST, MANIFEST_HEADER,
};
pub use render::{quantize, render, Camera};
pub use sim::{
    advance, find_override_window, inject_anomaly, pure_pursuit, run, simulate_episode, AnomalyKind,
    AnomalyScenario, LinkedPair, SimRun, EARLY_LEFT_COMMAND, LATE_RIGHT_COMMAND,
};
pub use windows::{make_windows, TrainingWindow, WINDOW_CONTEXT};
pub use world::{Corridor, Hit, Point, Wall, WallKind, WorldConfig};

/// Planar vehicle pose; heading is kept in `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
}

/// Independent deterministic stream `stream` of a user seed.
pub(crate) fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
