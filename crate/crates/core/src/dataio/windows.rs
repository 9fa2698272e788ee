//! Sliding `(x_{t-3:t}, u_{t-2:t+1}, x_{t+1})` windows over an episode.

use super::episode::Episode;
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Number of context frames in a window.
pub const WINDOW_CONTEXT: usize = 4;

/// One prediction window borrowing frames from its episode.
#[derive(Clone, Copy, Debug)]
pub struct TrainingWindow<'a> {
    /// Index of the last context frame.
    pub t: usize,
    pub frames: [&'a Frame<f32>; WINDOW_CONTEXT],
    /// `u_{t-2}, u_{t-1}, u_t, u_{t+1}`.
    pub commands: [f64; WINDOW_CONTEXT],
    pub target: &'a Frame<f32>,
}

impl<'a> TrainingWindow<'a> {
    /// Window ending at `t`, taking frames from `frames_from` and commands
    /// from `commands_from` (the same episode except for linked pairs).
    pub fn at(frames_from: &'a Episode, commands_from: &'a Episode, t: usize) -> Result<Self> {
        let n = frames_from.len().min(commands_from.len());
        if t < WINDOW_CONTEXT - 1 || t + 1 >= n {
            return Err(Error::invalid(format!("no window ends at {t} in an episode of {n} records")));
        }
        Ok(TrainingWindow {
            t,
            frames: std::array::from_fn(|k| frames_from.frame(t + 1 - WINDOW_CONTEXT + k)),
            commands: std::array::from_fn(|k| commands_from.steering(t + 2 - WINDOW_CONTEXT + k)),
            target: frames_from.frame(t + 1),
        })
    }

    /// The frame preceding the target, `x_t`.
    pub fn last_frame(&self) -> &'a Frame<f32> {
        self.frames[WINDOW_CONTEXT - 1]
    }

    /// Command that conditions the prediction, `u_{t+1}`.
    pub fn next_command(&self) -> f64 {
        self.commands[WINDOW_CONTEXT - 1]
    }
}

/// All windows of an episode, one per `t ∈ [3, len-2]`, in order.
pub fn make_windows(episode: &Episode) -> Result<Vec<TrainingWindow<'_>>> {
    if episode.len() < WINDOW_CONTEXT + 1 {
        return Err(Error::invalid(format!(
            "episode of {} records is too short for a window (need {})",
            episode.len(),
            WINDOW_CONTEXT + 1
        )));
    }
    (WINDOW_CONTEXT - 1..episode.len() - 1)
        .map(|t| TrainingWindow::at(episode, episode, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{simulate_episode, WorldConfig};

    fn cfg() -> WorldConfig {
        WorldConfig {
            image_height: 32,
            image_width: 32,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn counts() {
        assert_eq!(make_windows(&simulate_episode(&cfg(), 0, 5).unwrap()).unwrap().len(), 1);
        assert_eq!(make_windows(&simulate_episode(&cfg(), 0, 100).unwrap()).unwrap().len(), 96);
    }

    #[test]
    fn alignment_and_reconstruction() {
        let ep = simulate_episode(&cfg(), 4, 30).unwrap();
        let ws = make_windows(&ep).unwrap();
        let mut stream = ws[0].commands[..3].to_vec();
        for w in &ws {
            assert_eq!(w.commands[3], ep.records()[w.t + 1].steering);
            assert!(std::ptr::eq(w.target, ep.frame(w.t + 1)));
            assert!(std::ptr::eq(w.frames[0], ep.frame(w.t - 3)));
            stream.push(w.next_command());
        }
        assert_eq!(stream, ep.commands()[1..]);
    }

    #[test]
    fn short_episode_rejected() {
        let ep = simulate_episode(&cfg(), 0, 5).unwrap();
        let four = crate::dataio::Episode::new(
            ep.records()[..4].to_vec(),
            ep.frames()[..4].to_vec(),
            ep.meta().clone(),
        )
        .unwrap();
        assert!(matches!(make_windows(&four), Err(Error::InvalidArgument(_))));
    }
}
