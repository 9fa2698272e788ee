//! System-focused monitor: action-conditioned predictive-coding video
//! prediction, refined adversarially against an action critic, and scored
//! by how well each candidate command explains the observed next frame.
//!
//! One step of the network observes a frame, computes per-layer errors
//! against the current predictions, updates the recurrent state top-down
//! with the next command tiled onto the top layer, and emits the
//! prediction of the following frame.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Archive;
use crate::dataio::{derived_rng, TrainingWindow, WINDOW_CONTEXT};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{argmin_lower, dssim, nearest_action_index, ActionGrid, SSIM_C1, SSIM_C2};
use crate::nn::{Adam, Bound, Conv2d, ConvLstm, LossGraph, LstmState, Mode, ParamStore, SnConv2d, SnLinear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "sfam";

/// Which training stage produced a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(Error::invalid(format!("unknown stage tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfamConfig {
    pub height: usize,
    pub width: usize,
    /// Target channels per layer; the first is the image's 3 channels.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    pub lambda_err: f64,
    pub lambda_ssim: f64,
    pub lambda_prev: f64,
    pub ssim_kernel: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Random subset of windows visited per epoch; 0 means all.
    pub windows_per_epoch: usize,
    /// Output channels of the nine critic convolutions.
    pub critic_channels: Vec<usize>,
    pub critic_slope: f64,
    pub critic_learning_rate: f64,
    pub stage2_learning_rate: f64,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for SfamConfig {
    fn default() -> Self {
        SfamConfig {
            height: 64,
            width: 80,
            channels: vec![3, 32, 48, 64],
            kernel: 3,
            grid_lo: -0.3,
            grid_hi: 0.3,
            grid_n: 15,
            lambda_err: 0.1,
            lambda_ssim: 1.0,
            lambda_prev: 0.5,
            ssim_kernel: 5,
            learning_rate: 1e-3,
            batch_size: 8,
            stage1_epochs: 10,
            stage2_epochs: 2,
            windows_per_epoch: 0,
            critic_channels: vec![16, 16, 32, 32, 64, 64, 64, 64, 64],
            critic_slope: 0.1,
            critic_learning_rate: 2e-4,
            stage2_learning_rate: 1e-4,
            power_iterations: 1,
            seed: 0,
        }
    }
}

impl SfamConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SfamConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of layer `l` (0-based).
    pub fn layer_size(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }

    /// Size of the tiled command channel at the top layer.
    pub fn command_tile(&self) -> (usize, usize, usize) {
        let (h, w) = self.layer_size(self.layers() - 1);
        (1, h, w)
    }

    pub fn grid(&self) -> Result<ActionGrid> {
        ActionGrid::new(self.grid_lo, self.grid_hi, self.grid_n)
    }

    /// Index of the fake class in critic outputs.
    pub fn fake_label(&self) -> usize {
        self.grid_n
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.channels.is_empty() || self.channels[0] != 3 || self.channels.contains(&0) {
            return err(format!("channels {:?} must start with 3 and be positive", self.channels));
        }
        let div = 1usize << (self.layers() - 1).min(30);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return err(format!("input {}x{} must be divisible by {div}", self.height, self.width));
        }
        if self.kernel % 2 == 0 {
            return err(format!("kernel {} must be odd", self.kernel));
        }
        if self.ssim_kernel % 2 == 0 || self.ssim_kernel > self.height.min(self.width) {
            return err(format!("ssim_kernel {} must be odd and fit the frame", self.ssim_kernel));
        }
        if [self.lambda_err, self.lambda_ssim, self.lambda_prev].iter().any(|l| !(*l >= 0.0)) {
            return err("loss weights must be non-negative".into());
        }
        self.grid().map_err(|e| Error::config(e.to_string()))?;
        if self.critic_channels.len() != 9 || self.critic_channels.contains(&0) {
            return err(format!("critic needs nine positive channel counts, got {:?}", self.critic_channels));
        }
        let (ch, cw) = self.critic_feature_size();
        if ch == 0 || cw == 0 {
            return err("input too small for the critic".into());
        }
        if self.batch_size == 0 || self.power_iterations == 0 {
            return err("batch_size and power_iterations must be positive".into());
        }
        if ![self.learning_rate, self.critic_learning_rate, self.stage2_learning_rate]
            .iter()
            .all(|&r| r > 0.0)
        {
            return err("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Critic layer `i` is 3×3 stride 1 when even, 4×4 stride 2 when odd.
    fn critic_geometry(i: usize) -> (usize, usize) {
        if i % 2 == 0 {
            (3, 1)
        } else {
            (4, 2)
        }
    }

    pub fn critic_feature_size(&self) -> (usize, usize) {
        (0..9).fold((self.height, self.width), |(h, w), i| {
            let (k, s) = Self::critic_geometry(i);
            ((h + 2).saturating_sub(k) / s + 1, (w + 2).saturating_sub(k) / s + 1)
        })
    }
}

#[derive(Clone, Debug)]
struct Layer {
    /// Target convolution from the error below (absent at layer 0).
    target: Option<Conv2d>,
    pred: Conv2d,
    lstm: ConvLstm,
}

/// Predictive-coding network weights.
#[derive(Clone, Debug)]
pub struct SfamParams<T> {
    layers: Vec<Layer>,
    pub store: ParamStore<T>,
}

/// Nine spectrally normalized convolutions and an affine head with
/// `N + 1` outputs (actions, then fake).
#[derive(Clone, Debug)]
pub struct ActionCritic<T> {
    convs: Vec<SnConv2d>,
    head: SnLinear,
    slope: f64,
    pub store: ParamStore<T>,
}

/// Recurrent and error representations of every layer on one tape.
#[derive(Clone, Debug)]
pub struct PrednetState {
    pub r: Vec<LstmState>,
    pub e: Vec<Var>,
}

/// Everything a step produced: the new state, the errors it measured and
/// the prediction of the next frame.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: PrednetState,
    pub prediction: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityProfile {
    pub grid: ActionGrid,
    pub dssims: Vec<f64>,
}

impl DissimilarityProfile {
    pub fn best_index(&self) -> usize {
        argmin_lower(&self.dssims).expect("grid has at least two points")
    }

    pub fn best_action(&self) -> f64 {
        self.grid.values()[self.best_index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub critic_loss: f64,
    pub gen_loss: f64,
    /// Fraction of real and fake frames the critic sorts correctly.
    pub real_fake_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SfamLog {
    pub stage1: Vec<Stage1Epoch>,
    pub stage2: Vec<Stage2Epoch>,
}

/// `Σ_s (1/K)·log((1/K)/p_s)` with `p_s` clamped at `1e-12`.
pub fn kl_uniform(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::invalid("probabilities must be non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {total}")));
    }
    let q = 1.0 / probs.len() as f64;
    Ok(probs.iter().map(|&p| q * (q / p.max(1e-12)).ln()).sum())
}

/// Stage-1 objective from its parts: mean error activation, and the two
/// SSIM terms of the prediction.
pub fn stage1_loss<T: Scalar>(
    cfg: &SfamConfig,
    prediction: &Frame<T>,
    next: &Frame<T>,
    prev: &Frame<T>,
    errors: &[&[T]],
) -> Result<f64> {
    let count: usize = errors.iter().map(|e| e.len()).sum();
    let total: f64 = errors.iter().flat_map(|e| e.iter()).map(|v| v.as_f64()).sum();
    let mean = if count == 0 { 0.0 } else { total / count as f64 };
    let k = cfg.ssim_kernel;
    Ok(cfg.lambda_err * mean - cfg.lambda_ssim * crate::metrics::ssim(prediction, next, k)?
        + cfg.lambda_prev * crate::metrics::ssim(prediction, prev, k)?)
}

pub fn dissimilarity_profile(predictions: &[Frame<f32>], actual_next: &Frame<f32>, grid: &ActionGrid, kernel: usize) -> Result<DissimilarityProfile> {
    if predictions.len() != grid.len() {
        return Err(Error::invalid(format!(
            "{} predictions for a grid of {}",
            predictions.len(),
            grid.len()
        )));
    }
    let dssims = predictions
        .iter()
        .map(|p| dssim(p, actual_next, kernel))
        .collect::<Result<Vec<_>>>()?;
    Ok(DissimilarityProfile {
        grid: grid.clone(),
        dssims,
    })
}

/// `|u - argmin dssim|`, ties resolved toward the lower grid index.
pub fn sfam_deviation(profile: &DissimilarityProfile, u_actual: f64) -> f64 {
    (u_actual - profile.best_action()).abs()
}

/// Differentiable mean SSIM of two NCHW tensors with a box window.
pub fn ssim_graph<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, k: usize) -> Result<Var> {
    let ma = tape.box_mean(a, k)?;
    let mb = tape.box_mean(b, k)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let maa = tape.box_mean(aa, k)?;
    let mbb = tape.box_mean(bb, k)?;
    let mab = tape.box_mean(ab, k)?;
    let ma2 = tape.mul(ma, ma)?;
    let mb2 = tape.mul(mb, mb)?;
    let mamb = tape.mul(ma, mb)?;
    let va = tape.sub(maa, ma2)?;
    let vb = tape.sub(mbb, mb2)?;
    let cov = tape.sub(mab, mamb)?;
    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let n1 = tape.scale(mamb, T::of(2.0));
    let n1 = tape.add_scalar(n1, c1);
    let n2 = tape.scale(cov, T::of(2.0));
    let n2 = tape.add_scalar(n2, c2);
    let d1 = tape.add(ma2, mb2)?;
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(va, vb)?;
    let d2 = tape.add_scalar(d2, c2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Mean over rows of `KL(U ‖ softmax(logits))`, clamped like [`kl_uniform`].
fn kl_uniform_graph<T: Scalar>(tape: &mut Tape<T>, action_logits: Var) -> Result<Var> {
    let k = tape.shape(action_logits)[1];
    let n = tape.shape(action_logits)[0];
    let lp = tape.log_softmax(action_logits)?;
    let lp = tape.clamp(lp, T::of(1e-12f64.ln()), T::zero());
    let s = tape.sum(lp);
    // Σ_s q·(log q − log p_s) per row, averaged over rows.
    let per = tape.scale(s, -T::one() / T::of((k * n) as f64));
    Ok(tape.add_scalar(per, -T::of((k as f64).ln())))
}

/// Mean cross-entropy of `[N, K]` logits against labels.
fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

fn tiled_commands<T: Scalar>(commands: &[f64], tile: (usize, usize, usize)) -> Tensor<T> {
    let plane = tile.1 * tile.2;
    let mut data = Vec::with_capacity(commands.len() * plane);
    for &u in commands {
        data.extend(std::iter::repeat(T::of(u)).take(plane));
    }
    Tensor::from_vec(&[commands.len(), 1, tile.1, tile.2], data).expect("tile shape")
}

impl<T: Scalar> SfamParams<T> {
    pub fn new(cfg: &SfamConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let n = cfg.layers();
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let a = cfg.channels[l];
            let target = (l > 0).then(|| {
                Conv2d::new(&mut store, &format!("p.l{l}.target"), 2 * cfg.channels[l - 1], a, cfg.kernel, 1, cfg.kernel / 2, rng)
            });
            let pred = Conv2d::new(&mut store, &format!("p.l{l}.pred"), a, a, cfg.kernel, 1, cfg.kernel / 2, rng);
            let above = if l + 1 < n { cfg.channels[l + 1] } else { 1 };
            let lstm = ConvLstm::new(&mut store, &format!("p.l{l}.lstm"), 2 * a + above, a, cfg.kernel, rng);
            layers.push(Layer { target, pred, lstm });
        }
        SfamParams { layers, store }
    }

    /// All-zero state for a batch of `n` sequences.
    pub fn zero_state(&self, tape: &mut Tape<T>, cfg: &SfamConfig, n: usize) -> PrednetState {
        let mut r = Vec::new();
        let mut e = Vec::new();
        for (l, &a) in cfg.channels.iter().enumerate() {
            let (h, w) = cfg.layer_size(l);
            let zeros = Tensor::zeros(&[n, a, h, w]);
            r.push(LstmState {
                h: tape.constant(zeros.clone()),
                c: tape.constant(zeros),
            });
            e.push(tape.constant(Tensor::zeros(&[n, 2 * a, h, w])));
        }
        PrednetState { r, e }
    }

    fn predict_layer(&self, tape: &mut Tape<T>, p: &Bound, l: usize, r: Var) -> Result<Var> {
        let y = self.layers[l].pred.forward(tape, p, r)?;
        Ok(if l == 0 {
            // ReLU followed by saturation at full intensity.
            tape.clamp(y, T::zero(), T::one())
        } else {
            tape.relu(y)
        })
    }

    /// Bottom-up pass: errors of the current predictions against `frame`.
    pub fn observe(&self, tape: &mut Tape<T>, p: &Bound, state: &PrednetState, frame: Var) -> Result<Vec<Var>> {
        let mut errors = Vec::with_capacity(self.layers.len());
        let mut target = frame;
        for l in 0..self.layers.len() {
            if l > 0 {
                let conv = self.layers[l].target.expect("upper layers have a target conv");
                let t = conv.forward(tape, p, errors[l - 1])?;
                let t = tape.relu(t);
                target = tape.max_pool2(t)?;
            }
            let pred = self.predict_layer(tape, p, l, state.r[l].h)?;
            if tape.shape(pred) != tape.shape(target) {
                return Err(Error::invalid(format!(
                    "layer {l}: prediction {:?} vs target {:?}",
                    tape.shape(pred),
                    tape.shape(target)
                )));
            }
            let d = tape.sub(pred, target)?;
            let pos = tape.relu(d);
            let nd = tape.scale(d, -T::one());
            let neg = tape.relu(nd);
            errors.push(tape.concat_channels(&[pos, neg])?);
        }
        Ok(errors)
    }

    /// Top-down recurrent update from fresh errors and the tiled command;
    /// returns the new state and the next-frame prediction.
    pub fn update(&self, tape: &mut Tape<T>, p: &Bound, state: &PrednetState, errors: Vec<Var>, command: Var) -> Result<StepOutput> {
        let n = self.layers.len();
        let mut r = state.r.clone();
        for l in (0..n).rev() {
            let above = if l + 1 < n { tape.upsample2(r[l + 1].h)? } else { command };
            let input = tape.concat_channels(&[errors[l], above])?;
            r[l] = self.layers[l].lstm.step(tape, p, input, state.r[l])?;
        }
        let prediction = self.predict_layer(tape, p, 0, r[0].h)?;
        Ok(StepOutput {
            state: PrednetState { r, e: errors },
            prediction,
        })
    }

    /// One full step: observe `frame`, then update with `command`.
    pub fn step(&self, tape: &mut Tape<T>, p: &Bound, state: &PrednetState, frame: Var, command: Var) -> Result<StepOutput> {
        let errors = self.observe(tape, p, state, frame)?;
        self.update(tape, p, state, errors, command)
    }
}

impl<T: Scalar> ActionCritic<T> {
    pub fn new(cfg: &SfamConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(9);
        let mut in_ch = 3;
        for (i, &out) in cfg.critic_channels.iter().enumerate() {
            let (k, s) = SfamConfig::critic_geometry(i);
            convs.push(SnConv2d::new(&mut store, &format!("c.conv{i}"), in_ch, out, k, s, 1, rng));
            in_ch = out;
        }
        let (fh, fw) = cfg.critic_feature_size();
        let head = SnLinear::new(&mut store, "c.head", in_ch * fh * fw, cfg.grid_n + 1, rng);
        ActionCritic {
            convs,
            head,
            slope: cfg.critic_slope,
            store,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    /// Advances every spectral-norm estimate by `iters` power iterations.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for c in &self.convs {
            c.prepare(&mut self.store, Mode::Train, iters);
        }
        self.head.prepare(&mut self.store, Mode::Train, iters);
    }

    /// Normalized weights of all ten layers, for inspection.
    pub fn normalized_weights(&self) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = self.convs.iter().map(|c| c.normalized_weight(&self.store)).collect();
        out.push(self.head.normalized_weight(&self.store));
        out
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, p, &self.store, h)?;
            if i + 1 < self.convs.len() {
                h = tape.leaky_relu(h, T::of(self.slope));
            }
        }
        let h = tape.leaky_relu(h, T::of(self.slope));
        let f = tape.flatten(h)?;
        self.head.forward(tape, p, &self.store, f)
    }
}

/// Prediction network, action critic and configuration.
#[derive(Clone, Debug)]
pub struct SfamModel<T> {
    config: SfamConfig,
    pub params: SfamParams<T>,
    pub critic: ActionCritic<T>,
    pub stage: Stage,
}

/// A batch of windows as tensors.
struct Batch<T> {
    frames: Vec<Tensor<T>>,
    commands: Vec<[f64; WINDOW_CONTEXT]>,
    target: Tensor<T>,
}

impl<T: Scalar> SfamModel<T> {
    pub fn new(config: SfamConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, 20);
        let params = SfamParams::new(&config, &mut rng);
        let critic = ActionCritic::new(&config, &mut rng);
        Ok(SfamModel {
            config,
            params,
            critic,
            stage: Stage::Stage1,
        })
    }

    pub fn config(&self) -> &SfamConfig {
        &self.config
    }

    pub fn grid(&self) -> ActionGrid {
        self.config.grid().expect("validated")
    }

    fn check_frame(&self, f: &Frame<f32>) -> Result<()> {
        let want = (3, self.config.height, self.config.width);
        if f.dims() != want {
            return Err(Error::invalid(format!("frame {:?}, model expects {want:?}", f.dims())));
        }
        Ok(())
    }

    fn frames_tensor(&self, frames: &[&Frame<f32>]) -> Result<Tensor<T>> {
        for f in frames {
            self.check_frame(f)?;
        }
        Frame::batch(frames)
    }

    fn batch(&self, windows: &[&TrainingWindow<'_>]) -> Result<Batch<T>> {
        let frames = (0..WINDOW_CONTEXT)
            .map(|k| self.frames_tensor(&windows.iter().map(|w| w.frames[k]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let target = self.frames_tensor(&windows.iter().map(|w| w.target).collect::<Vec<_>>())?;
        Ok(Batch {
            frames,
            commands: windows.iter().map(|w| w.commands).collect(),
            target,
        })
    }

    fn command_var(&self, tape: &mut Tape<T>, commands: &[f64]) -> Var {
        tape.constant(tiled_commands(commands, self.config.command_tile()))
    }

    /// Four-step rollout of a batch; returns the prediction of the target
    /// frame and every error tensor measured along the way.
    fn rollout(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<(Var, Vec<Var>)> {
        let n = batch.commands.len();
        let mut state = self.params.zero_state(tape, &self.config, n);
        let mut errors = Vec::new();
        let mut prediction = None;
        for k in 0..WINDOW_CONTEXT {
            let x = tape.constant(batch.frames[k].clone());
            let u: Vec<f64> = batch.commands.iter().map(|c| c[k]).collect();
            let u = self.command_var(tape, &u);
            let out = self.params.step(tape, p, &state, x, u)?;
            errors.extend(out.state.e.iter().copied());
            state = out.state;
            prediction = Some(out.prediction);
        }
        Ok((prediction.expect("four steps"), errors))
    }

    /// `x̂_{t+1}` from `x_{t-3:t}` and `u_{t-2:t+1}`, starting from zero state.
    pub fn rollout_predict(&self, frames: &[&Frame<f32>], commands: &[f64]) -> Result<Frame<f32>> {
        if frames.len() != WINDOW_CONTEXT || commands.len() != WINDOW_CONTEXT {
            return Err(Error::invalid(format!(
                "rollout needs {WINDOW_CONTEXT} frames and {WINDOW_CONTEXT} commands, got {} and {}",
                frames.len(),
                commands.len()
            )));
        }
        let batch = Batch {
            frames: frames.iter().map(|f| self.frames_tensor(&[f])).collect::<Result<Vec<_>>>()?,
            commands: vec![[commands[0], commands[1], commands[2], commands[3]]],
            target: Tensor::zeros(&[1]),
        };
        let mut tape = Tape::new();
        let p = self.params.store.bind(&mut tape, false);
        let (pred, _) = self.rollout(&mut tape, &p, &batch)?;
        let t = tape.value(pred).cast::<f32>();
        Frame::from_tensor(&t.reshape(&[3, self.config.height, self.config.width])?)
    }

    /// Predictions of `x_{t+1}` under every grid action, for several
    /// windows at once. Each item is `(x_{t-3:t}, u_{t-2:t})`; the first
    /// three steps are shared across the candidate actions.
    pub fn conditioned_predictions_many(
        &self,
        items: &[([&Frame<f32>; WINDOW_CONTEXT], [f64; WINDOW_CONTEXT - 1])],
        grid: &ActionGrid,
    ) -> Result<Vec<Vec<Frame<f32>>>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let n = items.len();
        let g = grid.len();
        let mut tape = Tape::new();
        let p = self.params.store.bind(&mut tape, false);
        let mut state = self.params.zero_state(&mut tape, &self.config, n);
        for k in 0..WINDOW_CONTEXT - 1 {
            let x = self.frames_tensor(&items.iter().map(|it| it.0[k]).collect::<Vec<_>>())?;
            let x = tape.constant(x);
            let u: Vec<f64> = items.iter().map(|it| it.1[k]).collect();
            let u = self.command_var(&mut tape, &u);
            state = self.params.step(&mut tape, &p, &state, x, u)?.state;
        }
        let x = self.frames_tensor(&items.iter().map(|it| it.0[WINDOW_CONTEXT - 1]).collect::<Vec<_>>())?;
        let x = tape.constant(x);
        let errors = self.params.observe(&mut tape, &p, &state, x)?;
        // Expand each sequence into one branch per candidate action.
        let expand = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let t = tape.value(v);
            let per = t.len() / n;
            let mut shape = t.shape().to_vec();
            shape[0] = n * g;
            let mut data = Vec::with_capacity(per * n * g);
            for chunk in t.data().chunks(per) {
                for _ in 0..g {
                    data.extend_from_slice(chunk);
                }
            }
            Ok(tape.constant(Tensor::from_vec(&shape, data)?))
        };
        let errors = errors.into_iter().map(|e| expand(&mut tape, e)).collect::<Result<Vec<_>>>()?;
        let r = state
            .r
            .iter()
            .map(|s| {
                Ok(LstmState {
                    h: expand(&mut tape, s.h)?,
                    c: expand(&mut tape, s.c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let e = state.e.iter().map(|&v| expand(&mut tape, v)).collect::<Result<Vec<_>>>()?;
        let branched = PrednetState { r, e };
        let all: Vec<f64> = (0..n).flat_map(|_| grid.values().iter().copied()).collect();
        let u = self.command_var(&mut tape, &all);
        let out = self.params.update(&mut tape, &p, &branched, errors, u)?;
        let preds = tape.value(out.prediction).cast::<f32>();
        let per = 3 * self.config.height * self.config.width;
        let frames: Vec<Frame<f32>> = preds
            .data()
            .chunks(per)
            .map(|c| Frame::new(3, self.config.height, self.config.width, c.to_vec()))
            .collect::<Result<_>>()?;
        let mut frames = frames.into_iter();
        Ok((0..n).map(|_| frames.by_ref().take(g).collect()).collect())
    }

    pub fn conditioned_predictions(
        &self,
        frames: &[&Frame<f32>],
        commands: &[f64],
        grid: &ActionGrid,
    ) -> Result<Vec<Frame<f32>>> {
        if frames.len() != WINDOW_CONTEXT || commands.len() != WINDOW_CONTEXT - 1 {
            return Err(Error::invalid(format!(
                "need {WINDOW_CONTEXT} frames and {} past commands",
                WINDOW_CONTEXT - 1
            )));
        }
        let item = ([frames[0], frames[1], frames[2], frames[3]], [commands[0], commands[1], commands[2]]);
        Ok(self.conditioned_predictions_many(&[item], grid)?.remove(0))
    }

    /// Critic logits for one frame with frozen spectral estimates.
    pub fn critic_logits(&self, frame: &Frame<f32>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.critic.store.bind(&mut tape, false);
        let x = tape.constant(self.frames_tensor(&[frame])?);
        let y = self.critic.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Stage-1 objective of a batch with gradients on the prediction network.
    pub fn stage1_loss_graph(&self, windows: &[&TrainingWindow<'_>]) -> Result<LossGraph<T>> {
        let batch = self.batch(windows)?;
        let mut tape = Tape::new();
        let p = self.params.store.bind(&mut tape, true);
        let (pred, errors) = self.rollout(&mut tape, &p, &batch)?;
        let loss = self.stage1_objective(&mut tape, &batch, pred, &errors)?;
        Ok(LossGraph {
            tape,
            loss,
            bound: p,
            updates: Vec::new(),
            real_energy: None,
        })
    }

    fn stage1_objective(&self, tape: &mut Tape<T>, batch: &Batch<T>, pred: Var, errors: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let count: usize = errors.iter().map(|&e| tape.value(e).len()).sum();
        let mut total = None;
        for &e in errors {
            let s = tape.sum(e);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let err_mean = tape.scale(total.expect("at least one layer"), T::of(cfg.lambda_err / count as f64));
        let next = tape.constant(batch.target.clone());
        let prev = tape.constant(batch.frames[WINDOW_CONTEXT - 1].clone());
        let s_next = ssim_graph(tape, pred, next, cfg.ssim_kernel)?;
        let s_prev = ssim_graph(tape, pred, prev, cfg.ssim_kernel)?;
        let a = tape.scale(s_next, T::of(-cfg.lambda_ssim));
        let b = tape.scale(s_prev, T::of(cfg.lambda_prev));
        let l = tape.add(err_mean, a)?;
        tape.add(l, b)
    }

    /// Mean DSSIM between rollout predictions and targets.
    pub fn mean_prediction_dssim(&self, windows: &[TrainingWindow<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in windows.chunks(16) {
            let refs: Vec<&TrainingWindow<'_>> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut tape = Tape::new();
            let p = self.params.store.bind(&mut tape, false);
            let (pred, _) = self.rollout(&mut tape, &p, &batch)?;
            let per = 3 * self.config.height * self.config.width;
            let pv = tape.value(pred).cast::<f32>();
            for (c, w) in pv.data().chunks(per).zip(chunk) {
                let f = Frame::new(3, self.config.height, self.config.width, c.to_vec())?;
                total += dssim(&f, w.target, self.config.ssim_kernel)?;
            }
        }
        Ok(total / windows.len().max(1) as f64)
    }

    fn labels(&self, batch: &Batch<T>) -> Vec<usize> {
        let grid = self.grid();
        batch
            .commands
            .iter()
            .map(|c| nearest_action_index(c[WINDOW_CONTEXT - 1], &grid))
            .collect()
    }

    /// Critic objective: real frames labelled with their action, detached
    /// predictions labelled fake. Also returns the real/fake accuracy.
    pub fn critic_loss_graph(&mut self, windows: &[&TrainingWindow<'_>]) -> Result<(LossGraph<T>, f64)> {
        let batch = self.batch(windows)?;
        let labels = self.labels(&batch);
        let mut tape = Tape::new();
        let pp = self.params.store.bind(&mut tape, false);
        let (pred, _) = self.rollout(&mut tape, &pp, &batch)?;
        let fake = tape.detach(pred);
        self.critic.refresh_spectral(self.config.power_iterations);
        let p = self.critic.store.bind(&mut tape, true);
        let real = tape.constant(batch.target.clone());
        let lr = self.critic.forward(&mut tape, &p, real)?;
        let lf = self.critic.forward(&mut tape, &p, fake)?;
        let fake_label = self.config.fake_label();
        let ce_real = cross_entropy(&mut tape, lr, &labels)?;
        let ce_fake = cross_entropy(&mut tape, lf, &vec![fake_label; labels.len()])?;
        let loss = tape.add(ce_real, ce_fake)?;
        let k = fake_label + 1;
        let says_fake = |v: &Tensor<T>| -> Vec<bool> {
            v.data()
                .chunks(k)
                .map(|row| argmax(row) == fake_label)
                .collect()
        };
        let correct = says_fake(tape.value(lr)).iter().filter(|f| !**f).count()
            + says_fake(tape.value(lf)).iter().filter(|f| **f).count();
        let acc = correct as f64 / (2 * labels.len()) as f64;
        Ok((
            LossGraph {
                tape,
                loss,
                bound: p,
                updates: Vec::new(),
                real_energy: None,
            },
            acc,
        ))
    }

    /// Generator objective `w1·CE(critic(x̂), action) + w2·KL(U ‖ P(action | x̂))`.
    pub fn generator_loss_graph(&self, windows: &[&TrainingWindow<'_>], w1: f64, w2: f64) -> Result<LossGraph<T>> {
        let batch = self.batch(windows)?;
        let labels = self.labels(&batch);
        let mut tape = Tape::new();
        let p = self.params.store.bind(&mut tape, true);
        let (pred, _) = self.rollout(&mut tape, &p, &batch)?;
        let pc = self.critic.store.bind(&mut tape, false);
        let logits = self.critic.forward(&mut tape, &pc, pred)?;
        let ce = cross_entropy(&mut tape, logits, &labels)?;
        let actions = tape.slice_cols(logits, 0, self.config.grid_n)?;
        let kl = kl_uniform_graph(&mut tape, actions)?;
        let a = tape.scale(ce, T::of(w1));
        let b = tape.scale(kl, T::of(w2));
        let loss = tape.add(a, b)?;
        Ok(LossGraph {
            tape,
            loss,
            bound: p,
            updates: Vec::new(),
            real_energy: None,
        })
    }

    pub fn to_archive(&self) -> Archive {
        Archive::new(CHECKPOINT_KIND, Some(self.stage.tag()), &self.config, &[&self.params.store, &self.critic.store])
    }

    pub fn from_archive(archive: &Archive, path: &Path) -> Result<Self> {
        archive.expect_kind(CHECKPOINT_KIND, path)?;
        let stage = Stage::parse(archive.stage.as_deref().unwrap_or(""))
            .map_err(|e| Error::format(path, e.to_string()))?;
        let config: SfamConfig = archive.config()?;
        let mut m = Self::new(config)?;
        archive
            .fill(&mut m.params.store, "p.")
            .and_then(|_| archive.fill(&mut m.critic.store, "c."))
            .map_err(|e| Error::format(path, e.to_string()))?;
        m.stage = stage;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads a checkpoint; with `expected`, rejects a differing config.
    pub fn load(path: &Path, expected: Option<&SfamConfig>) -> Result<Self> {
        let archive = Archive::load(path)?;
        if let Some(cfg) = expected {
            archive.expect_config(cfg)?;
        }
        Self::from_archive(&archive, path)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn divergence(epoch: usize, batch: usize, detail: String) -> Error {
    Error::Divergence { epoch, batch, detail }
}

/// Progress events emitted during training.
#[derive(Clone, Debug)]
pub enum SfamProgress<'a> {
    Stage1(&'a Stage1Epoch),
    Stage2(&'a Stage2Epoch),
}

/// Two-stage training; see [`train_sfam_with`].
pub fn train_sfam<T: Scalar>(windows: &[TrainingWindow<'_>], config: &SfamConfig) -> Result<(SfamModel<T>, SfamLog)> {
    train_sfam_with(windows, config, |_| {})
}

/// Stage 1 minimizes the error/SSIM objective with Adam; stage 2 alternates
/// critic and generator updates. Reproducible for a fixed `config.seed`.
pub fn train_sfam_with<T: Scalar>(
    windows: &[TrainingWindow<'_>],
    config: &SfamConfig,
    mut progress: impl FnMut(SfamProgress<'_>),
) -> Result<(SfamModel<T>, SfamLog)> {
    let mut model = SfamModel::<T>::new(config.clone())?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let mut rng = derived_rng(config.seed, 21);
    let mut log = SfamLog::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let take = if config.windows_per_epoch == 0 {
        windows.len()
    } else {
        config.windows_per_epoch.min(windows.len())
    };

    let mut adam = Adam::new(&model.params.store, config.learning_rate, 0.9, 0.999);
    for epoch in 1..=config.stage1_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order[..take].chunks(config.batch_size).enumerate() {
            let ws: Vec<&TrainingWindow<'_>> = idx.iter().map(|&i| &windows[i]).collect();
            let g = model.stage1_loss_graph(&ws)?;
            let loss = g.value();
            if !loss.is_finite() {
                return Err(divergence(epoch, bi, format!("stage-1 loss = {loss}")));
            }
            let grads = g.grads(&model.params.store);
            adam.step(&mut model.params.store, &grads);
            sum += loss;
            batches += 1;
        }
        let entry = Stage1Epoch {
            epoch,
            loss: sum / batches as f64,
        };
        progress(SfamProgress::Stage1(&entry));
        log.stage1.push(entry);
    }

    if config.stage2_epochs > 0 {
        model.stage = Stage::Stage2;
    }
    let mut adam_c = Adam::new(&model.critic.store, config.critic_learning_rate, 0.5, 0.999);
    let mut adam_g = Adam::new(&model.params.store, config.stage2_learning_rate, 0.5, 0.999);
    for epoch in 1..=config.stage2_epochs {
        order.shuffle(&mut rng);
        let (mut sc, mut sg, mut sa) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for (bi, idx) in order[..take].chunks(config.batch_size).enumerate() {
            let ws: Vec<&TrainingWindow<'_>> = idx.iter().map(|&i| &windows[i]).collect();
            let (g, acc) = model.critic_loss_graph(&ws)?;
            let lc = g.value();
            if !lc.is_finite() {
                return Err(divergence(epoch, bi, format!("critic loss = {lc}")));
            }
            let grads = g.grads(&model.critic.store);
            adam_c.step(&mut model.critic.store, &grads);

            let w1: f64 = rng.gen();
            let w2: f64 = rng.gen();
            let g = model.generator_loss_graph(&ws, w1, w2)?;
            let lg = g.value();
            if !lg.is_finite() {
                return Err(divergence(epoch, bi, format!("generator loss = {lg} (w1 = {w1}, w2 = {w2})")));
            }
            let grads = g.grads(&model.params.store);
            adam_g.step(&mut model.params.store, &grads);
            sc += lc;
            sg += lg;
            sa += acc;
            batches += 1;
        }
        let nb = batches as f64;
        let entry = Stage2Epoch {
            epoch,
            critic_loss: sc / nb,
            gen_loss: sg / nb,
            real_fake_accuracy: sa / nb,
        };
        progress(SfamProgress::Stage2(&entry));
        log.stage2.push(entry);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{make_windows, simulate_episode, WorldConfig};

    fn small() -> SfamConfig {
        SfamConfig {
            height: 16,
            width: 24,
            channels: vec![3, 4, 6],
            critic_channels: vec![4; 9],
            batch_size: 2,
            stage1_epochs: 1,
            stage2_epochs: 1,
            ..SfamConfig::default()
        }
    }

    fn random_frame(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize) -> Frame<f32> {
        Frame::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let cfg = SfamConfig {
            channels: vec![3, 8, 8, 8],
            ..SfamConfig::default()
        };
        let m = SfamModel::<f32>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let p = m.params.store.bind(&mut tape, false);
        let s = m.params.zero_state(&mut tape, m.config(), 1);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 80]));
        let u = m.command_var(&mut tape, &[0.1]);
        let out = m.params.step(&mut tape, &p, &s, x, u).unwrap();
        assert_eq!(tape.shape(out.prediction), &[1, 3, 64, 80]);
        let sizes: Vec<Vec<usize>> = out.state.e.iter().map(|&e| tape.shape(e).to_vec()).collect();
        assert_eq!(sizes, vec![vec![1, 6, 64, 80], vec![1, 16, 32, 40], vec![1, 16, 16, 20], vec![1, 16, 8, 10]]);
        assert_eq!(m.config().command_tile(), (1, 8, 10));
    }

    #[test]
    fn first_step_is_finite_and_bounded() {
        let m = SfamModel::<f64>::new(small()).unwrap();
        let mut rng = derived_rng(1, 0);
        let f = random_frame(&mut rng, 16, 24);
        let frames = [&f, &f, &f, &f];
        let a = m.rollout_predict(&frames, &[0.0; 4]).unwrap();
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, m.rollout_predict(&frames, &[0.0; 4]).unwrap());
        assert!(m.rollout_predict(&frames[..3], &[0.0; 4]).is_err());
    }

    #[test]
    fn branches_match_naive_rollouts() {
        let m = SfamModel::<f64>::new(small()).unwrap();
        let mut rng = derived_rng(2, 0);
        let fs: Vec<Frame<f32>> = (0..4).map(|_| random_frame(&mut rng, 16, 24)).collect();
        let refs: Vec<&Frame<f32>> = fs.iter().collect();
        let grid = ActionGrid::new(-0.3, 0.3, 5).unwrap();
        let branches = m.conditioned_predictions(&refs, &[0.1, -0.1, 0.05], &grid).unwrap();
        assert_eq!(branches.len(), 5);
        for (b, &u) in branches.iter().zip(grid.values()) {
            let naive = m.rollout_predict(&refs, &[0.1, -0.1, 0.05, u]).unwrap();
            let diff = b.data().iter().zip(naive.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn kl_examples() {
        assert!(kl_uniform(&[1.0 / 15.0; 15]).unwrap().abs() < 1e-12);
        let mut one_hot = [0.0; 15];
        one_hot[3] = 1.0;
        let mut want = 0.0;
        for &p in &one_hot {
            let p: f64 = if p < 1e-12 { 1e-12 } else { p };
            want += (1.0 / 15.0) * ((1.0 / 15.0) / p).ln();
        }
        assert!((kl_uniform(&one_hot).unwrap() - want).abs() < 1e-12);
        assert!(kl_uniform(&[0.5, 0.6]).is_err());
        assert!(kl_uniform(&[-0.5, 1.5]).is_err());
    }

    #[test]
    fn kl_graph_matches_scalar() {
        let mut tape = Tape::<f64>::new();
        let logits = vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.5];
        let x = tape.constant(Tensor::from_vec(&[2, 3], logits.clone()).unwrap());
        let kl = kl_uniform_graph(&mut tape, x).unwrap();
        let mut want = 0.0;
        for row in logits.chunks(3) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let p: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
            want += kl_uniform(&p).unwrap() / 2.0;
        }
        assert!((tape.value(kl).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_critic_loss() {
        // All logits equal, so each cross-entropy is log 16.
        let mut m = SfamModel::<f64>::new(small()).unwrap();
        let head = m.critic.head;
        m.critic.store.get_mut(head.bias).data_mut().fill(0.0);
        // Identical rows give identical logits.
        let w = m.critic.store.get_mut(head.weight());
        let cols = w.shape()[1];
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = 1e-3 * ((i % cols) as f64 + 1.0);
        }
        let cfg = WorldConfig {
            image_height: 32,
            image_width: 48,
            ..WorldConfig::default()
        };
        let ep = simulate_episode(&cfg, 0, 8).unwrap().resized(16, 24).unwrap();
        let ws = make_windows(&ep).unwrap();
        let refs: Vec<&TrainingWindow<'_>> = ws.iter().take(2).collect();
        let (g, _) = m.critic_loss_graph(&refs).unwrap();
        assert!((g.value() - 2.0 * 16f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn stage1_loss_substitution() {
        let cfg = small();
        let mut rng = derived_rng(3, 0);
        let x = random_frame(&mut rng, 16, 24).cast::<f64>();
        let zeros = vec![0.0f64; 10];
        let l = stage1_loss(&cfg, &x, &x, &x, &[&zeros]).unwrap();
        assert!((l + 0.5).abs() < 1e-9);
        let bumped = {
            let mut z = zeros.clone();
            z[3] = 0.5;
            z
        };
        assert!(stage1_loss(&cfg, &x, &x, &x, &[&bumped]).unwrap() > l);
    }

    #[test]
    fn training_bookkeeping_and_checkpoint() {
        let cfg = small();
        let wc = WorldConfig {
            image_height: 32,
            image_width: 48,
            ..WorldConfig::default()
        };
        let ep = simulate_episode(&wc, 0, 14).unwrap().resized(16, 24).unwrap();
        let ws = make_windows(&ep).unwrap();
        assert_eq!(ws.len(), 10);
        let (m, log) = train_sfam::<f32>(&ws, &cfg).unwrap();
        assert_eq!(log.stage1.len(), 1);
        assert_eq!(log.stage2.len(), 1);
        assert_eq!(m.stage, Stage::Stage2);
        let (_, log2) = train_sfam::<f32>(&ws, &cfg).unwrap();
        assert_eq!(log, log2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sfam.ckpt");
        m.save(&path).unwrap();
        let back = SfamModel::<f32>::load(&path, Some(&cfg)).unwrap();
        assert_eq!(back.stage, Stage::Stage2);
        let frames: Vec<&Frame<f32>> = ws[0].frames.to_vec();
        assert_eq!(
            back.rollout_predict(&frames, &ws[0].commands).unwrap(),
            m.rollout_predict(&frames, &ws[0].commands).unwrap()
        );
        let other = SfamConfig { lambda_prev: 0.25, ..cfg };
        assert!(matches!(SfamModel::<f32>::load(&path, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn deviation_examples() {
        let grid = ActionGrid::new(-1.0, 1.0, 3).unwrap();
        let p = DissimilarityProfile {
            grid: grid.clone(),
            dssims: vec![0.3, 0.1, 0.2],
        };
        assert_eq!(sfam_deviation(&p, 1.0), 1.0);
        let flat = DissimilarityProfile {
            grid,
            dssims: vec![0.2; 3],
        };
        assert_eq!(sfam_deviation(&flat, 0.5), 1.5);
    }
}
