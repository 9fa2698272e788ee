//! Controller-focused monitor: an image-conditioned energy-based GAN.
//!
//! The discriminator predicts a steering command from the image and scores a
//! candidate command by its squared distance to that prediction. At run time
//! only the discriminator is used: the command with the lowest energy on a
//! grid is compared against the command actually issued.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Archive;
use crate::dataio::derived_rng;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{argmin_lower, ActionGrid};
use crate::nn::{Adam, BatchNorm, BnUpdate, Bound, Conv2d, Linear, LossGraph, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "cfam";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfamConfig {
    /// Side of the square input image.
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub noise_dim: usize,
    pub margin: f64,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CfamConfig {
    fn default() -> Self {
        CfamConfig {
            image_size: 64,
            conv_channels: vec![8, 16, 32, 64, 128, 256],
            kernel: 4,
            stride: 2,
            leaky_slope: 0.2,
            noise_dim: 100,
            margin: 1.0,
            hidden_dim: 512,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl CfamConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: CfamConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn padding(&self) -> usize {
        self.kernel.saturating_sub(self.stride) / 2
    }

    /// Spatial side of the encoder output.
    pub fn feature_side(&self) -> usize {
        let pad = self.padding();
        self.conv_channels.iter().fold(self.image_size, |s, _| {
            (s + 2 * pad).saturating_sub(self.kernel) / self.stride.max(1) + 1
        })
    }

    /// Length of the flattened image feature vector.
    pub fn feature_dim(&self) -> usize {
        let side = self.feature_side();
        self.conv_channels.last().copied().unwrap_or(3) * side * side
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return err("conv_channels must be non-empty and positive".into());
        }
        let div = 1usize << self.conv_channels.len().min(30);
        if self.image_size == 0 || self.image_size % div != 0 {
            return err(format!(
                "image_size {} must be divisible by 2^{}",
                self.image_size,
                self.conv_channels.len()
            ));
        }
        if self.kernel == 0 || self.stride == 0 || self.feature_side() * div != self.image_size {
            return err(format!("kernel {} / stride {} must halve the image per layer", self.kernel, self.stride));
        }
        if !(self.margin > 0.0) {
            return err(format!("margin {} must be positive", self.margin));
        }
        if self.noise_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return err("noise_dim, hidden_dim and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("learning rate must be positive and Adam betas in [0, 1)".into());
        }
        if !(self.leaky_slope >= 0.0) {
            return err("leaky_slope must be non-negative".into());
        }
        Ok(())
    }
}

/// Strided conv stack with batch normalization before every conv but the first.
#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm>>,
    slope: f64,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &CfamConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in cfg.conv_channels.iter().enumerate() {
            norms.push((i > 0).then(|| BatchNorm::new(store, &format!("{name}.bn{i}"), in_ch)));
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), in_ch, out, cfg.kernel, cfg.stride, cfg.padding(), rng));
            in_ch = out;
        }
        Encoder {
            convs,
            norms,
            slope: cfg.leaky_slope,
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        store: &ParamStore<T>,
        mut x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            if let Some(bn) = norm {
                x = bn.forward(tape, p, store, x, mode, updates)?;
            }
            x = conv.forward(tape, p, x)?;
            x = tape.leaky_relu(x, T::of(self.slope));
        }
        tape.flatten(x)
    }
}

/// Shared fusion head: `tanh(out(leaky(hidden(features + side))))`.
#[derive(Clone, Debug)]
struct Head {
    side: Linear,
    hidden: Linear,
    out: Linear,
    slope: f64,
}

impl Head {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        side_in: usize,
        cfg: &CfamConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let feat = cfg.feature_dim();
        Head {
            side: Linear::new(store, &format!("{name}.side"), side_in, feat, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), feat, cfg.hidden_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), cfg.hidden_dim, 1, rng),
            slope: cfg.leaky_slope,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, side: Var) -> Result<Var> {
        let e = self.side.forward(tape, p, side)?;
        let fused = tape.add(features, e)?;
        let h = self.hidden.forward(tape, p, fused)?;
        let h = tape.leaky_relu(h, T::of(self.slope));
        let o = self.out.forward(tape, p, h)?;
        Ok(tape.tanh(o))
    }
}

#[derive(Clone, Debug)]
struct Network {
    encoder: Encoder,
    head: Head,
}

/// Generator and discriminator weights with their layer layout.
#[derive(Clone, Debug)]
pub struct CfamParams<T> {
    config: CfamConfig,
    generator: Network,
    discriminator: Network,
    pub gen_store: ParamStore<T>,
    pub disc_store: ParamStore<T>,
}

/// Discriminator energies for every candidate on an action grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    pub grid: ActionGrid,
    pub energies: Vec<f64>,
}

impl EnergyProfile {
    pub fn best_index(&self) -> usize {
        argmin_lower(&self.energies).expect("grid has at least two points")
    }

    pub fn best_action(&self) -> f64 {
        self.grid.values()[self.best_index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfamEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean energy of the true `(x, u)` pairs during the epoch.
    pub real_energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CfamLog {
    pub epochs: Vec<CfamEpoch>,
}

/// Scalar form of the two objectives for given energies.
pub fn cebgan_losses(d_real: f64, d_fake: f64, margin: f64) -> (f64, f64) {
    (d_real + (margin - d_fake).max(0.0), d_fake)
}

/// `|u - argmin energy|`, ties resolved toward the lower grid index.
pub fn cfam_deviation(u_actual: f64, profile: &EnergyProfile) -> f64 {
    (u_actual - profile.best_action()).abs()
}

fn column<T: Scalar>(values: &[f64]) -> Tensor<T> {
    Tensor::from_vec(&[values.len(), 1], values.iter().map(|&v| T::of(v)).collect()).expect("column shape")
}

impl<T: Scalar> CfamParams<T> {
    pub fn new(config: CfamConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, 10);
        let mut gen_store = ParamStore::new();
        let mut disc_store = ParamStore::new();
        let generator = Network {
            encoder: Encoder::new(&mut gen_store, "g.enc", &config, &mut rng),
            head: Head::new(&mut gen_store, "g.head", config.noise_dim, &config, &mut rng),
        };
        let discriminator = Network {
            encoder: Encoder::new(&mut disc_store, "d.enc", &config, &mut rng),
            head: Head::new(&mut disc_store, "d.head", 1, &config, &mut rng),
        };
        Ok(CfamParams {
            config,
            generator,
            discriminator,
            gen_store,
            disc_store,
        })
    }

    pub fn config(&self) -> &CfamConfig {
        &self.config
    }

    /// Resamples a frame to the configured square input if needed.
    pub fn prepare(&self, frame: &Frame<f32>) -> Result<Frame<f32>> {
        let s = self.config.image_size;
        if frame.channels() != 3 {
            return Err(Error::invalid(format!("expected RGB frame, got {} channels", frame.channels())));
        }
        frame.resize(s, s)
    }

    fn batch(&self, frames: &[&Frame<f32>]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        if let Some(f) = frames.iter().find(|f| f.dims() != (3, s, s)) {
            return Err(Error::invalid(format!("frame {:?}, model expects (3, {s}, {s})", f.dims())));
        }
        Frame::batch(frames)
    }

    fn check_noise(&self, z: &[f64], n: usize) -> Result<()> {
        if z.len() != n * self.config.noise_dim {
            return Err(Error::invalid(format!(
                "noise has {} entries, expected {}",
                z.len(),
                n * self.config.noise_dim
            )));
        }
        Ok(())
    }

    fn generate(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        z: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let f = self.generator.encoder.forward(tape, p, &self.gen_store, x, mode, updates)?;
        self.generator.head.forward(tape, p, f, z)
    }

    fn disc_features(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mode: Mode, updates: &mut Vec<BnUpdate<T>>) -> Result<Var> {
        self.discriminator.encoder.forward(tape, p, &self.disc_store, x, mode, updates)
    }

    /// Per-sample energies `(u - p(u, x))²` from precomputed image features.
    fn energy(&self, tape: &mut Tape<T>, p: &Bound, features: Var, u: Var) -> Result<Var> {
        let pred = self.discriminator.head.forward(tape, p, features, u)?;
        let d = tape.sub(u, pred)?;
        Ok(tape.square(d))
    }

    /// Generator output for one frame and one noise vector (evaluation mode).
    pub fn generator_forward(&self, z: &[f64], x: &Frame<f32>) -> Result<f64> {
        self.check_noise(z, 1)?;
        let mut tape = Tape::new();
        let p = self.gen_store.bind(&mut tape, false);
        let xv = tape.constant(self.batch(&[x])?);
        let zv = tape.constant(Tensor::from_vec(&[1, z.len()], z.iter().map(|&v| T::of(v)).collect())?);
        let out = self.generate(&mut tape, &p, xv, zv, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(out).data()[0].as_f64())
    }

    /// Energy of command `u` given frame `x` (evaluation mode).
    pub fn discriminator_energy(&self, u: f64, x: &Frame<f32>) -> Result<f64> {
        let grid_like = [u];
        Ok(self.energies(&[x], &grid_like)?[0][0])
    }

    /// Energies of every command in `commands` for each frame, one batch.
    fn energies(&self, frames: &[&Frame<f32>], commands: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.disc_store.bind(&mut tape, false);
        let x = tape.constant(self.batch(frames)?);
        let feats = self.disc_features(&mut tape, &p, x, Mode::Eval, &mut Vec::new())?;
        let f = tape.value(feats).clone();
        let dim = f.shape()[1];
        let n = commands.len();
        let mut rep = Vec::with_capacity(frames.len() * n * dim);
        for row in f.data().chunks(dim) {
            for _ in 0..n {
                rep.extend_from_slice(row);
            }
        }
        let feats = tape.constant(Tensor::from_vec(&[frames.len() * n, dim], rep)?);
        let all: Vec<f64> = (0..frames.len()).flat_map(|_| commands.iter().copied()).collect();
        let u = tape.constant(column(&all));
        let e = self.energy(&mut tape, &p, feats, u)?;
        Ok(tape.value(e).data().chunks(n).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn energy_sweep(&self, x: &Frame<f32>, grid: &ActionGrid) -> Result<EnergyProfile> {
        Ok(self.energy_sweeps(&[x], grid)?.remove(0))
    }

    /// One profile per frame, all evaluated in a single batch.
    pub fn energy_sweeps(&self, frames: &[&Frame<f32>], grid: &ActionGrid) -> Result<Vec<EnergyProfile>> {
        Ok(self
            .energies(frames, grid.values())?
            .into_iter()
            .map(|energies| EnergyProfile {
                grid: grid.clone(),
                energies,
            })
            .collect())
    }

    /// Discriminator objective for a batch: gradients reach only
    /// discriminator parameters; the generated commands are detached.
    pub fn discriminator_loss_graph(&self, frames: &[&Frame<f32>], u: &[f64], z: &[f64]) -> Result<LossGraph<T>> {
        self.check_noise(z, frames.len())?;
        if u.len() != frames.len() {
            return Err(Error::invalid("one command per frame required"));
        }
        let mut tape = Tape::new();
        let xs = self.batch(frames)?;
        let x = tape.constant(xs);
        let pg = self.gen_store.bind(&mut tape, false);
        let zv = tape.constant(Tensor::from_vec(&[frames.len(), self.config.noise_dim], z.iter().map(|&v| T::of(v)).collect())?);
        let fake = self.generate(&mut tape, &pg, x, zv, Mode::Train, &mut Vec::new())?;
        let fake = tape.detach(fake);
        let p = self.disc_store.bind(&mut tape, true);
        let mut updates = Vec::new();
        let feats = self.disc_features(&mut tape, &p, x, Mode::Train, &mut updates)?;
        let uv = tape.constant(column(u));
        let e_real = self.energy(&mut tape, &p, feats, uv)?;
        let e_fake = self.energy(&mut tape, &p, feats, fake)?;
        let real = tape.mean(e_real);
        let neg = tape.scale(e_fake, -T::one());
        let gap = tape.add_scalar(neg, T::of(self.config.margin));
        let hinge = tape.relu(gap);
        let hinge = tape.mean(hinge);
        let loss = tape.add(real, hinge)?;
        let real_energy = Some(tape.value(real).data()[0].as_f64());
        Ok(LossGraph {
            tape,
            loss,
            bound: p,
            updates,
            real_energy,
        })
    }

    /// Generator objective: gradients reach only generator parameters.
    pub fn generator_loss_graph(&self, frames: &[&Frame<f32>], z: &[f64]) -> Result<LossGraph<T>> {
        self.check_noise(z, frames.len())?;
        let mut tape = Tape::new();
        let x = tape.constant(self.batch(frames)?);
        let p = self.gen_store.bind(&mut tape, true);
        let zv = tape.constant(Tensor::from_vec(&[frames.len(), self.config.noise_dim], z.iter().map(|&v| T::of(v)).collect())?);
        let mut updates = Vec::new();
        let fake = self.generate(&mut tape, &p, x, zv, Mode::Train, &mut updates)?;
        let pd = self.disc_store.bind(&mut tape, false);
        let feats = self.disc_features(&mut tape, &pd, x, Mode::Train, &mut Vec::new())?;
        let e_fake = self.energy(&mut tape, &pd, feats, fake)?;
        let loss = tape.mean(e_fake);
        Ok(LossGraph {
            tape,
            loss,
            bound: p,
            updates,
            real_energy: None,
        })
    }

    /// Mean energy of true pairs in evaluation mode.
    pub fn mean_energy(&self, pairs: &[(&Frame<f32>, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in pairs.chunks(64) {
            let frames: Vec<&Frame<f32>> = chunk.iter().map(|p| p.0).collect();
            let u: Vec<f64> = chunk.iter().map(|p| p.1).collect();
            let mut tape = Tape::new();
            let p = self.disc_store.bind(&mut tape, false);
            let x = tape.constant(self.batch(&frames)?);
            let feats = self.disc_features(&mut tape, &p, x, Mode::Eval, &mut Vec::new())?;
            let uv = tape.constant(column(&u));
            let e = self.energy(&mut tape, &p, feats, uv)?;
            total += tape.value(e).sum().as_f64();
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    pub fn to_archive(&self) -> Archive {
        Archive::new(CHECKPOINT_KIND, None, &self.config, &[&self.gen_store, &self.disc_store])
    }

    pub fn from_archive(archive: &Archive, path: &Path) -> Result<Self> {
        archive.expect_kind(CHECKPOINT_KIND, path)?;
        let config: CfamConfig = archive.config()?;
        let mut m = Self::new(config)?;
        archive
            .fill(&mut m.gen_store, "g.")
            .and_then(|_| archive.fill(&mut m.disc_store, "d."))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

fn divergence(epoch: usize, batch: usize, what: &str, value: f64) -> Error {
    Error::Divergence {
        epoch,
        batch,
        detail: format!("{what} = {value}"),
    }
}

/// Alternating discriminator/generator training with Adam.
///
/// Frames are resampled to the configured size once, up front. Reproducible
/// for a fixed `config.seed`.
pub fn train_cfam<T: Scalar>(pairs: &[(&Frame<f32>, f64)], config: &CfamConfig) -> Result<(CfamParams<T>, CfamLog)> {
    train_cfam_with(pairs, config, |_| {})
}

/// [`train_cfam`] with a per-epoch callback, e.g. for progress output.
pub fn train_cfam_with<T: Scalar>(
    pairs: &[(&Frame<f32>, f64)],
    config: &CfamConfig,
    mut on_epoch: impl FnMut(&CfamEpoch),
) -> Result<(CfamParams<T>, CfamLog)> {
    let mut model = CfamParams::<T>::new(config.clone())?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let frames = pairs
        .iter()
        .map(|(f, _)| model.prepare(f))
        .collect::<Result<Vec<_>>>()?;
    let commands: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut adam_d = Adam::new(&model.disc_store, config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut adam_g = Adam::new(&model.gen_store, config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut rng = derived_rng(config.seed, 11);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = CfamLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // Batch statistics need at least two samples.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        let (mut sd, mut sg, mut se) = (0.0, 0.0, 0.0);
        for (bi, idx) in batches.iter().enumerate() {
            let xs: Vec<&Frame<f32>> = idx.iter().map(|&i| &frames[i]).collect();
            let us: Vec<f64> = idx.iter().map(|&i| commands[i]).collect();
            let z: Vec<f64> = (0..idx.len() * config.noise_dim).map(|_| rng.gen::<f64>()).collect();

            let g = model.discriminator_loss_graph(&xs, &us, &z)?;
            let d_loss = g.tape.value(g.loss).data()[0].as_f64();
            if !d_loss.is_finite() {
                return Err(divergence(epoch, bi, "discriminator loss", d_loss));
            }
            let grads = g.tape.backward(g.loss);
            let grads = model.disc_store.collect_grads(&g.bound, &grads);
            adam_d.step(&mut model.disc_store, &grads);
            for u in &g.updates {
                u.apply(&mut model.disc_store);
            }

            let g2 = model.generator_loss_graph(&xs, &z)?;
            let g_loss = g2.tape.value(g2.loss).data()[0].as_f64();
            if !g_loss.is_finite() {
                return Err(divergence(epoch, bi, "generator loss", g_loss));
            }
            let grads = g2.tape.backward(g2.loss);
            let grads = model.gen_store.collect_grads(&g2.bound, &grads);
            adam_g.step(&mut model.gen_store, &grads);
            for u in &g2.updates {
                u.apply(&mut model.gen_store);
            }
            if !model.disc_store.params().all(|(_, t)| t.all_finite()) {
                return Err(divergence(epoch, bi, "non-finite discriminator weight after step; d_loss", d_loss));
            }
            sd += d_loss;
            sg += g_loss;
            se += g.real_energy.unwrap_or(0.0);
        }
        let nb = batches.len().max(1) as f64;
        let entry = CfamEpoch {
            epoch,
            d_loss: sd / nb,
            g_loss: sg / nb,
            real_energy: se / nb,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::make_action_grid;

    fn tiny() -> CfamConfig {
        CfamConfig {
            image_size: 8,
            conv_channels: vec![4, 6],
            noise_dim: 5,
            hidden_dim: 7,
            batch_size: 4,
            epochs: 1,
            ..CfamConfig::default()
        }
    }

    fn frames(n: usize, size: usize, seed: u64) -> Vec<Frame<f32>> {
        let mut rng = derived_rng(seed, 0);
        (0..n)
            .map(|_| Frame::new(3, size, size, (0..3 * size * size).map(|_| rng.gen::<f32>()).collect()).unwrap())
            .collect()
    }

    /// Output layer zeroed with bias `atanh(c)`: the prediction is constant `c`.
    fn constant_prediction(m: &mut CfamParams<f64>, c: f64) {
        let out = m.discriminator.head.out;
        m.disc_store.get_mut(out.weight).data_mut().fill(0.0);
        m.disc_store.get_mut(out.bias).data_mut()[0] = c.atanh();
    }

    #[test]
    fn default_config_shapes() {
        let cfg = CfamConfig {
            image_size: 128,
            ..CfamConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_dim(), 1024);
        assert_eq!(CfamConfig::default().feature_dim(), 256);
        assert!(CfamConfig { image_size: 96, ..CfamConfig::default() }.validate().is_err());
        assert!(CfamConfig { margin: 0.0, ..CfamConfig::default() }.validate().is_err());
    }

    #[test]
    fn generator_is_deterministic_and_squashed() {
        let m = CfamParams::<f64>::new(tiny()).unwrap();
        let xs = frames(100, 8, 1);
        let mut rng = derived_rng(2, 0);
        for x in &xs {
            let z: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            let a = m.generator_forward(&z, x).unwrap();
            assert!(a > -1.0 && a < 1.0);
            assert_eq!(a, m.generator_forward(&z, x).unwrap());
        }
        assert!(m.generator_forward(&[0.5; 4], &xs[0]).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut m = CfamParams::<f64>::new(tiny()).unwrap();
        let out = m.generator.head.out;
        m.gen_store.get_mut(out.weight).data_mut().fill(0.0);
        m.gen_store.get_mut(out.bias).data_mut().fill(0.0);
        assert_eq!(m.generator_forward(&[0.3; 5], &frames(1, 8, 0)[0]).unwrap(), 0.0);
    }

    #[test]
    fn energy_of_constant_prediction() {
        let mut m = CfamParams::<f64>::new(tiny()).unwrap();
        constant_prediction(&mut m, 0.1);
        let x = &frames(1, 8, 0)[0];
        assert!(m.discriminator_energy(0.1, x).unwrap().abs() < 1e-15);
        assert!((m.discriminator_energy(0.3, x).unwrap() - 0.04).abs() < 1e-12);
        let grid = make_action_grid(-0.3, 0.3, 7).unwrap();
        let prof = m.energy_sweep(x, &grid).unwrap();
        assert_eq!(prof.energies.len(), 7);
        assert_eq!(prof.best_index(), 4);
        for (e, v) in prof.energies.iter().zip(grid.values()) {
            assert!((e - (v - 0.1) * (v - 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_matches_pointwise() {
        let m = CfamParams::<f64>::new(tiny()).unwrap();
        let xs = frames(3, 8, 4);
        let refs: Vec<&Frame<f32>> = xs.iter().collect();
        let grid = make_action_grid(-0.5, 0.5, 9).unwrap();
        let profiles = m.energy_sweeps(&refs, &grid).unwrap();
        for (x, prof) in xs.iter().zip(&profiles) {
            for (&u, &e) in grid.values().iter().zip(&prof.energies) {
                assert!((m.discriminator_energy(u, x).unwrap() - e).abs() < 1e-6);
                assert!(e >= 0.0);
            }
        }
    }

    #[test]
    fn loss_substitution() {
        let (ld, lg) = cebgan_losses(0.3, 0.2, 1.0);
        assert!((ld - 1.1).abs() < 1e-12 && (lg - 0.2).abs() < 1e-12);
        assert_eq!(cebgan_losses(0.3, 1.0, 1.0).0, 0.3);
        assert_eq!(cebgan_losses(0.3, 1.7, 1.0).0, cebgan_losses(0.3, 2.5, 1.0).0);
    }

    #[test]
    fn deviation_examples() {
        let grid = ActionGrid::new(-1.0, 1.0, 3).unwrap();
        let prof = EnergyProfile {
            grid: grid.clone(),
            energies: vec![3.0, 1.0, 2.0],
        };
        assert_eq!(cfam_deviation(1.0, &prof), 1.0);
        assert_eq!(cfam_deviation(0.0, &prof), 0.0);
        let flat = EnergyProfile {
            grid,
            energies: vec![1.0; 3],
        };
        assert_eq!(cfam_deviation(0.5, &flat), 1.5);
    }

    #[test]
    fn hinge_inactive_beyond_margin() {
        // With the fake energy above the margin the loss equals the real term.
        let mut m = CfamParams::<f64>::new(tiny()).unwrap();
        constant_prediction(&mut m, 0.9);
        let xs = frames(4, 8, 3);
        let refs: Vec<&Frame<f32>> = xs.iter().collect();
        // Generator output pinned to -0.9: fake energy 3.24 > m.
        let out = m.generator.head.out;
        m.gen_store.get_mut(out.weight).data_mut().fill(0.0);
        m.gen_store.get_mut(out.bias).data_mut()[0] = (-0.9f64).atanh();
        let g = m.discriminator_loss_graph(&refs, &[0.9; 4], &[0.5; 20]).unwrap();
        assert!(g.tape.value(g.loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn training_bookkeeping_and_determinism() {
        let xs = frames(10, 32, 5);
        let pairs: Vec<(&Frame<f32>, f64)> = xs.iter().enumerate().map(|(i, f)| (f, i as f64 * 0.02 - 0.1)).collect();
        let cfg = CfamConfig {
            image_size: 32,
            epochs: 1,
            ..tiny()
        };
        let cfg = CfamConfig {
            conv_channels: vec![4, 6, 8],
            ..cfg
        };
        let (_, log) = train_cfam::<f32>(&pairs, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        let (_, log2) = train_cfam::<f32>(&pairs, &cfg).unwrap();
        assert_eq!(log, log2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfam.ckpt");
        let mut m = CfamParams::<f32>::new(tiny()).unwrap();
        m.disc_store.get_mut(m.discriminator.head.out.bias).data_mut()[0] = 0.25;
        m.save(&path).unwrap();
        let back = CfamParams::<f32>::load(&path).unwrap();
        let x = &frames(1, 8, 9)[0];
        assert_eq!(
            m.discriminator_energy(0.1, x).unwrap(),
            back.discriminator_energy(0.1, x).unwrap()
        );
    }
}
