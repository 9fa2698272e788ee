use rand_chacha::ChaCha8Rng;

use super::{BufferId, Bound, ParamId, ParamStore};
use crate::autograd::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_ch], fan_in, rng);
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_out, fan_in], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng);
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Running-statistics update produced by a training-mode [`BatchNorm`].
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    layer: BatchNorm,
    stats: BatchStats<T>,
}

impl<T: Scalar> BnUpdate<T> {
    /// Folds the batch statistics into the layer's running averages.
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::of(self.layer.momentum);
        let keep = T::one() - m;
        for (r, &b) in store
            .buffer_mut(self.layer.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.stats.mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store
            .buffer_mut(self.layer.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.stats.var)
        {
            *r = keep * *r + m * b;
        }
    }
}

/// Spatial batch normalization with learned affine transform.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) =
                    tape.batch_norm_train(x, p.var(self.gamma), p.var(self.beta), T::of(self.eps))?;
                updates.push(BnUpdate { layer: *self, stats });
                Ok(y)
            }
            Mode::Eval => {
                // y = gamma * (x - mean) / sqrt(var + eps) + beta
                let mean = store.buffer(self.running_mean);
                let var = store.buffer(self.running_var);
                let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + T::of(self.eps)).sqrt()).collect();
                let c = inv.len();
                let inv_t = tape.constant(Tensor::from_vec(&[c], inv)?);
                let gamma = p.var(self.gamma);
                let scale = tape.mul(gamma, inv_t)?;
                let neg_mean = tape.constant(mean.map(|m| -m));
                let shifted = tape.mul(scale, neg_mean)?;
                let shift = tape.add(shifted, p.var(self.beta))?;
                tape.channel_affine(x, scale, shift)
            }
        }
    }
}

/// Hidden and cell tensors of a convolutional LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Four-gate convolutional LSTM with one fused gate convolution.
///
/// Gate order in the fused output: input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstm {
    pub gates: Conv2d,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gates = Conv2d::new(store, &format!("{name}.gates"), in_ch + hidden, 4 * hidden, kernel, 1, kernel / 2, rng);
        ConvLstm { gates, hidden }
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var, state: LstmState) -> Result<LstmState> {
        let x = tape.concat_channels(&[input, state.h])?;
        let z = self.gates.forward(tape, p, x)?;
        let h = self.hidden;
        let zi = tape.slice_channels(z, 0, h)?;
        let zf = tape.slice_channels(z, h, h)?;
        let zo = tape.slice_channels(z, 2 * h, h)?;
        let zg = tape.slice_channels(z, 3 * h, h)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let o = tape.sigmoid(zo);
        let g = tape.tanh(zg);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.buffer_mut(bn.running_mean).data_mut()[0] = 2.0;
        store.buffer_mut(bn.running_var).data_mut()[0] = 4.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 1, 1, 2], 6.0));
        let y = bn.forward(&mut tape, &p, &store, x, Mode::Eval, &mut Vec::new()).unwrap();
        let want = 4.0 / (4.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn train_batch_norm_updates_running_mean() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let mut ups = Vec::new();
        bn.forward(&mut tape, &p, &store, x, Mode::Train, &mut ups).unwrap();
        for u in &ups {
            u.apply(&mut store);
        }
        assert!((store.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn conv_lstm_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstm::new(&mut store, "l", 5, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 5, 6, 7]));
        let h = tape.constant(Tensor::zeros(&[2, 4, 6, 7]));
        let s = cell.step(&mut tape, &p, x, LstmState { h, c: h }).unwrap();
        assert_eq!(tape.shape(s.h), &[2, 4, 6, 7]);
        assert_eq!(tape.shape(s.c), &[2, 4, 6, 7]);
    }
}
