//! Spectrally normalized layers.
//!
//! The largest singular value of each weight, viewed as `[out, rest]`, is
//! tracked by power iteration. Training forwards advance the estimate by
//! one iteration; evaluation forwards reuse the stored vectors unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BufferId, Bound, Mode, ParamId, ParamStore};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let norm = norm.max(T::of(1e-12));
    for x in v {
        *x /= norm;
    }
}

/// Runs `iters` power iterations on `w` (`rows × cols`, row-major) starting
/// from `u`; returns `(u, v, sigma)`.
pub fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &[T], iters: usize) -> (Vec<T>, Vec<T>, T) {
    let mut u = u.to_vec();
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        // v = Wᵀu / |Wᵀu|
        v.fill(T::zero());
        for i in 0..rows {
            let row = &w[i * cols..(i + 1) * cols];
            for (vj, &wij) in v.iter_mut().zip(row) {
                *vj += wij * u[i];
            }
        }
        normalize(&mut v);
        // u = Wv / |Wv|
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        normalize(&mut u);
    }
    let sigma = (0..rows)
        .map(|i| u[i] * w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>())
        .sum();
    (u, v, sigma)
}

#[derive(Clone, Copy, Debug)]
struct SnState {
    weight: ParamId,
    u: BufferId,
    v: BufferId,
}

impl SnState {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, weight: ParamId, rng: &mut ChaCha8Rng) -> Self {
        let shape = store.get(weight).shape().to_vec();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let mut u: Vec<T> = (0..rows).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
        normalize(&mut u);
        let (u, v, _) = power_iteration(store.get(weight).data(), rows, cols, &u, 1);
        SnState {
            weight,
            u: store.add_buffer(format!("{name}.sn_u"), Tensor::from_vec(&[rows], u).expect("len")),
            v: store.add_buffer(format!("{name}.sn_v"), Tensor::from_vec(&[cols], v).expect("len")),
        }
    }

    /// Advances the singular-vector estimate by `iters` iterations.
    fn refresh<T: Scalar>(&self, store: &mut ParamStore<T>, iters: usize) -> T {
        let w = store.get(self.weight);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let (u, v, sigma) = power_iteration(w.data(), rows, cols, store.buffer(self.u).data(), iters);
        store.buffer_mut(self.u).data_mut().copy_from_slice(&u);
        store.buffer_mut(self.v).data_mut().copy_from_slice(&v);
        sigma
    }

    fn normalized_value<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        let w = store.get(self.weight);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let (u, v) = (store.buffer(self.u).data(), store.buffer(self.v).data());
        let sigma: T = (0..rows)
            .map(|i| u[i] * w.data()[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        w.map(|x| x / sigma)
    }

    fn normalized<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, store: &ParamStore<T>) -> Result<Var> {
        tape.spectral_normalize(
            p.var(self.weight),
            store.buffer(self.u).data(),
            store.buffer(self.v).data(),
        )
    }
}

/// Convolution whose weight is divided by its estimated spectral norm.
#[derive(Clone, Copy, Debug)]
pub struct SnConv2d {
    sn: SnState,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl SnConv2d {
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
        SnConv2d {
            sn: SnState::new(store, name, weight, rng),
            bias,
            stride,
            pad,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.sn.weight
    }

    /// Power-iterates in training mode; returns the current σ estimate.
    pub fn prepare<T: Scalar>(&self, store: &mut ParamStore<T>, mode: Mode, iters: usize) -> Option<T> {
        (mode == Mode::Train).then(|| self.sn.refresh(store, iters))
    }

    pub fn normalized_weight<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        self.sn.normalized_value(store)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.sn.normalized(tape, p, store)?;
        tape.conv2d(x, w, Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Affine layer whose weight is divided by its estimated spectral norm.
#[derive(Clone, Copy, Debug)]
pub struct SnLinear {
    sn: SnState,
    pub bias: ParamId,
}

impl SnLinear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_out, fan_in], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng);
        SnLinear {
            sn: SnState::new(store, name, weight, rng),
            bias,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.sn.weight
    }

    pub fn prepare<T: Scalar>(&self, store: &mut ParamStore<T>, mode: Mode, iters: usize) -> Option<T> {
        (mode == Mode::Train).then(|| self.sn.refresh(store, iters))
    }

    pub fn normalized_weight<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        self.sn.normalized_value(store)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.sn.normalized(tape, p, store)?;
        tape.linear(x, w, Some(p.var(self.bias)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn power_iteration_on_diagonal() {
        let w = [3.0f64, 0.0, 0.0, 0.0, 1.0, 0.0];
        let (_, _, s) = power_iteration(&w, 2, 3, &[0.6, 0.8], 50);
        assert!((s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn eval_mode_leaves_estimates_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let layer = SnConv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng);
        let before = store.clone();
        assert!(layer.prepare(&mut store, Mode::Eval, 1).is_none());
        assert_eq!(before.buffers().count(), store.buffers().count());
        for ((_, a), (_, b)) in before.buffers().zip(store.buffers()) {
            assert_eq!(a, b);
        }
        assert!(layer.prepare(&mut store, Mode::Train, 1).is_some());
    }
}
