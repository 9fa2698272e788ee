//! Parameter storage, layers and optimizers on top of the autodiff tape.

mod layers;
mod spectral;

pub use layers::{BatchNorm, BnUpdate, Conv2d, ConvLstm, LstmState, Linear, Mode};
pub use spectral::{power_iteration, SnConv2d, SnLinear};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Index of a non-trainable state tensor (running statistics, singular vectors).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

/// Named trainable tensors plus named persistent buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

/// Parameters of a store attached to one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.params.push(value);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("generated length matches"))
    }

    /// Handles of all parameters in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffer_names.iter().map(String::as_str).zip(&self.buffers)
    }

    /// Puts every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter in store order (zeros where unused).
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    /// Replaces tensors by name, checking shapes; used by checkpoint loading.
    pub fn load_named(
        &mut self,
        params: &[(String, Tensor<T>)],
        buffers: &[(String, Tensor<T>)],
    ) -> Result<()> {
        fn fill<T: Scalar>(names: &[String], slots: &mut [Tensor<T>], src: &[(String, Tensor<T>)]) -> Result<()> {
            if names.len() != src.len() {
                return Err(Error::invalid(format!(
                    "expected {} tensors, archive has {}",
                    names.len(),
                    src.len()
                )));
            }
            for (name, slot) in names.iter().zip(slots.iter_mut()) {
                let (_, t) = src
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::invalid(format!(
                        "tensor {name}: shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
            Ok(())
        }
        fill(&self.names, &mut self.params, params)?;
        fill(&self.buffer_names, &mut self.buffers, buffers)
    }
}

/// A scalar objective recorded on a tape, with the parameters it trains.
pub struct LossGraph<T: Scalar> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub bound: Bound,
    /// Batch-normalization statistics to fold in after the step.
    pub updates: Vec<BnUpdate<T>>,
    /// Mean energy of the true pairs, for discriminator objectives.
    pub real_energy: Option<f64>,
}

impl<T: Scalar> LossGraph<T> {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0].as_f64()
    }

    /// Gradients for every parameter of `store` in store order.
    pub fn grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store.collect_grads(&self.bound, &self.tape.backward(self.loss))
    }
}

/// Adam optimizer state over a whole [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            lr: T::of(lr),
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.params.len());
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in store
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            let x = b.var(id);
            let c = tape.add_scalar(x, -1.0);
            let sq = tape.square(c);
            let l = tape.sum(sq);
            let g = tape.backward(l);
            let grads = store.collect_grads(&b, &g);
            opt.step(&mut store, &grads);
        }
        for &v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn load_named_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add_uniform("w", &[2, 2], 2, &mut rng);
        let bad = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(store.load_named(&bad, &[]).is_err());
        let good = vec![("w".to_string(), Tensor::full(&[2, 2], 0.5))];
        store.load_named(&good, &[]).unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[0.5; 4]);
    }
}
