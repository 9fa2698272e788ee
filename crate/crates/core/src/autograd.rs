//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass. Leaves are either trainable
//! parameters or constants; only nodes reachable from a parameter carry
//! gradients. Tensors use NCHW layout for images and `[N, F]` for features.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    RepeatOuter(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    BoxMean {
        x: Var,
        k: usize,
    },
    LogSoftmax(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Per-batch batch-normalization statistics, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(format!("{what}: expected NCHW, got {shape:?}"))),
    }
}

fn matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(format!("{what}: expected 2-D, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; gradients stop here.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.g(v)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta.shape(), tb.shape(), what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Div(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let g = self.g(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let g = self.g(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let g = self.g(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let g = self.g(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let g = self.g(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let g = self.g(a);
        self.push(v, Op::Tanh(a), g)
    }

    /// Saturates into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let g = self.g(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.shape(x), "conv2d input")?;
        let (o, wc, kh, kw) = nchw(self.shape(w), "conv2d weight")?;
        if wc != c {
            return Err(Error::invalid(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if let Some(b) = b {
            same_shape(self.shape(b), &[o], "conv2d bias")?;
        }
        let geom = ConvGeom {
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::invalid(format!("conv2d: kernel {kh}x{kw} too large for {h}x{wd}")));
        }
        let shape = [n, o, geom.out_h(), geom.out_w()];
        let mut out = vec![T::zero(); shape.iter().product()];
        kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Conv2d { x, w, b, geom }, g))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "max_pool2")?;
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!("max_pool2: plane {h}x{w} too small")));
        }
        let shape = [n, c, h / 2, w / 2];
        let mut out = vec![T::zero(); shape.iter().product()];
        let argmax = kernels::maxpool2_forward(n * c, h, w, self.value(x).data(), &mut out);
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MaxPool2 { x, argmax }, g))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "upsample2")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?, Op::Upsample2(x), g))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = nchw(self.shape(first), "concat")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = nchw(self.shape(p), "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::invalid(format!(
                    "concat: part {:?} does not match batch/plane of {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let g = parts.iter().any(|&p| self.g(p));
        Ok(self.push(Tensor::from_vec(&[n, total, h, w], out)?, Op::Concat(parts.to_vec()), g))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "slice_channels")?;
        if start + len > c {
            return Err(Error::invalid(format!("slice_channels {start}+{len} > {c}")));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n, len, h, w], out)?, Op::SliceChannels { x, start }, g))
    }

    /// `y = x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = matrix(self.shape(x), "linear input")?;
        let (fout, win) = matrix(self.shape(w), "linear weight")?;
        if win != fin {
            return Err(Error::invalid(format!("linear: input width {fin}, weight expects {win}")));
        }
        if let Some(b) = b {
            same_shape(self.shape(b), &[fout], "linear bias")?;
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            T::zero(),
            &mut out,
            fout as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bo) in row.iter_mut().zip(bias) {
                    *o += bo;
                }
            }
        }
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::from_vec(&[n, fout], out)?, Op::Linear { x, w, b }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let g = self.g(x);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Tiles a tensor with leading extent 1 to leading extent `n`.
    pub fn repeat_outer(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().first() != Some(&1) {
            return Err(Error::invalid(format!("repeat_outer needs leading 1, got {:?}", t.shape())));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(t.len() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::RepeatOuter(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.g(x);
        self.push(v, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let g = self.g(x);
        self.push(v, Op::Mean(x), g)
    }

    /// Spatial batch normalization using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        same_shape(self.shape(gamma), &[c], "batch_norm gamma")?;
        same_shape(self.shape(beta), &[c], "batch_norm beta")?;
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let src = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                mean[ch] += src[base..base + plane].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                var[ch] += src[base..base + plane]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * gm[ch] + bt[ch];
                }
            }
        }
        let g = self.g(x) || self.g(gamma) || self.g(beta);
        let shape = [n, c, h, w];
        let v = self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Per-channel `y = x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "channel_affine")?;
        same_shape(self.shape(scale), &[c], "channel_affine scale")?;
        same_shape(self.shape(shift), &[c], "channel_affine shift")?;
        let plane = h * w;
        let (src, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = src[i] * sc[ch] + sh[ch];
                }
            }
        }
        let g = self.g(x) || self.g(scale) || self.g(shift);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::ChannelAffine { x, scale, shift }, g))
    }

    /// Mean over every valid `k × k` window, stride 1, no padding.
    pub fn box_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "box_mean")?;
        if k == 0 || k > h || k > w {
            return Err(Error::invalid(format!("box_mean: window {k} vs plane {h}x{w}")));
        }
        let shape = [n, c, h + 1 - k, w + 1 - k];
        let mut out = vec![T::zero(); shape.iter().product()];
        kernels::box_sum_forward(n * c, h, w, k, self.value(x).data(), &mut out);
        let inv = T::one() / T::of((k * k) as f64);
        for v in &mut out {
            *v *= inv;
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::BoxMean { x, k }, g))
    }

    /// Row-wise log-softmax of a `[N, K]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = matrix(self.shape(x), "log_softmax")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n, k], out)?, Op::LogSoftmax(x), g))
    }

    /// Picks `x[r, idx[r]]` from a `[N, K]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = matrix(self.shape(x), "gather")?;
        if idx.len() != n || idx.iter().any(|&i| i >= k) {
            return Err(Error::invalid(format!("gather: bad indices for [{n}, {k}]")));
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &i)| src[r * k + i]).collect();
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n], out)?, Op::Gather { x, idx: idx.to_vec() }, g))
    }

    /// Columns `[start, start + len)` of a `[N, K]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, k) = matrix(self.shape(x), "slice_cols")?;
        if start + len > k {
            return Err(Error::invalid(format!("slice_cols {start}+{len} > {k}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * k + start..r * k + start + len]);
        }
        let g = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n, len], out)?, Op::SliceCols { x, start }, g))
    }

    /// `w / σ` where `σ = uᵀ W v` with `W` the weight viewed as `[rows, rest]`.
    ///
    /// `u` and `v` are power-iteration estimates treated as constants.
    pub fn spectral_normalize(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let rows = shape[0];
        let cols = self.value(w).len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(Error::invalid("spectral_normalize: singular vector sizes"));
        }
        let wd = self.value(w).data();
        let mut sigma = T::zero();
        for i in 0..rows {
            let row = &wd[i * cols..(i + 1) * cols];
            sigma += u[i] * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
        }
        if sigma.abs() < T::of(1e-12) {
            return Err(Error::invalid("spectral_normalize: degenerate singular value"));
        }
        let out = self.value(w).map(|x| x / sigma);
        let g = self.g(w);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let gyd = gy.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
            }
            f(slot.as_mut().expect("just set").data_mut());
        };
        let zip = |d: &mut [T], f: &dyn Fn(usize) -> T| {
            for (i, o) in d.iter_mut().enumerate() {
                *o += f(i);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| zip(d, &|i| gyd[i]));
                acc(*b, &|d| zip(d, &|i| gyd[i]));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| zip(d, &|i| gyd[i]));
                acc(*b, &|d| zip(d, &|i| -gyd[i]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| zip(d, &|i| gyd[i] * vb[i]));
                acc(*b, &|d| zip(d, &|i| gyd[i] * va[i]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| zip(d, &|i| gyd[i] / vb[i]));
                acc(*b, &|d| zip(d, &|i| -gyd[i] * va[i] / (vb[i] * vb[i])));
            }
            Op::Scale(a, s) => acc(*a, &|d| zip(d, &|i| gyd[i] * *s)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|d| zip(d, &|i| gyd[i])),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &|d| zip(d, &|i| if va[i] > T::zero() { gyd[i] } else { T::zero() }));
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                acc(*a, &|d| zip(d, &|i| if va[i] > T::zero() { gyd[i] } else { gyd[i] * *slope }));
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                acc(*a, &|d| zip(d, &|i| gyd[i] * yd[i] * (T::one() - yd[i])));
            }
            Op::Tanh(a) => {
                let yd = y.data();
                acc(*a, &|d| zip(d, &|i| gyd[i] * (T::one() - yd[i] * yd[i])));
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                acc(*a, &|d| {
                    zip(d, &|i| if va[i] > *lo && va[i] < *hi { gyd[i] } else { T::zero() })
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let gx = self.nodes[x.0].grad;
                let gw = self.nodes[w.0].grad;
                let gb = b.is_some_and(|b| self.nodes[b.0].grad);
                let mut dx = gx.then(|| vec![T::zero(); xd.len()]);
                let mut dw = gw.then(|| vec![T::zero(); wd.len()]);
                let mut db = gb.then(|| vec![T::zero(); geom.out_ch]);
                kernels::conv2d_backward(
                    geom,
                    n,
                    xd,
                    wd,
                    gyd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*x, &|d| zip(d, &|i| dx[i]));
                }
                if let Some(dw) = dw {
                    acc(*w, &|d| zip(d, &|i| dw[i]));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    acc(*b, &|d| zip(d, &|i| db[i]));
                }
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &|d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src as usize] += gyd[o];
                }
            }),
            Op::Upsample2(x) => {
                let (_, _, h, w) = nchw(self.shape(*x), "").expect("checked at forward");
                let planes = self.value(*x).len() / (h * w);
                acc(*x, &|d| {
                    for p in 0..planes {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + yy / 2) * w + xx / 2] += gyd[(p * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = y.shape()[..] else { unreachable!() };
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    acc(p, &|d| {
                        for s in 0..n {
                            let src = &gyd[(s * total + offset) * plane..(s * total + offset + c) * plane];
                            for (o, &g) in d[s * c * plane..(s + 1) * c * plane].iter_mut().zip(src) {
                                *o += g;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x)[..] else { unreachable!() };
                let len = y.shape()[1];
                let plane = h * w;
                acc(*x, &|d| {
                    for s in 0..n {
                        let dst = &mut d[(s * c + start) * plane..(s * c + start + len) * plane];
                        for (o, &g) in dst.iter_mut().zip(&gyd[s * len * plane..(s + 1) * len * plane]) {
                            *o += g;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let [n, fin] = self.shape(*x)[..] else { unreachable!() };
                let fout = self.shape(*w)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                // dx = dy · w
                acc(*x, &|d| {
                    T::gemm(n, fout, fin, T::one(), gyd, fout as isize, 1, wd, fin as isize, 1, T::one(), d, fin as isize, 1)
                });
                // dw = dyᵀ · x
                acc(*w, &|d| {
                    T::gemm(fout, n, fin, T::one(), gyd, 1, fout as isize, xd, fin as isize, 1, T::one(), d, fin as isize, 1)
                });
                if let Some(b) = b {
                    acc(*b, &|d| {
                        for row in gyd.chunks(fout) {
                            for (o, &g) in d.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    });
                }
            }
            Op::RepeatOuter(x) => {
                let inner = self.value(*x).len();
                acc(*x, &|d| {
                    for chunk in gyd.chunks(inner) {
                        for (o, &g) in d.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|d| {
                for o in d.iter_mut() {
                    *o += gyd[0];
                }
            }),
            Op::Mean(x) => {
                let g = gyd[0] / T::of(self.value(*x).len() as f64);
                acc(*x, &|d| {
                    for o in d.iter_mut() {
                        *o += g;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = self.shape(*x)[..] else { unreachable!() };
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += gyd[i];
                            sum_gx[ch] += gyd[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &|d| zip(d, &|ch| sum_gx[ch]));
                acc(*beta, &|d| zip(d, &|ch| sum_g[ch]));
                acc(*x, &|d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = gm[ch] * inv_std[ch] / m;
                            for i in base..base + plane {
                                d[i] += k * (m * gyd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let [n, c, h, w] = self.shape(*x)[..] else { unreachable!() };
                let plane = h * w;
                let (xd, sc) = (self.value(*x).data(), self.value(*scale).data());
                acc(*x, &|d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                d[i] += gyd[i] * sc[ch];
                            }
                        }
                    }
                });
                let per_channel = |f: &dyn Fn(usize) -> T, d: &mut [T]| {
                    for s in 0..n {
                        for (ch, o) in d.iter_mut().enumerate() {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                *o += gyd[i] * f(i);
                            }
                        }
                    }
                };
                acc(*scale, &|d| per_channel(&|i| xd[i], d));
                acc(*shift, &|d| per_channel(&|_| T::one(), d));
            }
            Op::BoxMean { x, k } => {
                let [n, c, h, w] = self.shape(*x)[..] else { unreachable!() };
                let inv = T::one() / T::of((k * k) as f64);
                let scaled: Vec<T> = gyd.iter().map(|&g| g * inv).collect();
                acc(*x, &|d| kernels::box_sum_backward(n * c, h, w, *k, &scaled, d));
            }
            Op::LogSoftmax(x) => {
                let k = y.shape()[1];
                let yd = y.data();
                acc(*x, &|d| {
                    for r in 0..y.shape()[0] {
                        let gsum: T = gyd[r * k..(r + 1) * k].iter().copied().sum();
                        for j in r * k..(r + 1) * k {
                            d[j] += gyd[j] - yd[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let k = self.shape(*x)[1];
                acc(*x, &|d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * k + i] += gyd[r];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let k = self.shape(*x)[1];
                let len = y.shape()[1];
                acc(*x, &|d| {
                    for r in 0..y.shape()[0] {
                        for j in 0..len {
                            d[r * k + start + j] += gyd[r * len + j];
                        }
                    }
                });
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wd = self.value(*w).data();
                let cols = v.len();
                let inner: T = gyd.iter().zip(wd).map(|(&g, &x)| g * x).sum();
                let k = inner / (*sigma * *sigma);
                acc(*w, &|d| zip(d, &|i| gyd[i] / *sigma - k * u[i / cols] * v[i % cols]));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when it does not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a one-input graph.
    fn check(shape: &[usize], seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(x, shape);
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let xv = t.param(xp);
                let l = f(&mut t, xv);
                t.value(l).data()[0]
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-8);
            assert!(rel < 1e-5, "element {i}: analytic {a} vs numeric {num}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        check(&[2, 3], 1, |t, x| {
            let s = t.sigmoid(x);
            let th = t.tanh(x);
            let m = t.mul(s, th).unwrap();
            let l = t.leaky_relu(m, 0.2);
            let sq = t.square(l);
            let d = t.add_scalar(s, 2.0);
            let q = t.div(sq, d).unwrap();
            t.sum(q)
        });
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_tensor(&mut rng, &[3]);
        check(&[2, 2, 6, 6], 2, |t, x| {
            let w = t.constant(w0.clone());
            let b = t.constant(b0.clone());
            let y = t.conv2d(x, w, Some(b), 1, 1).unwrap();
            let p = t.max_pool2(y).unwrap();
            let u = t.upsample2(p).unwrap();
            let c = t.concat_channels(&[u, x]).unwrap();
            let s = t.slice_channels(c, 1, 3).unwrap();
            let sq = t.square(s);
            t.mean(sq)
        });
    }

    #[test]
    fn conv_weight_gradient_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, &[2, 2, 8, 8]);
        check(&[3, 2, 4, 4], 4, |t, w| {
            let x = t.constant(x0.clone());
            let y = t.conv2d(x, w, None, 2, 1).unwrap();
            let sq = t.square(y);
            t.sum(sq)
        });
    }

    #[test]
    fn batch_norm_and_box_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g0 = rand_tensor(&mut rng, &[2]);
        check(&[3, 2, 5, 5], 6, |t, x| {
            let g = t.constant(g0.clone());
            let b = t.constant(Tensor::zeros(&[2]));
            let (y, _) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
            let bx = t.box_mean(y, 3).unwrap();
            let c = t.mul(bx, bx).unwrap();
            let e = t.sigmoid(c);
            t.sum(e)
        });
    }

    #[test]
    fn linear_softmax_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = rand_tensor(&mut rng, &[5, 4]);
        check(&[3, 4], 8, |t, x| {
            let w = t.constant(w0.clone());
            let y = t.linear(x, w, None).unwrap();
            let ls = t.log_softmax(y).unwrap();
            let g = t.gather(ls, &[0, 4, 2]).unwrap();
            let sc = t.slice_cols(ls, 1, 3).unwrap();
            let s1 = t.sum(g);
            let s2 = t.mean(sc);
            t.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn spectral_norm_gradient() {
        let u = [0.6, -0.8];
        let v = [0.5, 0.5, 0.5, 0.5];
        check(&[2, 1, 2, 2], 11, |t, w| {
            let n = t.spectral_normalize(w, &u, &v).unwrap();
            let sq = t.square(n);
            t.sum(sq)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::full(&[2], 1.0));
        let c = t.constant(Tensor::full(&[2], 3.0));
        let d = t.detach(a);
        let m = t.mul(a, c).unwrap();
        let m2 = t.mul(m, d).unwrap();
        let l = t.sum(m2);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(t.conv2d(x, w, None, 1, 1).is_err());
    }
}
