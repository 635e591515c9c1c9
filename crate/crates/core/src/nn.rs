//! Parameter storage and layer primitives.
//!
//! A [`ParamStore`] owns every named tensor of a model: trainable parameters
//! and non-trainable buffers (batch-norm running statistics). Layers hold
//! ids into the store rather than tensors, so the same layer description can
//! be bound onto any number of tapes. A [`Binder`] lazily inserts parameter
//! leaves into a [`Tape`] and remembers the mapping so gradients can be read
//! back per parameter after a backward pass.

use crate::autodiff::{Ax, Tape, Var};
use crate::rng::SeededRng;
use ndarray::{Array1, Array2, Array4, ArrayD};
use rand_distr::{Distribution, StandardNormal};

/// Forward-pass mode: batch statistics vs running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and updates running buffers.
    Train,
    /// Batch-norm uses running statistics; forward is a pure function.
    Eval,
}

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Handle to a non-trainable buffer in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(pub usize);

/// A tensor with the name it carries in checkpoints.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    /// Dotted path, e.g. `stage0.cell1.edge3.conv.w`.
    pub name: String,
    /// The value.
    pub value: Ax,
}

/// Named tensor collection backing one model instance.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl ParamStore {
    /// Empty store.
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a trainable tensor.
    pub fn add_param(&mut self, name: impl Into<String>, value: Ax) -> ParamId {
        self.params.push(NamedTensor { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    /// Register a buffer.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Ax) -> BufId {
        self.buffers.push(NamedTensor { name: name.into(), value });
        BufId(self.buffers.len() - 1)
    }

    /// Trainable tensor by id.
    pub fn param(&self, id: ParamId) -> &NamedTensor {
        &self.params[id.0]
    }

    /// Mutable trainable tensor by id.
    pub fn param_mut(&mut self, id: ParamId) -> &mut NamedTensor {
        &mut self.params[id.0]
    }

    /// Buffer by id.
    pub fn buffer(&self, id: BufId) -> &NamedTensor {
        &self.buffers[id.0]
    }

    /// Mutable buffer by id.
    pub fn buffer_mut(&mut self, id: BufId) -> &mut NamedTensor {
        &mut self.buffers[id.0]
    }

    /// All trainable tensors in registration order.
    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    /// All buffers in registration order.
    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    /// Ids of every trainable tensor.
    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    /// Total count of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when every parameter and buffer is bitwise equal.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        let eq = |a: &[NamedTensor], b: &[NamedTensor]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.name == y.name
                        && x.value.shape() == y.value.shape()
                        && x.value
                            .iter()
                            .zip(y.value.iter())
                            .all(|(u, v)| u.to_bits() == v.to_bits())
                })
        };
        eq(&self.params, &other.params) && eq(&self.buffers, &other.buffers)
    }
}

/// Zero-mean Gaussian with fan-in variance scaling: `std = gain / sqrt(fan_in)`.
pub fn fan_in_gaussian(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Ax {
    let std = gain / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Binds [`ParamStore`] entries onto one tape, lazily.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    /// Binder for `store`, with nothing bound yet.
    pub fn new(store: &ParamStore) -> Binder {
        Binder { vars: vec![None; store.params().len()] }
    }

    /// Var for a parameter, inserting the leaf on first use.
    pub fn var(&mut self, store: &ParamStore, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(store.param(id).value.clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Every `(ParamId, Var)` pair bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
    }

    /// Gradient of a bound parameter after a backward pass; `None` when the
    /// parameter was never bound or received no adjoint.
    pub fn grad<'t>(&self, tape: &'t Tape, id: ParamId) -> Option<&'t Ax> {
        self.vars[id.0].and_then(|v| tape.grad(v))
    }
}

/// 2-d convolution layer, no bias (batch norm follows everywhere it is used).
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight `(Cout, Cin, k, k)`.
    pub w: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Register a convolution with fan-in Gaussian init.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Conv2d {
        let w = fan_in_gaussian(&[cout, cin, k, k], cin * k * k, gain, rng);
        let w = store.add_param(format!("{name}.w"), w);
        Conv2d { w, stride, pad }
    }

    /// Apply to `x`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let w = binder.var(store, tape, self.w);
        tape.conv2d(x, w, self.stride, self.pad)
    }
}

/// Per-channel batch normalization with affine scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    /// Scale, initialized to 1.
    pub gamma: ParamId,
    /// Shift, initialized to 0.
    pub beta: ParamId,
    run_mean: BufId,
    run_var: BufId,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    /// Register a batch-norm layer over `c` channels.
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> BatchNorm2d {
        let gamma = store.add_param(format!("{name}.gamma"), Array1::from_elem(c, 1.0).into_dyn());
        let beta = store.add_param(format!("{name}.beta"), Array1::zeros(c).into_dyn());
        let run_mean = store.add_buffer(format!("{name}.run_mean"), Array1::zeros(c).into_dyn());
        let run_var =
            store.add_buffer(format!("{name}.run_var"), Array1::from_elem(c, 1.0).into_dyn());
        BatchNorm2d { gamma, beta, run_mean, run_var, momentum: 0.1, eps: 1e-5 }
    }

    /// Apply to `x`; in train mode the running buffers are folded toward the
    /// batch statistics.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        let gamma = binder.var(store, tape, self.gamma);
        let beta = binder.var(store, tape, self.beta);
        let rm = to1(&store.buffer(self.run_mean).value);
        let rv = to1(&store.buffer(self.run_var).value);
        let (y, batch_stats) =
            tape.batch_norm(x, gamma, beta, (&rm, &rv), self.eps, mode == Mode::Train);
        if let Some((mean, var)) = batch_stats {
            let m = self.momentum;
            let new_mean = &rm * (1.0 - m) + &mean * m;
            let new_var = &rv * (1.0 - m) + &var * m;
            store.buffer_mut(self.run_mean).value = new_mean.into_dyn();
            store.buffer_mut(self.run_var).value = new_var.into_dyn();
        }
        y
    }
}

fn to1(a: &Ax) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank-1 buffer")
        .to_owned()
}

/// Affine layer `(B, F) -> (B, C)`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight `(F, C)`.
    pub w: ParamId,
    /// Bias `(C,)`, initialized to 0.
    pub b: ParamId,
}

impl Linear {
    /// Register an affine layer with fan-in Gaussian init.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Linear {
        let w = fan_in_gaussian(&[fin, fout], fin, gain, rng);
        let w = store.add_param(format!("{name}.w"), w);
        let b = store.add_param(format!("{name}.b"), Array1::zeros(fout).into_dyn());
        Linear { w, b }
    }

    /// Apply to `x`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let w = binder.var(store, tape, self.w);
        let b = binder.var(store, tape, self.b);
        let h = tape.matmul(x, w);
        tape.add_row_vec(h, b)
    }
}

/// Convolution + batch norm + ReLU, the generator's standard block.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    /// Register the block with a 3x3 kernel, stride 1, same padding.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> ConvBnRelu {
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, 1, gain, rng);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        ConvBnRelu { conv, bn }
    }

    /// Apply conv, then norm, then ReLU.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        let y = self.conv.forward(store, tape, binder, x);
        let y = self.bn.forward(store, tape, binder, y, mode);
        tape.relu(y)
    }
}

/// ReLU + convolution + batch norm, the cell operators' realization.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ReluConvBn {
    /// Register the block; `k` is 1 or 3, padding keeps spatial size at
    /// stride 1 and halves it at stride 2.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> ReluConvBn {
        let pad = k / 2;
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, gain, rng);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        ReluConvBn { conv, bn }
    }

    /// Apply ReLU, then conv, then norm.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Var {
        let y = tape.relu(x);
        let y = self.conv.forward(store, tape, binder, y);
        self.bn.forward(store, tape, binder, y, mode)
    }
}

/// Convert a `(B, C, H, W)` image batch into the dynamic tensor type.
pub fn batch_to_ax(x: &Array4<f64>) -> Ax {
    x.clone().into_dyn()
}

/// View logits `(B, C)` out of a tape value.
pub fn logits_to_array2(v: &Ax) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits rank 2")
        .to_owned()
}
