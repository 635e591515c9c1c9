//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations are recorded eagerly: calling e.g. [`Tape::conv2d`] computes
//! the output immediately and pushes a node that knows how to push adjoints
//! back to its parents. [`Tape::backward_seeded`] can be re-run from any
//! node with any seed, which is what per-sample Jacobian extraction needs.
//!
//! Values are `f64` throughout so finite-difference checks resolve at the
//! 1e-5 relative-error level.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Dynamic-rank tensor alias used across the crate.
pub type Ax = ArrayD<f64>;

/// Batch statistics `(mean, var)` a train-mode batch norm saw, for running
/// buffer updates.
pub type BatchStats = Option<(Array1<f64>, Array1<f64>)>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm statistics cached by the forward pass for backward reuse.
#[derive(Debug)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    MaxWithScalar(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    GlobalAvgPool(Var),
    Matmul(Var, Var),
    AddRowVec(Var, Var),
    RepeatChannels(Var, usize),
    RollRows(Var, i64),
    PerSampleSqNorm(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Array2<f64>,
    },
}

struct Node {
    value: Ax,
    op: Op,
}

/// Records one forward computation and replays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Ax>>,
}

fn as4(a: &Ax) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn as2(a: &Ax) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// Read a 0-d tensor as a plain scalar.
pub fn scalar_value(a: &Ax) -> f64 {
    *a.first().expect("scalar tensor")
}

fn scalar(v: f64) -> Ax {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Gather the padded im2col matrix: `(C*k*k, B*Ho*Wo)`.
fn im2col(x: &ndarray::ArrayView4<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * k * k, b * ho * wo));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cols[[row, bi * ho * wo + oh * wo + ow]] =
                                x[[bi, ci, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`] into an input-shaped tensor.
fn col2im_add(
    dcols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut Array4<f64>,
) {
    let (b, c, h, w) = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            out[[bi, ci, ih as usize, iw as usize]] +=
                                dcols[[row, bi * ho * wo + oh * wo + ow]];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Ax, w: &Ax, stride: usize, pad: usize) -> Ax {
    let xv = as4(x);
    let (b, _c, h, wd) = xv.dim();
    let wv = w.view().into_dimensionality::<Ix4>().expect("conv weight rank 4");
    let (cout, cin, k, _) = wv.dim();
    debug_assert_eq!(cin, xv.dim().1, "conv channel mismatch");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cols = im2col(&xv, k, stride, pad);
    let w_mat = wv
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let y_mat = w_mat.dot(&cols); // (Cout, B*Ho*Wo)
    // rebuilt in logical order: degenerate matmuls can come back F-ordered
    let y = Array4::from_shape_vec((cout, b, ho, wo), y_mat.iter().cloned().collect())
        .expect("conv output reshape");
    let mut out = Array4::<f64>::zeros((b, cout, ho, wo));
    out.assign(&y.view().permuted_axes([1, 0, 2, 3]));
    out.into_dyn()
}

impl Tape {
    /// Fresh, empty tape.
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Ax, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Ax) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Value held at `v`.
    pub fn value(&self, v: Var) -> &Ax {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Ax> {
        self.grads[v.0].as_ref()
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    /// Scale every element.
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulScalar(a, c))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_with_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::MaxWithScalar(a, c))
    }

    /// 2-d convolution, NCHW input, `(Cout, Cin, k, k)` weight, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        self.push(v, Op::Conv2d { x, w, stride, pad })
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// In train mode the batch statistics are used (and returned so the
    /// caller can fold them into running buffers); in eval mode the supplied
    /// running statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Array1<f64>, &Array1<f64>),
        eps: f64,
        train: bool,
    ) -> (Var, BatchStats) {
        let xv = as4(&self.nodes[x.0].value).to_owned();
        let (b, c, h, w) = xv.dim();
        let n = (b * h * w) as f64;
        let (mean, var) = if train {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let ch = xv.index_axis(Axis(1), ci);
                let m = ch.sum() / n;
                mean[ci] = m;
                var[ci] = ch.mapv(|v| (v - m) * (v - m)).sum() / n;
            }
            (mean, var)
        } else {
            (running.0.clone(), running.1.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xv;
        for ci in 0..c {
            let m = mean[ci];
            let s = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - m) * s);
        }
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = gv[[ci]];
            let bb = bv[[ci]];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + bb);
        }
        let batch_stats = train.then_some((mean, var));
        let out = self.push(
            y.into_dyn(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BnCache { xhat, inv_std, train },
            },
        );
        (out, batch_stats)
    }

    /// Mean pooling with a `k`x`k` window. The divisor counts only in-bounds
    /// elements, so border windows average fewer values.
    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += xv[[bi, ci, ih as usize, iw as usize]];
                                cnt += 1.0;
                            }
                        }
                        out[[bi, ci, oh, ow]] = acc / cnt;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool { x, k, stride, pad })
    }

    /// Max pooling with a 2x2 window, stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        let mut argmax = vec![0u32; b * c * ho * wo];
        let mut flat = 0;
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0u32;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (ih, iw) = (2 * oh + di, 2 * ow + dj);
                                let v = xv[[bi, ci, ih, iw]];
                                if v > best {
                                    best = v;
                                    best_at = (ih * w + iw) as u32;
                                }
                            }
                        }
                        out[[bi, ci, oh, ow]] = best;
                        argmax[flat] = best_at;
                        flat += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for ih in 0..h {
                    for iw in 0..w {
                        let v = xv[[bi, ci, ih, iw]];
                        out[[bi, ci, 2 * ih, 2 * iw]] = v;
                        out[[bi, ci, 2 * ih, 2 * iw + 1]] = v;
                        out[[bi, ci, 2 * ih + 1, 2 * iw]] = v;
                        out[[bi, ci, 2 * ih + 1, 2 * iw + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(x))
    }

    /// `(B, C, H, W)` -> `(B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .sum()
                    / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(x))
    }

    /// `(B, F) x (F, C)` matrix product.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let v = as2(&self.nodes[x.0].value).dot(&as2(&self.nodes[w.0].value));
        self.push(v.into_dyn(), Op::Matmul(x, w))
    }

    /// Add a row vector `(C,)` to every row of `(B, C)`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank 1");
        let v = xv + bv;
        self.push(v.into_dyn(), Op::AddRowVec(x, b))
    }

    /// Tile a single-channel `(B, 1, H, W)` map to `k` channels.
    pub fn repeat_channels(&mut self, x: Var, k: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        assert_eq!(c, 1, "repeat_channels expects a single input channel");
        let mut out = Array4::<f64>::zeros((b, k, h, w));
        for ci in 0..k {
            out.index_axis_mut(Axis(1), ci).assign(&xv.index_axis(Axis(1), 0));
        }
        self.push(out.into_dyn(), Op::RepeatChannels(x, k))
    }

    /// Cyclic shift along the batch axis: row `i` of the output is row
    /// `(i + shift) mod B` of the input.
    pub fn roll_rows(&mut self, x: Var, shift: i64) -> Var {
        let xv = &self.nodes[x.0].value;
        let b = xv.shape()[0] as i64;
        let mut out = xv.clone();
        for i in 0..b {
            let src = (i + shift).rem_euclid(b);
            out.index_axis_mut(Axis(0), i as usize)
                .assign(&xv.index_axis(Axis(0), src as usize));
        }
        self.push(out, Op::RollRows(x, shift))
    }

    /// Per-sample squared L2 norm: `(B, ...)` -> `(B,)`.
    pub fn per_sample_sq_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let b = xv.shape()[0];
        let mut out = Array1::<f64>::zeros(b);
        for i in 0..b {
            out[i] = xv.index_axis(Axis(0), i).mapv(|v| v * v).sum();
        }
        self.push(out.into_dyn(), Op::PerSampleSqNorm(x))
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let v = scalar(xv.sum() / xv.len() as f64);
        self.push(v, Op::MeanAll(x))
    }

    /// Mean cross-entropy between logits `(B, C)` and integer targets,
    /// computed through a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = as2(&self.nodes[logits.0].value).to_owned();
        let (b, _c) = z.dim();
        assert_eq!(b, targets.len(), "one target per row");
        let mut softmax = z.clone();
        let mut loss = 0.0;
        for (i, mut row) in softmax.axis_iter_mut(Axis(0)).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            loss += s.ln() + m - z[[i, targets[i]]];
            row.mapv_inplace(|v| v / s);
        }
        let v = scalar(loss / b as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        )
    }

    /// Backpropagate from a 0-d node with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let seed = scalar(1.0);
        self.backward_seeded(root, seed)
    }

    /// Backpropagate from `root` with an explicit output adjoint. Resets all
    /// gradients first, so the tape can be replayed from several roots.
    pub fn backward_seeded(&mut self, root: Var, seed: Ax) -> Result<()> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::Shape(format!(
                "backward seed shape {:?} vs value {:?}",
                seed.shape(),
                self.nodes[root.0].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.apply_backward(i, g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Ax) {
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, i: usize, g: Ax) {
        // The node's op is read out first so `self` stays free for `acc`.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, -g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = &g * &self.nodes[b.0].value;
                let db = &g * &self.nodes[a.0].value;
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                let da = &g / bv;
                let db = -(&g * av) / (bv * bv);
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.acc(a, g);
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, g * c);
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(a, g * mask);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let dy = y * &(1.0 - y);
                self.acc(a, g * dy);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                // derivative taken as 0 at the origin instead of +inf, so a
                // zero adjoint cannot turn into 0 * inf = NaN
                let dy = y.mapv(|v| if v > 0.0 { 0.5 / v } else { 0.0 });
                self.acc(a, g * dy);
            }
            Op::MaxWithScalar(a, c) => {
                let (a, c) = (*a, *c);
                let mask = self.nodes[a.0].value.mapv(|x| if x > c { 1.0 } else { 0.0 });
                self.acc(a, g * mask);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let xv = as4(&self.nodes[x.0].value).to_owned();
                let wv = as4(&self.nodes[w.0].value).to_owned();
                let (b, c, h, wd) = xv.dim();
                let (cout, cin, k, _) = wv.dim();
                let gv = as4(&g);
                let (_, _, ho, wo) = gv.dim();
                // (Cout, B*Ho*Wo) view of the output adjoint
                let mut g_mat = Array2::<f64>::zeros((cout, b * ho * wo));
                for bi in 0..b {
                    for co in 0..cout {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                g_mat[[co, bi * ho * wo + oh * wo + ow]] = gv[[bi, co, oh, ow]];
                            }
                        }
                    }
                }
                let cols = im2col(&xv.view(), k, stride, pad);
                let dw_mat = g_mat.dot(&cols.t()); // (Cout, C*k*k)
                // degenerate matmuls can come back F-ordered; rebuild in
                // logical order instead of reinterpreting the memory
                let dw = Array4::from_shape_vec(
                    (cout, cin, k, k),
                    dw_mat.iter().cloned().collect(),
                )
                .expect("dw reshape");
                let w_mat = wv
                    .to_shape((cout, cin * k * k))
                    .expect("weight reshape")
                    .to_owned();
                let dcols = w_mat.t().dot(&g_mat); // (C*k*k, B*Ho*Wo)
                let mut dx = Array4::<f64>::zeros((b, c, h, wd));
                col2im_add(&dcols, (b, c, h, wd), k, stride, pad, &mut dx);
                self.acc(x, dx.into_dyn());
                self.acc(w, dw.into_dyn());
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let train = cache.train;
                let xhat = cache.xhat.clone();
                let inv_std = cache.inv_std.clone();
                let gv = as4(&g).to_owned();
                let (b, c, h, w) = gv.dim();
                let n = (b * h * w) as f64;
                let gamma_v = self.nodes[gamma.0].value.clone();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let g_c = gv.index_axis(Axis(1), ci);
                    let xhat_c = xhat.index_axis(Axis(1), ci);
                    let sum_g = g_c.sum();
                    let sum_gx = (&g_c * &xhat_c).sum();
                    dgamma[ci] = sum_gx;
                    dbeta[ci] = sum_g;
                    let gam = gamma_v[[ci]];
                    let istd = inv_std[ci];
                    let mut dx_c = dx.index_axis_mut(Axis(1), ci);
                    if train {
                        // gradient through the batch statistics
                        ndarray::Zip::from(&mut dx_c).and(&g_c).and(&xhat_c).for_each(
                            |d, &gi, &xi| {
                                *d = gam * istd / n * (n * gi - sum_g - xi * sum_gx);
                            },
                        );
                    } else {
                        ndarray::Zip::from(&mut dx_c).and(&g_c).for_each(|d, &gi| {
                            *d = gam * istd * gi;
                        });
                    }
                }
                self.acc(x, dx.into_dyn());
                self.acc(gamma, dgamma.into_dyn());
                self.acc(beta, dbeta.into_dyn());
            }
            Op::AvgPool { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                let gv = as4(&g);
                let (_, _, ho, wo) = gv.dim();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let mut cnt = 0.0;
                                for ki in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (ow * stride + kj) as isize - pad as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        cnt += 1.0;
                                    }
                                }
                                let share = gv[[bi, ci, oh, ow]] / cnt;
                                for ki in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (ow * stride + kj) as isize - pad as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        dx[[bi, ci, ih as usize, iw as usize]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(x, dx.into_dyn());
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                let gv = as4(&g);
                let (_, _, ho, wo) = gv.dim();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                let mut flat = 0;
                for bi in 0..b {
                    for ci in 0..c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let at = argmax[flat] as usize;
                                dx[[bi, ci, at / w, at % w]] += gv[[bi, ci, oh, ow]];
                                flat += 1;
                            }
                        }
                    }
                }
                self.acc(x, dx.into_dyn());
            }
            Op::Upsample2(x) => {
                let x = *x;
                let gv = as4(&g);
                let (b, c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for ih in 0..h {
                            for iw in 0..w {
                                dx[[bi, ci, ih, iw]] = gv[[bi, ci, 2 * ih, 2 * iw]]
                                    + gv[[bi, ci, 2 * ih, 2 * iw + 1]]
                                    + gv[[bi, ci, 2 * ih + 1, 2 * iw]]
                                    + gv[[bi, ci, 2 * ih + 1, 2 * iw + 1]];
                            }
                        }
                    }
                }
                self.acc(x, dx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                let gv = as2(&g);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                let share = 1.0 / (h * w) as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let v = gv[[bi, ci]] * share;
                        dx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(v);
                    }
                }
                self.acc(x, dx.into_dyn());
            }
            Op::Matmul(x, w) => {
                let (x, w) = (*x, *w);
                let gv = as2(&g).to_owned();
                let xv = as2(&self.nodes[x.0].value).to_owned();
                let wv = as2(&self.nodes[w.0].value).to_owned();
                let dx = gv.dot(&wv.t());
                let dw = xv.t().dot(&gv);
                self.acc(x, dx.into_dyn());
                self.acc(w, dw.into_dyn());
            }
            Op::AddRowVec(x, b) => {
                let (x, b) = (*x, *b);
                let gv = as2(&g).to_owned();
                let db = gv.sum_axis(Axis(0));
                self.acc(x, g);
                self.acc(b, db.into_dyn());
            }
            Op::RepeatChannels(x, k) => {
                let (x, k) = (*x, *k);
                let gv = as4(&g);
                let (b, _, h, w) = gv.dim();
                let mut dx = Array4::<f64>::zeros((b, 1, h, w));
                for ci in 0..k {
                    let mut d0 = dx.index_axis_mut(Axis(1), 0);
                    d0 += &gv.index_axis(Axis(1), ci);
                }
                self.acc(x, dx.into_dyn());
            }
            Op::RollRows(x, shift) => {
                let (x, shift) = (*x, *shift);
                let b = g.shape()[0] as i64;
                let mut dx = g.clone();
                for i in 0..b {
                    let src = (i + shift).rem_euclid(b);
                    dx.index_axis_mut(Axis(0), src as usize)
                        .assign(&g.index_axis(Axis(0), i as usize));
                }
                self.acc(x, dx);
            }
            Op::PerSampleSqNorm(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.clone();
                let b = xv.shape()[0];
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("per-sample norm grad rank 1")
                    .to_owned();
                let mut dx = xv;
                for bi in 0..b {
                    let gb = 2.0 * gv[bi];
                    dx.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * gb);
                }
                self.acc(x, dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let len = self.nodes[x.0].value.len() as f64;
                let shape = self.nodes[x.0].value.raw_dim();
                let dx = ArrayD::from_elem(shape, scalar_value(&g) / len);
                self.acc(x, dx);
            }
            Op::CrossEntropy { logits, targets, softmax } => {
                let logits = *logits;
                let targets = targets.clone();
                let mut dz = softmax.clone();
                let b = targets.len();
                let gs = scalar_value(&g) / b as f64;
                for (i, &t) in targets.iter().enumerate() {
                    dz[[i, t]] -= 1.0;
                }
                dz.mapv_inplace(|v| v * gs);
                self.acc(logits, dz.into_dyn());
            }
        }
    }
}
