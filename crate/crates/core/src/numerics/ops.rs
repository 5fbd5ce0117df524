//! Neural primitives with analytic backward rules.
//!
//! Feature maps are `[batch, features, electrodes, time]`. A "1D" convolution
//! or pooling window runs along one of the two trailing axes and has extent 1
//! along the other, so a kernel parallel to the time axis is `1 x k` and one
//! parallel to the electrode axis is `k x 1`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Trailing axis of a `[batch, features, electrodes, time]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Electrode axis (dimension 2).
    Channel,
    /// Sampling-point axis (dimension 3).
    Time,
}

/// Symmetric reduction used by window pooling and by set pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
    Min,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
            PoolKind::Min => "min",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            "min" => Ok(PoolKind::Min),
            other => Err(Error::config(format!("unknown pooling kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// A differentiable operation defined outside this module.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradient with respect to every input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone)]
pub enum Op<T: Scalar> {
    /// Inputs `x [N,Ci,H,W]`, `w [Co,Ci,K]`, optional `b [Co]`.
    Conv {
        axis: Axis,
        stride: usize,
        padding: usize,
    },
    /// Inputs `x [N,In]`, `w [Out,In]`, `b [Out]`.
    Linear,
    /// Inputs `x`, `gamma`, `beta`, `running_mean`, `running_var`; per-feature
    /// statistics over every axis except dimension 1.
    BatchNorm { mode: BnMode, eps: f64 },
    Relu,
    /// Window pooling along one trailing axis of a 4D map (`Max` or `Avg`).
    Pool {
        kind: PoolKind,
        axis: Axis,
        width: usize,
        stride: usize,
        padding: usize,
    },
    /// `[N,C,H,W] -> [N,C]`.
    GlobalAvgPool,
    /// Inverted dropout; the keep mask is a pure function of `seed`.
    Dropout { rate: f64, train: bool, seed: u64 },
    Add,
    Reshape { shape: Vec<usize> },
    /// Row-wise softmax of a 2D tensor.
    Softmax,
    /// Mean cross-entropy of row-wise softmax against class targets.
    SoftmaxCrossEntropy { targets: Vec<usize> },
    /// `[G*Q, H] -> [G, H]`: elementwise reduction over consecutive runs of
    /// `group_size` rows.
    SetPool { kind: PoolKind, group_size: usize },
    /// Sum of all elements to a scalar.
    Sum,
    Custom(Arc<dyn CustomOp<T>>),
}

impl<T: Scalar> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(op) => write!(f, "Custom({})", op.name()),
            other => f.write_str(other.name()),
        }
    }
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::Linear => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Pool {
                kind: PoolKind::Max,
                ..
            } => "max_pool",
            Op::Pool { .. } => "avg_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Add => "add",
            Op::Reshape { .. } => "reshape",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SetPool { .. } => "set_pool",
            Op::Sum => "sum",
            Op::Custom(op) => op.name(),
        }
    }
}

/// Values saved by a forward pass for its backward rule.
#[derive(Clone, Debug, Default)]
pub enum Aux<T> {
    #[default]
    None,
    /// Flat source index for every output element (max/min selections).
    Indices(Vec<usize>),
    Mask(Vec<T>),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch mean and biased batch variance (train mode only).
        mean: Vec<T>,
        var: Vec<T>,
        count: usize,
    },
    Probs(Vec<T>),
}

fn expect_inputs(op: &'static str, inputs: usize, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected {allowed:?} inputs, got {inputs}"),
        ))
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ))
    }
}

/// Pure forward evaluation of a primitive.
pub fn primitive_forward<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    forward(op, inputs).map(|(out, _)| out)
}

pub(crate) fn forward<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Aux<T>)> {
    match op {
        Op::Conv {
            axis,
            stride,
            padding,
        } => conv_forward(inputs, *axis, *stride, *padding).map(|t| (t, Aux::None)),
        Op::Linear => linear_forward(inputs).map(|t| (t, Aux::None)),
        Op::BatchNorm { mode, eps } => batch_norm_forward(inputs, *mode, *eps),
        Op::Relu => {
            expect_inputs("relu", inputs.len(), &[1])?;
            Ok((inputs[0].map(|v| v.max(T::zero())), Aux::None))
        }
        Op::Pool {
            kind,
            axis,
            width,
            stride,
            padding,
        } => pool_forward(inputs, *kind, *axis, *width, *stride, *padding),
        Op::GlobalAvgPool => global_avg_pool_forward(inputs).map(|t| (t, Aux::None)),
        Op::Dropout { rate, train, seed } => dropout_forward(inputs, *rate, *train, *seed),
        Op::Add => {
            expect_inputs("add", inputs.len(), &[2])?;
            if inputs[0].shape() != inputs[1].shape() {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            let mut out = inputs[0].clone();
            out.add_assign(inputs[1]);
            Ok((out, Aux::None))
        }
        Op::Reshape { shape } => {
            expect_inputs("reshape", inputs.len(), &[1])?;
            let out = inputs[0]
                .reshaped(shape.clone())
                .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", inputs[0].shape())))?;
            Ok((out, Aux::None))
        }
        Op::Softmax => {
            expect_inputs("softmax", inputs.len(), &[1])?;
            expect_rank("softmax", inputs[0], 2)?;
            Ok((softmax_rows(inputs[0]), Aux::None))
        }
        Op::SoftmaxCrossEntropy { targets } => sce_forward(inputs, targets),
        Op::SetPool { kind, group_size } => set_pool_forward(inputs, *kind, *group_size),
        Op::Sum => {
            expect_inputs("sum", inputs.len(), &[1])?;
            Ok((Tensor::scalar(inputs[0].data().iter().copied().sum()), Aux::None))
        }
        Op::Custom(op) => op.forward(inputs).map(|t| (t, Aux::None)),
    }
}

/// Gradients for every input (None where an input is not differentiable).
pub(crate) fn backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    aux: &Aux<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(match op {
        Op::Conv {
            axis,
            stride,
            padding,
        } => conv_backward(inputs, grad, *axis, *stride, *padding)
            .into_iter()
            .map(Some)
            .collect(),
        Op::Linear => linear_backward(inputs, grad).into_iter().map(Some).collect(),
        Op::BatchNorm { mode, .. } => {
            let (dx, dgamma, dbeta) = batch_norm_backward(inputs, aux, grad, *mode);
            vec![Some(dx), Some(dgamma), Some(dbeta), None, None]
        }
        Op::Relu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Pool { kind, axis, width, stride, padding } => {
            vec![Some(pool_backward(inputs[0], aux, grad, *kind, *axis, *width, *stride, *padding))]
        }
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let spatial = s[2] * s[3];
            let scale = T::one() / T::of(spatial as f64);
            let gd = grad.data();
            vec![Some(Tensor::from_fn(s, |i| gd[i / spatial] * scale))]
        }
        Op::Dropout { .. } => match aux {
            Aux::Mask(mask) => {
                let data = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::new(grad.shape().to_vec(), data)?)]
            }
            _ => vec![Some(grad.clone())],
        },
        Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
        Op::Reshape { .. } => vec![Some(grad.reshaped(inputs[0].shape().to_vec())?)],
        Op::Softmax => {
            let cols = output.shape()[1];
            let mut dx = vec![T::zero(); output.len()];
            for (r, chunk) in dx.chunks_mut(cols).enumerate() {
                let y = output.row(r);
                let g = grad.row(r);
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for c in 0..cols {
                    chunk[c] = y[c] * (g[c] - dot);
                }
            }
            vec![Some(Tensor::new(output.shape().to_vec(), dx)?)]
        }
        Op::SoftmaxCrossEntropy { targets } => {
            let Aux::Probs(probs) = aux else {
                return Err(Error::contract("cross-entropy backward without cached probabilities"));
            };
            let logits = inputs[0];
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let scale = grad.item() / T::of(n as f64);
            let mut dx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                dx[r * k + t] -= T::one();
            }
            for v in dx.iter_mut() {
                *v *= scale;
            }
            vec![Some(Tensor::new(vec![n, k], dx)?)]
        }
        Op::SetPool { kind, group_size } => {
            vec![Some(set_pool_backward(inputs[0], aux, grad, *kind, *group_size))]
        }
        Op::Sum => {
            let g = grad.item();
            vec![Some(Tensor::full(inputs[0].shape(), g))]
        }
        Op::Custom(op) => op
            .backward(inputs, output, grad)?
            .into_iter()
            .map(Some)
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a window op along one trailing axis of a 4D map.
struct AxisGeometry {
    len: usize,
    other: usize,
    len_stride: usize,
    other_stride: usize,
    out_len: usize,
    out_len_stride: usize,
    out_other_stride: usize,
}

impl AxisGeometry {
    fn new(
        op: &'static str,
        shape: &[usize],
        axis: Axis,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || window == 0 {
            return Err(Error::shape(op, "window and stride must be positive"));
        }
        let (h, w) = (shape[2], shape[3]);
        let len = match axis {
            Axis::Channel => h,
            Axis::Time => w,
        };
        if len + 2 * padding < window {
            return Err(Error::shape(
                op,
                format!("window {window} exceeds padded length {} along {axis:?}", len + 2 * padding),
            ));
        }
        let out_len = (len + 2 * padding - window) / stride + 1;
        Ok(match axis {
            Axis::Time => AxisGeometry {
                len: w,
                other: h,
                len_stride: 1,
                other_stride: w,
                out_len,
                out_len_stride: 1,
                out_other_stride: out_len,
            },
            Axis::Channel => AxisGeometry {
                len: h,
                other: w,
                len_stride: w,
                other_stride: 1,
                out_len,
                out_len_stride: w,
                out_other_stride: 1,
            },
        })
    }

    fn out_shape(&self, n: usize, f: usize, axis: Axis) -> Vec<usize> {
        match axis {
            Axis::Time => vec![n, f, self.other, self.out_len],
            Axis::Channel => vec![n, f, self.out_len, self.other],
        }
    }

    /// Input position for output position `lo` and window offset `k`.
    #[inline]
    fn source(&self, lo: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let pos = lo * stride + k;
        if pos < padding || pos - padding >= self.len {
            None
        } else {
            Some(pos - padding)
        }
    }
}

fn conv_check<'a, T: Scalar>(
    inputs: &[&'a Tensor<T>],
    axis: Axis,
    stride: usize,
    padding: usize,
) -> Result<(AxisGeometry, usize, usize, usize, usize)> {
    expect_inputs("conv", inputs.len(), &[2, 3])?;
    let (x, w) = (inputs[0], inputs[1]);
    expect_rank("conv", x, 4)?;
    expect_rank("conv", w, 3)?;
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wci != ci {
        return Err(Error::shape(
            "conv",
            format!("input has {ci} feature maps but kernel expects {wci}"),
        ));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [co] {
            return Err(Error::shape("conv", format!("bias shape {:?}, expected [{co}]", b.shape())));
        }
    }
    let geo = AxisGeometry::new("conv", x.shape(), axis, k, stride, padding)?;
    Ok((geo, n, ci, co, k))
}

fn conv_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    axis: Axis,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (geo, n, ci, co, k) = conv_check(inputs, axis, stride, padding)?;
    let (x, w) = (inputs[0].data(), inputs[1].data());
    let in_plane = geo.len * geo.other;
    let out_plane = geo.out_len * geo.other;
    let mut out = vec![T::zero(); n * co * out_plane];
    for b in 0..n {
        for o in 0..co {
            let ob = (b * co + o) * out_plane;
            let plane = &mut out[ob..ob + out_plane];
            if let Some(bias) = inputs.get(2) {
                let bv = bias.data()[o];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for c in 0..ci {
                let xb = (b * ci + c) * in_plane;
                for kk in 0..k {
                    let wv = w[(o * ci + c) * k + kk];
                    for lo in 0..geo.out_len {
                        let Some(li) = geo.source(lo, kk, stride, padding) else {
                            continue;
                        };
                        let xrow = xb + li * geo.len_stride;
                        let orow = lo * geo.out_len_stride;
                        for r in 0..geo.other {
                            plane[orow + r * geo.out_other_stride] += wv * x[xrow + r * geo.other_stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(geo.out_shape(n, co, axis), out)
}

fn conv_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    grad: &Tensor<T>,
    axis: Axis,
    stride: usize,
    padding: usize,
) -> Vec<Tensor<T>> {
    let (geo, n, ci, co, k) =
        conv_check(inputs, axis, stride, padding).expect("conv shapes validated in forward");
    let (x, w, g) = (inputs[0].data(), inputs[1].data(), grad.data());
    let in_plane = geo.len * geo.other;
    let out_plane = geo.out_len * geo.other;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..n {
        for o in 0..co {
            let gb = (b * co + o) * out_plane;
            for c in 0..ci {
                let xb = (b * ci + c) * in_plane;
                for kk in 0..k {
                    let wi = (o * ci + c) * k + kk;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for lo in 0..geo.out_len {
                        let Some(li) = geo.source(lo, kk, stride, padding) else {
                            continue;
                        };
                        let xrow = xb + li * geo.len_stride;
                        let grow = gb + lo * geo.out_len_stride;
                        for r in 0..geo.other {
                            let gv = g[grow + r * geo.out_other_stride];
                            let xi = xrow + r * geo.other_stride;
                            acc += gv * x[xi];
                            dx[xi] += gv * wv;
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    let mut grads = vec![
        Tensor::new(inputs[0].shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(inputs[1].shape().to_vec(), dw).expect("shape preserved"),
    ];
    if inputs.len() == 3 {
        let mut db = vec![T::zero(); co];
        for b in 0..n {
            for (o, slot) in db.iter_mut().enumerate() {
                let gb = (b * co + o) * out_plane;
                *slot += g[gb..gb + out_plane].iter().copied().sum::<T>();
            }
        }
        grads.push(Tensor::new(vec![co], db).expect("shape preserved"));
    }
    grads
}

// ---------------------------------------------------------------------------
// linear

fn linear_check<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(usize, usize, usize)> {
    expect_inputs("linear", inputs.len(), &[3])?;
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    expect_rank("linear", x, 2)?;
    expect_rank("linear", w, 2)?;
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let (fout, win) = (w.shape()[0], w.shape()[1]);
    if win != fin {
        return Err(Error::shape("linear", format!("input width {fin}, weight expects {win}")));
    }
    if b.shape() != [fout] {
        return Err(Error::shape("linear", format!("bias shape {:?}, expected [{fout}]", b.shape())));
    }
    Ok((n, fin, fout))
}

fn linear_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, fin, fout) = linear_check(inputs)?;
    let (x, w, b) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let mut out = Vec::with_capacity(n * fout);
    for r in 0..n {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &w[o * fin..(o + 1) * fin];
            let dot: T = xr.iter().zip(wr).map(|(&a, &c)| a * c).sum();
            out.push(dot + b[o]);
        }
    }
    Tensor::new(vec![n, fout], out)
}

fn linear_backward<T: Scalar>(inputs: &[&Tensor<T>], grad: &Tensor<T>) -> Vec<Tensor<T>> {
    let (n, fin, fout) = linear_check(inputs).expect("linear shapes validated in forward");
    let (x, w, g) = (inputs[0].data(), inputs[1].data(), grad.data());
    let mut dx = vec![T::zero(); n * fin];
    let mut dw = vec![T::zero(); fout * fin];
    let mut db = vec![T::zero(); fout];
    for r in 0..n {
        let xr = &x[r * fin..(r + 1) * fin];
        let dxr = &mut dx[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let gv = g[r * fout + o];
            if gv == T::zero() {
                continue;
            }
            db[o] += gv;
            let wr = &w[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            for i in 0..fin {
                dxr[i] += gv * wr[i];
                dwr[i] += gv * xr[i];
            }
        }
    }
    vec![
        Tensor::new(vec![n, fin], dx).expect("shape preserved"),
        Tensor::new(vec![fout, fin], dw).expect("shape preserved"),
        Tensor::new(vec![fout], db).expect("shape preserved"),
    ]
}

// ---------------------------------------------------------------------------
// batch normalization

/// (batch, features, spatial) view of a BN input.
fn bn_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::shape("batch_norm", format!("expected rank 2 or 4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn batch_norm_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    mode: BnMode,
    eps: f64,
) -> Result<(Tensor<T>, Aux<T>)> {
    expect_inputs("batch_norm", inputs.len(), &[5])?;
    let x = inputs[0];
    let (n, f, sp) = bn_layout(x)?;
    for (i, t) in inputs[1..].iter().enumerate() {
        if t.shape() != [f] {
            return Err(Error::shape(
                "batch_norm",
                format!("parameter {} has shape {:?}, expected [{f}]", i + 1, t.shape()),
            ));
        }
    }
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let count = n * sp;
    let xd = x.data();
    let at = |b: usize, c: usize, s: usize| (b * f + c) * sp + s;
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); f];
            let mut var = vec![T::zero(); f];
            let cnt = T::of(count as f64);
            for c in 0..f {
                let mut sum = T::zero();
                for b in 0..n {
                    for s in 0..sp {
                        sum += xd[at(b, c, s)];
                    }
                }
                let m = sum / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    for s in 0..sp {
                        let d = xd[at(b, c, s)] - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq / cnt;
            }
            (mean, var)
        }
        BnMode::Eval => (inputs[3].data().to_vec(), inputs[4].data().to_vec()),
    };
    let eps = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for c in 0..f {
            for s in 0..sp {
                let i = at(b, c, s);
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    Ok((
        out,
        Aux::BatchNorm {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

fn batch_norm_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    aux: &Aux<T>,
    grad: &Tensor<T>,
    mode: BnMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let Aux::BatchNorm {
        xhat, inv_std, count, ..
    } = aux
    else {
        panic!("batch norm backward requires cached statistics");
    };
    let x = inputs[0];
    let (n, f, sp) = bn_layout(x).expect("validated in forward");
    let gamma = inputs[1].data();
    let g = grad.data();
    let at = |b: usize, c: usize, s: usize| (b * f + c) * sp + s;
    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    for b in 0..n {
        for c in 0..f {
            for s in 0..sp {
                let i = at(b, c, s);
                dgamma[c] += g[i] * xhat[i];
                dbeta[c] += g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    match mode {
        BnMode::Train => {
            let m = T::of(*count as f64);
            for c in 0..f {
                let k = gamma[c] * inv_std[c] / m;
                for b in 0..n {
                    for s in 0..sp {
                        let i = at(b, c, s);
                        dx[i] = k * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
                    }
                }
            }
        }
        BnMode::Eval => {
            for b in 0..n {
                for c in 0..f {
                    for s in 0..sp {
                        let i = at(b, c, s);
                        dx[i] = g[i] * gamma[c] * inv_std[c];
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(vec![f], dgamma).expect("shape preserved"),
        Tensor::new(vec![f], dbeta).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// pooling

fn pool_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    kind: PoolKind,
    axis: Axis,
    width: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Aux<T>)> {
    expect_inputs("pool", inputs.len(), &[1])?;
    let x = inputs[0];
    expect_rank("pool", x, 4)?;
    if kind == PoolKind::Min {
        return Err(Error::config("window min pooling is not a supported primitive"));
    }
    if padding >= width {
        return Err(Error::shape("pool", "padding must be smaller than the window"));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let geo = AxisGeometry::new("pool", x.shape(), axis, width, stride, padding)?;
    let in_plane = geo.len * geo.other;
    let out_plane = geo.out_len * geo.other;
    let xd = x.data();
    let mut out = vec![T::zero(); n * f * out_plane];
    let mut idx = Vec::new();
    if kind == PoolKind::Max {
        idx = vec![0usize; out.len()];
    }
    for p in 0..n * f {
        let xb = p * in_plane;
        let ob = p * out_plane;
        for lo in 0..geo.out_len {
            for r in 0..geo.other {
                let oi = ob + lo * geo.out_len_stride + r * geo.out_other_stride;
                let mut best: Option<(T, usize)> = None;
                let mut sum = T::zero();
                let mut cnt = 0usize;
                for kk in 0..width {
                    let Some(li) = geo.source(lo, kk, stride, padding) else {
                        continue;
                    };
                    let xi = xb + li * geo.len_stride + r * geo.other_stride;
                    let v = xd[xi];
                    sum += v;
                    cnt += 1;
                    if best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, xi));
                    }
                }
                match kind {
                    PoolKind::Max => {
                        let (v, i) = best.expect("window has at least one valid element");
                        out[oi] = v;
                        idx[oi] = i;
                    }
                    _ => out[oi] = sum / T::of(cnt as f64),
                }
            }
        }
    }
    let aux = if kind == PoolKind::Max {
        Aux::Indices(idx)
    } else {
        Aux::None
    };
    Ok((Tensor::new(geo.out_shape(n, f, axis), out)?, aux))
}

#[allow(clippy::too_many_arguments)]
fn pool_backward<T: Scalar>(
    x: &Tensor<T>,
    aux: &Aux<T>,
    grad: &Tensor<T>,
    kind: PoolKind,
    axis: Axis,
    width: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let g = grad.data();
    let mut dx = vec![T::zero(); x.len()];
    match (kind, aux) {
        (PoolKind::Max, Aux::Indices(idx)) => {
            for (oi, &xi) in idx.iter().enumerate() {
                dx[xi] += g[oi];
            }
        }
        _ => {
            let (n, f) = (x.shape()[0], x.shape()[1]);
            let geo = AxisGeometry::new("pool", x.shape(), axis, width, stride, padding)
                .expect("validated in forward");
            let in_plane = geo.len * geo.other;
            let out_plane = geo.out_len * geo.other;
            for p in 0..n * f {
                for lo in 0..geo.out_len {
                    let sources: Vec<usize> = (0..width)
                        .filter_map(|kk| geo.source(lo, kk, stride, padding))
                        .collect();
                    let share = T::one() / T::of(sources.len() as f64);
                    for r in 0..geo.other {
                        let gv = g[p * out_plane + lo * geo.out_len_stride + r * geo.out_other_stride];
                        for &li in &sources {
                            dx[p * in_plane + li * geo.len_stride + r * geo.other_stride] += gv * share;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")
}

fn global_avg_pool_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    expect_inputs("global_avg_pool", inputs.len(), &[1])?;
    let x = inputs[0];
    expect_rank("global_avg_pool", x, 4)?;
    let s = x.shape();
    let spatial = s[2] * s[3];
    let scale = T::one() / T::of(spatial as f64);
    let data = x
        .data()
        .chunks(spatial)
        .map(|c| c.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

// ---------------------------------------------------------------------------
// dropout, softmax, set pooling

/// Keep mask (already scaled by `1/(1-rate)`) for `len` elements.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn dropout_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    rate: f64,
    train: bool,
    seed: u64,
) -> Result<(Tensor<T>, Aux<T>)> {
    expect_inputs("dropout", inputs.len(), &[1])?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let x = inputs[0];
    if !train || rate == 0.0 {
        return Ok((x.clone(), Aux::None));
    }
    let mask = dropout_mask::<T>(x.len(), rate, seed);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Aux::Mask(mask)))
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn sce_forward<T: Scalar>(inputs: &[&Tensor<T>], targets: &[usize]) -> Result<(Tensor<T>, Aux<T>)> {
    expect_inputs("softmax_cross_entropy", inputs.len(), &[1])?;
    let logits = inputs[0];
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("target class {bad} with only {k} logits"),
        ));
    }
    let probs = softmax_rows(logits);
    let mut loss = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        // log p = x_t - logsumexp(x)
        let row = logits.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[t];
    }
    loss /= T::of(n as f64);
    Ok((Tensor::scalar(loss), Aux::Probs(probs.into_data())))
}

fn set_pool_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    kind: PoolKind,
    group_size: usize,
) -> Result<(Tensor<T>, Aux<T>)> {
    expect_inputs("set_pool", inputs.len(), &[1])?;
    let x = inputs[0];
    expect_rank("set_pool", x, 2)?;
    let (rows, h) = (x.shape()[0], x.shape()[1]);
    if group_size == 0 || rows % group_size != 0 {
        return Err(Error::shape(
            "set_pool",
            format!("{rows} rows do not split into groups of {group_size}"),
        ));
    }
    let groups = rows / group_size;
    let xd = x.data();
    let mut out = vec![T::zero(); groups * h];
    let mut idx = Vec::new();
    match kind {
        PoolKind::Max | PoolKind::Min => {
            idx = vec![0usize; out.len()];
            for g in 0..groups {
                for d in 0..h {
                    let mut bi = g * group_size * h + d;
                    for m in 1..group_size {
                        let i = (g * group_size + m) * h + d;
                        let better = match kind {
                            PoolKind::Max => xd[i] > xd[bi],
                            _ => xd[i] < xd[bi],
                        };
                        if better {
                            bi = i;
                        }
                    }
                    out[g * h + d] = xd[bi];
                    idx[g * h + d] = bi;
                }
            }
        }
        PoolKind::Avg => {
            // Summing in sorted order makes the result independent of member order.
            let mut vals = vec![T::zero(); group_size];
            let scale = T::one() / T::of(group_size as f64);
            for g in 0..groups {
                for d in 0..h {
                    for (m, v) in vals.iter_mut().enumerate() {
                        *v = xd[(g * group_size + m) * h + d];
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    out[g * h + d] = vals.iter().copied().sum::<T>() * scale;
                }
            }
        }
    }
    let aux = if kind == PoolKind::Avg {
        Aux::None
    } else {
        Aux::Indices(idx)
    };
    Ok((Tensor::new(vec![groups, h], out)?, aux))
}

fn set_pool_backward<T: Scalar>(
    x: &Tensor<T>,
    aux: &Aux<T>,
    grad: &Tensor<T>,
    kind: PoolKind,
    group_size: usize,
) -> Tensor<T> {
    let h = x.shape()[1];
    let g = grad.data();
    let mut dx = vec![T::zero(); x.len()];
    match (kind, aux) {
        (PoolKind::Avg, _) => {
            let scale = T::one() / T::of(group_size as f64);
            for (i, v) in dx.iter_mut().enumerate() {
                let row = i / h;
                *v = g[(row / group_size) * h + i % h] * scale;
            }
        }
        (_, Aux::Indices(idx)) => {
            for (oi, &xi) in idx.iter().enumerate() {
                dx[xi] += g[oi];
            }
        }
        _ => panic!("set pool backward requires cached selections"),
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")
}
