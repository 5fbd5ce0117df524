//! Finite-difference verification of the analytic backward rules.
//!
//! Each case draws seeded inputs for one primitive, reduces its output to a
//! scalar with fixed random weights, and compares the analytic gradient of
//! every differentiable input against central differences in `f64`.

use std::fmt;
use std::sync::Arc;

use super::graph::Graph;
use super::ops::{primitive_forward, Axis, BnMode, CustomOp, Op, PoolKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const FD_STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Conv,
    Linear,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    DropoutEval,
    DropoutTrain,
    Add,
    Reshape,
    Softmax,
    SoftmaxCrossEntropy,
    SetPoolMax,
    SetPoolAvg,
    SetPoolMin,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 17] = [
        PrimitiveKind::Conv,
        PrimitiveKind::Linear,
        PrimitiveKind::BatchNormTrain,
        PrimitiveKind::BatchNormEval,
        PrimitiveKind::Relu,
        PrimitiveKind::MaxPool,
        PrimitiveKind::AvgPool,
        PrimitiveKind::GlobalAvgPool,
        PrimitiveKind::DropoutEval,
        PrimitiveKind::DropoutTrain,
        PrimitiveKind::Add,
        PrimitiveKind::Reshape,
        PrimitiveKind::Softmax,
        PrimitiveKind::SoftmaxCrossEntropy,
        PrimitiveKind::SetPoolMax,
        PrimitiveKind::SetPoolAvg,
        PrimitiveKind::SetPoolMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Conv => "conv",
            PrimitiveKind::Linear => "linear",
            PrimitiveKind::BatchNormTrain => "batch_norm_train",
            PrimitiveKind::BatchNormEval => "batch_norm_eval",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::MaxPool => "max_pool",
            PrimitiveKind::AvgPool => "avg_pool",
            PrimitiveKind::GlobalAvgPool => "global_avg_pool",
            PrimitiveKind::DropoutEval => "dropout_eval",
            PrimitiveKind::DropoutTrain => "dropout_train",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            PrimitiveKind::SetPoolMax => "set_pool_max",
            PrimitiveKind::SetPoolAvg => "set_pool_avg",
            PrimitiveKind::SetPoolMin => "set_pool_min",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Extents of one gradient-check case. Fields a primitive does not use are
/// ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeSpec {
    pub batch: usize,
    pub features_in: usize,
    pub features_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub axis: Axis,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            batch: 2,
            features_in: 2,
            features_out: 2,
            height: 2,
            width: 6,
            kernel: 3,
            stride: 1,
            padding: 0,
            axis: Axis::Time,
        }
    }
}

impl ShapeSpec {
    /// Random small extents (at most ~10^3 elements per input) valid for `kind`.
    pub fn random(kind: PrimitiveKind, rng: &mut SeededRng) -> Self {
        let mut s = ShapeSpec {
            batch: rng.uniform_inclusive(1, 3),
            features_in: rng.uniform_inclusive(1, 4),
            features_out: rng.uniform_inclusive(1, 4),
            height: rng.uniform_inclusive(1, 4),
            width: rng.uniform_inclusive(2, 9),
            kernel: 1,
            stride: rng.uniform_inclusive(1, 2),
            padding: 0,
            axis: if rng.coin() { Axis::Time } else { Axis::Channel },
        };
        match kind {
            PrimitiveKind::Conv => {
                let len = s.axis_len();
                s.padding = rng.uniform_inclusive(0, 2);
                s.kernel = rng.uniform_inclusive(1, (len + 2 * s.padding).min(5));
            }
            PrimitiveKind::MaxPool | PrimitiveKind::AvgPool => {
                let len = s.axis_len();
                s.kernel = rng.uniform_inclusive(1, len.min(3));
                s.padding = rng.uniform_inclusive(0, s.kernel - 1);
            }
            PrimitiveKind::BatchNormTrain => {
                s.batch = rng.uniform_inclusive(2, 8);
            }
            PrimitiveKind::SetPoolMax | PrimitiveKind::SetPoolAvg | PrimitiveKind::SetPoolMin => {
                // batch = groups, kernel = members per group.
                s.kernel = rng.uniform_inclusive(1, 4);
            }
            _ => {}
        }
        s
    }

    fn axis_len(&self) -> usize {
        match self.axis {
            Axis::Channel => self.height,
            Axis::Time => self.width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub kind: PrimitiveKind,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Test hook that corrupts the analytic gradient of one primitive kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckOptions {
    pub corrupt: Option<PrimitiveKind>,
}

struct Case {
    op: Op<f64>,
    inputs: Vec<Tensor<f64>>,
    differentiable: Vec<bool>,
}

fn normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values bounded away from zero so a finite-difference step never crosses
/// the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.uniform(0.05, 1.0);
        if rng.coin() {
            mag
        } else {
            -mag
        }
    })
}

/// Pairwise-separated values so max/min selections are stable under the step.
fn separated(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order
        .into_iter()
        .map(|k| 0.05 * k as f64 - 0.025 * n as f64 + rng.uniform(0.0, 0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn build_case(kind: PrimitiveKind, s: &ShapeSpec, rng: &mut SeededRng) -> Result<Case> {
    let map4 = [s.batch, s.features_in, s.height, s.width];
    let case = match kind {
        PrimitiveKind::Conv => Case {
            op: Op::Conv {
                axis: s.axis,
                stride: s.stride,
                padding: s.padding,
            },
            inputs: vec![
                normal_tensor(&map4, rng),
                normal_tensor(&[s.features_out, s.features_in, s.kernel], rng),
                normal_tensor(&[s.features_out], rng),
            ],
            differentiable: vec![true; 3],
        },
        PrimitiveKind::Linear => Case {
            op: Op::Linear,
            inputs: vec![
                normal_tensor(&[s.batch, s.features_in], rng),
                normal_tensor(&[s.features_out, s.features_in], rng),
                normal_tensor(&[s.features_out], rng),
            ],
            differentiable: vec![true; 3],
        },
        PrimitiveKind::BatchNormTrain | PrimitiveKind::BatchNormEval => {
            let shape: Vec<usize> = if s.height * s.width > 8 || rng.coin() {
                vec![s.batch, s.features_in]
            } else {
                map4.to_vec()
            };
            let f = s.features_in;
            let mode = if kind == PrimitiveKind::BatchNormTrain {
                BnMode::Train
            } else {
                BnMode::Eval
            };
            Case {
                op: Op::BatchNorm { mode, eps: 1e-5 },
                inputs: vec![
                    normal_tensor(&shape, rng),
                    Tensor::from_fn(&[f], |_| rng.uniform(0.5, 1.5)),
                    normal_tensor(&[f], rng),
                    normal_tensor(&[f], rng),
                    Tensor::from_fn(&[f], |_| rng.uniform(0.5, 2.0)),
                ],
                differentiable: vec![true, true, true, false, false],
            }
        }
        PrimitiveKind::Relu => Case {
            op: Op::Relu,
            inputs: vec![away_from_zero(&map4, rng)],
            differentiable: vec![true],
        },
        PrimitiveKind::MaxPool | PrimitiveKind::AvgPool => {
            let pk = if kind == PrimitiveKind::MaxPool {
                PoolKind::Max
            } else {
                PoolKind::Avg
            };
            Case {
                op: Op::Pool {
                    kind: pk,
                    axis: s.axis,
                    width: s.kernel,
                    stride: s.stride,
                    padding: s.padding,
                },
                inputs: vec![separated(&map4, rng)],
                differentiable: vec![true],
            }
        }
        PrimitiveKind::GlobalAvgPool => Case {
            op: Op::GlobalAvgPool,
            inputs: vec![normal_tensor(&map4, rng)],
            differentiable: vec![true],
        },
        PrimitiveKind::DropoutEval | PrimitiveKind::DropoutTrain => Case {
            op: Op::Dropout {
                rate: 0.5,
                train: kind == PrimitiveKind::DropoutTrain,
                seed: rng.next_u64(),
            },
            inputs: vec![normal_tensor(&map4, rng)],
            differentiable: vec![true],
        },
        PrimitiveKind::Add => Case {
            op: Op::Add,
            inputs: vec![normal_tensor(&map4, rng), normal_tensor(&map4, rng)],
            differentiable: vec![true, true],
        },
        PrimitiveKind::Reshape => Case {
            op: Op::Reshape {
                shape: vec![s.batch, s.features_in * s.height * s.width],
            },
            inputs: vec![normal_tensor(&map4, rng)],
            differentiable: vec![true],
        },
        PrimitiveKind::Softmax => Case {
            op: Op::Softmax,
            inputs: vec![normal_tensor(&[s.batch, s.features_out + 1], rng)],
            differentiable: vec![true],
        },
        PrimitiveKind::SoftmaxCrossEntropy => {
            let k = s.features_out + 1;
            let targets = (0..s.batch).map(|_| rng.below(k)).collect();
            Case {
                op: Op::SoftmaxCrossEntropy { targets },
                inputs: vec![normal_tensor(&[s.batch, k], rng)],
                differentiable: vec![true],
            }
        }
        PrimitiveKind::SetPoolMax | PrimitiveKind::SetPoolAvg | PrimitiveKind::SetPoolMin => {
            let pk = match kind {
                PrimitiveKind::SetPoolMax => PoolKind::Max,
                PrimitiveKind::SetPoolAvg => PoolKind::Avg,
                _ => PoolKind::Min,
            };
            Case {
                op: Op::SetPool {
                    kind: pk,
                    group_size: s.kernel,
                },
                inputs: vec![separated(&[s.batch * s.kernel, s.features_out], rng)],
                differentiable: vec![true],
            }
        }
    };
    let total: usize = case.inputs.iter().map(Tensor::len).sum();
    if total > 4096 {
        return Err(Error::contract(format!("gradient check case too large ({total} elements)")));
    }
    Ok(case)
}

/// `sum(x * weights)`; reduces a primitive output to a scalar.
struct WeightedSum {
    weights: Tensor<f64>,
}

impl CustomOp<f64> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let x = inputs[0];
        if x.shape() != self.weights.shape() {
            return Err(Error::shape("weighted_sum", "weights do not match input"));
        }
        Ok(Tensor::scalar(
            x.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum(),
        ))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad: &Tensor<f64>,
    ) -> Result<Vec<Tensor<f64>>> {
        let g = grad.item();
        Ok(vec![self.weights.map(|w| w * g)])
    }
}

fn scalar_loss(op: &Op<f64>, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = primitive_forward(op, &refs)?;
    Ok(out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Elementwise comparison of an analytic gradient against a numeric one.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorTally {
    pub max_abs: f64,
    pub max_rel: f64,
    pub checked: usize,
    pub failures: usize,
}

impl ErrorTally {
    pub fn record(&mut self, analytic: f64, numeric: f64, rtol: f64, atol: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / numeric.abs().max(analytic.abs()).max(atol);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.checked += 1;
        if !(abs <= atol + rtol * numeric.abs()) {
            self.failures += 1;
        }
    }
}

pub fn grad_check(kind: PrimitiveKind, shape: &ShapeSpec, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(kind, shape, seed, GradCheckOptions::default())
}

pub fn grad_check_with(
    kind: PrimitiveKind,
    shape: &ShapeSpec,
    seed: u64,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed).substream("gradcheck");
    let case = build_case(kind, shape, &mut rng)?;

    let mut graph = Graph::<f64>::new();
    let ids: Vec<_> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| if d { graph.param(t.clone()) } else { graph.input(t.clone()) })
        .collect();
    let out = graph.apply(case.op.clone(), &ids)?;
    let weights = Tensor::from_fn(graph.value(out).shape(), |_| rng.uniform(-1.0, 1.0));
    let loss = graph.apply(
        Op::Custom(Arc::new(WeightedSum {
            weights: weights.clone(),
        })),
        &[out],
    )?;
    let grads = graph.backward(loss)?;

    let mut tally = ErrorTally::default();
    let mut inputs = case.inputs.clone();
    for (slot, &id) in ids.iter().enumerate() {
        if !case.differentiable[slot] {
            continue;
        }
        let mut analytic = grads.get(id);
        if options.corrupt == Some(kind) {
            analytic = analytic.map(|g| 1.25 * g + 0.01);
        }
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            inputs[slot].data_mut()[i] = orig + FD_STEP;
            let up = scalar_loss(&case.op, &inputs, &weights)?;
            inputs[slot].data_mut()[i] = orig - FD_STEP;
            let down = scalar_loss(&case.op, &inputs, &weights)?;
            inputs[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            tally.record(analytic.data()[i], numeric, RTOL, ATOL);
        }
    }
    Ok(GradCheckReport {
        kind,
        max_abs_err: tally.max_abs,
        max_rel_err: tally.max_rel,
        checked: tally.checked,
        passed: tally.failures == 0,
    })
}

/// Aggregate over `cases` random shapes of one primitive.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub kind: PrimitiveKind,
    pub cases: usize,
    pub failed_cases: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failed_cases == 0
    }
}

pub fn grad_check_suite(
    kinds: &[PrimitiveKind],
    cases: usize,
    seed: u64,
    options: GradCheckOptions,
) -> Result<Vec<SuiteRow>> {
    let root = SeededRng::new(seed);
    kinds
        .iter()
        .map(|&kind| {
            let mut shapes = root.substream_indexed("gradcheck-shapes", kind as u64);
            let mut row = SuiteRow {
                kind,
                cases,
                failed_cases: 0,
                max_abs_err: 0.0,
                max_rel_err: 0.0,
            };
            for c in 0..cases {
                let spec = ShapeSpec::random(kind, &mut shapes);
                let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
                let rep = grad_check_with(kind, &spec, case_seed, options)?;
                row.max_abs_err = row.max_abs_err.max(rep.max_abs_err);
                row.max_rel_err = row.max_rel_err.max(rep.max_rel_err);
                if !rep.passed {
                    row.failed_cases += 1;
                }
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_four_to_three_passes() {
        let spec = ShapeSpec {
            batch: 2,
            features_in: 4,
            features_out: 3,
            ..ShapeSpec::default()
        };
        let rep = grad_check(PrimitiveKind::Linear, &spec, 0).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checked, 2 * 4 + 3 * 4 + 3);
    }

    #[test]
    fn conv_kernel_three_over_nine_passes() {
        let spec = ShapeSpec {
            batch: 1,
            features_in: 1,
            features_out: 1,
            height: 1,
            width: 9,
            kernel: 3,
            ..ShapeSpec::default()
        };
        let rep = grad_check(PrimitiveKind::Conv, &spec, 0).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn batch_norm_train_batch_eight_passes() {
        let spec = ShapeSpec {
            batch: 8,
            features_in: 3,
            height: 3,
            width: 3,
            ..ShapeSpec::default()
        };
        let rep = grad_check(PrimitiveKind::BatchNormTrain, &spec, 0).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let spec = ShapeSpec::default();
        let opts = GradCheckOptions {
            corrupt: Some(PrimitiveKind::Relu),
        };
        let rep = grad_check_with(PrimitiveKind::Relu, &spec, 3, opts).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PrimitiveKind::ALL {
            assert_eq!(PrimitiveKind::from_name(k.name()), Some(k));
        }
    }
}
