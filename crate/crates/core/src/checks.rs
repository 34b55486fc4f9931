//! Gradient checks over every differentiable op and the full student loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distiller::{record_total_loss, record_uncertainty_loss};
use crate::error::Result;
use crate::segnet::{build, record_forward, ModelConfig};
use crate::tensor::{grad_check, grad_check_single, Graph, NodeId, Scalar, Shape, Tensor, UnaryKind};
use crate::VOID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Double => 1e-5,
            Precision::Single => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub case: String,
    pub precision: Precision,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.precision.tolerance()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2d,
    Conv2dStrided,
    Relu,
    Sigmoid,
    Log1p,
    Sqrt,
    Square,
    Softmax,
    MaxPool,
    Upsample,
    Add,
    Sub,
    Mul,
    MeanPerItem,
    MeanAll,
    SumAll,
    CrossEntropy,
    UncertaintyLoss,
    StudentLoss,
}

impl Case {
    pub const ALL: [Case; 19] = [
        Case::Conv2d,
        Case::Conv2dStrided,
        Case::Relu,
        Case::Sigmoid,
        Case::Log1p,
        Case::Sqrt,
        Case::Square,
        Case::Softmax,
        Case::MaxPool,
        Case::Upsample,
        Case::Add,
        Case::Sub,
        Case::Mul,
        Case::MeanPerItem,
        Case::MeanAll,
        Case::SumAll,
        Case::CrossEntropy,
        Case::UncertaintyLoss,
        Case::StudentLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Conv2d => "conv2d",
            Case::Conv2dStrided => "conv2d_stride2",
            Case::Relu => "relu",
            Case::Sigmoid => "sigmoid",
            Case::Log1p => "log1p",
            Case::Sqrt => "sqrt",
            Case::Square => "square",
            Case::Softmax => "softmax_channels",
            Case::MaxPool => "maxpool2",
            Case::Upsample => "upsample_bilinear2x",
            Case::Add => "add",
            Case::Sub => "sub",
            Case::Mul => "mul",
            Case::MeanPerItem => "mean_per_item",
            Case::MeanAll => "mean_all",
            Case::SumAll => "sum_all",
            Case::CrossEntropy => "cross_entropy",
            Case::UncertaintyLoss => "uncertainty_loss",
            Case::StudentLoss => "student_loss",
        }
    }
}

fn student_config() -> ModelConfig {
    ModelConfig {
        classes: 3,
        encoder_widths: vec![2, 3],
        decoder_width: 3,
        kernel: 3,
        input_size: 4,
    }
}

const STUDENT_LABELS: [u8; 16] = [0, 1, 2, 2, 1, 0, VOID, 1, 2, 2, 0, 1, 0, 1, 2, 0];

/// Fixed projection weights so a reduction to a scalar does not hide
/// symmetric gradient errors (e.g. softmax rows summing to one).
fn projection<T: Scalar>(shape: Shape) -> Tensor<T> {
    let mut k = 0u32;
    Tensor::from_fn(shape, |_| {
        k += 1;
        let u = ((k as f64) * 0.754_877_666).fract();
        // Magnitudes in [0.5, 1] keep every element's gradient well above
        // finite-difference noise.
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        T::from_f64_lossy(sign * (0.5 + 0.5 * u))
    })
}

fn project<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let w = g.constant(projection(g.value(x).shape()));
    let m = g.mul(x, w)?;
    g.sum_all(m)
}

fn record<T: Scalar>(case: Case, g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
    let unary = |g: &mut Graph<T>, kind| -> Result<NodeId> {
        let y = g.unary(ids[0], kind)?;
        project(g, y)
    };
    match case {
        Case::Conv2d => {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            project(g, y)
        }
        Case::Conv2dStrided => {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 0)?;
            project(g, y)
        }
        Case::Relu => unary(g, UnaryKind::Relu),
        Case::Sigmoid => unary(g, UnaryKind::Sigmoid),
        Case::Log1p => unary(g, UnaryKind::Log1p),
        Case::Sqrt => unary(g, UnaryKind::Sqrt),
        Case::Square => unary(g, UnaryKind::Square),
        Case::Softmax => {
            let y = g.softmax_channels(ids[0])?;
            project(g, y)
        }
        Case::MaxPool => {
            let y = g.maxpool2(ids[0])?;
            project(g, y)
        }
        Case::Upsample => {
            let y = g.upsample_bilinear2x(ids[0])?;
            project(g, y)
        }
        Case::Add | Case::Sub | Case::Mul => {
            let y = match case {
                Case::Add => g.add(ids[0], ids[1])?,
                Case::Sub => g.sub(ids[0], ids[1])?,
                _ => g.mul(ids[0], ids[1])?,
            };
            project(g, y)
        }
        Case::MeanPerItem => {
            let y = g.mean_per_item(ids[0])?;
            project(g, y)
        }
        Case::MeanAll => {
            let y = g.mean_all(ids[0])?;
            project(g, y)
        }
        Case::SumAll => {
            let y = g.sum_all(ids[0])?;
            project(g, y)
        }
        Case::CrossEntropy => {
            let p = g.softmax_channels(ids[0])?;
            let labels = ce_labels(g.value(ids[0]).shape());
            Ok(g.cross_entropy(p, &labels)?.0)
        }
        Case::UncertaintyLoss => {
            let q = g.sigmoid(ids[0])?;
            let z = g.sigmoid(ids[1])?;
            record_uncertainty_loss(g, q, z)
        }
        Case::StudentLoss => {
            let cfg = student_config();
            let (params, rest) = ids.split_at(ids.len() - 2);
            let out = record_forward(g, &cfg, true, params, rest[0])?;
            let z = g.sigmoid(rest[1])?;
            let q = out.uncertainty.expect("dual head");
            Ok(record_total_loss(g, out.probs, &STUDENT_LABELS, Some((q, z)))?.total)
        }
    }
}

fn ce_labels(shape: Shape) -> Vec<u8> {
    let [n, c, h, w] = shape.0;
    (0..n * h * w)
        .map(|i| if i % 7 == 3 { VOID } else { ((i * 5 + 1) % c) as u8 })
        .collect()
}

/// Magnitude in `[lo, hi)` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi) as f32 as f64;
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Inputs exactly representable in `f32`, drawn from `seed`.
fn inputs(case: Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: [usize; 4], lo: f64, hi: f64| {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi) as f32 as f64)
    };
    match case {
        Case::Conv2d => vec![
            uniform([2, 4, 10, 10], -1.0, 1.0),
            uniform([6, 4, 3, 3], -0.5, 0.5),
            uniform([1, 1, 1, 6], -0.5, 0.5),
        ],
        Case::Conv2dStrided => vec![
            uniform([2, 3, 9, 9], -1.0, 1.0),
            uniform([4, 3, 3, 3], -0.5, 0.5),
            uniform([1, 1, 1, 4], -0.5, 0.5),
        ],
        Case::Relu => vec![away_from_zero(&mut rng, [2, 8, 16, 16], 0.05, 1.0)],
        Case::Sigmoid => vec![uniform([2, 4, 8, 8], -3.0, 3.0)],
        Case::Square => vec![away_from_zero(&mut rng, [2, 4, 8, 8], 0.2, 3.0)],
        Case::Log1p => vec![uniform([2, 4, 8, 8], -0.5, 2.0)],
        Case::Sqrt => vec![uniform([2, 4, 8, 8], 0.2, 2.0)],
        Case::Softmax => vec![uniform([2, 5, 8, 8], -2.0, 2.0)],
        Case::MaxPool => {
            // Distinct values so no window has a near tie.
            let n = 2 * 3 * 8 * 8;
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let data = order.iter().map(|&k| (k as f32 / n as f32 * 4.0 - 2.0) as f64).collect();
            vec![Tensor::from_vec([2, 3, 8, 8], data).unwrap()]
        }
        Case::Upsample => vec![uniform([2, 3, 5, 7], -1.0, 1.0)],
        Case::Add | Case::Sub | Case::Mul => vec![
            away_from_zero(&mut rng, [2, 4, 8, 8], 0.2, 2.0),
            away_from_zero(&mut rng, [2, 4, 8, 8], 0.2, 2.0),
        ],
        Case::MeanPerItem | Case::MeanAll | Case::SumAll => vec![uniform([2, 4, 6, 6], -2.0, 2.0)],
        Case::CrossEntropy => vec![uniform([2, 4, 6, 6], -2.0, 2.0)],
        Case::UncertaintyLoss => vec![uniform([3, 1, 5, 5], -3.0, 0.0), uniform([3, 1, 5, 5], -3.0, 0.0)],
        Case::StudentLoss => {
            // Random biases: zero biases put whole relu inputs exactly on
            // the kink.
            let params = build(&student_config(), seed, true).unwrap();
            let mut v: Vec<Tensor<f64>> = params
                .specs()
                .iter()
                .zip(params.tensors())
                .map(|(spec, t)| {
                    if spec.is_bias {
                        uniform(t.shape().0, 0.05, 0.3)
                    } else {
                        t.cast()
                    }
                })
                .collect();
            v.push(uniform([1, 3, 4, 4], 0.0, 1.0));
            v.push(uniform([1, 1, 4, 4], -3.0, 0.0));
            v
        }
    }
}

pub fn run_case(case: Case, precision: Precision, seed: u64) -> Result<GradCheckResult> {
    let x = inputs(case, seed);
    let max_rel_error = match precision {
        Precision::Double => grad_check(|g: &mut Graph<f64>, ids: &[NodeId]| record(case, g, ids), &x, 1e-4)?,
        Precision::Single => grad_check_single(
            |g: &mut Graph<f32>, ids: &[NodeId]| record(case, g, ids),
            |g: &mut Graph<f64>, ids: &[NodeId]| record(case, g, ids),
            &x,
            1e-4,
        )?,
    };
    Ok(GradCheckResult {
        case: case.name().to_string(),
        precision,
        max_rel_error,
    })
}

/// Every case in both precisions.
pub fn grad_check_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for precision in [Precision::Double, Precision::Single] {
        for case in Case::ALL {
            out.push(run_case(case, precision, seed)?);
        }
    }
    Ok(out)
}

pub fn suite_csv(results: &[GradCheckResult]) -> String {
    let mut s = String::from("case,precision,max_rel_error,pass\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{:.3e},{}\n",
            r.case,
            match r.precision {
                Precision::Double => "f64",
                Precision::Single => "f32",
            },
            r.max_rel_error,
            r.passed()
        ));
    }
    s
}
