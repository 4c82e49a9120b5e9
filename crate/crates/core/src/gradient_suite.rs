//! Seeded finite-difference checks of every differentiable tape operation and
//! of the composed attention → flow → upsample → warp → masked-loss chain, all
//! in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_flow::{attention_on, attention_to_flow_on, average_heads_on, coordinate_map, LossReduction};
use crate::error::Result;
use crate::tensor::gradcheck::check_tape_gradient;
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::{masked_sq_error_on, upsample_flow_on};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Seeded cases per operation in the default suite.
pub const DEFAULT_CASES: usize = 20;

/// Outcome for one operation over all its cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One case: inputs and the scalar-valued function of them.
struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

/// Reduces `y` to a scalar against fixed random weights so that every output
/// element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(y).to_vec())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Case for a unary or binary op whose output is projected to a scalar.
fn projected(inputs: Vec<Tensor<f64>>, out_len: usize, rng: &mut ChaCha8Rng, op: Build) -> Case {
    let weights = randn(vec![out_len], rng);
    Case {
        inputs,
        build: Box::new(move |tape, v| {
            let y = op(tape, v)?;
            project(tape, y, &weights)
        }),
    }
}

fn elementwise(rng: &mut ChaCha8Rng, arity: usize, op: Build) -> Case {
    let shape = vec![dim(rng), dim(rng)];
    let inputs = (0..arity).map(|_| randn(shape.clone(), rng)).collect();
    projected(inputs, shape[0] * shape[1], rng, op)
}

fn case_for(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "add" => elementwise(rng, 2, |t, v| t.add(v[0], v[1])),
        "sub" => elementwise(rng, 2, |t, v| t.sub(v[0], v[1])),
        "mul" => elementwise(rng, 2, |t, v| t.mul(v[0], v[1])),
        "scale" => {
            let s: f64 = rng.gen_range(-2.0..2.0);
            let c = elementwise(rng, 1, |_, v| Ok(v[0]));
            Case { inputs: c.inputs, build: Box::new(move |t, v| {
                let y = t.scale(v[0], s);
                (c.build)(t, &[y])
            }) }
        }
        "square" => elementwise(rng, 1, |t, v| Ok(t.square(v[0]))),
        "clamp" => {
            let mut c = elementwise(rng, 1, |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
            // keep finite-difference probes off the kinks
            for x in c.inputs[0].data_mut() {
                if (x.abs() - 0.5).abs() < 1e-3 {
                    *x += 0.01;
                }
            }
            c
        }
        "silu" => elementwise(rng, 1, |t, v| Ok(t.silu(v[0]))),
        "sum" => {
            let x = randn(vec![dim(rng), dim(rng)], rng);
            Case { inputs: vec![x], build: Box::new(|t, v| {
                let s = t.sum(v[0]);
                Ok(t.square(s))
            }) }
        }
        "mean" => {
            let x = randn(vec![dim(rng), dim(rng)], rng);
            Case { inputs: vec![x], build: Box::new(|t, v| {
                let s = t.mean(v[0]);
                Ok(t.square(s))
            }) }
        }
        "reshape" => {
            let (m, n) = (dim(rng), dim(rng));
            projected(vec![randn(vec![m, n], rng)], m * n, rng, |t, v| {
                let n = t.shape(v[0]).iter().product::<usize>();
                let y = t.reshape(v[0], vec![n])?;
                Ok(t.square(y))
            })
        }
        "transpose" => {
            let (m, n) = (dim(rng), dim(rng));
            projected(vec![randn(vec![m, n], rng)], m * n, rng, |t, v| t.transpose(v[0]))
        }
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            projected(vec![randn(vec![m, k], rng), randn(vec![k, n], rng)], m * n, rng, |t, v| t.matmul(v[0], v[1]))
        }
        "matmul_bt" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            projected(vec![randn(vec![m, k], rng), randn(vec![n, k], rng)], m * n, rng, |t, v| {
                t.matmul_bt(v[0], v[1])
            })
        }
        "softmax" => {
            let (m, n) = (dim(rng), dim(rng).max(2));
            let tau: f64 = rng.gen_range(0.5..3.0);
            let weights = randn(vec![m * n], rng);
            Case { inputs: vec![randn(vec![m, n], rng)], build: Box::new(move |t, v| {
                let y = t.softmax(v[0], tau)?;
                project(t, y, &weights)
            }) }
        }
        "row_normalize" => {
            // one column normalizes to a constant
            let (m, n) = (dim(rng), rng.gen_range(2..=8));
            let x = Tensor::rand_uniform(vec![m, n], 0.1, 1.0, rng);
            projected(vec![x], m * n, rng, |t, v| t.row_normalize(v[0], 1e-8))
        }
        "row_standardize" => {
            // two columns standardize to ±1
            let (m, n) = (dim(rng), rng.gen_range(3..=8));
            projected(vec![randn(vec![m, n], rng)], m * n, rng, |t, v| t.row_standardize(v[0], 1e-5))
        }
        "slice_cols" => {
            let (m, n) = (dim(rng), dim(rng).max(2));
            let start = rng.gen_range(0..n);
            let end = rng.gen_range(start + 1..=n);
            let weights = randn(vec![m * (end - start)], rng);
            Case { inputs: vec![randn(vec![m, n], rng)], build: Box::new(move |t, v| {
                let y = t.slice_cols(v[0], start, end)?;
                project(t, y, &weights)
            }) }
        }
        "concat_cols" => {
            let (m, a, b) = (dim(rng), dim(rng), dim(rng));
            projected(vec![randn(vec![m, a], rng), randn(vec![m, b], rng)], m * (a + b), rng, |t, v| {
                t.concat_cols(&[v[0], v[1]])
            })
        }
        "concat0" => {
            let (a, b, n) = (dim(rng), dim(rng), dim(rng));
            projected(vec![randn(vec![a, n], rng), randn(vec![b, n], rng)], (a + b) * n, rng, |t, v| {
                t.concat0(&[v[0], v[1]])
            })
        }
        "channel_bias" => {
            let (c, h, w) = (dim(rng), dim(rng), dim(rng));
            projected(vec![randn(vec![c, h, w], rng), randn(vec![c], rng)], c * h * w, rng, |t, v| {
                t.channel_bias(v[0], v[1])
            })
        }
        "conv2d" => {
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (dim(rng), dim(rng));
            let inputs = vec![
                randn(vec![cin, h, w], rng),
                Tensor::randn(vec![cout, cin, 3, 3], 0.5, rng),
                randn(vec![cout], rng),
            ];
            projected(inputs, cout * h * w, rng, |t, v| t.conv2d(v[0], v[1], v[2]))
        }
        "avg_pool2" => {
            let (c, h, w) = (dim(rng), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
            projected(vec![randn(vec![c, h, w], rng)], c * h * w / 4, rng, |t, v| t.avg_pool2(v[0]))
        }
        "resize" => {
            let (c, h, w) = (rng.gen_range(1..=3), dim(rng), dim(rng));
            let (oh, ow) = (dim(rng), dim(rng));
            let weights = randn(vec![c * oh * ow], rng);
            Case { inputs: vec![randn(vec![c, h, w], rng)], build: Box::new(move |t, v| {
                let y = t.resize(v[0], oh, ow)?;
                project(t, y, &weights)
            }) }
        }
        "grid_sample" => {
            let (c, h, w) = (rng.gen_range(1..=3), dim(rng).max(2), dim(rng).max(2));
            let (oh, ow) = (dim(rng), dim(rng));
            let inputs = vec![randn(vec![c, h, w], rng), Tensor::rand_uniform(vec![oh, ow, 2], -0.95, 0.95, rng)];
            projected(inputs, c * oh * ow, rng, |t, v| t.grid_sample(v[0], v[1]))
        }
        "leffa_chain" => chain_case(rng),
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Names of the checked operations, composed chain last.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "clamp",
    "square",
    "silu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "matmul_bt",
    "softmax",
    "row_normalize",
    "row_standardize",
    "slice_cols",
    "concat_cols",
    "concat0",
    "channel_bias",
    "conv2d",
    "avg_pool2",
    "resize",
    "grid_sample",
    "leffa_chain",
];

/// Multi-head attention with registers on a small grid, head averaging, flow,
/// upsampling, warping of a differentiable image and the masked loss.
/// Inputs: per-head queries and keys, register keys, reference image.
fn chain_case(rng: &mut ChaCha8Rng) -> Case {
    let heads = rng.gen_range(1..=2);
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let (big_h, big_w) = (h * rng.gen_range(1..=2), w * rng.gen_range(1..=2));
    let d = rng.gen_range(2..=4);
    let regs = rng.gen_range(0..=2);
    let n = h * w;
    let tau: f64 = rng.gen_range(0.5..3.0);
    let reduction = if rng.gen_bool(0.5) { LossReduction::Mean } else { LossReduction::Sum };
    let mut inputs = Vec::new();
    for _ in 0..heads {
        inputs.push(randn(vec![n, d], rng));
        inputs.push(randn(vec![n, d], rng));
    }
    inputs.push(randn(vec![regs.max(1), d], rng));
    inputs.push(Tensor::rand_uniform(vec![3, big_h, big_w], 0.0, 1.0, rng));
    let target = Tensor::rand_uniform(vec![3, big_h, big_w], 0.0, 1.0, rng);
    let mask = Tensor::from_fn(vec![1, big_h, big_w], |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
    Case {
        inputs,
        build: Box::new(move |tape, v| {
            let reg = (regs > 0).then(|| v[2 * heads]);
            let maps = (0..heads)
                .map(|hd| attention_on(tape, v[2 * hd], v[2 * hd + 1], reg, tau))
                .collect::<Result<Vec<_>>>()?;
            let avg = average_heads_on(tape, &maps)?;
            let flow = attention_to_flow_on(tape, avg, &coordinate_map(h, w))?;
            let grid = upsample_flow_on(tape, flow, (h, w), (big_h, big_w))?;
            let warped = tape.grid_sample(v[2 * heads + 1], grid)?;
            masked_sq_error_on(tape, warped, &target, &mask, reduction)
        }),
    }
}

/// Relative error of case `index` of operation `name`.
pub fn check_op_case(name: &str, seed: u64, index: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(OPS.iter().position(|&o| o == name).unwrap_or(0) as u64);
    let case = case_for(name, &mut rng);
    check_tape_gradient(&case.inputs, STEP, |t, v| (case.build)(t, v))
}

/// Checks one operation on `cases` seeded inputs.
pub fn check_op(name: &'static str, seed: u64, cases: usize) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        worst = worst.max(check_op_case(name, seed, i)?);
    }
    Ok(OpCheck { name, cases, max_rel_err: worst })
}

/// Every operation in [`OPS`].
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|&op| check_op(op, seed, cases)).collect()
}

/// Fixed-width table, one row per operation.
pub fn format_table(checks: &[OpCheck]) -> String {
    let mut s = format!("{:<16} {:>5} {:>12}  status\n", "op", "cases", "max_rel_err");
    for c in checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        s.push_str(&format!("{:<16} {:>5} {:>12.3e}  {status}\n", c.name, c.cases, c.max_rel_err));
    }
    s
}
