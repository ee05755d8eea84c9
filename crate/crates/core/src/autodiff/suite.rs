//! Randomized finite-difference checks of every primitive's VJP.

use rand::Rng as _;

use super::{grad_check_multi, Result, Tape, Tensor, Var};
use crate::rng;

/// Primitives exercised by [`vjp_suite`], in case order.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "bmm",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "add_scalar",
    "permute",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "sum_axis",
    "mean_axis",
    "sum_all",
    "relu",
    "gelu",
    "abs",
    "inv_sqrt_guarded",
    "log_softmax",
    "softmax",
    "conv1d_depthwise",
    "conv1d_pointwise",
    "layer_norm",
    "dropout",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub primitive: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self, tol: f64) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !(c.max_rel_error < tol)).collect()
    }
}

type R = rand_chacha::ChaCha8Rng;

fn dims(r: &mut R, n: usize, max_numel: usize) -> Vec<usize> {
    loop {
        let d: Vec<usize> = (0..n).map(|_| r.random_range(1..=5)).collect();
        if d.iter().product::<usize>() <= max_numel {
            return d;
        }
    }
}

fn tensor(r: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.5..1.5)).collect()).expect("sized")
}

fn matrix(r: &mut R) -> Tensor {
    let s = dims(r, 2, 64);
    tensor(r, &s)
}

/// Values bounded away from zero, for primitives with a kink there.
fn off_kink(r: &mut R, shape: &[usize]) -> Tensor {
    let mut t = tensor(r, shape);
    for v in &mut t.data {
        let s = if *v < 0.0 { -1.0 } else { 1.0 };
        *v = s * (0.1 + v.abs());
    }
    t
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(r: &mut R, name: &str) -> Case {
    let one = |inputs: Vec<Tensor>, f: Build| Case { inputs, build: f };
    match name {
        "matmul" => {
            let (m, k, n) = (r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=6));
            one(
                vec![tensor(r, &[m, k]), tensor(r, &[k, n])],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        "bmm" => {
            let (b, m, k, n) = (
                r.random_range(1..=3),
                r.random_range(1..=4),
                r.random_range(1..=4),
                r.random_range(1..=4),
            );
            one(
                vec![tensor(r, &[b, m, k]), tensor(r, &[b, k, n])],
                Box::new(|t, v| t.bmm(v[0], v[1])),
            )
        }
        "add" | "sub" | "mul" => {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 64);
            let op = name.to_string();
            one(
                vec![tensor(r, &s), tensor(r, &s)],
                Box::new(move |t, v| match op.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }),
            )
        }
        "add_broadcast" | "mul_broadcast" => {
            let s = dims(r, 3, 64);
            let suffix = if r.random_bool(0.5) { s[1..].to_vec() } else { vec![1] };
            let add = name == "add_broadcast";
            one(
                vec![tensor(r, &s), tensor(r, &suffix)],
                Box::new(move |t, v| if add { t.add(v[0], v[1]) } else { t.mul(v[0], v[1]) }),
            )
        }
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            one(vec![matrix(r)], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        "add_scalar" => {
            let c = r.random_range(-2.0..2.0);
            one(vec![matrix(r)], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))))
        }
        "permute" => {
            let s = dims(r, 3, 64);
            let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[r.random_range(0..perms.len())];
            one(vec![tensor(r, &s)], Box::new(move |t, v| t.permute(v[0], &p)))
        }
        "transpose" => one(vec![matrix(r)], Box::new(|t, v| t.transpose(v[0]))),
        "reshape" => {
            let s = dims(r, 2, 64);
            let flat = [s[0] * s[1], 1];
            one(vec![tensor(r, &s)], Box::new(move |t, v| t.reshape(v[0], &flat)))
        }
        "concat" => {
            let s = dims(r, 3, 32);
            let axis = r.random_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = r.random_range(1..=3);
            one(
                vec![tensor(r, &s), tensor(r, &s2)],
                Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)),
            )
        }
        "slice" => {
            let s = dims(r, 3, 64);
            let axis = r.random_range(0..3);
            let len = r.random_range(1..=s[axis]);
            let start = r.random_range(0..=s[axis] - len);
            one(
                vec![tensor(r, &s)],
                Box::new(move |t, v| t.slice(v[0], axis, start, len)),
            )
        }
        "sum_axis" | "mean_axis" => {
            let s = dims(r, 3, 64);
            let axis = r.random_range(0..3);
            let mean = name == "mean_axis";
            one(
                vec![tensor(r, &s)],
                Box::new(move |t, v| {
                    if mean {
                        t.mean_axis(v[0], axis)
                    } else {
                        t.sum_axis(v[0], axis)
                    }
                }),
            )
        }
        "sum_all" => one(vec![matrix(r)], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        "relu" => one(
            vec![{
                let s = dims(r, 2, 64);
                off_kink(r, &s)
            }],
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        "abs" => one(
            vec![{
                let s = dims(r, 2, 64);
                off_kink(r, &s)
            }],
            Box::new(|t, v| Ok(t.abs(v[0]))),
        ),
        "gelu" => one(vec![matrix(r)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        "inv_sqrt_guarded" => {
            let mut x = matrix(r);
            x.data.iter_mut().for_each(|v| *v = 0.5 + v.abs());
            one(vec![x], Box::new(|t, v| Ok(t.inv_sqrt_guarded(v[0], 1e-12))))
        }
        "log_softmax" => one(vec![matrix(r)], Box::new(|t, v| Ok(t.log_softmax(v[0])))),
        "softmax" => one(vec![matrix(r)], Box::new(|t, v| Ok(t.softmax(v[0])))),
        "conv1d_depthwise" => {
            let (b, ch, len) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=8));
            let ks = [1, 3, 5][r.random_range(0..3)];
            one(
                vec![tensor(r, &[b, ch, len]), tensor(r, &[ch, ks])],
                Box::new(|t, v| t.conv1d_depthwise(v[0], v[1])),
            )
        }
        "conv1d_pointwise" => {
            let (b, cin, cout, len) = (
                r.random_range(1..=2),
                r.random_range(1..=4),
                r.random_range(1..=4),
                r.random_range(1..=8),
            );
            one(
                vec![tensor(r, &[b, cin, len]), tensor(r, &[cout, cin]), tensor(r, &[cout])],
                Box::new(|t, v| t.conv1d_pointwise(v[0], v[1], Some(v[2]))),
            )
        }
        "layer_norm" => {
            let mut s = dims(r, 2, 64);
            s[1] = s[1].max(3);
            one(vec![tensor(r, &s)], Box::new(|t, v| Ok(t.layer_norm(v[0], 1e-5))))
        }
        "dropout" => {
            let x = matrix(r);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if r.random_bool(0.7) { 1.0 / 0.7 } else { 0.0 })
                .collect();
            one(vec![x], Box::new(move |t, v| t.dropout(v[0], mask.clone())))
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

/// Run `n_cases` randomized checks cycling through [`PRIMITIVES`]. Each case
/// contracts the primitive's output with a random weight tensor so every
/// output coordinate reaches the loss.
pub fn vjp_suite(seed: u64, n_cases: usize) -> Result<SuiteReport> {
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let primitive = PRIMITIVES[i % PRIMITIVES.len()];
        let mut r = rng::stream(seed, "vjp-suite", &[i as u64]);
        let c = case(&mut r, primitive);
        let mut probe = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|x| probe.constant(x.clone())).collect();
        let out = (c.build)(&mut probe, &vars)?;
        let weights = tensor(&mut r, probe.shape(out));
        let report = grad_check_multi(
            |t, v| {
                let y = (c.build)(t, v)?;
                let w = t.constant(weights.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum_all(p))
            },
            &c.inputs,
            1e-5,
            1e-9,
        )?;
        cases.push(CaseResult {
            primitive,
            shapes: c.inputs.iter().map(|x| x.shape.clone()).collect(),
            max_rel_error: report.max_rel_error,
        });
    }
    Ok(SuiteReport { cases })
}
