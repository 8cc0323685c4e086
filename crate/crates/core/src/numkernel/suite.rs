//! Finite-difference self-test over every differentiable tape op.
//!
//! Each op is checked on randomly shaped, randomly filled instances. Outputs
//! are contracted against a fixed non-uniform weight pattern so that ops
//! whose plain sum is constant (softmax, for instance) still expose their
//! full Jacobian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::finite_diff_check;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::exec::ExecMode;

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// Worst relative error of one op over all its instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const SUITE_OPS: [&str; 31] = [
    "matmul",
    "matmul_nt",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "div",
    "minimum",
    "maximum",
    "add_row",
    "scale",
    "add_scalar",
    "square",
    "abs",
    "relu",
    "sigmoid",
    "gelu",
    "sum",
    "mean",
    "mean_rows",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "avg_pool2",
    "upsample_nearest2",
    "upsample_bilinear",
];

fn contract(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.618 * i as f64 + 0.5).sin() + 0.25).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `a` plus a random offset of magnitude at least 0.1 in each entry.
fn separated(rng: &mut ChaCha8Rng, a: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let d = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { x + d } else { x - d }
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape matches")
}

fn unary(f: fn(&mut Tape, Var) -> Result<Var>) -> Graph {
    Box::new(move |t, v| {
        let y = f(t, v[0])?;
        contract(t, y)
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Graph {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        contract(t, y)
    })
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Graph) {
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let k = rng.random_range(1..=4);
    match op {
        "matmul" => (vec![randn(rng, &[m, k]), randn(rng, &[k, n])], binary(Tape::matmul)),
        "matmul_nt" => (vec![randn(rng, &[m, k]), randn(rng, &[n, k])], binary(Tape::matmul_nt)),
        "transpose" => (vec![randn(rng, &[m, n])], unary(Tape::transpose)),
        "reshape" => (
            vec![randn(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], &[n, m])?;
                contract(t, y)
            }),
        ),
        "add" => (vec![randn(rng, &[m, n]), randn(rng, &[m, n])], binary(Tape::add)),
        "sub" => (vec![randn(rng, &[m, n]), randn(rng, &[m, n])], binary(Tape::sub)),
        "mul" => (vec![randn(rng, &[m, n]), randn(rng, &[m, n])], binary(Tape::mul)),
        "div" => {
            let a = randn(rng, &[m, n]);
            let b = away_from_zero(rng, &[m, n]).data().iter().map(|x| x.signum() * (0.5 + x.abs())).collect();
            (vec![a, Tensor::new(vec![m, n], b).expect("shape")], binary(Tape::div))
        }
        "minimum" | "maximum" => {
            let a = randn(rng, &[m, n]);
            let b = separated(rng, &a);
            let f = if op == "minimum" { Tape::minimum } else { Tape::maximum };
            (vec![a, b], binary(f))
        }
        "add_row" => (vec![randn(rng, &[m, n]), randn(rng, &[1, n])], binary(Tape::add_row)),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            (
                vec![randn(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.scale(v[0], s)?;
                    contract(t, y)
                }),
            )
        }
        "add_scalar" => {
            let s = rng.random_range(-2.0..2.0);
            (
                vec![randn(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.add_scalar(v[0], s)?;
                    contract(t, y)
                }),
            )
        }
        "square" => (vec![randn(rng, &[m, n])], unary(Tape::square)),
        "abs" => (vec![away_from_zero(rng, &[m, n])], unary(Tape::abs)),
        "relu" => (vec![away_from_zero(rng, &[m, n])], unary(Tape::relu)),
        "sigmoid" => (vec![randn(rng, &[m, n])], unary(Tape::sigmoid)),
        "gelu" => (vec![randn(rng, &[m, n])], unary(Tape::gelu)),
        "sum" => (vec![randn(rng, &[m, n])], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![randn(rng, &[m, n])], Box::new(|t, v| t.mean(v[0]))),
        "mean_rows" => (vec![randn(rng, &[m, n])], unary(Tape::mean_rows)),
        "softmax_rows" => (vec![randn(rng, &[m, n])], unary(Tape::softmax_rows)),
        "log_softmax_rows" => (vec![randn(rng, &[m, n])], unary(Tape::log_softmax_rows)),
        "layer_norm" => {
            let n = n.max(2);
            (
                vec![randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])],
                Box::new(|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    contract(t, y)
                }),
            )
        }
        "concat_rows" => (
            vec![randn(rng, &[m, n]), randn(rng, &[k, n])],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                contract(t, y)
            }),
        ),
        "concat_cols" => (
            vec![randn(rng, &[m, n]), randn(rng, &[m, k])],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                contract(t, y)
            }),
        ),
        "slice_rows" => {
            let lo = rng.random_range(0..m);
            let hi = rng.random_range(lo + 1..=m);
            (
                vec![randn(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.slice_rows(v[0], lo, hi)?;
                    contract(t, y)
                }),
            )
        }
        "slice_cols" => {
            let lo = rng.random_range(0..n);
            let hi = rng.random_range(lo + 1..=n);
            (
                vec![randn(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.slice_cols(v[0], lo, hi)?;
                    contract(t, y)
                }),
            )
        }
        "avg_pool2" => {
            let (h, w) = (2 * rng.random_range(1..=2), 2 * rng.random_range(1..=2));
            (
                vec![randn(rng, &[h * w, k])],
                Box::new(move |t, v| {
                    let y = t.avg_pool2(v[0], h, w)?;
                    contract(t, y)
                }),
            )
        }
        "upsample_nearest2" => {
            let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
            (
                vec![randn(rng, &[h * w, k])],
                Box::new(move |t, v| {
                    let y = t.upsample_nearest2(v[0], h, w)?;
                    contract(t, y)
                }),
            )
        }
        "upsample_bilinear" => {
            let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (oh, ow) = (rng.random_range(2..=6), rng.random_range(2..=6));
            (
                vec![randn(rng, &[h * w, k])],
                Box::new(move |t, v| {
                    let y = t.upsample_bilinear(v[0], h, w, oh, ow)?;
                    contract(t, y)
                }),
            )
        }
        other => unreachable!("no suite case for {other}"),
    }
}

/// Runs `instances` random checks of every op in [`SUITE_OPS`].
pub fn kernel_suite(instances: usize, seed: u64, eps: f64, tol: f64, mode: ExecMode) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for (i, op) in SUITE_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        let mut passed = true;
        for _ in 0..instances {
            let (params, graph) = instance(op, &mut rng);
            let report = finite_diff_check(|t: &mut Tape, v: &[Var]| graph(t, v), &params, eps, tol, mode)?;
            worst = worst.max(report.max_rel_error);
            passed &= report.passed;
        }
        out.push(OpCheck {
            op,
            instances,
            max_rel_error: worst,
            passed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_instances() {
        for check in kernel_suite(3, 11, 1e-5, 1e-4, ExecMode::Sequential).unwrap() {
            assert!(check.passed, "{check:?}");
        }
    }
}
