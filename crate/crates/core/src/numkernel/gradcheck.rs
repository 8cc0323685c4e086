use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

/// Gradients below this magnitude are compared absolutely rather than
/// relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok((tape, root, vars))
}

/// Checks the tape's gradients of the scalar function built by `f` against
/// central differences `(f(θ + eps·e) − f(θ − eps·e)) / (2·eps)` for every
/// coordinate of every parameter.
///
/// `f` receives one leaf per parameter and must return the scalar root. It is
/// evaluated twice at the unperturbed point first; differing results abort
/// with [`Error::Oracle`].
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    mode: ExecMode,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let (tape, root, vars) = evaluate(&f, params, true)?;
    let (again, root2, _) = evaluate(&f, params, false)?;
    let v1 = tape.value(root).item();
    let v2 = again.value(root2).item();
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {v1:e} vs {v2:e}"
        )));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let probe = |p: usize, i: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.to_vec();
        shifted[p].data_mut()[i] += delta;
        let (t, r, _) = evaluate(&f, &shifted, false)?;
        Ok(t.value(r).item())
    };
    let diffs = exec::try_map_indexed(mode, coords.len(), |j| {
        let (p, i) = coords[j];
        Ok::<f64, Error>((probe(p, i, eps)? - probe(p, i, -eps)?) / (2.0 * eps))
    })?;

    let mut numeric: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (&(p, i), &d) in coords.iter().zip(&diffs) {
        numeric[p].data_mut()[i] = d;
        let err = relative_error(analytic[p].data()[i], d);
        if err > max_rel_error || worst.is_none() {
            max_rel_error = err;
            worst = Some((p, i));
        }
    }
    Ok(CheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tol,
        passed: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let theta = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let rep = finite_diff_check(|t, v| t.sum(v[0]), &[theta], 1e-5, 1e-4, ExecMode::Sequential)
            .unwrap();
        assert!(rep.passed);
        assert!(rep.analytic[0].data().iter().all(|&g| g == 1.0));
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn dot_self_gradient_is_twice_theta() {
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let rep = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[theta],
            1e-5,
            1e-4,
            ExecMode::Sequential,
        )
        .unwrap();
        assert!(rep.passed);
        let fd = rep.numeric[0].data();
        assert!((fd[0] - 2.0).abs() < 1e-8 && (fd[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn nondeterminism_is_reported() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let theta = Tensor::scalar(1.0);
        let err = finite_diff_check(
            |t, v| {
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                t.add_scalar(v[0], k)
            },
            &[theta],
            1e-5,
            1e-4,
            ExecMode::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn rejects_bad_eps() {
        let err = finite_diff_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0, 1e-4, ExecMode::Sequential);
        assert!(err.is_err());
    }
}
