//! Central finite-difference checks against the tape.

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over all coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Max relative error over coordinates whose absolute error exceeds
    /// `abs_floor`; a combined "relative or absolute" criterion.
    pub max_rel_error_above_floor: f64,
    pub n_coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error_above_floor < rel_tol
    }
}

/// Compare tape gradients of a scalar function of several parameter tensors
/// with central differences of step `h`. Coordinates with absolute error
/// below `abs_floor` are excluded from `max_rel_error_above_floor` only.
pub fn grad_check_multi<F>(f: F, params: &[Tensor], h: f64, abs_floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_rel_error_above_floor: 0.0,
        n_coords: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for i in 0..params[pi].numel() {
            let orig = params[pi].data[i];
            work[pi].data[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[i];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs() + numeric.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if abs > abs_floor {
                report.max_rel_error_above_floor = report.max_rel_error_above_floor.max(rel);
            }
            report.n_coords += 1;
        }
    }
    Ok(report)
}

/// Single-tensor convenience wrapper around [`grad_check_multi`]; returns the
/// max relative error.
pub fn grad_check<F>(f: F, theta: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let r = grad_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(theta), 1e-5, 0.0)?;
    Ok(r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta() -> Tensor {
        Tensor::new(vec![2, 3], vec![0.4, -1.3, 0.9, 2.2, -0.7, 0.15]).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let e = grad_check(
            |t, v| {
                let s = t.mul(v, v)?;
                Ok(t.sum_all(s))
            },
            &theta(),
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn linear_is_exact() {
        let e = grad_check(
            |t, v| {
                let s = t.scale(v, 3.0);
                Ok(t.sum_all(s))
            },
            &theta(),
        )
        .unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn gelu_matmul_chain() {
        let w = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.1, 0.8, -0.6, 0.3]).unwrap();
        let e = grad_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let a = t.matmul(v, wv)?;
                let g = t.gelu(a);
                let wt = t.constant(w.transpose2());
                let b = t.matmul(g, wt)?;
                let g2 = t.gelu(b);
                Ok(t.sum_all(g2))
            },
            &theta(),
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
