//! Central-difference verification of reverse-mode gradients.

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Relative errors below this denominator are measured absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Entries left out because `x ± h` crossed a branch of a piecewise op,
    /// where a difference quotient says nothing about the derivative.
    pub straddled: usize,
    /// Rounding of `f` alone moves a difference quotient by about
    /// `ε·|f(x0)| / h`.
    pub noise_floor: f64,
    /// Worst relative error over entries whose gradient is at least
    /// `RESOLVED_RATIO` times `noise_floor`.
    pub resolved_max_rel_error: f64,
}

pub const RESOLVED_RATIO: f64 = 1e6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function of several inputs
/// against `(f(x+h) - f(x-h)) / 2h`, element by element.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |k| (ti, k)))
        .collect();
    grad_check_entries(f, inputs, h, &entries)
}

/// [`grad_check_many`] restricted to the listed `(input, element)` entries.
pub fn grad_check_entries<F>(f: F, inputs: &[Tensor], h: f64, entries: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok((v.item(), g.branch_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(g.value(out).shape().to_vec()));
    }
    let base = g.branch_signature();
    let noise_floor = f64::EPSILON * g.value(out).item().abs() / h;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        straddled: 0,
        noise_floor,
        resolved_max_rel_error: 0.0,
    };
    let mut probe = inputs.to_vec();
    for &(ti, k) in entries {
        let x0 = inputs[ti].data()[k];
        probe[ti].data_mut()[k] = x0 + h;
        let (plus, sp) = eval(&probe)?;
        probe[ti].data_mut()[k] = x0 - h;
        let (minus, sm) = eval(&probe)?;
        probe[ti].data_mut()[k] = x0;
        if sp != base || sm != base {
            report.straddled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti].data()[k];
        let err = relative_error(a, numeric);
        if a.abs().max(numeric.abs()) >= RESOLVED_RATIO * noise_floor {
            report.resolved_max_rel_error = report.resolved_max_rel_error.max(err);
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (ti, k);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the worst relative error.
pub fn grad_check<F>(f: F, x0: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x0), h).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_across_a_kink_are_skipped() {
        let x = Tensor::new(&[3], vec![5e-6, -2.0, 1.5]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r)
        };
        let rep = grad_check_many(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!((rep.checked, rep.straddled), (2, 1));
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        let err = grad_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.softmax_rows(v).unwrap();
        let total = g.sum(s).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(v).unwrap().data().iter().all(|d| d.abs() < 1e-15));
        let err = grad_check(
            |g, x| {
                let s = g.softmax_rows(x)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let r = grad_check(|g, x| g.relu(x), &Tensor::zeros(&[2, 2]), 1e-5);
        assert!(matches!(r, Err(TensorError::NotScalar(_))));
    }
}
