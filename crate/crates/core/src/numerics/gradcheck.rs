//! Central-difference gradient checking in 64-bit.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Disagreement between the forward and backward one-sided differences,
/// relative to their size, above which a coordinate is treated as sitting on
/// a kink and skipped.
const KINK_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where the function is not differentiable at the probe
    /// point; they do not count towards `max_rel_err`.
    pub skipped: Vec<(usize, usize)>,
    pub pass: bool,
}

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(track)))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

fn scalar_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(f, inputs, false)?;
    g.value(out).item()
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let (g, vars, out) = evaluate(&f, inputs, true)?;
    let grads = g.backward(out)?;
    let f0 = g.value(out).item()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        pass: false,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + step;
            let fp = scalar_at(&f, &probe)?;
            probe[i].data_mut()[j] = x - step;
            let fm = scalar_at(&f, &probe)?;
            probe[i].data_mut()[j] = x;

            let fwd = (fp - f0) / step;
            let bwd = (f0 - fm) / step;
            if (fwd - bwd).abs() > KINK_TOL * (1.0 + fwd.abs() + bwd.abs()) {
                report.skipped.push((i, j));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(input), step, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let x = Tensor::from_f64([1], &[3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum_all(y)
            },
            &x,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err < 1e-8);
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum_all(y)
            },
            &x,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, vec![(0, 1)]);
        assert_eq!(r.checked, 2);
        assert!(r.pass);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let r = grad_check(|g, x| g.exp(x), &x, 1e-6, 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_gradient_fails() {
        // Custom op whose backward is deliberately off by a factor of two.
        use crate::numerics::graph::CustomOp;
        struct Bad;
        impl CustomOp<f64> for Bad {
            fn name(&self) -> &'static str {
                "bad"
            }
            fn backward(
                &self,
                _: &[&Tensor<f64>],
                _: &Tensor<f64>,
                g: &[f64],
            ) -> Result<Vec<Option<Vec<f64>>>> {
                Ok(vec![Some(g.iter().map(|v| 2.0 * v).collect())])
            }
        }
        let x = Tensor::from_f64([2], &[1.0, -2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let v = g.value(x).clone();
                let y = g.custom(&[x], v, Bad);
                g.sum_all(y)
            },
            &x,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }
}
