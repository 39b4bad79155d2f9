//! Central finite differences and the comparison against [`Graph::backward`].

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference gradient `(f(θ+h·e) - f(θ-h·e)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub path: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOutcome {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// Path of the parameter with the largest error.
    pub worst: Option<String>,
    pub passed: bool,
}

/// Norm-wise relative error `‖a-b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn norm_relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum();
    let nb: f64 = b.data().iter().map(|x| x * x).sum();
    let scale = na.max(nb).sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Reverse-mode gradients of `build` for every parameter.
pub fn analytic_gradients<F>(params: &[(String, Tensor<f64>)], build: F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Central differences of `build`'s loss, restricted to `coords[p]` for
/// parameter `p` when given (other entries are left at zero).
pub fn numeric_gradients<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    step: f64,
    coords: Option<&[Vec<usize>]>,
) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        match build(&mut g, &vars) {
            Ok(l) => g.value(l).item(),
            Err(_) => f64::NAN,
        }
    };
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    match coords {
        None => finite_diff_grad(eval, &values, step),
        Some(coords) => {
            let mut work = values.clone();
            let mut out: Vec<Tensor<f64>> =
                values.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (p, idx) in coords.iter().enumerate() {
                for &i in idx {
                    let orig = work[p].data()[i];
                    work[p].data_mut()[i] = orig + step;
                    let plus = eval(&work);
                    work[p].data_mut()[i] = orig - step;
                    let minus = eval(&work);
                    work[p].data_mut()[i] = orig;
                    out[p].data_mut()[i] = (plus - minus) / (2.0 * step);
                }
            }
            out
        }
    }
}

/// Per-parameter norm-wise comparison of two gradient sets.
pub fn compare_gradients(
    names: &[String],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tolerance: f64,
) -> GradCheckOutcome {
    let checks: Vec<ParamCheck> = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let err = norm_relative_error(a, n);
            ParamCheck {
                path: name.clone(),
                rel_error: err,
                passed: err <= tolerance,
            }
        })
        .collect();
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    GradCheckOutcome {
        passed: checks.iter().all(|c| c.passed),
        max_rel_error: worst.map_or(0.0, |w| w.rel_error),
        worst: worst.map(|w| w.path.clone()),
        params: checks,
    }
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` receives the bound parameters in `params` order and returns the
/// scalar loss variable.
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_at(params, build, step, tolerance, None)
}

/// [`check_gradients`] on selected coordinates only; the analytic gradient
/// is masked to the same coordinates before comparing.
pub fn check_gradients_at<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    step: f64,
    tolerance: f64,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut analytic = analytic_gradients(params, &build)?;
    if let Some(coords) = coords {
        for (a, idx) in analytic.iter_mut().zip(coords) {
            let mut keep = vec![false; a.len()];
            idx.iter().for_each(|&i| keep[i] = true);
            for (v, k) in a.data_mut().iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
    let numeric = numeric_gradients(params, &build, step, coords);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    Ok(compare_gradients(&names, &analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &[x], 1e-5);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();
        for h in [1e-1, 1.0, 7.5] {
            let g = finite_diff_grad(
                |p| 2.0 * p[0].data()[0] - 0.5 * p[0].data()[1],
                std::slice::from_ref(&x),
                h,
            );
            assert!((g[0].data()[0] - 2.0).abs() < 1e-12);
            assert!((g[0].data()[1] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_gradient_matches() {
        let params = vec![(
            "x".to_string(),
            Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        )];
        let ok = check_gradients(
            &params,
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.sum(e))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(ok.passed, "{ok:?}");
    }
}
