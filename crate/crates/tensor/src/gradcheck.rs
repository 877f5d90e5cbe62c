//! Central finite-difference verification of analytic gradients.

use crate::graph::Tensor;
use crate::params::{Binding, ParamSet};
use rand::{Rng, SeedableRng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max relative error {} at {} (tolerance {tol})",
            self.max_rel_err,
            self.worst
        );
    }
}

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences over every component of every input.
///
/// Inputs are sampled uniformly from [-1, 1] (shifted by `input_offset` when
/// an op needs, say, strictly positive values). The error measure is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(
    shapes: &[Vec<usize>],
    seed: u64,
    step: f64,
    input_offset: f64,
    f: F,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let len = s.iter().product();
            (0..len)
                .map(|_| rng.random_range(-1.0..1.0) + input_offset)
                .collect()
        })
        .collect();

    let leaves: Vec<Tensor> = shapes
        .iter()
        .zip(&base)
        .map(|(s, v)| Tensor::leaf_grad(s.clone(), v.clone()))
        .collect();
    let out = f(&leaves);
    assert_eq!(
        out.shape(),
        &[1],
        "gradient check target must be scalar, got {:?}",
        out.shape()
    );
    out.backward();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| Tensor::leaf(s.clone(), v.clone()))
            .collect();
        f(&leaves).values()[0]
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    for (ti, shape) in shapes.iter().enumerate() {
        let len: usize = shape.iter().product();
        for c in 0..len {
            let mut plus = base.clone();
            plus[ti][c] += step;
            let mut minus = base.clone();
            minus[ti][c] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[ti][c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_rel_err {
                max_rel_err = err;
                worst = format!("input {ti} component {c}: analytic {a} vs numeric {numeric}");
            }
        }
    }
    GradCheckReport { max_rel_err, worst }
}

/// Finite-difference check of a whole-model scalar loss against every
/// component of every parameter in the set. The loss closure must be
/// deterministic (fix any noise and data outside it). Returns the maximum
/// relative error and a description of the worst component.
pub fn fd_check_params<F>(params: &mut ParamSet, step: f64, loss_fn: F) -> (f64, String)
where
    F: Fn(&Binding) -> Tensor,
{
    let bind = params.bind(true);
    let out = loss_fn(&bind);
    assert_eq!(
        out.shape(),
        &[1],
        "loss must be scalar, got {:?}",
        out.shape()
    );
    out.backward();
    let analytic: Vec<Vec<f64>> = bind.leaves().iter().map(|l| l.grad()).collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    for pi in 0..params.len() {
        let len = params.entries()[pi].values.len();
        let name = params.entries()[pi].name.clone();
        for c in 0..len {
            let id = crate::params::ParamId(pi);
            let orig = params.get(id).values[c];
            params.values_mut(id)[c] = orig + step;
            let plus = loss_fn(&params.bind(false)).values()[0];
            params.values_mut(id)[c] = orig - step;
            let minus = loss_fn(&params.bind(false)).values()[0];
            params.values_mut(id)[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_rel_err {
                max_rel_err = err;
                worst = format!("{name}[{c}]: analytic {a} vs numeric {numeric}");
            }
        }
    }
    (max_rel_err, worst)
}
