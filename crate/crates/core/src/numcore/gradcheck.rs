//! Central finite-difference gradient checker — the oracle every analytic
//! VJP in this crate is verified against.

use super::ops;
use super::rng::Rng;
use super::tape::{backward, no_grad, reset_tape};
use super::tensor::Tensor;
use super::NumError;

/// Above this element count only a seeded random coordinate subset is probed.
const EXHAUSTIVE_LIMIT: usize = 10_000;
const SUBSET_SIZE: usize = 512;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<InputReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of a scalar-valued `f` against central
/// differences (f(x+εe_i) − f(x−εe_i)) / 2ε on every coordinate (or a
/// seeded subset above 10^4 elements). A coordinate passes when
/// |analytic − numeric| ≤ atol + rtol·max(|analytic|, |numeric|).
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, NumError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().with_grad()).collect();
    reset_tape();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(NumError::NonScalarLoss(loss.shape().to_vec()));
    }
    let grads = backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| match grads.get(l) {
            Some(g) => g.to_vec(),
            None => vec![0.0; l.numel()],
        })
        .collect();
    reset_tape();

    let eval = |probe: &[Tensor]| -> Result<f64, NumError> {
        no_grad(|| f(probe).map(|t| t.item()))
    };

    let mut per_input = Vec::with_capacity(leaves.len());
    let mut all_pass = true;
    for (i, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= EXHAUSTIVE_LIMIT {
            (0..n).collect()
        } else {
            let mut rng = Rng::derive(0x6772_6164, i as u64);
            (0..SUBSET_SIZE).map(|_| rng.below(n)).collect()
        };
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut pass = true;
        for &c in &coords {
            let base = leaf.to_vec();
            let probe = |delta: f64| -> Result<f64, NumError> {
                let mut v = base.clone();
                v[c] += delta;
                let mut args: Vec<Tensor> = leaves.iter().map(|l| l.detach()).collect();
                args[i] = Tensor::from_vec(leaf.shape(), v)?;
                eval(&args)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = analytic[i][c];
            let abs_err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
            max_abs = max_abs.max(abs_err);
            max_rel = max_rel.max(rel_err);
            if abs_err > atol + rtol * scale || !abs_err.is_finite() {
                pass = false;
            }
        }
        all_pass &= pass;
        per_input.push(InputReport { max_abs_err: max_abs, max_rel_err: max_rel, checked: coords.len(), pass });
    }
    Ok(GradCheckReport { per_input, pass: all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::{with_float_mode, FloatMode};

    #[test]
    fn linear_case_is_exact() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let report = grad_check(|xs| ops::sum_all(&xs[0]), &[x], 1e-3, 1e-6, 1e-9).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn square_matches_finite_differences() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let report = grad_check(
            |xs| ops::sum_all(&ops::mul(&xs[0], &xs[0])?),
            &[x],
            1e-3,
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        // -Σ target ⊙ log softmax(x) on a random (4,5) input, 32-bit mode
        let mut rng = Rng::new(99);
        let x = Tensor::from_vec(&[4, 5], rng.normal_vec(20, 1.0)).unwrap();
        let mut tv = vec![0.0; 20];
        for r in 0..4 {
            tv[r * 5 + rng.below(5)] = 1.0;
        }
        let target = Tensor::from_vec(&[4, 5], tv).unwrap();
        let report = grad_check(
            |xs| {
                let p = ops::softmax(&xs[0], 1)?;
                let ll = ops::mul(&ops::log(&p)?, &target)?;
                ops::neg(&ops::sum_all(&ll)?).and_then(|t| ops::mean_all(&t))
            },
            &[x],
            1e-3,
            1e-3,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|xs| ops::mul(&xs[0], &xs[0]), &[x], 1e-3, 1e-3, 1e-5);
        assert!(matches!(err, Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn f64_mode_reaches_tight_tolerance() {
        with_float_mode(FloatMode::F64, || {
            let mut rng = Rng::new(5);
            let x = Tensor::from_vec(&[6], rng.normal_vec(6, 1.0)).unwrap();
            let report = grad_check(
                |xs| ops::sum_all(&ops::tanh(&ops::mul(&xs[0], &xs[0])?)?),
                &[x],
                1e-5,
                1e-8,
                1e-12,
            )
            .unwrap();
            assert!(report.pass, "{report:?}");
        });
    }
}
