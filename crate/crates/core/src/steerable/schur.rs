//! Linear equivariant maps `V_reg + V_reg -> V_triv` and their rank-one form.

use super::projector::project_kernel;
use crate::group::{act_on_vector, FieldType, GroupElement};
use crate::tensor::Tensor;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchurReport {
    /// Worst `|f(v, w) - a sum(v) - b sum(w)|` over all trials and inputs.
    pub residual: f64,
    /// Worst `|f(g1 v, g2 w) - f(v, w)|` over all trials, inputs and pairs.
    pub corollary: f64,
}

/// Least-squares `(a, b)` such that `f(v, w) ~ a sum(v) + b sum(w)`, with the
/// worst absolute residual over `inputs`.
pub fn fit_sum_form(f: &dyn Fn(&[f64]) -> f64, n: usize, inputs: &[Vec<f64>]) -> (f64, f64, f64) {
    let design = DMatrix::from_fn(inputs.len(), 2, |r, c| inputs[r][c * n..(c + 1) * n].iter().sum());
    let y = DVector::from_iterator(inputs.len(), inputs.iter().map(|x| f(x)));
    let sol = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .expect("SVD with both factors");
    let residual = (&design * &sol - &y).amax();
    (sol[0], sol[1], residual)
}

/// Worst `|f(g1 v, g2 w) - f(v, w)|` over all `(g1, g2)` in `C_n^2`.
pub fn corollary_deviation(f: &dyn Fn(&[f64]) -> f64, n: usize, inputs: &[Vec<f64>]) -> f64 {
    let reg = FieldType::regular(n, 1);
    let mut worst = 0.0f64;
    for x in inputs {
        let base = f(x);
        for g1 in GroupElement::elements(n) {
            let v = act_on_vector(&reg, &g1, &x[..n]).expect("regular dim");
            for g2 in GroupElement::elements(n) {
                let mut moved = v.clone();
                moved.extend(act_on_vector(&reg, &g2, &x[n..]).expect("regular dim"));
                worst = worst.max((f(&moved) - base).abs());
            }
        }
    }
    worst
}

/// Projects `trials` random linear maps onto equivariance and checks that
/// each is `a sum(v) + b sum(w)` and ignores independent rotations of the
/// two summands.
pub fn verify_schur_form<R: Rng + ?Sized>(n: usize, trials: usize, inputs: usize, rng: &mut R) -> Result<SchurReport> {
    let in_field = FieldType::regular(n, 2);
    let out_field = FieldType::trivial(n, 1);
    let mut report = SchurReport {
        residual: 0.0,
        corollary: 0.0,
    };
    for _ in 0..trials {
        let raw = Tensor::new(vec![1, 2 * n, 1, 1], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let w = project_kernel(&raw, &in_field, &out_field)?.into_data();
        let f = move |x: &[f64]| -> f64 { w.iter().zip(x).map(|(a, b)| a * b).sum() };
        let xs: Vec<Vec<f64>> = (0..inputs)
            .map(|_| (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (_, _, residual) = fit_sum_form(&f, n, &xs);
        report.residual = report.residual.max(residual);
        report.corollary = report.corollary.max(corollary_deviation(&f, n, &xs));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_coefficients_of_an_exact_member() {
        let n = 4;
        let f = |x: &[f64]| 2.0 * x[..n].iter().sum::<f64>() - x[n..].iter().sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (a, b, r) = fit_sum_form(&f, n, &xs);
        assert!((a - 2.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12 && r < 1e-12);
    }

    #[test]
    fn projected_maps_have_the_sum_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = verify_schur_form(4, 10, 100, &mut rng).unwrap();
        assert!(rep.residual <= 1e-10, "{rep:?}");
        assert!(rep.corollary <= 1e-12, "{rep:?}");
    }

    #[test]
    fn generic_map_is_not_of_the_sum_form() {
        let f = |x: &[f64]| x[0] - 0.5 * x[5];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert!(fit_sum_form(&f, 4, &xs).2 > 0.1);
        assert!(corollary_deviation(&f, 4, &xs) > 0.1);
    }
}
