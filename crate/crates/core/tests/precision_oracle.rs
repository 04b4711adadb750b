use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_poet::linalg::max_abs;
use robust_poet::precision::{clime, clime_column, glasso, glasso_kkt_residual};

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3
}

fn oracle_objective(s: &DMatrix<f64>, j: usize, tau: f64) -> f64 {
    let d = s.nrows();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let plus: Vec<_> = (0..d).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    let minus: Vec<_> = (0..d).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for i in 0..d {
        let e = if i == j { 1.0 } else { 0.0 };
        let terms: Vec<_> = (0..d)
            .flat_map(|k| [(plus[k], s[(i, k)]), (minus[k], -s[(i, k)])])
            .collect();
        lp.add_constraint(terms.as_slice(), ComparisonOp::Le, e + tau);
        lp.add_constraint(terms.as_slice(), ComparisonOp::Ge, e - tau);
    }
    lp.solve().unwrap().objective()
}

#[test]
fn clime_columns_match_reference_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let d = 4 + trial;
        let s = random_spd(d, &mut rng);
        for &tau in &[0.02, 0.1, 0.3] {
            for j in 0..d {
                let ours = clime_column(&s, j, tau).unwrap();
                let reference = oracle_objective(&s, j, tau);
                assert!(
                    (ours.objective - reference).abs() <= 1e-7 * reference.max(1.0),
                    "d={d} tau={tau} col={j}: {} vs {reference}",
                    ours.objective
                );
                let r = &s * &ours.v;
                for i in 0..d {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((r[i] - e).abs() <= tau + 1e-9);
                }
            }
        }
    }
}

#[test]
fn clime_sparsity_grows_with_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_spd(12, &mut rng);
    let nnz = |tau: f64| clime(&s, tau).unwrap().iter().filter(|v| v.abs() > 1e-12).count();
    let counts: Vec<usize> = [0.01, 0.05, 0.2, 0.6].iter().map(|&t| nnz(t)).collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn glasso_kkt_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let s = random_spd(10, &mut rng);
        let tau = 0.02 + 0.1 * rng.random::<f64>();
        let fit = glasso(&s, tau, 1e-6, 500).unwrap();
        let w = fit.precision.clone().try_inverse().unwrap();
        assert!(glasso_kkt_residual(&s, &fit.precision, &w, tau) <= 1e-6);
        assert!(max_abs(&(&fit.precision - fit.precision.transpose())) == 0.0);
        assert!(fit.precision.clone().cholesky().is_some());
    }
}
