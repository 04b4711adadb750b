//! Sparse precision estimation for the idiosyncratic residual (CLIME and
//! graphical lasso) and the low-rank Woodbury correction back to the full
//! precision matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_square, inverse, symmetrize_in_place};
use crate::spectral::SpectralSplit;

pub const GLASSO_TOL: f64 = 1e-6;
pub const GLASSO_MAX_ITER: usize = 500;

const LP_FEAS_TOL: f64 = 1e-10;
const LP_PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PrecisionMethod {
    Clime,
    Glasso,
}

#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub v0: DMatrix<f64>,
    pub v0_u: DMatrix<f64>,
    pub tau: f64,
    pub method: PrecisionMethod,
}

// ---------------------------------------------------------------------------
// CLIME
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
}

/// Solution of one CLIME column program.
#[derive(Debug, Clone)]
pub struct L1BoxSolution {
    pub v: DVector<f64>,
    pub objective: f64,
    pub pivots: usize,
}

/// Solves `min ‖v‖₁ s.t. lo ≤ A v ≤ hi` by the bounded dual simplex method.
///
/// Variables are `(v⁺, v⁻, r)` with `A v⁺ - A v⁻ - r = 0`, `v± ≥ 0` and
/// `r ∈ [lo, hi]`. Starting from the basis `{r}` every reduced cost is
/// nonnegative, so the method needs no phase one.
fn solve_l1_box(a: &DMatrix<f64>, lo: &[f64], hi: &[f64], max_pivots: usize) -> std::result::Result<L1BoxSolution, (bool, f64, usize)> {
    let d = a.nrows();
    let p = a.ncols();
    let nvar = 2 * p + d;
    // Tableau B⁻¹ [A, -A, -I] for B = -I. The v⁻ block is always the
    // negated v⁺ block, so only B⁻¹ [A, -I] is stored.
    let mut tab = DMatrix::zeros(d, p + d);
    for i in 0..d {
        for k in 0..p {
            tab[(i, k)] = -a[(i, k)];
        }
        tab[(i, p + i)] = 1.0;
    }
    let phys = |j: usize| -> (usize, f64) {
        if j < p {
            (j, 1.0)
        } else if j < 2 * p {
            (j - p, -1.0)
        } else {
            (j - p, 1.0)
        }
    };
    let lower = |j: usize| if j < 2 * p { 0.0 } else { lo[j - 2 * p] };
    let upper = |j: usize| if j < 2 * p { f64::INFINITY } else { hi[j - 2 * p] };
    let mut reduced: Vec<f64> = (0..nvar).map(|j| if j < 2 * p { 1.0 } else { 0.0 }).collect();
    let mut state = vec![VarState::AtLower; nvar];
    let mut basis: Vec<usize> = (0..d).map(|i| 2 * p + i).collect();
    for &b in &basis {
        state[b] = VarState::Basic;
    }
    let mut xb = vec![0.0; d];
    let mut pivots = 0;

    let objective = |basis: &[usize], xb: &[f64]| -> f64 {
        basis
            .iter()
            .zip(xb)
            .filter(|(&j, _)| j < 2 * p)
            .map(|(_, &x)| x)
            .sum()
    };

    loop {
        // Leaving row: largest bound violation.
        let mut leave = None;
        let mut worst = LP_FEAS_TOL;
        for (i, &j) in basis.iter().enumerate() {
            let viol_lo = lower(j) - xb[i];
            let viol_hi = xb[i] - upper(j);
            let scale = 1.0 + lower(j).abs().min(1e12);
            if viol_lo > worst * scale {
                worst = viol_lo / scale;
                leave = Some((i, true));
            } else if viol_hi > worst * scale {
                worst = viol_hi / scale;
                leave = Some((i, false));
            }
        }
        let Some((row, to_lower)) = leave else {
            let mut v = DVector::zeros(p);
            for (i, &j) in basis.iter().enumerate() {
                if j < p {
                    v[j] += xb[i];
                } else if j < 2 * p {
                    v[j - p] -= xb[i];
                }
            }
            return Ok(L1BoxSolution {
                objective: v.iter().map(|x: &f64| x.abs()).sum(),
                v,
                pivots,
            });
        };
        if pivots >= max_pivots {
            return Err((false, objective(&basis, &xb), pivots));
        }
        let leaving = basis[row];
        let target = if to_lower { lower(leaving) } else { upper(leaving) };

        // Dual ratio test.
        let mut enter = None;
        let mut best_ratio = f64::INFINITY;
        let mut best_alpha = 0.0;
        for j in 0..nvar {
            let (c, sign) = phys(j);
            let alpha = sign * tab[(row, c)];
            if alpha.abs() <= LP_PIVOT_TOL {
                continue;
            }
            let eligible = match state[j] {
                VarState::Basic => false,
                VarState::AtLower => (to_lower && alpha < 0.0) || (!to_lower && alpha > 0.0),
                VarState::AtUpper => (to_lower && alpha > 0.0) || (!to_lower && alpha < 0.0),
            };
            if !eligible {
                continue;
            }
            let ratio = reduced[j].abs() / alpha.abs();
            if ratio < best_ratio - 1e-14
                || (ratio <= best_ratio + 1e-14 && alpha.abs() > best_alpha)
            {
                best_ratio = ratio;
                best_alpha = alpha.abs();
                enter = Some(j);
            }
        }
        let Some(q) = enter else {
            return Err((true, objective(&basis, &xb), pivots));
        };

        let (cq, sign_q) = phys(q);
        let alpha_q = sign_q * tab[(row, cq)];
        let step = (xb[row] - target) / alpha_q;
        let entering_value = match state[q] {
            VarState::AtUpper => upper(q),
            _ => lower(q),
        } + step;
        for i in 0..d {
            xb[i] -= sign_q * tab[(i, cq)] * step;
        }
        xb[row] = entering_value;

        let theta = reduced[q] / alpha_q;
        for (j, r) in reduced.iter_mut().enumerate() {
            let (c, sign) = phys(j);
            *r -= theta * sign * tab[(row, c)];
        }
        reduced[q] = 0.0;

        // Rank-one elimination, done column-major.
        let pivot_row = tab.row(row).transpose() / alpha_q;
        let mut col_q = tab.column(cq).clone_owned() * sign_q;
        col_q[row] = 0.0;
        tab.ger(-1.0, &col_q, &pivot_row, 1.0);
        tab.set_row(row, &pivot_row.transpose());

        state[q] = VarState::Basic;
        state[leaving] = if to_lower {
            VarState::AtLower
        } else {
            VarState::AtUpper
        };
        basis[row] = q;
        pivots += 1;
    }
}

/// Solves column `j` of the CLIME program:
/// `min ‖v‖₁ s.t. ‖Σ v - e_j‖_max ≤ τ`.
pub fn clime_column(sigma_u: &DMatrix<f64>, column: usize, tau: f64) -> Result<L1BoxSolution> {
    let d = sigma_u.nrows();
    let lo: Vec<f64> = (0..d).map(|i| if i == column { 1.0 } else { 0.0 } - tau).collect();
    let hi: Vec<f64> = (0..d).map(|i| if i == column { 1.0 } else { 0.0 } + tau).collect();
    solve_l1_box(sigma_u, &lo, &hi, 50 * d + 200).map_err(|(infeasible, objective, pivots)| {
        if infeasible {
            Error::ClimeInfeasible { column, tau }
        } else {
            Error::ClimeIterationLimit {
                column,
                pivots,
                objective,
            }
        }
    })
}

/// Keeps, for each pair `(i, j)`, whichever of `V_ij`, `V_ji` is smaller in magnitude.
pub fn symmetrize_by_magnitude(v: &DMatrix<f64>) -> DMatrix<f64> {
    let d = v.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        let a = v[(i, j)];
        let b = v[(j, i)];
        if a.abs() <= b.abs() {
            a
        } else {
            b
        }
    })
}

/// CLIME estimate of `Σ⁻¹`: column-wise ℓ1 programs followed by the
/// smaller-magnitude symmetrization. Columns are solved in parallel.
pub fn clime(sigma_u: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    ensure_square(sigma_u, "sigma_u")?;
    if !(tau > 0.0) {
        return Err(Error::validation("CLIME tau must be positive"));
    }
    let d = sigma_u.nrows();
    let columns: Vec<L1BoxSolution> = (0..d)
        .into_par_iter()
        .map(|j| clime_column(sigma_u, j, tau))
        .collect::<Result<_>>()?;
    let mut v1 = DMatrix::zeros(d, d);
    for (j, sol) in columns.iter().enumerate() {
        v1.set_column(j, &sol.v);
    }
    Ok(symmetrize_by_magnitude(&v1))
}

// ---------------------------------------------------------------------------
// Graphical lasso
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
    /// Penalized objective after initialization and after every sweep.
    pub objective_trace: Vec<f64>,
}

/// `tr(SΘ) - log det Θ + τ ‖Θ‖_{1,1}`; `+∞` when `Θ` is not positive definite.
pub fn glasso_objective(s: &DMatrix<f64>, theta: &DMatrix<f64>, tau: f64) -> f64 {
    let Some(chol) = theta.clone().cholesky() else {
        return f64::INFINITY;
    };
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace: f64 = s.component_mul(theta).sum();
    let l1: f64 = theta.iter().map(|v| v.abs()).sum();
    trace - logdet + tau * l1
}

/// Largest violation of the stationarity condition `S - Θ⁻¹ + τ Z = 0` with
/// `Z` a subgradient of `‖Θ‖_{1,1}`.
pub fn glasso_kkt_residual(s: &DMatrix<f64>, theta: &DMatrix<f64>, w: &DMatrix<f64>, tau: f64) -> f64 {
    let d = s.nrows();
    let mut worst = 0.0_f64;
    for j in 0..d {
        for i in 0..d {
            let g = s[(i, j)] - w[(i, j)];
            let t = theta[(i, j)];
            let viol = if t != 0.0 {
                (g + tau * t.signum()).abs()
            } else {
                (g.abs() - tau).max(0.0)
            };
            worst = worst.max(viol);
        }
    }
    worst
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Graphical lasso with the ℓ1 penalty on every entry, diagonal included.
///
/// Exact block coordinate descent on the primal: each column update solves
/// its subproblem by coordinate descent, so the objective never increases and
/// every iterate stays positive definite. Stops once the KKT residual is at
/// most `tol`.
pub fn glasso(sigma_u: &DMatrix<f64>, tau: f64, tol: f64, max_iter: usize) -> Result<GlassoFit> {
    ensure_square(sigma_u, "sigma_u")?;
    if !(tau > 0.0) {
        return Err(Error::validation("graphical lasso tau must be positive"));
    }
    let d = sigma_u.nrows();
    let mut s = sigma_u.clone();
    symmetrize_in_place(&mut s);
    if d > 0 {
        let min_eig = s.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-8 {
            return Err(Error::numeric(format!(
                "input has eigenvalue {min_eig:.3e}; apply PD repair before the graphical lasso"
            )));
        }
    }
    let mut theta = DMatrix::zeros(d, d);
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        let a = s[(i, i)] + tau;
        if !(a > 0.0) {
            return Err(Error::numeric("diagonal plus tau must be positive"));
        }
        theta[(i, i)] = 1.0 / a;
        w[(i, i)] = a;
    }
    let mut objective_trace = vec![glasso_objective(&s, &theta, tau)];
    if d <= 1 {
        return Ok(GlassoFit {
            precision: theta,
            sweeps: 0,
            kkt_residual: 0.0,
            objective_trace,
        });
    }
    let mut kkt = glasso_kkt_residual(&s, &theta, &w, tau);
    if kkt <= tol {
        return Ok(GlassoFit {
            precision: theta,
            sweeps: 0,
            kkt_residual: kkt,
            objective_trace,
        });
    }
    let inner_tol = (tol * 1e-3).max(1e-14);
    for sweep in 1..=max_iter {
        for j in 0..d {
            let others: Vec<usize> = (0..d).filter(|&k| k != j).collect();
            let k = others.len();
            let w22 = w[(j, j)];
            // A = Θ₁₁⁻¹ = W₁₁ - w₁₂ w₁₂ᵀ / w₂₂.
            let mut a_mat = DMatrix::zeros(k, k);
            for (r, &ir) in others.iter().enumerate() {
                for (c, &ic) in others.iter().enumerate() {
                    a_mat[(r, c)] = w[(ir, ic)] - w[(ir, j)] * w[(ic, j)] / w22;
                }
            }
            let s12: Vec<f64> = others.iter().map(|&i| s[(i, j)]).collect();
            let scale = s[(j, j)] + tau;
            let mut beta: Vec<f64> = others.iter().map(|&i| theta[(i, j)]).collect();
            let mut a_beta = vec![0.0; k];
            for r in 0..k {
                a_beta[r] = (0..k).map(|c| a_mat[(r, c)] * beta[c]).sum();
            }
            // min scale·βᵀAβ + 2 s₁₂ᵀβ + 2τ‖β‖₁
            for _ in 0..10_000 {
                let mut max_change = 0.0_f64;
                let mut max_beta = 0.0_f64;
                for r in 0..k {
                    let arr = a_mat[(r, r)];
                    let partial = a_beta[r] - arr * beta[r];
                    let g = s12[r] + scale * partial;
                    let new = -soft(g, tau) / (scale * arr);
                    let delta = new - beta[r];
                    if delta != 0.0 {
                        for c in 0..k {
                            a_beta[c] += a_mat[(c, r)] * delta;
                        }
                        beta[r] = new;
                    }
                    max_change = max_change.max(delta.abs());
                    max_beta = max_beta.max(new.abs());
                }
                if max_change <= inner_tol * max_beta.max(1.0) {
                    break;
                }
            }
            let gamma = 1.0 / scale;
            let quad: f64 = beta.iter().zip(&a_beta).map(|(b, ab)| b * ab).sum();
            theta[(j, j)] = gamma + quad;
            for (r, &ir) in others.iter().enumerate() {
                theta[(ir, j)] = beta[r];
                theta[(j, ir)] = beta[r];
            }
            // Block inverse: W₂₂ = 1/γ, w₁₂ = -Aβ/γ, W₁₁ = A + (Aβ)(Aβ)ᵀ/γ.
            w[(j, j)] = scale;
            for (r, &ir) in others.iter().enumerate() {
                let v = -a_beta[r] * scale;
                w[(ir, j)] = v;
                w[(j, ir)] = v;
                for (c, &ic) in others.iter().enumerate() {
                    w[(ir, ic)] = a_mat[(r, c)] + a_beta[r] * a_beta[c] * scale;
                }
            }
        }
        objective_trace.push(glasso_objective(&s, &theta, tau));
        kkt = glasso_kkt_residual(&s, &theta, &w, tau);
        if kkt <= tol {
            let fresh = crate::linalg::spd_inverse(&theta)?;
            let fresh_kkt = glasso_kkt_residual(&s, &theta, &fresh, tau);
            if fresh_kkt <= tol {
                return Ok(GlassoFit {
                    precision: theta,
                    sweeps: sweep,
                    kkt_residual: fresh_kkt,
                    objective_trace,
                });
            }
            w = fresh;
            kkt = fresh_kkt;
        }
    }
    Err(Error::GlassoNotConverged {
        sweeps: max_iter,
        kkt,
        objective_trace,
    })
}

// ---------------------------------------------------------------------------
// Low-rank correction
// ---------------------------------------------------------------------------

/// `V₀ = V_u - V_u Γ (Λ⁻¹ + Γᵀ V_u Γ)⁻¹ Γᵀ V_u`, the inverse of `ΓΛΓᵀ + V_u⁻¹`.
pub fn woodbury_correct(
    v_u: &DMatrix<f64>,
    gamma_m: &DMatrix<f64>,
    lambda_m: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    ensure_square(v_u, "v_u")?;
    let m = lambda_m.len();
    if gamma_m.shape() != (v_u.nrows(), m) {
        return Err(Error::validation("eigenvector matrix has the wrong shape"));
    }
    if m == 0 {
        return Ok(v_u.clone());
    }
    if lambda_m.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::validation("leading eigenvalues must be positive"));
    }
    let vg = v_u * gamma_m;
    let mut inner = gamma_m.transpose() * &vg;
    for k in 0..m {
        inner[(k, k)] += lambda_m[k].recip();
    }
    symmetrize_in_place(&mut inner);
    let inner_inv = inverse(&inner).map_err(|_| Error::numeric("Woodbury inner matrix is singular"))?;
    let mut out = v_u - &vg * inner_inv * vg.transpose();
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Runs CLIME or the graphical lasso on the residual of `split` and applies
/// the Woodbury correction.
pub fn estimate_precision(
    split: &SpectralSplit,
    method: PrecisionMethod,
    tau: f64,
) -> Result<PrecisionEstimate> {
    let v0_u = match method {
        PrecisionMethod::Clime => clime(&split.residual, tau)?,
        PrecisionMethod::Glasso => glasso(&split.residual, tau, GLASSO_TOL, GLASSO_MAX_ITER)?.precision,
    };
    let v0 = woodbury_correct(&v0_u, &split.gamma_m, &split.lambda_m)?;
    Ok(PrecisionEstimate {
        v0,
        v0_u,
        tau,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        crate::linalg::max_abs(m)
    }

    #[test]
    fn clime_identity_shrinks_diagonal() {
        let v = clime(&DMatrix::identity(5, 5), 0.2).unwrap();
        assert!(max_abs(&(v - DMatrix::identity(5, 5) * 0.8)) < 1e-12);
    }

    #[test]
    fn smaller_magnitude_symmetrization() {
        let v1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 1.0]);
        let v = symmetrize_by_magnitude(&v1);
        assert_eq!(v[(0, 1)], -0.3);
        assert_eq!(v[(1, 0)], -0.3);
    }

    #[test]
    fn clime_feasible_solution_respects_constraints() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.2, 0.6, 1.5, 0.3, 0.2, 0.3, 1.0]);
        for j in 0..3 {
            let sol = clime_column(&s, j, 0.05).unwrap();
            let resid = &s * &sol.v;
            for i in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((resid[i] - target).abs() <= 0.05 + 1e-9);
            }
        }
    }

    #[test]
    fn clime_infeasible_column_is_named() {
        // A zero matrix can never satisfy |0 - 1| ≤ 0.5.
        let err = clime(&DMatrix::zeros(3, 3), 0.5).unwrap_err();
        assert!(matches!(err, Error::ClimeInfeasible { .. }));
    }

    #[test]
    fn glasso_diagonal_closed_form() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let fit = glasso(&s, 0.5, 1e-10, 100).unwrap();
        assert_abs_diff_eq!(fit.precision[(0, 0)], 1.0 / 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.precision[(1, 1)], 1.0 / 3.5, epsilon = 1e-12);
        assert_eq!(fit.precision[(0, 1)], 0.0);
    }

    #[test]
    fn glasso_large_tau_decouples() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.4, 0.6, 1.5, 0.3, -0.4, 0.3, 1.0]);
        let tau = 0.6 + 1.0;
        let fit = glasso(&s, tau, 1e-9, 100).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_abs_diff_eq!(fit.precision[(i, i)], 1.0 / (s[(i, i)] + tau), epsilon = 1e-10);
                } else {
                    assert_eq!(fit.precision[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn glasso_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(glasso(&s, 0.1, 1e-6, 10), Err(Error::Numeric(_))));
    }

    #[test]
    fn glasso_objective_non_increasing() {
        let a = DMatrix::from_fn(6, 6, |i, j| (((i + 1) * (j + 2)) % 5) as f64 * 0.3 - 0.5);
        let s = &a * a.transpose() / 6.0 + DMatrix::identity(6, 6) * 0.2;
        let fit = glasso(&s, 0.05, 1e-8, 500).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{w:?}");
        }
        assert!(fit.kkt_residual <= 1e-8);
    }

    #[test]
    fn woodbury_empty_correction() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let out = woodbury_correct(&v, &DMatrix::zeros(2, 0), &DVector::zeros(0)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let sigma_u = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.2, 0.2, 0.1, 0.2, 0.9]);
        let g = DMatrix::from_row_slice(3, 1, &[0.6, 0.0, 0.8]);
        let lam = DVector::from_vec(vec![5.0]);
        let v_u = crate::linalg::spd_inverse(&sigma_u).unwrap();
        let v0 = woodbury_correct(&v_u, &g, &lam).unwrap();
        let full = &g * DMatrix::from_diagonal(&lam) * g.transpose() + &sigma_u;
        assert!(max_abs(&(&v0 * &full - DMatrix::identity(3, 3))) < 1e-8);
    }

    #[test]
    fn woodbury_large_lambda_limit() {
        let v_u = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 1.5]);
        let g = DMatrix::from_row_slice(3, 1, &[0.0, 0.6, 0.8]);
        let v0 = woodbury_correct(&v_u, &g, &DVector::from_vec(vec![1e9])).unwrap();
        let vg = &v_u * &g;
        let inner = (g.transpose() * &vg)[(0, 0)];
        let limit = &v_u - &vg * vg.transpose() / inner;
        assert!(max_abs(&(v0 - limit)) < 1e-7);
    }

    #[test]
    fn woodbury_rejects_nonpositive_lambda() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(woodbury_correct(&DMatrix::identity(2, 2), &g, &DVector::from_vec(vec![0.0])).is_err());
    }
}
