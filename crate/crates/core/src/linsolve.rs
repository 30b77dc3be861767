//! Linear solves, extreme generalized eigenpairs and the Stampacchia bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::operator::GagliardoForm;

/// Dense factorization is used up to this many unknowns.
pub const DENSE_LIMIT: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub field: DVector<f64>,
    pub iterations: usize,
    /// Relative Jacobi-scaled residuals, one per iteration (nonincreasing for
    /// the iterative path).
    pub history: Vec<f64>,
}

/// Solves `Au = Wf`.
pub fn solve_linear(form: &GagliardoForm, f: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    Ok(solve_linear_detailed(form, f, tol)?.field)
}

pub fn solve_linear_detailed(form: &GagliardoForm, f: &DVector<f64>, tol: f64) -> Result<LinearSolution> {
    if f.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: f.len() });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("right-hand side"));
    }
    if !form.has_dirichlet_part() {
        return Err(Error::Unsupported(
            "no Dirichlet part in the exterior: the form is only semidefinite".into(),
        ));
    }
    let rhs = f.component_mul(form.weights());
    if rhs.amax() == 0.0 {
        return Ok(LinearSolution { field: DVector::zeros(f.len()), iterations: 0, history: vec![0.0] });
    }
    if form.n() <= DENSE_LIMIT {
        if let Some(chol) = form.cholesky() {
            let u = chol.solve(&rhs);
            let res = (form.apply(&u) - &rhs).norm() / rhs.norm();
            if res <= tol {
                return Ok(LinearSolution { field: u, iterations: 1, history: vec![res] });
            }
            // Fall through to the iterative solver, which refines from the dense solution.
            return conjugate_residual(form.matrix(), &rhs, Some(u), tol, 10 * form.n());
        }
    }
    conjugate_residual(form.matrix(), &rhs, None, tol, 10 * form.n())
}

/// Jacobi-scaled conjugate residual: minimizes the residual norm over Krylov
/// spaces of `D^{-1/2} A D^{-1/2}`, so the scaled residual decreases
/// monotonically.
pub fn conjugate_residual(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: Option<DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<LinearSolution> {
    let n = b.len();
    let scale = DVector::from_iterator(n, (0..n).map(|i| 1.0 / a[(i, i)].sqrt()));
    let apply = |v: &DVector<f64>| -> DVector<f64> {
        let w = v.component_mul(&scale);
        (a * w).component_mul(&scale)
    };
    let bs = b.component_mul(&scale);
    let bnorm = b.norm();
    let mut y = match &x0 {
        Some(x) => x.component_div(&scale),
        None => DVector::zeros(n),
    };
    let mut r = &bs - apply(&y);
    let mut p = r.clone();
    let mut ar = apply(&r);
    let mut ap = ar.clone();
    let mut rar = r.dot(&ar);
    let mut history = Vec::new();
    let true_residual = |y: &DVector<f64>| (a * y.component_mul(&scale) - b).norm() / bnorm;
    let bsnorm = bs.norm();
    for it in 0..max_iter {
        history.push(r.norm() / bsnorm);
        if true_residual(&y) <= tol {
            return Ok(LinearSolution { field: y.component_mul(&scale), iterations: it, history });
        }
        let denom = ap.norm_squared();
        if denom == 0.0 || rar == 0.0 {
            break;
        }
        let alpha = rar / denom;
        y += alpha * &p;
        r -= alpha * &ap;
        ar = apply(&r);
        let rar_new = r.dot(&ar);
        let beta = rar_new / rar;
        rar = rar_new;
        p = &r + beta * &p;
        ap = &ar + beta * &ap;
    }
    let residual = true_residual(&y);
    if residual <= tol {
        return Ok(LinearSolution { field: y.component_mul(&scale), iterations: history.len(), history });
    }
    Err(Error::NoConvergence { method: "conjugate residual", iterations: history.len(), residual, history })
}

/// Generalized eigenpair `(A − W_a) u = μ W_m u` with the smallest μ.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    /// Normalized so that `uᵀ W_m u = 1` and the largest entry is positive.
    pub field: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Smallest eigenvalue of `(A − W_weight) u = μ W u`.
pub fn min_eigen(form: &GagliardoForm, weight: &DVector<f64>) -> Result<EigenPair> {
    min_eigen_general(form.matrix(), form.weights(), weight, form.weights())
}

/// Smallest μ of `(A − diag(w ∘ weight)) u = μ diag(mass) u` for a positive mass.
pub fn min_eigen_general(
    a: &DMatrix<f64>,
    w: &DVector<f64>,
    weight: &DVector<f64>,
    mass: &DVector<f64>,
) -> Result<EigenPair> {
    let n = a.nrows();
    if weight.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: weight.len() });
    }
    if mass.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: mass.len() });
    }
    if weight.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter("eigen weight must be finite and nonnegative".into()));
    }
    if mass.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter("eigen mass must be finite and positive".into()));
    }
    // Symmetric transform B = M^{-1/2} (A − W_a) M^{-1/2}.
    let isq = DVector::from_iterator(n, mass.iter().map(|m| 1.0 / m.sqrt()));
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] -= w[i] * weight[i];
    }
    for j in 0..n {
        for i in 0..n {
            b[(i, j)] *= isq[i] * isq[j];
        }
    }
    let scale = b.amax().max(f64::MIN_POSITIVE);
    let gershgorin = (0..n)
        .map(|i| b[(i, i)] - (0..n).filter(|&j| j != i).map(|j| b[(i, j)].abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min);

    let mut sigma = gershgorin - 1e-3 * scale;
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut factor = shifted_cholesky(&b, sigma)?;
    let mut rho = rayleigh(&b, &x);
    let max_iter = 500;
    for it in 0..max_iter {
        let mut y = factor.solve(&x);
        let norm = y.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFinite("inverse iteration"));
        }
        y /= norm;
        x = y;
        rho = rayleigh(&b, &x);
        let res = (&b * &x - rho * &x).norm();
        if res <= 1e-8 * scale {
            return Ok(finish(x, rho, res, it + 1, &isq, mass));
        }
        // Move the shift toward ρ while keeping it provably below μ₁: the
        // factorization only succeeds for σ < μ₁.
        let target = rho - 2.0 * res;
        if target > sigma + 1e-12 * scale {
            if let Ok(f) = shifted_cholesky(&b, target) {
                sigma = target;
                factor = f;
            }
        }
    }
    let res = (&b * &x - rho * &x).norm();
    Err(Error::NoConvergence { method: "shifted inverse iteration", iterations: max_iter, residual: res, history: vec![] })
}

fn finish(x: DVector<f64>, rho: f64, res: f64, iterations: usize, isq: &DVector<f64>, mass: &DVector<f64>) -> EigenPair {
    let mut u = x.component_mul(isq);
    let norm = u.iter().zip(mass.iter()).map(|(v, m)| v * v * m).sum::<f64>().sqrt();
    u /= norm;
    let imax = u.iamax();
    if u[imax] < 0.0 {
        u = -u;
    }
    EigenPair { value: rho, field: u, residual: res, iterations }
}

fn rayleigh(b: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(b * x)) / x.norm_squared()
}

fn shifted_cholesky(b: &DMatrix<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut m = b.clone();
    for i in 0..m.nrows() {
        m[(i, i)] -= sigma;
    }
    Cholesky::new(m).ok_or(Error::NoConvergence {
        method: "shifted factorization",
        iterations: 0,
        residual: f64::NAN,
        history: vec![],
    })
}

/// Exponent used for the Sobolev embedding: 2N/(N−2s) when N > 2s, and a
/// finite exponent above `2m/(m−1)` when N = 2s (no critical exponent).
pub fn sobolev_exponent(dimension: usize, s: f64, m: f64) -> f64 {
    let n = dimension as f64;
    if n > 2.0 * s + 1e-12 {
        2.0 * n / (n - 2.0 * s)
    } else {
        4.0 * m / (m - 1.0)
    }
}

/// Discrete Sobolev constant `inf uᵀAu / ‖u‖_r²` by nonlinear inverse
/// iteration `u ← A^{-1} W |u|^{r−2} u`.
pub fn sobolev_quotient(form: &GagliardoForm, r: f64) -> Result<f64> {
    if !(r > 2.0) {
        return Err(Error::InvalidParameter(format!("exponent {r} must exceed 2")));
    }
    let w = form.weights();
    let lr = |u: &DVector<f64>| u.iter().zip(w.iter()).map(|(v, wi)| wi * v.abs().powf(r)).sum::<f64>().powf(1.0 / r);
    let mut u = solve_linear(form, &DVector::from_element(form.n(), 1.0), DEFAULT_TOL)?;
    u /= lr(&u);
    let mut q = form.quadratic(&u);
    for _ in 0..500 {
        let g = DVector::from_iterator(u.len(), u.iter().map(|v| v.abs().powf(r - 2.0) * v));
        let mut next = solve_linear(form, &g, DEFAULT_TOL)?;
        next /= lr(&next);
        let qn = form.quadratic(&next);
        u = next;
        if (q - qn).abs() <= 1e-12 * qn {
            return Ok(qn);
        }
        q = qn;
    }
    Ok(q)
}

/// Constructive L∞ bound for the solution of `Au = Wf`.
///
/// With `β = r(1 − 1/r − 1/m) > 1` the level-set recursion gives
/// `‖u‖_∞ ≤ (‖f‖_m / S_r) |Ω|^{(β−1)/r} 2^{β/(β−1)}`.
pub fn stampacchia_linfty_bound(form: &GagliardoForm, f: &DVector<f64>, m: f64) -> Result<f64> {
    let n_dim = form.kernel().dimension as f64;
    let s = form.kernel().s;
    if !(m > n_dim / (2.0 * s)) {
        return Err(Error::InvalidParameter(format!(
            "integrability exponent m = {m} must exceed N/(2s) = {}",
            n_dim / (2.0 * s)
        )));
    }
    if f.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: f.len() });
    }
    let w = form.weights();
    let fm = if m.is_infinite() {
        f.amax()
    } else {
        f.iter().zip(w.iter()).map(|(v, wi)| wi * v.abs().powf(m)).sum::<f64>().powf(1.0 / m)
    };
    if fm == 0.0 {
        return Ok(0.0);
    }
    let r = sobolev_exponent(form.kernel().dimension, s, m);
    let beta = r * (1.0 - 1.0 / r - 1.0 / m);
    if !(beta > 1.0) {
        return Err(Error::InvalidParameter(format!("level-set exponent {beta} must exceed 1")));
    }
    let sr = sobolev_quotient(form, r)?;
    Ok(fm / sr * form.measure().powf((beta - 1.0) / r) * 2f64.powf(beta / (beta - 1.0)))
}
