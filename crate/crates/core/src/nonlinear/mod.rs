//! Positive solutions of `Au = W(λu^q + u^p)`: the concave auxiliary
//! problem, minimal solutions by monotone iteration, the threshold Λ, the
//! extremal solution and (in [`mountain_pass`]) a second solution.

pub mod mountain_pass;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsolve::{min_eigen, min_eigen_general, solve_linear, DEFAULT_TOL};
use crate::operator::{energy_j, grad_j, residual_norm, GagliardoForm, ProblemParams};

pub use mountain_pass::{mountain_pass_second, translated_energy, translated_gradient};

/// Positive values below this are clamped before evaluating `u^{q−1}`.
pub const POSITIVITY_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Minimal,
    Extremal,
    MountainPass,
    ConcaveAux,
}

impl fmt::Display for SolutionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolutionKind::Minimal => "minimal",
            SolutionKind::Extremal => "extremal",
            SolutionKind::MountainPass => "mountain_pass",
            SolutionKind::ConcaveAux => "concave_aux",
        })
    }
}

/// A converged solution and its diagnostics.
#[derive(Debug, Clone)]
pub struct SolutionRecord {
    pub lambda: f64,
    pub field: DVector<f64>,
    /// Sup-norm of the nodal residual `(Au)_i/w_i − f(u_i)`.
    pub residual: f64,
    pub energy: f64,
    pub sup_norm: f64,
    /// Smallest eigenvalue of the linearization; NaN when not computed.
    pub mu1: f64,
    pub kind: SolutionKind,
    pub iterations: usize,
    /// Some node sat at the positivity floor when the linearization was formed.
    pub floor_hit: bool,
}

/// Tolerances and limits shared by the nonlinear solvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Nodal residual tolerance for accepted solutions.
    pub tol: f64,
    /// Stopping threshold on `‖v_n − v_{n−1}‖_∞ / (1 + ‖v_n‖_∞)`.
    pub step_tol: f64,
    pub linear_tol: f64,
    pub max_iter: usize,
    /// Growth factor over `1 + ‖v₀‖_∞` at which the iteration is declared divergent.
    pub blowup_factor: f64,
    /// Iterations with growing sup-norm after which the iteration is declared divergent.
    pub growth_limit: usize,
    /// First iteration at which a Newton shortcut is attempted (0 disables).
    pub newton_after: usize,
    pub tol_eig: f64,
    pub bracket_tol: f64,
    pub path_states: usize,
    pub path_iterations: usize,
    pub retries: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            step_tol: 1e-13,
            linear_tol: DEFAULT_TOL,
            max_iter: 5000,
            blowup_factor: 1e6,
            growth_limit: 1000,
            newton_after: 50,
            tol_eig: 1e-6,
            bracket_tol: 1e-2,
            path_states: 21,
            path_iterations: 4000,
            retries: 3,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tol", self.tol),
            ("step_tol", self.step_tol),
            ("linear_tol", self.linear_tol),
            ("tol_eig", self.tol_eig),
            ("bracket_tol", self.bracket_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.blowup_factor > 1.0) {
            return Err(Error::InvalidParameter("blowup_factor must exceed 1".into()));
        }
        if self.max_iter == 0 || self.path_iterations == 0 {
            return Err(Error::InvalidParameter("iteration limits must be positive".into()));
        }
        if self.path_states < 3 {
            return Err(Error::InvalidParameter("path needs at least 3 states".into()));
        }
        Ok(())
    }
}

fn lambda_positive(lam: f64) -> Result<()> {
    if !(lam > 0.0 && lam.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda = {lam} must be positive")));
    }
    Ok(())
}

fn weighted_power(form: &GagliardoForm, u: &DVector<f64>, coeff: f64, expo: f64) -> DVector<f64> {
    DVector::from_iterator(
        u.len(),
        u.iter()
            .zip(form.weights().iter())
            .map(|(v, w)| if *v > 0.0 { coeff * w * v.powf(expo) } else { 0.0 }),
    )
}

/// Positive solution of `Az = lam W z^q`, started from the torsion function.
pub fn solve_concave(form: &GagliardoForm, q: f64, lam: f64, opts: &SolverOptions) -> Result<SolutionRecord> {
    lambda_positive(lam)?;
    let torsion = solve_linear(form, &DVector::from_element(form.n(), 1.0), opts.linear_tol)?;
    // t𝒱 balances A(t𝒱) = tW against lam W (t𝒱)^q at the peak: t^{1−q} = lam ‖𝒱‖^q.
    let start = torsion.scale((lam * torsion.amax().powf(q)).powf(1.0 / (1.0 - q)));
    solve_concave_from(form, q, lam, &start, opts)
}

/// Same as [`solve_concave`] from a caller-supplied positive start.
///
/// The energy `½zᵀAz − lam/(q+1) Σ w z₊^{q+1}` is minimized by projected
/// gradient steps in the `A` metric with unit step, which is the map
/// `z ← A^{-1} lam W z₊^q`; it contracts at rate `q` on positive fields.
/// An Armijo check guards each step and Newton finishes the solve.
pub fn solve_concave_from(
    form: &GagliardoForm,
    q: f64,
    lam: f64,
    start: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolutionRecord> {
    lambda_positive(lam)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("q = {q} not in (0, 1)")));
    }
    if start.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: start.len() });
    }
    if start.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("concave start must be positive".into()));
    }
    let energy = |z: &DVector<f64>| -> f64 {
        let pot: f64 = z
            .iter()
            .zip(form.weights().iter())
            .map(|(v, w)| if *v > 0.0 { w * v.powf(q + 1.0) } else { 0.0 })
            .sum();
        0.5 * form.quadratic(z) - lam / (q + 1.0) * pot
    };
    let mut z = start.clone();
    let mut e = energy(&z);
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let source = z.map(|v| if v > 0.0 { lam * v.powf(q) } else { 0.0 });
        let target = solve_linear(form, &source, opts.linear_tol)?;
        let dir = &target - &z;
        // Armijo along the A-gradient direction; the full step is the usual case.
        let slope = -form.quadratic(&dir);
        let mut step = 1.0;
        let mut next = target.clone();
        let mut en = energy(&next);
        while en > e + 1e-4 * step * slope && step > 1e-8 {
            step *= 0.5;
            next = &z + step * &dir;
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            en = energy(&next);
        }
        let change = (&next - &z).amax() / next.amax().max(f64::MIN_POSITIVE);
        z = next;
        e = en;
        if change < 1e-6 {
            break;
        }
    }
    // Newton: the Jacobian A − q lam W z^{q−1} is positive definite at the solution.
    for _ in 0..30 {
        let r = form.apply(&z) - weighted_power(form, &z, lam, q);
        let mut jac = form.matrix().clone();
        let d = weighted_power(form, &z.map(|v| v.max(POSITIVITY_FLOOR)), q * lam, q - 1.0);
        for i in 0..z.len() {
            jac[(i, i)] -= d[i];
        }
        let Some(chol) = jac.cholesky() else { break };
        let delta = chol.solve(&r);
        let next = &z - &delta;
        if next.iter().any(|v| *v <= 0.0) {
            break;
        }
        iterations += 1;
        z = next;
        if delta.amax() <= 1e-15 * z.amax() {
            break;
        }
    }
    let r = form.apply(&z) - weighted_power(form, &z, lam, q);
    let residual = r.component_div(form.weights()).amax();
    if !(residual <= opts.tol * (1.0 + lam * z.amax().powf(q))) {
        return Err(Error::NoConvergence { method: "concave solve", iterations, residual, history: Vec::new() });
    }
    let sup_norm = z.amax();
    Ok(SolutionRecord {
        lambda: lam,
        energy: energy(&z),
        field: z,
        residual,
        sup_norm,
        mu1: f64::NAN,
        kind: SolutionKind::ConcaveAux,
        iterations,
        floor_hit: false,
    })
}

/// Result of [`monotone_iterate`].
#[derive(Debug, Clone)]
pub enum Iteration {
    Converged {
        record: SolutionRecord,
        /// Sup-norms of the iterates, in order.
        sup_norms: Vec<f64>,
        /// The iterates themselves, when requested.
        trace: Vec<DVector<f64>>,
    },
    Diverged {
        iterations: usize,
        sup_norm: f64,
    },
}

/// `v_n = A^{-1} W f(v_{n−1})` from a nonnegative subsolution `v0`.
///
/// With a `cap`, every iterate must stay below it. After
/// `opts.newton_after` iterations a Newton shortcut is tried: it is kept only
/// if it converges to a solution above the current iterate with a
/// nonnegative linearized eigenvalue.
pub fn monotone_iterate(
    form: &GagliardoForm,
    params: &ProblemParams,
    v0: &DVector<f64>,
    cap: Option<&DVector<f64>>,
    opts: &SolverOptions,
    record_trace: bool,
) -> Result<Iteration> {
    if v0.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: v0.len() });
    }
    if v0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("initial iterate must be nonnegative".into()));
    }
    if let Some(c) = cap {
        if c.len() != form.n() {
            return Err(Error::DimensionMismatch { expected: form.n(), got: c.len() });
        }
    }
    let threshold = opts.blowup_factor * (1.0 + v0.amax());
    let mut v = v0.clone();
    let mut sup_norms = vec![v.amax()];
    let mut trace = if record_trace { vec![v.clone()] } else { Vec::new() };
    let mut growing_run = 0usize;
    let mut iterations = 0;
    let mut next_newton = opts.newton_after;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let rhs = DVector::from_iterator(v.len(), v.iter().map(|x| params.nonlinearity(*x)));
        let next = solve_linear(form, &rhs, opts.linear_tol)?;
        if let Some(c) = cap {
            let slack = 1e-10 * (1.0 + c.amax());
            if let Some((node, _)) = next.iter().zip(c.iter()).enumerate().find(|(_, (x, y))| **x > **y + slack) {
                return Err(Error::ComparisonFailure { node, value: next[node], cap: c[node] });
            }
        }
        let sup = next.amax();
        if !sup.is_finite() || sup > threshold {
            return Ok(Iteration::Diverged { iterations, sup_norm: sup });
        }
        let change = (&next - &v).amax();
        if sup > *sup_norms.last().unwrap() {
            growing_run += 1;
        } else {
            growing_run = 0;
        }
        v = next;
        sup_norms.push(sup);
        if record_trace {
            trace.push(v.clone());
        }
        if change <= opts.step_tol * (1.0 + sup) {
            converged = true;
            break;
        }
        if growing_run >= opts.growth_limit {
            return Ok(Iteration::Diverged { iterations, sup_norm: sup });
        }
        if next_newton > 0 && iterations == next_newton && cap.is_none() {
            next_newton *= 2;
            if let Ok((w, _)) = newton_solve(form, params, &v, opts.tol, 60) {
                let above = w.iter().zip(v.iter()).all(|(a, b)| *a >= *b - 1e-10 * (1.0 + sup));
                if above && w.amax() <= threshold {
                    if let Ok((mu, _)) = mu1_linearized(form, &w, params) {
                        if mu >= -opts.tol_eig {
                            v = w;
                            sup_norms.push(v.amax());
                            if record_trace {
                                trace.push(v.clone());
                            }
                            converged = true;
                            break;
                        }
                    }
                }
            }
        }
    }
    if !converged {
        return Ok(Iteration::Diverged { iterations, sup_norm: v.amax() });
    }
    // Final polish to the residual tolerance.
    if residual_norm(form, params, &v)? > opts.tol {
        let (w, _) = newton_solve(form, params, &v, opts.tol, 60)?;
        v = w;
    }
    let record = annotate(form, params, v, SolutionKind::Minimal, iterations, false)?;
    Ok(Iteration::Converged { record, sup_norms, trace })
}

fn annotate(
    form: &GagliardoForm,
    params: &ProblemParams,
    field: DVector<f64>,
    kind: SolutionKind,
    iterations: usize,
    with_mu1: bool,
) -> Result<SolutionRecord> {
    let (mu1, floor_hit) = if with_mu1 { mu1_linearized(form, &field, params)? } else { (f64::NAN, false) };
    Ok(SolutionRecord {
        lambda: params.lambda,
        residual: residual_norm(form, params, &field)?,
        energy: energy_j(form, params, &field)?,
        sup_norm: field.amax(),
        mu1,
        kind,
        iterations,
        floor_hit,
        field,
    })
}

/// Minimal solution: monotone iteration from the concave solution `z_λ`.
pub fn find_minimal(form: &GagliardoForm, params: &ProblemParams, opts: &SolverOptions) -> Result<SolutionRecord> {
    params.validate()?;
    lambda_positive(params.lambda)?;
    let z = solve_concave(form, params.q, params.lambda, opts)?;
    match monotone_iterate(form, params, &z.field, None, opts, false)? {
        Iteration::Diverged { iterations, sup_norm } => Err(Error::Diverged { iterations, sup_norm }),
        Iteration::Converged { record, .. } => {
            let mut record = record;
            let (mu1, floor_hit) = mu1_linearized(form, &record.field, params)?;
            record.mu1 = mu1;
            record.floor_hit = floor_hit;
            if !(record.energy < 0.0) {
                return Err(Error::Invariant(format!(
                    "minimal solution at lambda {} has energy {} >= 0",
                    params.lambda, record.energy
                )));
            }
            if mu1 < -opts.tol_eig {
                return Err(Error::Invariant(format!(
                    "minimal solution at lambda {} is unstable (mu1 = {mu1})",
                    params.lambda
                )));
            }
            if record.residual > opts.tol {
                return Err(Error::NoConvergence {
                    method: "minimal solution",
                    iterations: record.iterations,
                    residual: record.residual,
                    history: vec![],
                });
            }
            Ok(record)
        }
    }
}

/// Linearized weight `λq u^{q−1} + p u^{p−1}` (u floored at [`POSITIVITY_FLOOR`]).
pub fn linearized_weight(u: &DVector<f64>, params: &ProblemParams) -> Result<(DVector<f64>, bool)> {
    if u.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("linearization needs a strictly positive field".into()));
    }
    let mut floor_hit = false;
    let a = u.map(|v| {
        if v <= POSITIVITY_FLOOR {
            floor_hit = true;
        }
        params.nonlinearity_derivative(v.max(POSITIVITY_FLOOR))
    });
    Ok((a, floor_hit))
}

/// Smallest eigenvalue of `(A − W a(u)) φ = μ W φ`; also reports whether the floor was hit.
pub fn mu1_linearized(form: &GagliardoForm, u: &DVector<f64>, params: &ProblemParams) -> Result<(f64, bool)> {
    let (a, floor_hit) = linearized_weight(u, params)?;
    Ok((min_eigen(form, &a)?.value, floor_hit))
}

/// Damped Newton on `∇J = 0` with an LU solve (the Jacobian may be indefinite).
/// Returns the field and the number of Newton steps.
pub fn newton_solve(
    form: &GagliardoForm,
    params: &ProblemParams,
    start: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let w = form.weights();
    let merit = |g: &DVector<f64>| g.iter().zip(w.iter()).map(|(x, wi)| x * x / wi).sum::<f64>();
    let mut u = start.clone();
    let mut g = grad_j(form, params, &u)?;
    let mut m = merit(&g);
    for it in 0..max_iter {
        let nodal = g.component_div(w).amax();
        if nodal <= tol {
            return Ok((u, it));
        }
        let mut jac: DMatrix<f64> = form.matrix().clone();
        for i in 0..u.len() {
            if u[i] > 0.0 {
                jac[(i, i)] -= w[i] * params.nonlinearity_derivative(u[i].max(POSITIVITY_FLOOR));
            }
        }
        let Some(delta) = jac.lu().solve(&g) else {
            return Err(Error::NoConvergence { method: "Newton", iterations: it, residual: nodal, history: vec![] });
        };
        let mut step = 1.0;
        loop {
            let trial = &u - step * &delta;
            let gt = grad_j(form, params, &trial)?;
            let mt = merit(&gt);
            if mt <= (1.0 - 1e-4 * step) * m || (mt < m && step < 1e-3) {
                u = trial;
                g = gt;
                m = mt;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(Error::NoConvergence { method: "Newton", iterations: it, residual: nodal, history: vec![] });
            }
        }
    }
    let nodal = g.component_div(w).amax();
    if nodal <= tol {
        return Ok((u, max_iter));
    }
    Err(Error::NoConvergence { method: "Newton", iterations: max_iter, residual: nodal, history: vec![] })
}

/// `Λ* = inf ‖φ‖_A² / Σ w z^{p−1} φ²` and the resulting threshold bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaStar {
    pub raw: f64,
    /// `(Λ*)^{(1−q)/(p−1)}`, infinite on overflow.
    pub bound: f64,
}

/// `z` is the concave solution at λ = 1.
pub fn lambda_star(form: &GagliardoForm, z: &DVector<f64>, q: f64, p: f64) -> Result<LambdaStar> {
    if z.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: z.len() });
    }
    if z.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("lambda_star needs a strictly positive z".into()));
    }
    let mass = DVector::from_iterator(z.len(), z.iter().zip(form.weights().iter()).map(|(v, w)| w * v.powf(p - 1.0)));
    let raw = min_eigen_general(form.matrix(), form.weights(), &DVector::zeros(z.len()), &mass)?.value;
    let bound = raw.powf((1.0 - q) / (p - 1.0));
    Ok(LambdaStar { raw, bound: if bound.is_finite() { bound } else { f64::INFINITY } })
}

/// One λ probe of the bisection.
#[derive(Debug, Clone)]
pub struct Probe {
    pub lambda: f64,
    pub success: bool,
    pub note: String,
}

/// Numerical bracket for Λ.
#[derive(Debug, Clone)]
pub struct LambdaBracket {
    pub lo: f64,
    pub hi: f64,
    pub star: LambdaStar,
    pub probes: Vec<Probe>,
    /// Minimal solution at `lo`.
    pub last_minimal: SolutionRecord,
}

impl LambdaBracket {
    pub fn relative_width(&self) -> f64 {
        self.hi / self.lo - 1.0
    }
}

/// Bisection for Λ: success of [`find_minimal`] places λ below Λ, divergence above.
pub fn estimate_lambda(form: &GagliardoForm, params: &ProblemParams, opts: &SolverOptions) -> Result<LambdaBracket> {
    if !(opts.bracket_tol > 0.0) {
        return Err(Error::InvalidParameter("bracket tolerance must be positive".into()));
    }
    let z1 = solve_concave(form, params.q, 1.0, opts)?;
    let star = lambda_star(form, &z1.field, params.q, params.p)?;
    let mut probes: Vec<Probe> = Vec::new();
    let probe = |lam: f64, probes: &mut Vec<Probe>| -> Result<Option<SolutionRecord>> {
        let outcome = find_minimal(form, &params.with_lambda(lam), opts);
        let (success, note, rec) = match outcome {
            Ok(r) => (true, "converged".to_string(), Some(r)),
            Err(Error::Diverged { iterations, sup_norm }) => {
                (false, format!("diverged after {iterations} iterations (sup {sup_norm:.3e})"), None)
            }
            Err(e @ (Error::NoConvergence { .. } | Error::Invariant(_))) => (false, e.to_string(), None),
            Err(e) => return Err(e),
        };
        if let Some(bad) = probes.iter().find(|p| !p.success && p.lambda <= lam) {
            if success {
                return Err(Error::InconsistentBracket(format!(
                    "success at lambda {lam} above failure at {}",
                    bad.lambda
                )));
            }
        }
        if let Some(good) = probes.iter().find(|p| p.success && p.lambda >= lam) {
            if !success {
                return Err(Error::InconsistentBracket(format!(
                    "failure at lambda {lam} below success at {}",
                    good.lambda
                )));
            }
        }
        probes.push(Probe { lambda: lam, success, note });
        Ok(rec)
    };

    let mut hi = if star.bound.is_finite() { star.bound } else { 1.0 };
    let mut lo_rec: Option<SolutionRecord> = None;
    let mut lo;
    if let Some(r) = probe(hi, &mut probes)? {
        if star.bound.is_finite() {
            return Err(Error::InconsistentBracket(format!(
                "solution found at the rigorous bound {hi}"
            )));
        }
        // no usable bound: grow until failure
        lo = hi;
        lo_rec = Some(r);
        loop {
            hi *= 2.0;
            match probe(hi, &mut probes)? {
                Some(r) => {
                    lo = hi;
                    lo_rec = Some(r);
                }
                None => break,
            }
            if hi > 1e12 {
                return Err(Error::Unsupported("no divergence found below 1e12".into()));
            }
        }
    } else {
        lo = hi;
        for _ in 0..60 {
            lo *= 0.5;
            if let Some(r) = probe(lo, &mut probes)? {
                lo_rec = Some(r);
                break;
            }
            hi = lo;
        }
    }
    let Some(mut last) = lo_rec else {
        return Err(Error::InconsistentBracket("no successful probe found".into()));
    };
    while hi / lo - 1.0 > opts.bracket_tol {
        let mid = (lo * hi).sqrt();
        match probe(mid, &mut probes)? {
            Some(r) => {
                lo = mid;
                last = r;
            }
            None => hi = mid,
        }
    }
    if !(lo > 0.0) {
        return Err(Error::InconsistentBracket("lower end is not positive".into()));
    }
    Ok(LambdaBracket { lo, hi, star, probes, last_minimal: last })
}

/// `(½ − 1/(p+1)) uᵀAu ≤ λ (1/(q+1) − 1/(p+1)) Σ w u₊^{q+1}`; returns (lhs, rhs).
pub fn energy_bound(form: &GagliardoForm, params: &ProblemParams, u: &DVector<f64>) -> (f64, f64) {
    let (p, q) = (params.p, params.q);
    let lhs = (0.5 - 1.0 / (p + 1.0)) * form.quadratic(u);
    let lq: f64 = u
        .iter()
        .zip(form.weights().iter())
        .map(|(v, w)| if *v > 0.0 { w * v.powf(q + 1.0) } else { 0.0 })
        .sum();
    (lhs, params.lambda * (1.0 / (q + 1.0) - 1.0 / (p + 1.0)) * lq)
}

/// Solution at `λ = bracket.lo` by Newton from the last minimal solution.
pub fn extremal_solution(
    form: &GagliardoForm,
    params: &ProblemParams,
    bracket: &LambdaBracket,
    branch: &[SolutionRecord],
    opts: &SolverOptions,
) -> Result<SolutionRecord> {
    for rec in branch {
        let (lhs, rhs) = energy_bound(form, &params.with_lambda(rec.lambda), &rec.field);
        if lhs > rhs * (1.0 + 1e-10) {
            return Err(Error::Invariant(format!(
                "energy bound violated along the branch at lambda {}",
                rec.lambda
            )));
        }
    }
    let at = params.with_lambda(bracket.lo);
    let (u, steps) = newton_solve(form, &at, &bracket.last_minimal.field, opts.tol, 100)?;
    let (lhs, rhs) = energy_bound(form, &at, &u);
    if lhs > rhs * (1.0 + 1e-10) {
        return Err(Error::Invariant("energy bound violated at the extremal point".into()));
    }
    annotate(form, &at, u, SolutionKind::Extremal, steps, true)
}

/// Minimal solutions at increasing λ.
#[derive(Debug, Clone)]
pub struct Branch {
    pub records: Vec<SolutionRecord>,
    pub bracket: Option<(f64, f64)>,
}

impl Branch {
    /// Largest violation of `u_{λ_i} ≤ u_{λ_j}` for `λ_i < λ_j` (≤ 0 when ordered).
    pub fn ordering_violation(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| (&w[0].field - &w[1].field).max())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Minimal solutions for strictly increasing λ values (probes run in parallel).
pub fn minimal_branch(
    form: &GagliardoForm,
    params: &ProblemParams,
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<Branch> {
    if lambdas.is_empty() {
        return Err(Error::InvalidParameter("empty lambda grid".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("lambda grid must be strictly increasing".into()));
    }
    let records = lambdas
        .par_iter()
        .map(|lam| find_minimal(form, &params.with_lambda(*lam), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(Branch { records, bracket: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_discretization, DomainSpec};
    use crate::operator::assemble_form;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn form(n: usize) -> GagliardoForm {
        assemble_form(&build_discretization(&DomainSpec::default().with_resolution(n), 0.5).unwrap()).unwrap()
    }

    fn params(lambda: f64) -> ProblemParams {
        ProblemParams::new(0.5, 0.5, 3.0, lambda).unwrap()
    }

    #[test]
    fn concave_scaling_and_uniqueness() {
        let f = form(40);
        let opts = SolverOptions::default();
        let z1 = solve_concave(&f, 0.5, 1.0, &opts).unwrap();
        assert!(z1.field.iter().all(|v| *v > 0.0));
        assert!(z1.energy < 0.0);
        let z2 = solve_concave(&f, 0.5, 2.0, &opts).unwrap();
        let scaled = z1.field.scale(4.0);
        assert!((&z2.field - &scaled).amax() <= 1e-9 * scaled.amax());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = DVector::from_iterator(40, (0..40).map(|_| rng.random_range(0.01..10.0)));
        let other = solve_concave_from(&f, 0.5, 1.0, &start, &opts).unwrap();
        assert!((&other.field - &z1.field).amax() <= 1e-10);
        assert!(solve_concave(&f, 0.5, 0.0, &opts).is_err());
    }

    #[test]
    fn zero_lambda_from_zero_is_fixed() {
        let f = form(16);
        let out = monotone_iterate(&f, &params(0.0), &DVector::zeros(16), None, &SolverOptions::default(), false).unwrap();
        match out {
            Iteration::Converged { record, .. } => {
                assert_eq!(record.field.amax(), 0.0);
                assert_eq!(record.iterations, 1);
            }
            Iteration::Diverged { .. } => panic!("diverged"),
        }
    }

    #[test]
    fn monotone_iterates_increase() {
        let f = form(40);
        let opts = SolverOptions { newton_after: 0, ..SolverOptions::default() };
        let p = params(0.3);
        let z = solve_concave(&f, 0.5, 0.3, &opts).unwrap();
        match monotone_iterate(&f, &p, &z.field, None, &opts, true).unwrap() {
            Iteration::Converged { sup_norms, trace, record } => {
                assert!(sup_norms.windows(2).all(|w| w[1] >= w[0] - 1e-10));
                for w in trace.windows(2) {
                    assert!((&w[0] - &w[1]).max() <= 1e-10);
                }
                assert!(record.residual <= opts.tol);
            }
            Iteration::Diverged { .. } => panic!("diverged"),
        }
    }

    #[test]
    fn minimal_solution_properties() {
        let f = form(40);
        let opts = SolverOptions::default();
        let a = find_minimal(&f, &params(0.2), &opts).unwrap();
        let b = find_minimal(&f, &params(0.4), &opts).unwrap();
        assert!(a.energy < 0.0 && b.energy < 0.0);
        assert!(a.mu1 >= 0.0 && b.mu1 >= 0.0);
        assert!((&a.field - &b.field).max() < 0.0);
        assert!(a.residual <= opts.tol);
    }

    #[test]
    fn cap_violation_is_reported() {
        let f = form(20);
        let opts = SolverOptions::default();
        let p = params(0.5);
        let z = solve_concave(&f, 0.5, 0.5, &opts).unwrap();
        let cap = z.field.scale(1.0 + 1e-6);
        assert!(matches!(
            monotone_iterate(&f, &p, &z.field, Some(&cap), &opts, false),
            Err(Error::ComparisonFailure { .. })
        ));
    }

    #[test]
    fn large_lambda_diverges() {
        let f = form(30);
        let opts = SolverOptions::default();
        assert!(matches!(find_minimal(&f, &params(50.0), &opts), Err(Error::Diverged { .. })));
    }

    #[test]
    fn lambda_star_homogeneity() {
        let f = form(30);
        let opts = SolverOptions::default();
        let z = solve_concave(&f, 0.5, 1.0, &opts).unwrap();
        let a = lambda_star(&f, &z.field, 0.5, 3.0).unwrap();
        let b = lambda_star(&f, &z.field.scale(2.0), 0.5, 3.0).unwrap();
        assert!((b.raw - a.raw * 0.25).abs() < 1e-8 * a.raw);
        let near_linear = lambda_star(&f, &z.field, 0.5, 1.0 + 1e-9).unwrap();
        assert!(near_linear.raw.is_finite());
    }

    #[test]
    fn linearized_eigenvalue_decreases_with_weight() {
        let f = form(30);
        let u = find_minimal(&f, &params(0.3), &SolverOptions::default()).unwrap();
        let (a, _) = linearized_weight(&u.field, &params(0.3)).unwrap();
        let m1 = min_eigen(&f, &a).unwrap().value;
        let m2 = min_eigen(&f, &a.scale(2.0)).unwrap().value;
        assert!(m2 < m1);
        assert!(mu1_linearized(&f, &DVector::zeros(30), &params(0.3)).is_err());
    }
}
