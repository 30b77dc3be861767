//! Numerical checks of the structural inequalities the solvers rely on.
//!
//! Each check returns pass/fail with the measured slack, or a skip with the
//! reason its hypotheses were not met. The randomized suite is fully
//! determined by its seed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::linsolve::{solve_linear, DEFAULT_TOL};
use crate::nonlinear::{find_minimal, monotone_iterate, solve_concave, Iteration, SolverOptions};
use crate::operator::{GagliardoForm, ProblemParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CheckOutcome {
    Pass { slack: f64 },
    Fail { slack: f64 },
    Skip { reason: String },
}

impl CheckOutcome {
    fn from_slack(slack: f64, threshold: f64) -> Self {
        if slack >= threshold {
            CheckOutcome::Pass { slack }
        } else {
            CheckOutcome::Fail { slack }
        }
    }

    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass { .. })
    }

    pub fn failed(&self) -> bool {
        matches!(self, CheckOutcome::Fail { .. })
    }

    fn skip(reason: impl Into<String>) -> Self {
        CheckOutcome::Skip { reason: reason.into() }
    }
}

/// `vᵀAv − Σ (v_i²/u_i)(Au)_i` for `u > 0` with `Au ≥ 0`.
pub fn check_picone(form: &GagliardoForm, u: &DVector<f64>, v: &DVector<f64>) -> CheckOutcome {
    if u.iter().any(|x| !(*x > 0.0)) {
        return CheckOutcome::skip("u is not strictly positive");
    }
    let au = form.apply(u);
    if au.min() < -1e-12 * au.amax() {
        return CheckOutcome::skip("Au has a negative entry");
    }
    let energy = form.quadratic(v);
    let weighted: f64 = (0..u.len()).map(|i| v[i] * v[i] / u[i] * au[i]).sum();
    CheckOutcome::from_slack(energy - weighted, -1e-8 * energy.max(f64::MIN_POSITIVE))
}

/// Concave reaction `λσ^q` for the comparison check.
#[derive(Debug, Clone, Copy)]
pub struct ConcaveReaction {
    pub lambda: f64,
    pub q: f64,
}

impl ConcaveReaction {
    fn eval(&self, t: f64) -> f64 {
        if t > 0.0 {
            self.lambda * t.powf(self.q)
        } else {
            0.0
        }
    }
}

/// Super- and subsolutions of `Au = W f(u)` with `f(σ)/σ` decreasing are ordered.
pub fn check_comparison(
    form: &GagliardoForm,
    reaction: ConcaveReaction,
    u_super: &DVector<f64>,
    v_sub: &DVector<f64>,
) -> CheckOutcome {
    if !(reaction.q > 0.0 && reaction.q < 1.0 && reaction.lambda > 0.0) {
        return CheckOutcome::skip("reaction is not of concave type");
    }
    if u_super.iter().chain(v_sub.iter()).any(|x| !(*x > 0.0)) {
        return CheckOutcome::skip("fields must be positive");
    }
    let w = form.weights();
    let scale = form.apply(u_super).amax().max(form.apply(v_sub).amax());
    let slack = 1e-9 * scale;
    let sup_res = form.apply(u_super) - DVector::from_iterator(w.len(), (0..w.len()).map(|i| w[i] * reaction.eval(u_super[i])));
    let sub_res = form.apply(v_sub) - DVector::from_iterator(w.len(), (0..w.len()).map(|i| w[i] * reaction.eval(v_sub[i])));
    if sup_res.min() < -slack {
        return CheckOutcome::skip("u is not a supersolution");
    }
    if sub_res.max() > slack {
        return CheckOutcome::skip("v is not a subsolution");
    }
    CheckOutcome::from_slack((u_super - v_sub).min(), -1e-8)
}

/// `G_k(u)ᵀAu − ‖G_k(u)‖²_A` and `T_k(u)ᵀAu − ‖T_k(u)‖²_A`.
pub fn truncation_slacks(form: &GagliardoForm, u: &DVector<f64>, k: f64) -> (f64, f64) {
    let t = u.map(|x| x.clamp(-k, k));
    let g = u - &t;
    let au = form.apply(u);
    (g.dot(&au) - form.quadratic(&g), t.dot(&au) - form.quadratic(&t))
}

pub fn check_truncation(form: &GagliardoForm, u: &DVector<f64>, k: f64) -> (CheckOutcome, CheckOutcome) {
    if !(k >= 0.0) {
        let s = CheckOutcome::skip("negative truncation level");
        return (s.clone(), s);
    }
    let (sg, st) = truncation_slacks(form, u, k);
    let threshold = -1e-10 * form.quadratic(u).max(f64::MIN_POSITIVE);
    (CheckOutcome::from_slack(sg, threshold), CheckOutcome::from_slack(st, threshold))
}

/// `f ≥ 0 ⇒ u ≥ 0` for the solution of `Au = Wf`.
pub fn check_weak_max(form: &GagliardoForm, f: &DVector<f64>) -> Result<CheckOutcome> {
    if f.min() < 0.0 {
        return Ok(CheckOutcome::skip("data has a negative entry"));
    }
    let u = solve_linear(form, f, DEFAULT_TOL)?;
    let scale = u.amax().max(f64::MIN_POSITIVE);
    Ok(CheckOutcome::from_slack(u.min(), -1e-10 * scale))
}

/// Ordered super/subsolution that touch at a node must coincide.
pub fn check_strong_max(
    form: &GagliardoForm,
    params: &ProblemParams,
    v_super: &DVector<f64>,
    w_sub: &DVector<f64>,
) -> CheckOutcome {
    let scale = v_super.amax().max(w_sub.amax()).max(f64::MIN_POSITIVE);
    let diff = v_super - w_sub;
    if diff.min() < -1e-9 * scale {
        return CheckOutcome::skip("fields are not ordered");
    }
    if diff.min() > 1e-9 * scale {
        return CheckOutcome::skip("fields do not touch");
    }
    let w = form.weights();
    let res = |u: &DVector<f64>| {
        let mut r = form.apply(u);
        for i in 0..u.len() {
            r[i] = r[i] / w[i] - params.nonlinearity(u[i]);
        }
        r
    };
    let tol = 1e-7 * (1.0 + params.nonlinearity(scale));
    if res(v_super).min() < -tol || res(w_sub).max() > tol {
        return CheckOutcome::skip("residual signs do not match super/subsolution");
    }
    CheckOutcome::from_slack(1e-6 * scale - diff.max(), 0.0)
}

/// Capped monotone sequence: nondecreasing `‖v_n‖_A`, final iterate close to the limit in `‖·‖_A`.
pub fn check_compactness_surrogate(form: &GagliardoForm, sequence: &[DVector<f64>], limit: &DVector<f64>) -> CheckOutcome {
    if sequence.is_empty() {
        return CheckOutcome::skip("empty sequence");
    }
    let norms: Vec<f64> = sequence.iter().map(|v| form.quadratic(v).max(0.0).sqrt()).collect();
    let monotone = norms.windows(2).all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[1]));
    let limit_norm = form.quadratic(limit).max(0.0).sqrt();
    let gap = form.quadratic(&(sequence.last().unwrap() - limit)).max(0.0).sqrt();
    let slack = 1e-6 * limit_norm - gap;
    if !monotone {
        return CheckOutcome::Fail { slack: f64::NEG_INFINITY };
    }
    CheckOutcome::from_slack(slack, 0.0)
}

/// `‖w‖²_A − λ̄ Σ w_i w_i² / ū_i^{1−q}` for `w = (v − ū)₊`, `ū` a solution at λ̄.
pub fn check_box_excess_picone(
    form: &GagliardoForm,
    params_bar: &ProblemParams,
    u_bar: &DVector<f64>,
    v: &DVector<f64>,
) -> CheckOutcome {
    if u_bar.iter().any(|x| !(*x > 0.0)) {
        return CheckOutcome::skip("u_bar is not strictly positive");
    }
    let excess = (v - u_bar).map(|x| x.max(0.0));
    let energy = form.quadratic(&excess);
    let w = form.weights();
    let weighted: f64 = (0..v.len())
        .map(|i| params_bar.lambda * w[i] * excess[i] * excess[i] / u_bar[i].powf(1.0 - params_bar.q))
        .sum();
    CheckOutcome::from_slack(energy - weighted, -1e-8 * energy.max(f64::MIN_POSITIVE))
}

/// One entry of the suite report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub case: usize,
    #[serde(flatten)]
    pub outcome: CheckOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub checks: Vec<CheckRecord>,
}

impl SuiteReport {
    fn new(seed: u64, mut checks: Vec<CheckRecord>) -> Self {
        checks.sort_by(|a, b| a.name.cmp(&b.name).then(a.case.cmp(&b.case)));
        let passed = checks.iter().filter(|c| c.outcome.passed()).count();
        let failed = checks.iter().filter(|c| c.outcome.failed()).count();
        let skipped = checks.len() - passed - failed;
        Self { seed, passed, failed, skipped, checks }
    }

    pub fn count(&self, name: &str) -> (usize, usize, usize) {
        let sel = self.checks.iter().filter(|c| c.name == name);
        let (mut p, mut f, mut s) = (0, 0, 0);
        for c in sel {
            match c.outcome {
                CheckOutcome::Pass { .. } => p += 1,
                CheckOutcome::Fail { .. } => f += 1,
                CheckOutcome::Skip { .. } => s += 1,
            }
        }
        (p, f, s)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn nonnegative(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    // sparse-ish nonnegative data, so positivity is not trivially inherited
    DVector::from_iterator(n, (0..n).map(|_| {
        let x: f64 = rng.random();
        if x < 0.3 {
            rng.random::<f64>() * 10.0
        } else {
            0.0
        }
    }))
}

/// Randomized Picone, truncation and weak-maximum-principle checks.
pub fn run_inequality_suite(form: &GagliardoForm, seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = form.n();
    let mut checks = Vec::new();
    for case in 0..cases {
        let mut f = nonnegative(&mut rng, n);
        if f.amax() == 0.0 {
            f[case % n] = 1.0;
        }
        let u = solve_linear(form, &f, DEFAULT_TOL)?;
        let v = gaussian(&mut rng, n);
        checks.push(CheckRecord { name: "picone".into(), case, outcome: check_picone(form, &u, &v) });

        let w = gaussian(&mut rng, n);
        let k = rng.random::<f64>() * w.amax();
        let (g, t) = check_truncation(form, &w, k);
        checks.push(CheckRecord { name: "truncation_upper".into(), case, outcome: g });
        checks.push(CheckRecord { name: "truncation_lower".into(), case, outcome: t });

        let data = nonnegative(&mut rng, n);
        checks.push(CheckRecord { name: "weak_maximum".into(), case, outcome: check_weak_max(form, &data)? });
    }
    Ok(SuiteReport::new(seed, checks))
}

/// Full suite: the inequality checks plus comparison, strong maximum
/// principle, compactness and box-excess checks at `params.lambda`.
pub fn run_suite(
    form: &GagliardoForm,
    params: &ProblemParams,
    opts: &SolverOptions,
    seed: u64,
    cases: usize,
) -> Result<SuiteReport> {
    let mut report = run_inequality_suite(form, seed, cases)?;
    let mut checks = std::mem::take(&mut report.checks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let lam = params.lambda;
    let reaction = ConcaveReaction { lambda: lam, q: params.q };

    let z = solve_concave(form, params.q, lam, opts)?;
    let minimal = find_minimal(form, params, opts)?;
    let mut case = 0;
    let mut push = |name: &str, outcome: CheckOutcome, checks: &mut Vec<CheckRecord>| {
        checks.push(CheckRecord { name: name.into(), case, outcome });
        case += 1;
    };
    push("comparison", check_comparison(form, reaction, &minimal.field, &z.field), &mut checks);
    let z_half = solve_concave(form, params.q, 0.5 * lam, opts)?;
    push("comparison", check_comparison(form, reaction, &z.field, &z_half.field), &mut checks);
    for _ in 0..5 {
        let down: f64 = rng.random_range(0.1..0.95);
        let up: f64 = rng.random_range(1.05..3.0);
        push(
            "comparison",
            check_comparison(form, reaction, &z.field.scale(up), &z.field.scale(down)),
            &mut checks,
        );
    }

    // Two monotone runs from different subsolutions reach the same minimal solution.
    let plain = SolverOptions { newton_after: 0, ..opts.clone() };
    let from_half = match monotone_iterate(form, params, &z.field.scale(0.5), None, &plain, false)? {
        Iteration::Converged { record, .. } => Some(record.field),
        Iteration::Diverged { .. } => None,
    };
    let strong = match from_half {
        Some(other) => {
            // shift so the pair touches at the node of largest gap
            let gap = (&other - &minimal.field).max();
            let lowered = other.add_scalar(-gap.max(0.0));
            let lowered = if gap > 0.0 { lowered } else { other };
            check_strong_max(form, params, &minimal.field, &lowered)
        }
        None => CheckOutcome::skip("second monotone run diverged"),
    };
    push("strong_maximum", strong, &mut checks);

    let compact = match monotone_iterate(form, params, &z.field, Some(&minimal.field.scale(1.0 + 1e-9).add_scalar(1e-12)), &plain, true) {
        Ok(Iteration::Converged { trace, record, .. }) => check_compactness_surrogate(form, &trace, &record.field),
        Ok(Iteration::Diverged { .. }) => CheckOutcome::Fail { slack: f64::NEG_INFINITY },
        Err(e) => CheckOutcome::skip(format!("capped iteration stopped: {e}")),
    };
    push("compactness", compact, &mut checks);

    for _ in 0..5 {
        let pert = gaussian(&mut rng, form.n()).scale(0.2 * minimal.sup_norm);
        let v = &minimal.field + pert;
        push("box_excess_picone", check_box_excess_picone(form, params, &minimal.field, &v), &mut checks);
    }
    Ok(SuiteReport::new(seed, checks))
}
