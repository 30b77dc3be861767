//! Second solution above the minimal one.
//!
//! Stage 1 minimizes J over the order interval `0 ≤ u ≤ ū`. If that lands on
//! the minimal solution ϑ, stage 2 looks for a mountain pass of the
//! translated functional `Ĵ(v) = ½vᵀAv − Σ w G(v)`, where
//! `g(r) = f(ϑ + r) − f(ϑ)` for `r ≥ 0` and `0` otherwise. Critical points
//! `v ≠ 0` of Ĵ give solutions `ϑ + v > ϑ`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{annotate, newton_solve, SolutionKind, SolutionRecord, SolverOptions};
use crate::error::{Error, Result};
use crate::operator::{energy_j, grad_j, GagliardoForm, ProblemParams};

fn translated_g(params: &ProblemParams, theta: f64, r: f64) -> f64 {
    if r > 0.0 {
        params.nonlinearity(theta + r) - params.nonlinearity(theta)
    } else {
        0.0
    }
}

fn translated_primitive(params: &ProblemParams, theta: f64, r: f64) -> f64 {
    if r > 0.0 {
        params.primitive(theta + r) - params.primitive(theta) - params.nonlinearity(theta) * r
    } else {
        0.0
    }
}

/// `Ĵ(v)` around the base field `theta`.
pub fn translated_energy(form: &GagliardoForm, params: &ProblemParams, theta: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let pot: f64 = (0..v.len())
        .map(|i| form.weights()[i] * translated_primitive(params, theta[i], v[i]))
        .sum();
    0.5 * form.quadratic(v) - pot
}

/// `∇Ĵ(v) = Av − W g(v)`.
pub fn translated_gradient(
    form: &GagliardoForm,
    params: &ProblemParams,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let mut g = form.apply(v);
    for i in 0..v.len() {
        g[i] -= form.weights()[i] * translated_g(params, theta[i], v[i]);
    }
    g
}

/// Projected accelerated gradient for `min J` over `0 ≤ u ≤ upper`, in the
/// mass-weighted metric, with backtracking on the Lipschitz estimate and
/// restart on energy increase.
pub fn box_minimize(
    form: &GagliardoForm,
    params: &ProblemParams,
    upper: &DVector<f64>,
    start: &DVector<f64>,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let w = form.weights();
    let project = |x: DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(upper.iter()).map(|(v, u)| v.clamp(0.0, *u)))
    };
    let energy = |x: &DVector<f64>| energy_j(form, params, x);
    let wgrad = |x: &DVector<f64>| -> Result<DVector<f64>> { Ok(grad_j(form, params, x)?.component_div(w)) };
    let wdot = |a: &DVector<f64>, b: &DVector<f64>| -> f64 { (0..a.len()).map(|i| w[i] * a[i] * b[i]).sum() };

    let a = form.matrix();
    let mut lip = (0..form.n())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>() / w[i])
        .fold(0.0, f64::max)
        * 0.25;
    let mut x = project(start.clone());
    let mut ex = energy(&x)?;
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iter {
        let gy = wgrad(&y)?;
        let ey = energy(&y)?;
        let mut next;
        let mut en;
        loop {
            next = project(&y - &gy / lip);
            en = energy(&next)?;
            let d = &next - &y;
            if en <= ey + wdot(&gy, &d) + 0.5 * lip * wdot(&d, &d) + 1e-14 * ey.abs() {
                break;
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return Err(Error::NonFinite("box minimization step"));
            }
        }
        let moved = (&next - &x).amax() * lip;
        if en > ex {
            // restart momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + ((t - 1.0) / t_next) * (&next - &x);
        y = project(y);
        t = t_next;
        x = next;
        ex = en;
        if moved <= 1e-9 * (1.0 + x.amax()) {
            break;
        }
    }
    Ok(x)
}

/// Solution `v ≥ u_min`, `v ≠ u_min`, at the same λ.
///
/// `u_bar` is the minimal solution at some λ̄ in (λ, Λ), a strict
/// supersolution at λ. `seed` drives the path perturbations of the retries.
pub fn mountain_pass_second(
    form: &GagliardoForm,
    params: &ProblemParams,
    u_min: &SolutionRecord,
    u_bar: &DVector<f64>,
    opts: &SolverOptions,
    seed: u64,
) -> Result<SolutionRecord> {
    params.validate()?;
    if !params.is_subcritical(form.kernel().dimension) {
        return Err(Error::InvalidParameter(format!(
            "p = {} is not subcritical for N = {}, s = {}",
            params.p,
            form.kernel().dimension,
            params.s
        )));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidParameter("lambda must be positive".into()));
    }
    if (u_min.lambda - params.lambda).abs() > 1e-12 * params.lambda {
        return Err(Error::InvalidParameter("minimal solution belongs to a different lambda".into()));
    }
    if u_bar.len() != form.n() || u_min.field.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: u_bar.len().min(u_min.field.len()) });
    }
    let sep = 10.0 * opts.tol;
    let accept = |v: DVector<f64>, iterations: usize| -> Result<Option<SolutionRecord>> {
        let lower_ok = v.iter().zip(u_min.field.iter()).all(|(a, b)| *a >= *b - 1e-8);
        let apart = (&v - &u_min.field).amax() > sep.max(1e-6 * (1.0 + u_min.sup_norm));
        if !(lower_ok && apart) {
            return Ok(None);
        }
        let rec = annotate(form, params, v, SolutionKind::MountainPass, iterations, true)?;
        if rec.residual <= opts.tol && rec.energy > u_min.energy {
            Ok(Some(rec))
        } else {
            Ok(None)
        }
    };

    // Stage 1: minimizer over the order interval.
    let theta_box = box_minimize(form, params, u_bar, u_bar, 20_000)?;
    if (&theta_box - &u_min.field).amax() > 1e-3 * (1.0 + u_min.sup_norm) {
        if let Ok((v, steps)) = newton_solve(form, params, &theta_box, opts.tol, 60) {
            if let Some(rec) = accept(v, steps)? {
                return Ok(rec);
            }
        }
    }

    // Stage 2: mountain pass of the translated functional around ϑ = u_min.
    let theta = &u_min.field;
    let chol = form
        .cholesky()
        .ok_or_else(|| Error::Unsupported("form is not positive definite".into()))?;
    let agrad = |v: &DVector<f64>| -> DVector<f64> {
        let g = DVector::from_iterator(
            v.len(),
            (0..v.len()).map(|i| form.weights()[i] * translated_g(params, theta[i], v[i])),
        );
        v - chol.solve(&g)
    };
    let jhat = |v: &DVector<f64>| translated_energy(form, params, theta, v);
    let direction = theta.scale(1.0 / theta.amax());

    let mut scale = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_level = f64::NAN;
    for attempt in 0..=opts.retries {
        // endpoint with Ĵ < 0
        let mut t = scale;
        let mut found = false;
        for _ in 0..80 {
            if jhat(&direction.scale(t)) < 0.0 {
                found = true;
                break;
            }
            t *= 2.0;
        }
        if !found {
            return Err(Error::MountainPass("no path endpoint with negative translated energy".into()));
        }
        let end = direction.scale(t);
        let states = opts.path_states;
        let mut path: Vec<DVector<f64>> =
            (0..states).map(|k| end.scale(k as f64 / (states - 1) as f64)).collect();
        if attempt > 0 {
            let amp = 0.1 * end.amax();
            for state in path.iter_mut().take(states - 1).skip(1) {
                for v in state.iter_mut() {
                    *v = (*v + amp * rng.random_range(-1.0..1.0)).max(0.0);
                }
            }
        }
        let (candidate, level) = descend_path(form, &mut path, &agrad, &jhat, opts.path_iterations);
        last_level = level;
        if level > 1e-12 * (1.0 + u_min.energy.abs()) {
            let start = theta + &candidate;
            if let Ok((v, steps)) = newton_solve(form, params, &start, opts.tol, 100) {
                if let Some(rec) = accept(v, steps)? {
                    return Ok(rec);
                }
            }
        }
        scale = 2.0 * t;
    }
    Err(Error::MountainPass(format!(
        "no separated critical point after {} attempts (pass level ≈ {last_level:.3e})",
        opts.retries + 1
    )))
}

/// Deforms the path by steepest descent of its highest interior state, with
/// periodic equal-arclength reparametrization. Returns the final highest
/// state and its level.
fn descend_path<G, E>(
    form: &GagliardoForm,
    path: &mut [DVector<f64>],
    agrad: &G,
    jhat: &E,
    iterations: usize,
) -> (DVector<f64>, f64)
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
    E: Fn(&DVector<f64>) -> f64,
{
    let m = path.len();
    let mut levels: Vec<f64> = path.iter().map(jhat).collect();
    let mut steps = vec![0.5_f64; m];
    let anorm = |v: &DVector<f64>| form.quadratic(v).max(0.0).sqrt();
    for it in 0..iterations {
        let k = (1..m - 1).max_by(|a, b| levels[*a].total_cmp(&levels[*b])).unwrap();
        let g = agrad(&path[k]);
        let gn = anorm(&g);
        if gn <= 1e-7 * (1.0 + anorm(&path[k])) {
            break;
        }
        let mut moved = false;
        for _ in 0..40 {
            let trial = &path[k] - steps[k] * &g;
            let lt = jhat(&trial);
            if lt < levels[k] - 1e-4 * steps[k] * gn * gn {
                path[k] = trial;
                levels[k] = lt;
                steps[k] = (steps[k] * 1.5).min(1.0);
                moved = true;
                break;
            }
            steps[k] *= 0.5;
        }
        if !moved {
            break;
        }
        if it % 10 == 9 {
            reparametrize(path, &anorm);
            for j in 1..m - 1 {
                levels[j] = jhat(&path[j]);
            }
        }
    }
    let k = (1..m - 1).max_by(|a, b| levels[*a].total_cmp(&levels[*b])).unwrap();
    (path[k].clone(), levels[k])
}

fn reparametrize<N: Fn(&DVector<f64>) -> f64>(path: &mut [DVector<f64>], norm: &N) {
    let m = path.len();
    let mut cum = vec![0.0; m];
    for k in 1..m {
        cum[k] = cum[k - 1] + norm(&(&path[k] - &path[k - 1]));
    }
    let total = cum[m - 1];
    if !(total > 0.0) {
        return;
    }
    let old = path.to_vec();
    let mut seg = 0;
    for (k, state) in path.iter_mut().enumerate().take(m - 1).skip(1) {
        let target = total * k as f64 / (m - 1) as f64;
        while seg + 1 < m - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
        *state = &old[seg] + t * (&old[seg + 1] - &old[seg]);
    }
}
