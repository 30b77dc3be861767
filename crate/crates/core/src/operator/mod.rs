//! The discrete Gagliardo form and the energy functional.
//!
//! The assembled matrix `A` satisfies `uᵀAu ≈ (a/2)∬_{𝒟_Ω} (u(x)−u(y))² K`
//! with Σ₁ values zero, Σ₂ ∩ B_R values eliminated through the discrete
//! Neumann condition and Σ₂ ∖ B_R values frozen to the interior mean.
//! `(Au)_i / w_i` approximates `(−Δ)^s u(x_i)`.
//!
//! Off-diagonals of `A` are non-positive and its row sums are non-negative:
//! it is a weighted graph Laplacian plus a non-negative diagonal, which is what
//! makes the discrete comparison and maximum principles hold.

pub mod oracle;

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Discretization, KernelParams};

/// Exponents and bifurcation parameter of `λu^q + u^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub s: f64,
    pub q: f64,
    pub p: f64,
    pub lambda: f64,
}

impl ProblemParams {
    pub fn new(s: f64, q: f64, p: f64, lambda: f64) -> Result<Self> {
        let params = Self { s, q, p, lambda };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(Error::InvalidParameter(format!("s = {} not in (0, 1)", self.s)));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidParameter(format!("q = {} not in (0, 1)", self.q)));
        }
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::InvalidParameter(format!("p = {} must exceed 1", self.p)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda = {} must be >= 0", self.lambda)));
        }
        Ok(())
    }

    /// p < 2*_s − 1; always true when N = 2s.
    pub fn is_subcritical(&self, dimension: usize) -> bool {
        let n = dimension as f64;
        let d = n - 2.0 * self.s;
        d <= 0.0 || self.p < (n + 2.0 * self.s) / d
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// λ t₊^q + t₊^p.
    pub fn nonlinearity(&self, t: f64) -> f64 {
        if t > 0.0 {
            self.lambda * t.powf(self.q) + t.powf(self.p)
        } else {
            0.0
        }
    }

    /// Derivative of the nonlinearity for t > 0 (zero otherwise).
    pub fn nonlinearity_derivative(&self, t: f64) -> f64 {
        if t > 0.0 {
            self.lambda * self.q * t.powf(self.q - 1.0) + self.p * t.powf(self.p - 1.0)
        } else {
            0.0
        }
    }

    /// Primitive λ t₊^{q+1}/(q+1) + t₊^{p+1}/(p+1).
    pub fn primitive(&self, t: f64) -> f64 {
        if t > 0.0 {
            self.lambda * t.powf(self.q + 1.0) / (self.q + 1.0) + t.powf(self.p + 1.0) / (self.p + 1.0)
        } else {
            0.0
        }
    }
}

/// Assembled quadratic form on the interior nodes.
#[derive(Debug)]
pub struct GagliardoForm {
    matrix: DMatrix<f64>,
    weights: DVector<f64>,
    /// `c_ik = a w_i ∫_{cell k} K(x_i, y) dy` (plus the neighbour correction).
    coupling: DMatrix<f64>,
    coupling_totals: DVector<f64>,
    neumann_weights: DVector<f64>,
    dirichlet_mass: DVector<f64>,
    far_mass: DVector<f64>,
    kernel: KernelParams,
    factor: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

impl Clone for GagliardoForm {
    fn clone(&self) -> Self {
        Self {
            matrix: self.matrix.clone(),
            weights: self.weights.clone(),
            coupling: self.coupling.clone(),
            coupling_totals: self.coupling_totals.clone(),
            neumann_weights: self.neumann_weights.clone(),
            dirichlet_mass: self.dirichlet_mass.clone(),
            far_mass: self.far_mass.clone(),
            kernel: self.kernel,
            factor: OnceLock::new(),
        }
    }
}

/// Assembles the reduced form for a discretization.
pub fn assemble_form(d: &Discretization) -> Result<GagliardoForm> {
    let n = d.n_interior();
    let n2 = d.n_neumann();
    let requested = n.saturating_mul(n + n2);
    if requested > d.pair_cap {
        return Err(Error::TooLarge { requested, cap: d.pair_cap });
    }
    let a = d.kernel.a;

    let mut matrix = DMatrix::<f64>::zeros(n, n);
    matrix
        .as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(j, col)| {
            for (i, entry) in col.iter_mut().enumerate() {
                if i != j {
                    *entry = -a * d.weights[i] * d.interior_pair_weight(i, j);
                }
            }
        });

    let mut coupling = DMatrix::<f64>::zeros(n, n2);
    if n2 > 0 {
        coupling
            .as_mut_slice()
            .par_chunks_mut(n)
            .zip(d.neumann.par_iter())
            .for_each(|(col, cell)| {
                for (i, entry) in col.iter_mut().enumerate() {
                    *entry = a * d.weights[i] * d.exterior_pair_weight(i, cell);
                }
            });
    }
    let coupling_totals = DVector::from_iterator(n2, coupling.column_iter().map(|c| c.sum()));
    if coupling_totals.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::NonFinite("exterior coupling"));
    }
    let coupling_rows: Vec<f64> = coupling.row_iter().map(|r| r.sum()).collect();

    let dirichlet_mass = DVector::from_iterator(n, (0..n).map(|i| a * d.weights[i] * d.kappa_dirichlet[i]));
    let far_mass = DVector::from_iterator(n, (0..n).map(|i| a * d.weights[i] * d.kappa_far[i]));

    for i in 0..n {
        let offdiag: f64 = -(matrix.column(i).sum());
        matrix[(i, i)] = offdiag + coupling_rows[i] + dirichlet_mass[i];
    }

    if n2 > 0 {
        let mut scaled = coupling.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col /= coupling_totals[k].sqrt();
        }
        matrix.gemm(-1.0, &scaled, &scaled.transpose(), 1.0);
    }

    let total_far: f64 = far_mass.sum();
    if total_far > 0.0 {
        let omega: f64 = d.weights.iter().sum();
        let m = DVector::from_iterator(n, d.weights.iter().map(|w| w / omega));
        for j in 0..n {
            for i in 0..n {
                matrix[(i, j)] += total_far * m[i] * m[j] - far_mass[i] * m[j] - m[i] * far_mass[j];
            }
            matrix[(j, j)] += far_mass[j];
        }
    }

    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator assembly"));
    }

    Ok(GagliardoForm {
        matrix,
        weights: DVector::from_vec(d.weights.clone()),
        coupling,
        coupling_totals,
        neumann_weights: DVector::from_iterator(n2, d.neumann.iter().map(|c| c.weight)),
        dirichlet_mass,
        far_mass,
        kernel: d.kernel,
        factor: OnceLock::new(),
    })
}

impl GagliardoForm {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_neumann(&self) -> usize {
        self.coupling.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn dirichlet_mass(&self) -> &DVector<f64> {
        &self.dirichlet_mass
    }

    pub fn far_mass(&self) -> &DVector<f64> {
        &self.far_mass
    }

    /// Σ₁ has positive kernel mass, so the form is coercive.
    pub fn has_dirichlet_part(&self) -> bool {
        self.dirichlet_mass.iter().any(|m| *m > 0.0)
    }

    pub fn measure(&self) -> f64 {
        self.weights.sum()
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u
    }

    /// `uᵀAu`.
    pub fn quadratic(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.matrix * u))
    }

    /// Cached dense Cholesky factor; `None` when `A` is not positive definite.
    pub fn cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.factor.get_or_init(|| Cholesky::new(self.matrix.clone())).as_ref()
    }

    /// Σ₂ values that satisfy the discrete nonlocal Neumann condition.
    pub fn extend(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut ext = self.coupling.tr_mul(u);
        for k in 0..ext.len() {
            ext[k] /= self.coupling_totals[k];
        }
        ext
    }

    /// Discrete `𝒩_s u(y_k) = a ∫_Ω (u(y_k) − u(x)) K dx` for given interior
    /// and Σ₂ values.
    pub fn normal_derivative(&self, u: &DVector<f64>, exterior: &DVector<f64>, k: usize) -> Result<f64> {
        if k >= self.n_neumann() {
            return Err(Error::InvalidParameter(format!(
                "node {k} is not one of the {} Σ₂ nodes",
                self.n_neumann()
            )));
        }
        if u.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: u.len() });
        }
        if exterior.len() != self.n_neumann() {
            return Err(Error::DimensionMismatch { expected: self.n_neumann(), got: exterior.len() });
        }
        let col = self.coupling.column(k);
        let flux = exterior[k] * self.coupling_totals[k] - col.dot(u);
        Ok(flux / self.neumann_weights[k])
    }

    /// The unreduced symmetric matrix on interior and Σ₂ ∩ B_R unknowns
    /// (interior first). Its Schur complement onto the interior is `A`.
    pub fn explicit_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let n2 = self.n_neumann();
        let mut full = DMatrix::<f64>::zeros(n + n2, n + n2);
        let schur = if n2 > 0 {
            let mut scaled = self.coupling.clone();
            for (k, mut col) in scaled.column_iter_mut().enumerate() {
                col /= self.coupling_totals[k].sqrt();
            }
            &scaled * scaled.transpose()
        } else {
            DMatrix::zeros(n, n)
        };
        let mut block = &self.matrix + schur;
        block = 0.5 * (&block + block.transpose());
        full.view_mut((0, 0), (n, n)).copy_from(&block);
        full.view_mut((0, n), (n, n2)).copy_from(&(-&self.coupling));
        full.view_mut((n, 0), (n2, n)).copy_from(&(-self.coupling.transpose()));
        for k in 0..n2 {
            full[(n + k, n + k)] = self.coupling_totals[k];
        }
        full
    }
}

/// `(−Δ)^s u(x_i) ≈ (Au)_i / w_i` with the reduced exterior data.
pub fn apply_frac_laplacian(form: &GagliardoForm, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(form, u)?;
    Ok(form.apply(u).component_div(form.weights()))
}

/// Σ₂ ∩ B_R values of the Neumann extension of `u`.
pub fn neumann_extension(form: &GagliardoForm, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(form, u)?;
    Ok(form.extend(u))
}

pub fn nonlocal_normal_derivative(
    form: &GagliardoForm,
    u: &DVector<f64>,
    exterior: &DVector<f64>,
    k: usize,
) -> Result<f64> {
    form.normal_derivative(u, exterior, k)
}

/// `J(u) = ½uᵀAu − Σ w_i F(u_i)`.
pub fn energy_j(form: &GagliardoForm, params: &ProblemParams, u: &DVector<f64>) -> Result<f64> {
    check_len(form, u)?;
    let potential: f64 = u
        .iter()
        .zip(form.weights().iter())
        .map(|(ui, wi)| wi * params.primitive(*ui))
        .sum();
    let value = 0.5 * form.quadratic(u) - potential;
    if !value.is_finite() {
        return Err(Error::NonFinite("energy"));
    }
    Ok(value)
}

/// `∇J(u) = Au − W f(u)`.
pub fn grad_j(form: &GagliardoForm, params: &ProblemParams, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(form, u)?;
    let mut g = form.apply(u);
    for i in 0..g.len() {
        g[i] -= form.weights()[i] * params.nonlinearity(u[i]);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("energy gradient"));
    }
    Ok(g)
}

/// `W f(u)` as a vector.
pub fn weighted_nonlinearity(form: &GagliardoForm, params: &ProblemParams, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        u.len(),
        u.iter().zip(form.weights().iter()).map(|(ui, wi)| wi * params.nonlinearity(*ui)),
    )
}

/// Sup-norm of `∇J(u) / w`, the nodal residual of the discrete equation.
pub fn residual_norm(form: &GagliardoForm, params: &ProblemParams, u: &DVector<f64>) -> Result<f64> {
    let g = grad_j(form, params, u)?;
    Ok(g.component_div(form.weights()).amax())
}

fn check_len(form: &GagliardoForm, u: &DVector<f64>) -> Result<()> {
    if u.len() != form.n() {
        return Err(Error::DimensionMismatch { expected: form.n(), got: u.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_discretization, DomainSpec, Region};
    use proptest::prelude::*;

    fn form(n: usize, s: f64) -> (Discretization, GagliardoForm) {
        let d = build_discretization(&DomainSpec::default().with_resolution(n), s).unwrap();
        let f = assemble_form(&d).unwrap();
        (d, f)
    }

    #[test]
    fn symmetric_m_matrix() {
        for s in [0.1, 0.25, 0.5] {
            let (_, f) = form(40, s);
            let a = f.matrix();
            assert_eq!(a, &a.transpose());
            for j in 0..f.n() {
                for i in 0..f.n() {
                    if i != j {
                        assert!(a[(i, j)] <= 0.0, "s={s} ({i},{j}) = {}", a[(i, j)]);
                    }
                }
                assert!(a.column(j).sum() >= -1e-12 * a[(j, j)]);
            }
            assert!(f.cholesky().is_some());
        }
    }

    #[test]
    fn constant_field_identity() {
        let (d, f) = form(60, 0.3);
        let e = DVector::from_element(f.n(), 1.0);
        let lhs = f.quadratic(&e);
        let rhs: f64 = 2.0 * d.weights.iter().zip(&d.kappa_dirichlet).map(|(w, k)| w * k).sum::<f64>();
        assert!((lhs - rhs).abs() <= 1e-10 * rhs, "{lhs} vs {rhs}");
    }

    #[test]
    fn constant_field_sees_only_dirichlet_mass() {
        let (d, f) = form(32, 0.5);
        let c = 1.7;
        let lap = apply_frac_laplacian(&f, &DVector::from_element(32, c)).unwrap();
        for i in 0..32 {
            let expected = 2.0 * c * d.kappa_dirichlet[i];
            assert!((lap[i] - expected).abs() <= 1e-9 * expected);
        }
    }

    #[test]
    fn bilinear_and_pointwise_forms_agree() {
        let (d, f) = form(24, 0.3);
        let u = DVector::from_iterator(24, d.interior.iter().map(|p| (5.0 * p[0]).cos()));
        let v = DVector::from_iterator(24, d.interior.iter().map(|p| p[0] * p[0]));
        let lap = apply_frac_laplacian(&f, &u).unwrap();
        let lhs = v.dot(&f.apply(&u));
        let rhs: f64 = (0..24).map(|i| v[i] * f.weights()[i] * lap[i]).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn extension_is_bounded_average() {
        let (d, f) = form(20, 0.5);
        let c = DVector::from_element(20, -2.5);
        assert!(f.extend(&c).iter().all(|v| (v + 2.5).abs() < 1e-13));
        let u = DVector::from_iterator(20, d.interior.iter().map(|p| (7.0 * p[0]).sin()));
        let (lo, hi) = (u.min(), u.max());
        assert!(f.extend(&u).iter().all(|v| *v >= lo - 1e-14 && *v <= hi + 1e-14));
    }

    #[test]
    fn distant_extension_tends_to_mean() {
        let mut spec = DomainSpec::default().with_resolution(20);
        spec.truncation_radius = 1001.5;
        spec.exterior_resolution = 20;
        let d = build_discretization(&spec, 0.5).unwrap();
        let f = assemble_form(&d).unwrap();
        let u = DVector::from_iterator(20, d.interior.iter().map(|p| 1.0 + p[0] * p[0]));
        let ext = f.extend(&u);
        let (k, cell) = d
            .neumann
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.center[0] - 1000.0).abs().total_cmp(&(b.1.center[0] - 1000.0).abs()))
            .unwrap();
        assert!(cell.center[0] > 999.0);
        let mean = u.mean();
        assert!((ext[k] - mean).abs() < 1e-2 * mean);
    }

    #[test]
    fn bump_against_zero_exterior_value_has_negative_flux() {
        let (d, f) = form(20, 0.5);
        let u = DVector::from_iterator(20, d.interior.iter().map(|p| if (p[0] - 0.5).abs() < 0.2 { 1.0 } else { 0.0 }));
        let ext = DVector::zeros(f.n_neumann());
        assert!(f.normal_derivative(&u, &ext, 3).unwrap() < 0.0);
        let c = DVector::from_element(20, 2.0);
        let cext = DVector::from_element(f.n_neumann(), 2.0);
        assert!(f.normal_derivative(&c, &cext, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_energy_at_zero() {
        let (_, f) = form(16, 0.5);
        let params = ProblemParams::new(0.5, 0.5, 3.0, 1.0).unwrap();
        let z = DVector::zeros(16);
        assert_eq!(energy_j(&f, &params, &z).unwrap(), 0.0);
        assert_eq!(grad_j(&f, &params, &z).unwrap().amax(), 0.0);
    }

    #[test]
    fn extension_has_zero_normal_derivative() {
        let (d, f) = form(30, 0.4);
        let u = DVector::from_iterator(30, d.interior.iter().map(|p| (3.0 * p[0]).sin() + 0.2));
        let ext = f.extend(&u);
        let scale = u.amax() * f.coupling_totals.max() / f.neumann_weights.min();
        for k in 0..f.n_neumann() {
            let v = f.normal_derivative(&u, &ext, k).unwrap();
            assert!(v.abs() <= 1e-12 * scale, "k={k} v={v}");
        }
        assert!(f.normal_derivative(&u, &ext, f.n_neumann()).is_err());
    }

    #[test]
    fn explicit_system_reduces_to_schur_complement() {
        let (d, f) = form(20, 0.5);
        let full = f.explicit_matrix();
        let n = f.n();
        let u = DVector::from_iterator(n, d.interior.iter().map(|p| p[0] * (1.0 - p[0])));
        let mut stacked = DVector::zeros(n + f.n_neumann());
        stacked.rows_mut(0, n).copy_from(&u);
        stacked.rows_mut(n, f.n_neumann()).copy_from(&f.extend(&u));
        let y = &full * &stacked;
        let reduced = f.apply(&u);
        for i in 0..n {
            assert!((y[i] - reduced[i]).abs() < 1e-9 * reduced.amax());
        }
        for k in 0..f.n_neumann() {
            assert!(y[n + k].abs() < 1e-9 * reduced.amax());
        }
    }

    #[test]
    fn pure_neumann_form_annihilates_constants() {
        let mut spec = DomainSpec::default().with_resolution(20);
        spec.neumann = vec![Region::interval(f64::NEG_INFINITY, f64::INFINITY)];
        let d = build_discretization(&spec, 0.5).unwrap();
        let f = assemble_form(&d).unwrap();
        assert!(!f.has_dirichlet_part());
        let e = DVector::from_element(20, 1.0);
        assert!(f.apply(&e).amax() < 1e-10 * f.matrix().amax());
    }

    #[test]
    fn size_cap_is_enforced() {
        let mut spec = DomainSpec::default().with_resolution(100);
        spec.pair_cap = 1000;
        let d = build_discretization(&spec, 0.5).unwrap();
        assert!(matches!(assemble_form(&d), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn parameter_validation() {
        assert!(ProblemParams::new(0.5, 1.0, 3.0, 1.0).is_err());
        assert!(ProblemParams::new(0.5, 0.5, 1.0, 1.0).is_err());
        assert!(ProblemParams::new(0.5, 0.5, 3.0, -1.0).is_err());
        let p = ProblemParams::new(0.25, 0.5, 3.0, 1.0).unwrap();
        assert!(!p.is_subcritical(1)); // 2*_s − 1 = 3
        assert!(ProblemParams::new(0.5, 0.5, 100.0, 1.0).unwrap().is_subcritical(1));
    }

    #[test]
    fn dimension_mismatch() {
        let (_, f) = form(8, 0.5);
        let params = ProblemParams::new(0.5, 0.5, 3.0, 1.0).unwrap();
        assert!(matches!(
            energy_j(&f, &params, &DVector::zeros(7)),
            Err(Error::DimensionMismatch { expected: 8, got: 7 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_directional_derivative(
            seed in proptest::collection::vec(-1.0f64..2.0, 12),
            dir in proptest::collection::vec(-1.0f64..1.0, 12),
            lambda in 0.0f64..3.0,
        ) {
            let (_, f) = form(12, 0.35);
            let params = ProblemParams::new(0.35, 0.5, 3.0, lambda).unwrap();
            // keep away from the kink of t₊^q at zero
            let u = DVector::from_iterator(12, seed.iter().map(|v| if v.abs() < 0.05 { 0.3 } else { *v }));
            let v = DVector::from_vec(dir);
            let eps = 1e-6;
            let fd = (energy_j(&f, &params, &(&u + eps * &v)).unwrap()
                - energy_j(&f, &params, &(&u - eps * &v)).unwrap()) / (2.0 * eps);
            let g = grad_j(&f, &params, &u).unwrap().dot(&v);
            prop_assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "fd {} vs {}", fd, g);
        }

        #[test]
        fn form_is_nonnegative(values in proptest::collection::vec(-5.0f64..5.0, 16)) {
            let (_, f) = form(16, 0.2);
            let u = DVector::from_vec(values);
            prop_assert!(f.quadratic(&u) >= -1e-12 * u.norm_squared() * f.matrix().amax());
        }
    }
}
