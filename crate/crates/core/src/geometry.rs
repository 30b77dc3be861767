//! Discretization of Ω and of its exterior.
//!
//! Ω is an axis-aligned interval (N = 1) or rectangle (N = 2) split into
//! uniform midpoint cells. The exterior is labelled by a list of boxes: the
//! part of the boxes outside Ω is the nonlocal Neumann set Σ₂, the rest of the
//! exterior is the Dirichlet set Σ₁. Σ₂ ∩ B_R carries explicit cells, Σ₂ ∖ B_R
//! and all of Σ₁ enter only through per-node kernel masses.
//!
//! Kernel weights are stored without the normalization constant a_{N,s};
//! the operator module multiplies it in.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{adaptive, gl8};

/// A point in the plane; 1D problems leave the second coordinate at zero.
pub type Point = [f64; 2];

/// Default normalization of the kernel constant.
pub const DEFAULT_NORMALIZATION: f64 = 2.0;

/// Axis-aligned box, bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo], hi: vec![hi] }
    }

    pub fn rectangle(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo: lo.to_vec(), hi: hi.to_vec() }
    }

    fn contains(&self, p: &Point, dim: usize) -> bool {
        (0..dim).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    /// Parameter interval `[t0, t1]` of the ray `x + t e` (t ≥ 0) inside the box.
    fn ray_interval(&self, x: &Point, e: &Point, dim: usize) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for k in 0..dim {
            if e[k].abs() < 1e-300 {
                if x[k] < self.lo[k] || x[k] > self.hi[k] {
                    return None;
                }
                continue;
            }
            let a = (self.lo[k] - x[k]) / e[k];
            let b = (self.hi[k] - x[k]) / e[k];
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Geometry, exterior labelling and resolution of a problem.
/// Missing keys fall back to the default (1D) setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub dimension: usize,
    pub omega: Region,
    /// Boxes whose part outside Ω forms Σ₂; everything else outside Ω is Σ₁.
    pub neumann: Vec<Region>,
    pub truncation_radius: f64,
    pub resolution: usize,
    /// Σ₂ cells are `exterior_resolution` times coarser than the Ω cells.
    pub exterior_resolution: usize,
    /// Upper bound on interior × (interior + Σ₂) pair count.
    pub pair_cap: usize,
}

fn default_pair_cap() -> usize {
    50_000_000
}

impl Default for DomainSpec {
    /// Ω = (0,1), Σ₁ = (−∞,0), Σ₂ = (1,∞), R = 20, n = 200.
    fn default() -> Self {
        Self {
            dimension: 1,
            omega: Region::interval(0.0, 1.0),
            neumann: vec![Region::interval(1.0, f64::INFINITY)],
            truncation_radius: 20.0,
            resolution: 200,
            exterior_resolution: 1,
            pair_cap: default_pair_cap(),
        }
    }
}

impl DomainSpec {
    pub fn with_resolution(mut self, n: usize) -> Self {
        self.resolution = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dimension;
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidDomain(format!("dimension {dim} not in {{1, 2}}")));
        }
        let bad_len = |r: &Region| r.lo.len() != dim || r.hi.len() != dim;
        if bad_len(&self.omega) {
            return Err(Error::InvalidDomain("omega bounds do not match dimension".into()));
        }
        for k in 0..dim {
            let (lo, hi) = (self.omega.lo[k], self.omega.hi[k]);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidDomain("omega must be bounded".into()));
            }
            if hi <= lo {
                return Err(Error::InvalidDomain("omega is empty".into()));
            }
        }
        for r in &self.neumann {
            if bad_len(r) || (0..dim).any(|k| r.lo[k].is_nan() || r.hi[k].is_nan() || r.hi[k] <= r.lo[k]) {
                return Err(Error::InvalidDomain("malformed neumann region".into()));
            }
        }
        if self.resolution < 4 {
            return Err(Error::InvalidDomain(format!("resolution {} < 4", self.resolution)));
        }
        if self.exterior_resolution == 0 {
            return Err(Error::InvalidDomain("exterior_resolution must be >= 1".into()));
        }
        if dim == 2 && self.resolution % self.exterior_resolution != 0 {
            return Err(Error::InvalidDomain(
                "in 2D the resolution must be a multiple of exterior_resolution".into(),
            ));
        }
        let needed = self.omega_diameter() + self.omega_distance_to_origin();
        if !(self.truncation_radius > needed) {
            return Err(Error::InvalidDomain(format!(
                "truncation radius {} must exceed diam(omega) + dist(omega, 0) = {needed}",
                self.truncation_radius
            )));
        }
        Ok(())
    }

    pub fn omega_diameter(&self) -> f64 {
        (0..self.dimension)
            .map(|k| (self.omega.hi[k] - self.omega.lo[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn omega_distance_to_origin(&self) -> f64 {
        (0..self.dimension)
            .map(|k| {
                let (lo, hi) = (self.omega.lo[k], self.omega.hi[k]);
                if 0.0 < lo {
                    lo
                } else if 0.0 > hi {
                    -hi
                } else {
                    0.0
                }
            })
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt()
    }

    fn in_omega(&self, p: &Point) -> bool {
        (0..self.dimension).all(|k| p[k] > self.omega.lo[k] && p[k] < self.omega.hi[k])
    }

    fn in_neumann(&self, p: &Point) -> bool {
        !self.in_omega(p) && self.neumann.iter().any(|r| r.contains(p, self.dimension))
    }
}

/// Dimension, fractional order and normalization of the kernel a·|x−y|^{−(N+2s)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub dimension: usize,
    pub s: f64,
    pub a: f64,
}

impl KernelParams {
    pub fn new(dimension: usize, s: f64, a: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidParameter(format!("s = {s} not in (0, 1)")));
        }
        if (dimension as f64) < 2.0 * s {
            return Err(Error::InvalidParameter(format!("N = {dimension} < 2s = {}", 2.0 * s)));
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!("normalization a = {a} must be positive")));
        }
        Ok(Self { dimension, s, a })
    }

    fn exponent(&self) -> f64 {
        self.dimension as f64 + 2.0 * self.s
    }
}

/// a_{N,s} |x − y|^{−(N+2s)}.
pub fn kernel_coefficient(x: &Point, y: &Point, kernel: &KernelParams) -> Result<f64> {
    let r = distance(x, y, kernel.dimension);
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(kernel.a * r.powf(-kernel.exponent()))
}

fn distance(x: &Point, y: &Point, dim: usize) -> f64 {
    (0..dim).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>().sqrt()
}

/// a ∫_{|y|>R} |x − y|^{−(N+2s)} dy.
pub fn far_field_tail(x: &Point, radius: f64, kernel: &KernelParams) -> Result<f64> {
    let norm = distance(x, &[0.0, 0.0], kernel.dimension);
    if !(radius > norm) {
        return Err(Error::InvalidDomain(format!(
            "truncation radius {radius} does not exceed |x| = {norm}"
        )));
    }
    let s = kernel.s;
    let value = match kernel.dimension {
        1 => radial_tail(radius - x[0], s) + radial_tail(radius + x[0], s),
        _ => angular_integral(|theta| {
            let e = [theta.cos(), theta.sin()];
            radial_tail(ray_exit_ball(x, &e, radius), s)
        }, &[]),
    };
    Ok(kernel.a * value)
}

/// ∫_d^∞ r^{−1−2s} dr.
fn radial_tail(d: f64, s: f64) -> f64 {
    d.powf(-2.0 * s) / (2.0 * s)
}

/// ∫_{r0}^{r1} r^{−1−2s} dr for 0 < r0 ≤ r1 ≤ ∞, free of cancellation.
fn radial_segment(r0: f64, r1: f64, s: f64) -> f64 {
    if r1 <= r0 {
        return 0.0;
    }
    if r1.is_infinite() {
        return radial_tail(r0, s);
    }
    // r0^{-2s} (1 − (r1/r0)^{-2s}) / 2s
    -r0.powf(-2.0 * s) * (-2.0 * s * ((r1 - r0) / r0).ln_1p()).exp_m1() / (2.0 * s)
}

/// ∫_a^b |x − y|^{−1−2s} dy for x outside (a, b).
pub fn segment_kernel_integral(x: f64, a: f64, b: f64, s: f64) -> f64 {
    if x <= a {
        radial_segment(a - x, b - x, s)
    } else if x >= b {
        radial_segment(x - b, x - a, s)
    } else {
        f64::INFINITY
    }
}

fn ray_exit_ball(x: &Point, e: &Point, radius: f64) -> f64 {
    let b = x[0] * e[0] + x[1] * e[1];
    let c = x[0] * x[0] + x[1] * x[1] - radius * radius;
    -b + (b * b - c).sqrt()
}

fn angular_integral<F: FnMut(f64) -> f64>(mut f: F, breaks: &[f64]) -> f64 {
    let mut pts: Vec<f64> = vec![0.0, std::f64::consts::TAU];
    pts.extend(breaks.iter().copied().filter(|t| *t > 0.0 && *t < std::f64::consts::TAU));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2)
        .map(|w| adaptive(&mut f, w[0], w[1], 1e-13, 1e-11, 4000))
        .sum()
}

/// One explicit Σ₂ cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExteriorCell {
    pub center: Point,
    pub lo: Point,
    pub hi: Point,
    pub weight: f64,
    /// Interior node sharing a face with this cell when both have the Ω spacing.
    pub abuts: Option<usize>,
}

/// Interior kernel weights by lattice offset.
#[derive(Debug, Clone)]
pub struct OffsetTable {
    extent: [usize; 2],
    values: Vec<f64>,
}

impl OffsetTable {
    pub fn get(&self, di: usize, dj: usize) -> f64 {
        self.values[dj * self.extent[0] + di]
    }
}

/// Nodes, weights and exterior kernel masses for a [`DomainSpec`].
#[derive(Debug, Clone)]
pub struct Discretization {
    pub dimension: usize,
    pub kernel: KernelParams,
    pub resolution: usize,
    pub spacing: [f64; 2],
    pub interior: Vec<Point>,
    pub weights: Vec<f64>,
    pub neumann: Vec<ExteriorCell>,
    /// ∫_{Σ₁} |x_i − y|^{−(N+2s)} dy per interior node.
    pub kappa_dirichlet: Vec<f64>,
    /// ∫_{Σ₂ ∖ B_R} |x_i − y|^{−(N+2s)} dy per interior node.
    pub kappa_far: Vec<f64>,
    pub omega_measure: f64,
    pub truncation_radius: f64,
    /// Nearest-neighbour correction per axis (kernel units).
    pub neighbor_correction: [f64; 2],
    pub offsets: OffsetTable,
    pub pair_cap: usize,
}

impl Discretization {
    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_neumann(&self) -> usize {
        self.neumann.len()
    }

    /// Lattice coordinates of interior node `i`.
    pub fn lattice(&self, i: usize) -> (usize, usize) {
        if self.dimension == 1 {
            (i, 0)
        } else {
            (i % self.resolution, i / self.resolution)
        }
    }

    /// Kernel weight between interior nodes `i` ≠ `j` (kernel units), including
    /// the nearest-neighbour correction.
    pub fn interior_pair_weight(&self, i: usize, j: usize) -> f64 {
        let (ai, bi) = self.lattice(i);
        let (aj, bj) = self.lattice(j);
        let di = ai.abs_diff(aj);
        let dj = bi.abs_diff(bj);
        let mut w = self.offsets.get(di, dj);
        if di + dj == 1 {
            w += if di == 1 { self.neighbor_correction[0] } else { self.neighbor_correction[1] };
        }
        w
    }

    /// ∫_{cell} |x_i − y|^{−(N+2s)} dy for a Σ₂ cell, plus the neighbour
    /// correction when the cell abuts node `i`.
    pub fn exterior_pair_weight(&self, i: usize, cell: &ExteriorCell) -> f64 {
        let x = &self.interior[i];
        let s = self.kernel.s;
        let mut w = if self.dimension == 1 {
            segment_kernel_integral(x[0], cell.lo[0], cell.hi[0], s)
        } else {
            rectangle_kernel_integral(x, &cell.lo, &cell.hi, s)
        };
        if cell.abuts == Some(i) {
            let axis = if self.dimension == 1 {
                0
            } else if (cell.center[0] - x[0]).abs() > (cell.center[1] - x[1]).abs() {
                0
            } else {
                1
            };
            w += self.neighbor_correction[axis];
        }
        w
    }

    pub fn max_cell_diameter(&self) -> f64 {
        (0..self.dimension).map(|k| self.spacing[k].powi(2)).sum::<f64>().sqrt()
    }
}

/// Builds the discretization with the default normalization a = 2.
pub fn build_discretization(spec: &DomainSpec, s: f64) -> Result<Discretization> {
    let kernel = KernelParams::new(spec.dimension, s, DEFAULT_NORMALIZATION)?;
    build_discretization_with(spec, kernel)
}

pub fn build_discretization_with(spec: &DomainSpec, kernel: KernelParams) -> Result<Discretization> {
    spec.validate()?;
    if kernel.dimension != spec.dimension {
        return Err(Error::DimensionMismatch { expected: spec.dimension, got: kernel.dimension });
    }
    match spec.dimension {
        1 => build_1d(spec, kernel),
        _ => build_2d(spec, kernel),
    }
}

// ---------------------------------------------------------------------------
// 1D

type Intervals = Vec<(f64, f64)>;

fn merge(mut v: Intervals) -> Intervals {
    v.retain(|(a, b)| b > a);
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Intervals = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect(v: &Intervals, lo: f64, hi: f64) -> Intervals {
    v.iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|(a, b)| b > a)
        .collect()
}

fn complement(v: &Intervals, lo: f64, hi: f64) -> Intervals {
    let mut out = Vec::new();
    let mut cur = lo;
    for &(a, b) in v {
        if a > cur {
            out.push((cur, a.min(hi)));
        }
        cur = cur.max(b);
    }
    if cur < hi {
        out.push((cur, hi));
    }
    merge(out)
}

fn build_1d(spec: &DomainSpec, kernel: KernelParams) -> Result<Discretization> {
    let s = kernel.s;
    let n = spec.resolution;
    let (olo, ohi) = (spec.omega.lo[0], spec.omega.hi[0]);
    let h = (ohi - olo) / n as f64;
    let r = spec.truncation_radius;

    let interior: Vec<Point> = (0..n).map(|i| [olo + (i as f64 + 0.5) * h, 0.0]).collect();
    let weights = vec![h; n];

    let mut raw = Vec::new();
    for reg in &spec.neumann {
        raw.extend(intersect(&vec![(reg.lo[0], reg.hi[0])], f64::NEG_INFINITY, olo));
        raw.extend(intersect(&vec![(reg.lo[0], reg.hi[0])], ohi, f64::INFINITY));
    }
    let sigma2 = merge(raw);
    let exterior = vec![(f64::NEG_INFINITY, olo), (ohi, f64::INFINITY)];
    let sigma1: Intervals = exterior
        .iter()
        .flat_map(|&(a, b)| complement(&intersect(&sigma2, a, b), a, b))
        .collect();
    let near = intersect(&sigma2, -r, r);
    let far: Intervals = intersect(&sigma2, f64::NEG_INFINITY, -r)
        .into_iter()
        .chain(intersect(&sigma2, r, f64::INFINITY))
        .collect();

    let target = h * spec.exterior_resolution as f64;
    let mut neumann = Vec::new();
    for &(a, b) in &near {
        let count = ((b - a) / target).round().max(1.0) as usize;
        let step = (b - a) / count as f64;
        let aligned = (step - h).abs() <= 1e-9 * h;
        for k in 0..count {
            let lo = a + k as f64 * step;
            let hi = if k + 1 == count { b } else { a + (k + 1) as f64 * step };
            let abuts = if !aligned {
                None
            } else if k == 0 && (lo - ohi).abs() <= 1e-12 * h.max(1.0) {
                Some(n - 1)
            } else if k + 1 == count && (hi - olo).abs() <= 1e-12 * h.max(1.0) {
                Some(0)
            } else {
                None
            };
            neumann.push(ExteriorCell {
                center: [0.5 * (lo + hi), 0.0],
                lo: [lo, 0.0],
                hi: [hi, 0.0],
                weight: hi - lo,
                abuts,
            });
        }
    }

    let mass = |x: f64, set: &Intervals| -> f64 {
        set.iter().map(|&(a, b)| segment_kernel_integral(x, a, b, s)).sum()
    };
    let kappa_dirichlet: Vec<f64> = interior.iter().map(|p| mass(p[0], &sigma1)).collect();
    let kappa_far: Vec<f64> = interior.iter().map(|p| mass(p[0], &far)).collect();

    let values: Vec<f64> = (0..n)
        .map(|m| {
            if m == 0 {
                0.0
            } else {
                let c = m as f64 * h;
                segment_kernel_integral(0.0, c - 0.5 * h, c + 0.5 * h, s)
            }
        })
        .collect();
    let gamma = neighbor_correction_1d(s) * h.powf(-2.0 * s);

    Ok(Discretization {
        dimension: 1,
        kernel,
        resolution: n,
        spacing: [h, 0.0],
        interior,
        weights,
        neumann,
        kappa_dirichlet,
        kappa_far,
        omega_measure: ohi - olo,
        truncation_radius: r,
        neighbor_correction: [gamma, 0.0],
        offsets: OffsetTable { extent: [n, 1], values },
        pair_cap: spec.pair_cap,
    })
}

/// Unit-spacing nearest-neighbour weight making the 1D stencil exact on
/// quadratics: own-cell second moment plus the second-moment defects of all
/// other cells, divided by two.
pub fn neighbor_correction_1d(s: f64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("cache poisoned").get(&s.to_bits()) {
        return *v;
    }
    let own = 2.0 * 0.5_f64.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s);
    const TERMS: usize = 4000;
    let rule = gl8();
    let mut defect = 0.0;
    for m in 1..=TERMS {
        let mf = m as f64;
        defect += rule.integrate(mf - 0.5, mf + 0.5, |y| (y - mf) * (y + mf) * y.powf(-1.0 - 2.0 * s));
    }
    // Σ_{m>M} m^{-σ} by Euler–Maclaurin; the cell defect behaves like −(1+4s)/12 m^{-1-2s}.
    let sigma = 1.0 + 2.0 * s;
    let mf = TERMS as f64;
    let zeta_tail = mf.powf(1.0 - sigma) / (sigma - 1.0) - 0.5 * mf.powf(-sigma) + sigma / 12.0 * mf.powf(-sigma - 1.0);
    defect += -(1.0 + 4.0 * s) / 12.0 * zeta_tail;
    let mut gamma = 0.5 * (own + 2.0 * defect);
    let beta1 = segment_kernel_integral(0.0, 0.5, 1.5, s);
    gamma = gamma.max(-0.75 * beta1);
    cache.lock().expect("cache poisoned").insert(s.to_bits(), gamma);
    gamma
}

// ---------------------------------------------------------------------------
// 2D

fn rectangle_kernel_integral(x: &Point, lo: &Point, hi: &Point, s: f64) -> f64 {
    let exponent = 1.0 + s; // |d|^{-(2+2s)} = (|d|^2)^{-(1+s)}
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let size = [hi[0] - lo[0], hi[1] - lo[1]];
    let d2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
    let scale = size[0].max(size[1]);
    if d2 > (4.0 * scale).powi(2) {
        return size[0] * size[1] * d2.powf(-exponent);
    }
    // Near cells: 2x2 sub-cells with an 8x8 tensor rule each.
    let rule = gl8();
    let mut acc = 0.0;
    for sx in 0..2 {
        for sy in 0..2 {
            let a0 = lo[0] + 0.5 * size[0] * sx as f64;
            let b0 = lo[1] + 0.5 * size[1] * sy as f64;
            let a1 = a0 + 0.5 * size[0];
            let b1 = b0 + 0.5 * size[1];
            acc += rule.integrate(a0, a1, |u| {
                rule.integrate(b0, b1, |v| ((x[0] - u).powi(2) + (x[1] - v).powi(2)).powf(-exponent))
            });
        }
    }
    acc
}

/// ∫ over the directions of the measure of the ray set {r : x + r e ∈ S},
/// with S described by `intervals(e)`.
fn ray_mass<F>(s: f64, breaks: &[f64], mut intervals: F) -> f64
where
    F: FnMut(&Point) -> Vec<(f64, f64)>,
{
    angular_integral(
        |theta| {
            let e = [theta.cos(), theta.sin()];
            intervals(&e).into_iter().map(|(a, b)| radial_segment(a, b, s)).sum()
        },
        breaks,
    )
}

fn build_2d(spec: &DomainSpec, kernel: KernelParams) -> Result<Discretization> {
    let s = kernel.s;
    let n = spec.resolution;
    let lo = [spec.omega.lo[0], spec.omega.lo[1]];
    let hi = [spec.omega.hi[0], spec.omega.hi[1]];
    let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    let r = spec.truncation_radius;
    let cell_area = h[0] * h[1];

    let mut interior = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            interior.push([lo[0] + (i as f64 + 0.5) * h[0], lo[1] + (j as f64 + 0.5) * h[1]]);
        }
    }
    let weights = vec![cell_area; n * n];

    // Σ₂ ∩ B_R cells on a grid aligned with Ω's corner.
    let m = spec.exterior_resolution as f64;
    let hx = [h[0] * m, h[1] * m];
    let imin = ((-r - lo[0]) / hx[0]).floor() as i64;
    let imax = ((r - lo[0]) / hx[0]).ceil() as i64;
    let jmin = ((-r - lo[1]) / hx[1]).floor() as i64;
    let jmax = ((r - lo[1]) / hx[1]).ceil() as i64;
    let mut neumann = Vec::new();
    for j in jmin..jmax {
        for i in imin..imax {
            let clo = [lo[0] + i as f64 * hx[0], lo[1] + j as f64 * hx[1]];
            let chi = [clo[0] + hx[0], clo[1] + hx[1]];
            let c = [0.5 * (clo[0] + chi[0]), 0.5 * (clo[1] + chi[1])];
            if c[0] * c[0] + c[1] * c[1] >= r * r || !spec.in_neumann(&c) {
                continue;
            }
            let abuts = if spec.exterior_resolution == 1 {
                abutting_node(&c, &lo, &hi, &h, n)
            } else {
                None
            };
            neumann.push(ExteriorCell { center: c, lo: clo, hi: chi, weight: hx[0] * hx[1], abuts });
        }
    }

    let corner_breaks = |x: &Point| -> Vec<f64> {
        let mut v: Vec<f64> = [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
            .iter()
            .map(|c| (c[1] - x[1]).atan2(c[0] - x[0]).rem_euclid(std::f64::consts::TAU))
            .collect();
        for reg in &spec.neumann {
            for cx in [reg.lo[0], reg.hi[0]] {
                for cy in [reg.lo[1], reg.hi[1]] {
                    if cx.is_finite() && cy.is_finite() {
                        v.push((cy - x[1]).atan2(cx - x[0]).rem_euclid(std::f64::consts::TAU));
                    }
                }
            }
        }
        v
    };
    let omega_box = Region::rectangle(lo, hi);
    let neumann_sets = |x: &Point, e: &Point| -> (f64, Intervals) {
        let exit = omega_box.ray_interval(x, e, 2).map(|(_, t1)| t1).unwrap_or(0.0);
        let raw: Intervals = spec
            .neumann
            .iter()
            .filter_map(|reg| reg.ray_interval(x, e, 2))
            .collect();
        (exit, intersect(&merge(raw), exit, f64::INFINITY))
    };
    let masses: Vec<(f64, f64)> = interior
        .par_iter()
        .map(|x| {
            let breaks = corner_breaks(x);
            let k1 = ray_mass(s, &breaks, |e| {
                let (exit, n2) = neumann_sets(x, e);
                complement(&n2, exit, f64::INFINITY)
            });
            let kf = ray_mass(s, &breaks, |e| {
                let (_, n2) = neumann_sets(x, e);
                let tr = ray_exit_ball(x, e, r);
                intersect(&n2, tr, f64::INFINITY)
            });
            (k1, kf)
        })
        .collect();
    let kappa_dirichlet = masses.iter().map(|m| m.0).collect();
    let kappa_far = masses.iter().map(|m| m.1).collect();

    let values: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (di, dj) = (idx % n, idx / n);
            if di == 0 && dj == 0 {
                return 0.0;
            }
            let c = [di as f64 * h[0], dj as f64 * h[1]];
            let clo = [c[0] - 0.5 * h[0], c[1] - 0.5 * h[1]];
            let chi = [c[0] + 0.5 * h[0], c[1] + 0.5 * h[1]];
            rectangle_kernel_integral(&[0.0, 0.0], &clo, &chi, s)
        })
        .collect();

    // Own-cell second moments ∫_cell y_k^2 |y|^{-2-2s} dy / (2 h_k^2).
    let half = [0.5 * h[0], 0.5 * h[1]];
    let rho = |theta: f64| -> f64 {
        let (c, sn) = (theta.cos().abs(), theta.sin().abs());
        let tx = if c > 0.0 { half[0] / c } else { f64::INFINITY };
        let ty = if sn > 0.0 { half[1] / sn } else { f64::INFINITY };
        tx.min(ty)
    };
    let diag_angle = half[1].atan2(half[0]);
    let breaks = [
        diag_angle,
        std::f64::consts::PI - diag_angle,
        std::f64::consts::PI + diag_angle,
        std::f64::consts::TAU - diag_angle,
    ];
    let moment = |axis: usize| {
        angular_integral(
            |t| {
                let c = if axis == 0 { t.cos() } else { t.sin() };
                c * c * rho(t).powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s)
            },
            &breaks,
        )
    };
    let neighbor_correction = [moment(0) / (2.0 * h[0] * h[0]), moment(1) / (2.0 * h[1] * h[1])];

    Ok(Discretization {
        dimension: 2,
        kernel,
        resolution: n,
        spacing: h,
        interior,
        weights,
        neumann,
        kappa_dirichlet,
        kappa_far,
        omega_measure: (hi[0] - lo[0]) * (hi[1] - lo[1]),
        truncation_radius: r,
        neighbor_correction,
        offsets: OffsetTable { extent: [n, n], values },
        pair_cap: spec.pair_cap,
    })
}

fn abutting_node(c: &Point, lo: &Point, hi: &Point, h: &[f64; 2], n: usize) -> Option<usize> {
    let inside = |v: f64, a: f64, b: f64| v > a && v < b;
    let index = |v: f64, a: f64, hk: f64| ((v - a) / hk).floor() as usize;
    if inside(c[1], lo[1], hi[1]) {
        let j = index(c[1], lo[1], h[1]);
        if (c[0] - (lo[0] - 0.5 * h[0])).abs() < 1e-9 * h[0] {
            return Some(j * n);
        }
        if (c[0] - (hi[0] + 0.5 * h[0])).abs() < 1e-9 * h[0] {
            return Some(j * n + n - 1);
        }
    }
    if inside(c[0], lo[0], hi[0]) {
        let i = index(c[0], lo[0], h[0]);
        if (c[1] - (lo[1] - 0.5 * h[1])).abs() < 1e-9 * h[1] {
            return Some(i);
        }
        if (c[1] - (hi[1] + 0.5 * h[1])).abs() < 1e-9 * h[1] {
            return Some((n - 1) * n + i);
        }
    }
    None
}
