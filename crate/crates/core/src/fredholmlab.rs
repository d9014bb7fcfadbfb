//! Finite sections of difference operators, regularized derivatives and the
//! stripe linearization between algebraically weighted spaces, and numerical
//! kernel/cokernel counts for them.
//!
//! A section keeps only the rows whose stencil lies inside the index window
//! `[-N, N]`, so polynomial kernels stay exact at finite `N`. Every exact null
//! vector of the section is a candidate; it counts as a kernel element of the
//! operator on the weighted space when its weighted mass does not pile up at
//! the truncation edges. Cokernels are kernels of the adjoint section, which
//! acts between the dual weights.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::stripes::{partial_k, StripeSolution};

/// `<x>^gamma = (1 + x^2)^(gamma/2)`, with the exponent chosen by the side of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub p: f64,
}

impl WeightSpec {
    pub fn new(gamma_minus: f64, gamma_plus: f64) -> Self {
        WeightSpec { gamma_minus, gamma_plus, p: 2.0 }
    }

    pub fn isotropic(gamma: f64) -> Self {
        Self::new(gamma, gamma)
    }

    pub fn with_p(self, p: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::InvalidInput(format!("Lebesgue exponent p={p} outside (1, inf)")));
        }
        Ok(WeightSpec { p, ..self })
    }

    pub fn exponent(&self, x: f64) -> f64 {
        if x < 0.0 {
            self.gamma_minus
        } else {
            self.gamma_plus
        }
    }

    pub fn weight(&self, x: f64) -> f64 {
        (1.0 + x * x).powf(0.5 * self.exponent(x))
    }

    /// Both exponents shifted by `d`.
    pub fn shifted(&self, d: f64) -> Self {
        WeightSpec {
            gamma_minus: self.gamma_minus + d,
            gamma_plus: self.gamma_plus + d,
            p: self.p,
        }
    }

    /// Weights of the dual space.
    pub fn dual(&self) -> Self {
        WeightSpec {
            gamma_minus: -self.gamma_minus,
            gamma_plus: -self.gamma_plus,
            p: self.p / (self.p - 1.0),
        }
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_minus.min(self.gamma_plus)
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_minus.max(self.gamma_plus)
    }

    /// Is either exponent in `{1 - 1/p, ..., ell - 1/p}`?
    pub fn is_borderline(&self, ell: usize) -> bool {
        let f = forbidden_weights(ell, self.p);
        [self.gamma_minus, self.gamma_plus]
            .iter()
            .any(|g| f.iter().any(|b| (g - b).abs() < 1e-12))
    }
}

/// `{1 - 1/p, 2 - 1/p, ..., ell - 1/p}`.
pub fn forbidden_weights(ell: usize, p: f64) -> Vec<f64> {
    (1..=ell).map(|j| j as f64 - 1.0 / p).collect()
}

/// Index `j` of the interval `I_j` containing `gamma`: `I_0 = (-inf, 1 - 1/p)`,
/// `I_j = (j - 1/p, j + 1 - 1/p)`, `I_ell = (ell - 1/p, inf)`.
pub fn weight_interval(gamma: f64, ell: usize, p: f64) -> usize {
    forbidden_weights(ell, p).iter().filter(|&&b| gamma > b).count()
}

/// Kernel and cokernel dimensions of an `ell`-th order derivative (continuous
/// or discrete) between weights `gamma - ell` and `gamma`.
pub fn predicted_dims(ell: usize, w: &WeightSpec) -> (usize, usize) {
    let jmin = weight_interval(w.gamma_min(), ell, w.p);
    let jmax = weight_interval(w.gamma_max(), ell, w.p);
    (ell - jmax, jmin)
}

/// Translation-invariant operators on the lattice (or on a uniform grid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// `delta_+^(ell - i) delta_-^i` on the integer lattice.
    Difference { ell: usize, i: usize },
    /// Compact difference quotient for `d^ell/dx^ell` on the grid `x_j = j h`.
    Stencil { ell: usize, h: f64 },
    /// Lattice version of `d^ell (1 + d)^(-ell)`: `delta_+^ell (1 + delta_-)^(-ell)`.
    Regularized { ell: usize },
}

impl OperatorKind {
    pub fn ell(&self) -> usize {
        match *self {
            OperatorKind::Difference { ell, .. }
            | OperatorKind::Stencil { ell, .. }
            | OperatorKind::Regularized { ell } => ell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OperatorKind::Difference { ell, i } if ell == 0 || i > ell => {
                Err(Error::InvalidInput(format!("difference operator needs 0 <= i <= ell, ell >= 1 (ell={ell}, i={i})")))
            }
            OperatorKind::Stencil { ell, h } if ell == 0 || !(h > 0.0) => {
                Err(Error::InvalidInput(format!("stencil needs ell >= 1 and h > 0 (ell={ell}, h={h})")))
            }
            OperatorKind::Regularized { ell: 0 } => Err(Error::InvalidInput("regularized derivative needs ell >= 1".into())),
            _ => Ok(()),
        }
    }

    fn symbol(&self) -> Symbol {
        match *self {
            OperatorKind::Difference { ell, i } => {
                // delta_-^i delta_+^(ell-i) = E^(-i) (E - 1)^ell
                Symbol {
                    lo: -(i as i64),
                    coeffs: binomial_difference(ell),
                    h: 1.0,
                    row_shift: 0.0,
                }
            }
            OperatorKind::Stencil { ell, h } => {
                let i = ell / 2;
                let scale = h.powi(-(ell as i32));
                Symbol {
                    lo: -(i as i64),
                    coeffs: binomial_difference(ell).into_iter().map(|c| c * scale).collect(),
                    h,
                    row_shift: 0.5 * (ell as f64 - 2.0 * i as f64) * h,
                }
            }
            OperatorKind::Regularized { ell } => {
                // (1 + delta_-)^(-1) = sum_m 2^(-m-1) E^(-m); truncated where the tail is below 1e-17
                let mut s = vec![1.0];
                let mut inv = Vec::new();
                let mut c = 0.5;
                while c > 1e-18 {
                    inv.push(c);
                    c *= 0.5;
                }
                for _ in 0..ell {
                    s = convolve(&s, &inv);
                }
                let peak = s.iter().cloned().fold(0.0, f64::max);
                while s.last().is_some_and(|&v| v < 1e-17 * peak) {
                    s.pop();
                }
                // s is indexed by m >= 0 for E^(-m); reverse to ascending offsets
                s.reverse();
                let m = s.len() as i64 - 1;
                Symbol {
                    lo: -m,
                    coeffs: convolve(&s, &binomial_difference(ell)),
                    h: 1.0,
                    row_shift: 0.0,
                }
            }
        }
    }
}

fn binomial_difference(ell: usize) -> Vec<f64> {
    // coefficients of (E - 1)^ell in ascending powers of E
    let mut c = vec![1.0];
    for _ in 0..ell {
        let mut next = vec![0.0; c.len() + 1];
        for (k, &v) in c.iter().enumerate() {
            next[k + 1] += v;
            next[k] -= v;
        }
        c = next;
    }
    c
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Row `r` of a Toeplitz operator: `(Au)_r = sum_k coeffs[k] u_{r + lo + k}`.
#[derive(Debug, Clone, PartialEq)]
struct Symbol {
    lo: i64,
    coeffs: Vec<f64>,
    h: f64,
    row_shift: f64,
}

impl Symbol {
    fn hi(&self) -> i64 {
        self.lo + self.coeffs.len() as i64 - 1
    }

    fn adjoint(&self) -> Symbol {
        let mut coeffs = self.coeffs.clone();
        coeffs.reverse();
        Symbol {
            lo: -self.hi(),
            coeffs,
            h: self.h,
            row_shift: -self.row_shift,
        }
    }
}

/// Sampled periodic stripe on a grid that the linearization stencil resolves exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStripe {
    pub mu: f64,
    pub k: f64,
    pub h: f64,
    /// One period of samples at `x_j = j h`.
    pub samples: Vec<f64>,
    pub residual_norm: f64,
}

impl DiscreteStripe {
    fn at(&self, j: i64) -> f64 {
        let m = self.samples.len() as i64;
        self.samples[j.rem_euclid(m) as usize]
    }
}

const SH_HALF: usize = 4;
// sixth-order centred second and fourth differences
const D2_6: [f64; 7] = [1.0 / 90.0, -3.0 / 20.0, 1.5, -49.0 / 18.0, 1.5, -3.0 / 20.0, 1.0 / 90.0];
const D4_6: [f64; 9] = [
    7.0 / 240.0,
    -0.4,
    169.0 / 60.0,
    -122.0 / 15.0,
    91.0 / 8.0,
    -122.0 / 15.0,
    169.0 / 60.0,
    -0.4,
    7.0 / 240.0,
];

fn sh_row(mu: f64, h: f64, u: f64) -> [f64; 2 * SH_HALF + 1] {
    // -(d^4 + 2 d^2 + 1) + mu - 3 u^2
    let h2 = h * h;
    let mut row = [0.0; 2 * SH_HALF + 1];
    for (r, d) in row.iter_mut().zip(D4_6) {
        *r = -d / (h2 * h2);
    }
    for (q, d) in D2_6.iter().enumerate() {
        row[q + 1] -= 2.0 * d / h2;
    }
    row[SH_HALF] += mu - 1.0 - 3.0 * u * u;
    row
}

/// Solves the periodic finite-difference stripe equation on `points_per_period`
/// nodes, starting from samples of the spectral stripe.
pub fn discrete_stripe(sol: &StripeSolution, points_per_period: usize) -> Result<DiscreteStripe> {
    let m = points_per_period;
    if m < 16 {
        return Err(Error::InvalidInput(format!("need at least 16 points per period, got {m}")));
    }
    let h = sol.period() / m as f64;
    let mut u: Vec<f64> = (0..m).map(|j| sol.eval_x(j as f64 * h, 0.0)[0]).collect();
    let residual = |u: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut r = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, m);
        for j in 0..m {
            let row = sh_row(sol.mu, h, 0.0);
            let mut acc = 0.0;
            for (q, &c) in row.iter().enumerate() {
                let col = (j as i64 + q as i64 - SH_HALF as i64).rem_euclid(m as i64) as usize;
                acc += c * u[col];
                jac[(j, col)] += c;
            }
            r[j] = acc - u[j].powi(3);
            jac[(j, j)] -= 3.0 * u[j] * u[j];
        }
        (r, jac)
    };
    let mut norm = f64::INFINITY;
    for _ in 0..30 {
        let (r, jac) = residual(&u);
        norm = r.amax();
        if norm < 1e-13 {
            break;
        }
        // the near-null translation mode is dropped by the pseudo-inverse
        let svd = SVD::new(jac, true, true);
        let cut = 1e-9 * svd.singular_values.max();
        let du = svd.solve(&r, cut).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for (a, d) in u.iter_mut().zip(du.iter()) {
            *a -= d;
        }
    }
    if norm > 1e-10 {
        return Err(Error::MaxIterations { iterations: 30, residual: norm });
    }
    // the profile is even; make the samples exactly so
    let even: Vec<f64> = (0..m).map(|j| 0.5 * (u[j] + u[(m - j) % m])).collect();
    let u = even;
    Ok(DiscreteStripe {
        mu: sol.mu,
        k: sol.k,
        h,
        samples: u,
        residual_norm: norm,
    })
}

#[derive(Debug, Clone)]
enum Source {
    Toeplitz { kind: OperatorKind, symbol: Symbol },
    Sh(Arc<DiscreteStripe>),
}

/// Unweighted finite section together with the positions of rows and columns.
#[derive(Debug, Clone)]
pub struct Section {
    pub matrix: DMatrix<f64>,
    pub row_x: Vec<f64>,
    pub col_x: Vec<f64>,
    /// Lattice index of each column, in `[-N, N]`.
    pub col_index: Vec<i64>,
}

/// Finite section conjugated by the weights: `W_codomain A W_domain^{-1}`.
#[derive(Debug, Clone)]
pub struct WeightedOperator {
    pub label: String,
    pub ell: usize,
    pub n: usize,
    /// Codomain weights; the domain carries `gamma - ell`.
    pub weights: WeightSpec,
    pub section: Section,
    pub conjugated: DMatrix<f64>,
    /// Singular values of the row-equilibrated, zero-padded square section,
    /// descending; the null directions are read off from these.
    pub null_svals: Vec<f64>,
    blocks: Vec<NullBlock>,
    source: Source,
    adjoint: bool,
}

/// Builds the weighted finite section of a lattice or grid operator.
pub fn discrete_weighted_operator(
    kind: OperatorKind,
    n: usize,
    weights: WeightSpec,
    allow_borderline: bool,
) -> Result<WeightedOperator> {
    kind.validate()?;
    let ell = kind.ell();
    if n < 64 {
        return Err(Error::InvalidInput(format!("section half-size N={n} below 64")));
    }
    if !allow_borderline && weights.is_borderline(ell) {
        let g = if weights.is_borderline_side(ell, weights.gamma_minus) {
            weights.gamma_minus
        } else {
            weights.gamma_plus
        };
        return Err(Error::BorderlineWeight(g));
    }
    let symbol = kind.symbol();
    Ok(build(Source::Toeplitz { kind, symbol }, ell, n, weights, false))
}

/// Weighted section of the stripe linearization `-(1 + d^2)^2 + mu - 3 u_p^2`
/// (domain weight `gamma - 2`).
pub fn sh_weighted_operator(stripe: Arc<DiscreteStripe>, n: usize, weights: WeightSpec) -> Result<WeightedOperator> {
    if n < 64 {
        return Err(Error::InvalidInput(format!("section half-size N={n} below 64")));
    }
    if weights.is_borderline(2) {
        return Err(Error::BorderlineWeight(weights.gamma_min()));
    }
    Ok(build(Source::Sh(stripe), 2, n, weights, false))
}

impl WeightSpec {
    fn is_borderline_side(&self, ell: usize, g: f64) -> bool {
        forbidden_weights(ell, self.p).iter().any(|b| (g - b).abs() < 1e-12)
    }
}

fn build(source: Source, ell: usize, n: usize, weights: WeightSpec, adjoint: bool) -> WeightedOperator {
    let ni = n as i64;
    let cols: Vec<i64> = (-ni..=ni).collect();
    let (rows, label, h, entries): (Vec<i64>, String, f64, Vec<(usize, usize, f64)>);
    let mut row_x = Vec::new();
    match &source {
        Source::Toeplitz { kind, symbol } => {
            let sym = if adjoint { symbol.adjoint() } else { symbol.clone() };
            rows = (-ni - sym.lo..=ni - sym.hi()).collect();
            let mut e = Vec::new();
            for (ri, &r) in rows.iter().enumerate() {
                row_x.push(r as f64 * sym.h + sym.row_shift);
                for (q, &c) in sym.coeffs.iter().enumerate() {
                    let col = r + sym.lo + q as i64;
                    e.push((ri, (col + ni) as usize, c));
                }
            }
            entries = e;
            h = sym.h;
            label = format!("{kind:?}{}", if adjoint { "*" } else { "" });
        }
        Source::Sh(stripe) => {
            // symmetric stencil and diagonal potential: the adjoint has the same section
            rows = (-ni + SH_HALF as i64..=ni - SH_HALF as i64).collect();
            let mut e = Vec::new();
            for (ri, &r) in rows.iter().enumerate() {
                row_x.push(r as f64 * stripe.h);
                let st = sh_row(stripe.mu, stripe.h, stripe.at(r));
                for (q, &c) in st.iter().enumerate() {
                    e.push((ri, (r + q as i64 - SH_HALF as i64 + ni) as usize, c));
                }
            }
            entries = e;
            h = stripe.h;
            label = format!("sh-linearization{}", if adjoint { "*" } else { "" });
        }
    }
    let col_x: Vec<f64> = cols.iter().map(|&c| c as f64 * h).collect();
    let mut a = DMatrix::zeros(rows.len(), cols.len());
    for &(r, c, v) in &entries {
        a[(r, c)] += v;
    }
    let dom = weights.shifted(-(ell as f64));
    let wr: Vec<f64> = row_x.iter().map(|&x| weights.weight(x)).collect();
    let wc: Vec<f64> = col_x.iter().map(|&x| dom.weight(x)).collect();
    let conjugated = DMatrix::from_fn(rows.len(), cols.len(), |r, c| wr[r] * a[(r, c)] / wc[c]);

    // Reflection-symmetric sections split into even and odd blocks.
    let symmetric = matches!(source, Source::Sh(_)) && weights.gamma_minus == weights.gamma_plus;
    let blocks = if symmetric {
        vec![parity_block(&conjugated, ni, 1.0), parity_block(&conjugated, ni, -1.0)]
    } else {
        vec![null_block(&conjugated)]
    };
    let mut null_svals: Vec<f64> = blocks.iter().flat_map(|b| b.svals.iter().copied()).collect();
    null_svals.sort_by(|a, b| b.total_cmp(a));

    WeightedOperator {
        label,
        ell,
        n,
        weights,
        section: Section {
            matrix: a,
            row_x,
            col_x,
            col_index: cols,
        },
        conjugated,
        null_svals,
        blocks,
        source,
        adjoint,
    }
}

/// Singular values (descending) of one invariant block and the matching right
/// singular vectors, lifted to full column coordinates.
#[derive(Debug, Clone)]
struct NullBlock {
    svals: Vec<f64>,
    right: DMatrix<f64>,
}

// Row equilibration leaves the right null space unchanged and removes the
// N^ell spread of the row scales, so the null cluster separates cleanly.
// Padding to square makes the SVD return a full set of right singular vectors.
fn null_block(a: &DMatrix<f64>) -> NullBlock {
    let (rows, m) = a.shape();
    let row_norms: Vec<f64> = (0..rows).map(|r| a.row(r).norm()).collect();
    let size = rows.max(m);
    let padded = faer::Mat::<f64>::from_fn(size, m, |r, c| if r < rows { a[(r, c)] / row_norms[r] } else { 0.0 });
    let svd = padded.svd().expect("SVD of a finite matrix");
    let s_diag = svd.S().column_vector();
    let v = svd.V();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| s_diag[j].total_cmp(&s_diag[i]));
    NullBlock {
        svals: order.iter().map(|&i| s_diag[i]).collect(),
        right: DMatrix::from_fn(m, m, |r, c| v[(r, order[c])]),
    }
}

/// Even (`sign = 1`) or odd (`sign = -1`) block of a section whose rows and
/// columns are symmetric about index 0, with rows `r0..` offset so row `i`
/// sits at index `i - rows/2`.
fn parity_block(a: &DMatrix<f64>, n: i64, sign: f64) -> NullBlock {
    let rows = a.nrows() as i64;
    let rc = rows / 2;
    let start = if sign > 0.0 { 0 } else { 1 };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // p(j) = (e_j + sign e_{-j}) / sqrt 2, or e_0 alone
    let combo = |j: i64| -> Vec<(i64, f64)> { if j == 0 { vec![(0, 1.0)] } else { vec![(j, s), (-j, sign * s)] } };
    let cols: Vec<i64> = (start..=n).collect();
    let rws: Vec<i64> = (start..=rc).collect();
    let reduced = DMatrix::from_fn(rws.len(), cols.len(), |i, j| {
        let mut acc = 0.0;
        for (r, wr) in combo(rws[i]) {
            for (c, wc) in combo(cols[j]) {
                acc += wr * wc * a[((r + rc) as usize, (c + n) as usize)];
            }
        }
        acc
    });
    let blk = null_block(&reduced);
    let m = a.ncols();
    let mut right = DMatrix::zeros(m, cols.len());
    for (j, &c) in cols.iter().enumerate() {
        for (idx, w) in combo(c) {
            let r = (idx + n) as usize;
            for k in 0..cols.len() {
                right[(r, k)] += w * blk.right[(j, k)];
            }
        }
    }
    NullBlock { svals: blk.svals, right }
}

impl WeightedOperator {
    /// Section of the adjoint, acting from the dual codomain weight `-gamma`
    /// into `ell - gamma`.
    pub fn adjoint(&self) -> WeightedOperator {
        let w = self.weights.dual().shifted(self.ell as f64);
        let w = WeightSpec { p: self.weights.p, ..w };
        build(self.source.clone(), self.ell, self.n, w, !self.adjoint)
    }

    /// Same operator and weights on a different window.
    pub fn resized(&self, n: usize) -> WeightedOperator {
        build(self.source.clone(), self.ell, n, self.weights, self.adjoint)
    }

    /// Singular values of `conjugated`, descending.
    pub fn svals(&self) -> Vec<f64> {
        let m = &self.conjugated;
        let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)]);
        let mut v = f.singular_values().expect("singular values of a finite matrix");
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn domain_weights(&self) -> WeightSpec {
        self.weights.shifted(-(self.ell as f64))
    }

    /// Applies the conjugated section to a vector in domain coordinates.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.conjugated * v
    }

    /// Maps a function sampled at the columns into conjugated domain coordinates.
    pub fn to_domain_coords(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let dom = self.domain_weights();
        DVector::from_iterator(self.section.col_x.len(), self.section.col_x.iter().map(|&x| dom.weight(x) * f(x)))
    }
}

/// Thresholds for counting null directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullCounting {
    /// Singular values below `rel_tol * sigma_max` count as zero.
    pub rel_tol: f64,
    /// Required ratio between the smallest nonzero and largest zero singular value.
    pub gap_factor: f64,
    /// Null directions whose weighted mass beyond `|index| > N/2` exceeds this
    /// fraction are truncation artifacts.
    pub edge_tol: f64,
}

impl Default for NullCounting {
    fn default() -> Self {
        NullCounting {
            rel_tol: 1e-10,
            gap_factor: 1e4,
            edge_tol: 0.05,
        }
    }
}

/// Null space of one section, split into localized and edge-dominated directions.
#[derive(Debug, Clone)]
pub struct NullReport {
    /// Exact null directions of the section.
    pub structural: usize,
    /// Ratio between the smallest nonzero and the largest zero singular value.
    pub sv_gap: f64,
    /// Edge mass fractions of the null directions, ascending.
    pub edge_fractions: Vec<f64>,
    pub genuine: usize,
    /// Orthonormal basis of the whole null space (conjugated domain coordinates).
    pub null_basis: DMatrix<f64>,
    /// Orthonormal basis of the localized directions.
    pub genuine_basis: DMatrix<f64>,
}

impl NullReport {
    /// Ratio between the smallest artifact and the largest genuine edge fraction.
    pub fn edge_separation(&self) -> f64 {
        let g = self.genuine;
        let lo = if g == 0 { 0.0 } else { self.edge_fractions[g - 1] };
        let hi = self.edge_fractions.get(g).copied().unwrap_or(1.0);
        hi / lo.max(1e-300)
    }
}

pub fn null_report(op: &WeightedOperator, c: &NullCounting) -> Result<NullReport> {
    let thr = c.rel_tol * op.null_svals[0];
    let mut sv_gap = f64::INFINITY;
    let mut cols = Vec::new();
    for b in &op.blocks {
        let sv = &b.svals;
        let m = sv.len();
        let zero = sv.iter().filter(|&&s| s <= thr).count();
        let largest_zero = if zero == 0 { 0.0 } else { sv[m - zero] };
        let smallest_nonzero = if zero == m { f64::INFINITY } else { sv[m - zero - 1] };
        let gap = smallest_nonzero / largest_zero.max(f64::MIN_POSITIVE);
        if gap < c.gap_factor {
            let count = |t: f64| op.null_svals.iter().filter(|&&s| s <= t).count();
            return Err(Error::NoCleanGap { small: count(thr), large: count(thr * c.gap_factor) });
        }
        sv_gap = sv_gap.min(gap);
        cols.extend(b.right.columns(m - zero, zero).column_iter().map(|v| v.into_owned()));
    }
    let zero = cols.len();
    let v0 = DMatrix::from_fn(op.section.col_index.len(), zero, |r, k| cols[k][r]);
    let half = op.n as i64 / 2;
    let edge = DMatrix::from_fn(zero, zero, |a, b| {
        op.section
            .col_index
            .iter()
            .enumerate()
            .filter(|(_, &i)| i.abs() > half)
            .map(|(r, _)| v0[(r, a)] * v0[(r, b)])
            .sum::<f64>()
    });
    let eig = SymmetricEigen::new(edge);
    let mut order: Vec<usize> = (0..zero).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let edge_fractions: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let genuine = edge_fractions.iter().filter(|&&f| f < c.edge_tol).count();
    let mut genuine_basis = DMatrix::zeros(v0.nrows(), genuine);
    for (col, &i) in order.iter().take(genuine).enumerate() {
        genuine_basis.set_column(col, &(&v0 * eig.eigenvectors.column(i)));
    }
    Ok(NullReport {
        structural: zero,
        sv_gap,
        edge_fractions,
        genuine,
        null_basis: v0,
        genuine_basis,
    })
}

/// Gap diagnostics behind a dimension count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub kernel_sv_gap: f64,
    pub cokernel_sv_gap: f64,
    pub kernel_edge_separation: f64,
    pub cokernel_edge_separation: f64,
    /// Dimensions found on the doubled window.
    pub refined: (usize, usize),
}

impl GapReport {
    /// Smallest of the singular value gaps.
    pub fn min_sv_gap(&self) -> f64 {
        self.kernel_sv_gap.min(self.cokernel_sv_gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FredholmDims {
    pub dim_ker: usize,
    pub dim_coker: usize,
    pub gap: GapReport,
}

impl FredholmDims {
    pub fn index(&self) -> i64 {
        self.dim_ker as i64 - self.dim_coker as i64
    }
}

fn dims_once(op: &WeightedOperator, c: &NullCounting) -> Result<(NullReport, NullReport)> {
    let ker = null_report(op, c)?;
    let cok = null_report(&op.adjoint(), c)?;
    Ok((ker, cok))
}

/// Kernel and cokernel dimensions, confirmed on the window `2N`.
///
/// The edge test resolves algebraic tails only away from the forbidden
/// weights. At `N` of order 100 counts are reliable when every exponent is at
/// least 1/2 from the forbidden set (1/4 for `ell = 1`, 3/4 for anisotropic
/// `ell = 3`); closer in, null combinations that vanish at one truncation edge
/// can pass as kernel elements.
pub fn kernel_cokernel_dims(op: &WeightedOperator, gap_factor: f64) -> Result<FredholmDims> {
    let c = NullCounting {
        gap_factor,
        ..NullCounting::default()
    };
    kernel_cokernel_dims_with(op, &c)
}

pub fn kernel_cokernel_dims_with(op: &WeightedOperator, c: &NullCounting) -> Result<FredholmDims> {
    if op.weights.is_borderline(op.ell) {
        return Err(Error::BorderlineWeight(op.weights.gamma_min()));
    }
    let margin = forbidden_weights(op.ell, op.weights.p)
        .iter()
        .flat_map(|b| [(op.weights.gamma_minus - b).abs(), (op.weights.gamma_plus - b).abs()])
        .fold(f64::INFINITY, f64::min);
    if op.ell >= 2 && margin < 0.5 {
        log::warn!("weights within {margin:.3} of a forbidden value; counts at N={} may be unreliable", op.n);
    }
    let (ker, cok) = dims_once(op, c)?;
    let (ker2, cok2) = dims_once(&op.resized(2 * op.n), c)?;
    let coarse = (ker.genuine, cok.genuine);
    let fine = (ker2.genuine, cok2.genuine);
    if coarse != fine {
        return Err(Error::UnstableDims { n: op.n, coarse, fine });
    }
    Ok(FredholmDims {
        dim_ker: coarse.0,
        dim_coker: coarse.1,
        gap: GapReport {
            kernel_sv_gap: ker.sv_gap.min(ker2.sv_gap),
            cokernel_sv_gap: cok.sv_gap.min(cok2.sv_gap),
            kernel_edge_separation: ker.edge_separation().min(ker2.edge_separation()),
            cokernel_edge_separation: cok.edge_separation().min(cok2.edge_separation()),
            refined: fine,
        },
    })
}

/// Largest principal angle between `a` and `b` (orthonormal columns); for
/// unequal dimensions the smaller space is measured against the larger one.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (small, big) = if a.ncols() <= b.ncols() { (a, b) } else { (b, a) };
    if small.ncols() == 0 {
        return 0.0;
    }
    let proj = big.transpose() * small;
    let s = proj.clone().svd(false, false).singular_values;
    let cmin = s.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
    // sin is better conditioned than acos for tiny angles
    let resid = small - big * &proj;
    let smax = resid.svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max);
    if cmin > 0.5 {
        smax.asin()
    } else {
        cmin.acos()
    }
}

/// Principal angle between two column spaces restricted to the inner quarter
/// of the window, away from the edge layers where truncation modes live.
pub fn interior_angle(op: &WeightedOperator, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let quarter = op.n as i64 / 4;
    let keep: Vec<usize> = op
        .section
        .col_index
        .iter()
        .enumerate()
        .filter(|(_, &i)| i.abs() <= quarter)
        .map(|(r, _)| r)
        .collect();
    let restrict = |m: &DMatrix<f64>| orthonormalize(m.select_rows(keep.iter()));
    subspace_angle(&restrict(a), &restrict(b))
}

/// Orthonormal basis of the columns of `m` (thin QR).
pub fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m;
    }
    m.qr().q()
}

/// Weighted polynomials of degree `< degree` at the section columns.
pub fn weighted_polynomials(op: &WeightedOperator, degree: usize) -> DMatrix<f64> {
    let scale = op.section.col_x.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    let cols: Vec<DVector<f64>> = (0..degree)
        .map(|q| op.to_domain_coords(|x| (x / scale).powi(q as i32)))
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(op.section.col_x.len(), 0);
    }
    orthonormalize(DMatrix::from_columns(&cols))
}

/// Largest principal angle between the weighted polynomials of degree
/// `< expected_degree` and the computed null space of the section.
pub fn polynomial_kernel_check(op: &WeightedOperator, expected_degree: usize) -> Result<f64> {
    if expected_degree == 0 {
        return Ok(0.0);
    }
    let rep = null_report(op, &NullCounting::default())?;
    let poly = weighted_polynomials(op, expected_degree);
    let angle = subspace_angle(&poly, &rep.null_basis);
    if angle > 1e-6 {
        return Err(Error::SubspaceMismatch(angle));
    }
    Ok(angle)
}

/// Smooth plateau: 1 on `|s| <= 1`, 0 on `|s| >= 2`.
pub fn plateau(s: f64) -> f64 {
    let t = s.abs() - 1.0;
    if t <= 0.0 {
        return 1.0;
    }
    if t >= 1.0 {
        return 0.0;
    }
    let f = |y: f64| if y > 0.0 { (-1.0 / y).exp() } else { 0.0 };
    f(1.0 - t) / (f(1.0 - t) + f(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorderlineRow {
    pub n: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorderlineTable {
    pub kind: OperatorKind,
    pub gamma: f64,
    /// Degree of the polynomial factor in the test family.
    pub degree: usize,
    pub rows: Vec<BorderlineRow>,
    /// Least-squares slope of `log r_n` against `log n`.
    pub exponent: f64,
}

impl BorderlineTable {
    pub fn is_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].ratio < w[0].ratio)
    }

    /// `r_first / r_last`.
    pub fn decay_factor(&self) -> f64 {
        self.rows[0].ratio / self.rows[self.rows.len() - 1].ratio
    }
}

/// Ratios `r_n = |A u_n|_gamma / dist(u_n, ker A)` for the plateau family
/// `u_n(x) = x^d phi(x/n)`, where `d` is the degree made borderline by
/// `gamma` (the degree `ell - j` when `gamma` lies in `I_j` or on its left end).
pub fn borderline_range_test(kind: OperatorKind, gamma: f64, n_list: &[usize]) -> Result<BorderlineTable> {
    kind.validate()?;
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::InvalidInput("n_list must hold positive sizes".into()));
    }
    let ell = kind.ell();
    let w = WeightSpec::isotropic(gamma);
    let nmax = *n_list.iter().max().unwrap();
    let window = (8 * nmax).max(256);
    let op = discrete_weighted_operator(kind, window, w, true)?;
    let ker = null_report(&op, &NullCounting::default())?;
    let q = &ker.genuine_basis;
    // gamma in [j - 1/p, j + 1 - 1/p) makes x^(ell - j) the critical polynomial
    let j = forbidden_weights(ell, w.p).iter().filter(|&&b| gamma >= b - 1e-12).count();
    let degree = ell.saturating_sub(j.max(1));
    let h = op.section.col_x[1] - op.section.col_x[0];
    let rows = n_list
        .iter()
        .map(|&n| {
            let scale = n as f64 * h;
            let v = op.to_domain_coords(|x| (x / scale).powi(degree as i32) * plateau(x / scale));
            let image = op.apply(&v).norm();
            let resid = &v - q * (q.transpose() * &v);
            BorderlineRow {
                n,
                ratio: image / resid.norm(),
            }
        })
        .collect::<Vec<_>>();
    let exponent = log_log_slope(&rows);
    Ok(BorderlineTable {
        kind,
        gamma,
        degree,
        rows,
        exponent,
    })
}

fn log_log_slope(rows: &[BorderlineRow]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ratio.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShIndexRow {
    pub gamma: f64,
    pub dim_ker: usize,
    pub dim_coker: usize,
    /// Angle between the cokernel and `span{u_p', u_{p,k}}`, when both are two-dimensional.
    pub cokernel_angle: Option<f64>,
    pub gap: GapReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShScanConfig {
    /// Half-size of the index window.
    pub n: usize,
    /// Grid spacing is one period divided by this.
    pub points_per_period: usize,
}

impl Default for ShScanConfig {
    fn default() -> Self {
        ShScanConfig {
            n: 512,
            points_per_period: 32,
        }
    }
}

/// Kernel and cokernel dimensions of the stripe linearization from weight
/// `gamma - 2` into `gamma`, for each `gamma`.
pub fn sh_linearization_index_scan(sol: &StripeSolution, gammas: &[f64], cfg: &ShScanConfig) -> Result<Vec<ShIndexRow>> {
    let stripe = Arc::new(discrete_stripe(sol, cfg.points_per_period)?);
    let derivs = partial_k(sol)?;
    let rows = par::map(gammas, |&gamma| -> Result<ShIndexRow> {
        let op = sh_weighted_operator(stripe.clone(), cfg.n, WeightSpec::isotropic(gamma))?;
        let dims = kernel_cokernel_dims(&op, NullCounting::default().gap_factor)?;
        let cokernel_angle = if dims.dim_coker == 2 {
            let adj = op.adjoint();
            let cok = null_report(&adj, &NullCounting::default())?;
            let reference = orthonormalize(DMatrix::from_columns(&[
                adj.to_domain_coords(|x| sol.eval_x(x, 0.0)[1]),
                adj.to_domain_coords(|x| derivs.up_kstar(x, 0.0)),
            ]));
            Some(interior_angle(&adj, &cok.genuine_basis, &reference))
        } else {
            None
        };
        Ok(ShIndexRow {
            gamma,
            dim_ker: dims.dim_ker,
            dim_coker: dims.dim_coker,
            cokernel_angle,
            gap: dims.gap,
        })
    });
    rows.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardySample {
    pub dilation: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardyFit {
    pub gamma: f64,
    pub samples: Vec<HardySample>,
    /// Smallest constant bounding every sample.
    pub constant: f64,
}

/// Random localized `f = g'` with `g` a sum of Gaussian bumps, dilated by a
/// random factor; `u(x) = -int_x^inf f` is computed by cumulative quadrature
/// and the ratio `|u|_{gamma-1} / |f|_gamma` recorded.
pub fn hardy_constant_fit(gamma: f64, samples: usize, seed: u64) -> Result<HardyFit> {
    if gamma <= 0.5 {
        return Err(Error::InvalidInput(format!("explicit inverse needs gamma > 1/2, got {gamma}")));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let bumps = rng.random_range(1..=4);
        let dilation = 10f64.powf(rng.random_range(0.0..1.5));
        let parts: Vec<(f64, f64, f64)> = (0..bumps)
            .map(|_| {
                (
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-5.0..5.0) * dilation,
                    rng.random_range(0.5..2.0) * dilation,
                )
            })
            .collect();
        let f = |x: f64| -> f64 {
            parts
                .iter()
                .map(|&(a, c, s)| {
                    let z = (x - c) / s;
                    -2.0 * a * z / s * (-z * z).exp()
                })
                .sum()
        };
        let half = 20.0 * dilation + 40.0;
        let npts = 40_000usize;
        let h = 2.0 * half / npts as f64;
        let xs: Vec<f64> = (0..=npts).map(|i| -half + i as f64 * h).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        // u(x) = -int_x^inf f, by the trapezoid rule from the right end
        let mut u = vec![0.0; npts + 1];
        for i in (0..npts).rev() {
            u[i] = u[i + 1] - 0.5 * h * (fs[i] + fs[i + 1]);
        }
        let norm = |vals: &[f64], g: f64| -> f64 {
            let s: f64 = xs.iter().zip(vals).map(|(&x, &v)| (1.0 + x * x).powf(g) * v * v).sum();
            (s * h).sqrt()
        };
        let ratio = norm(&u, gamma - 1.0) / norm(&fs, gamma);
        out.push(HardySample { dilation, ratio });
    }
    let constant = out.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(HardyFit {
        gamma,
        samples: out,
        constant,
    })
}

/// Table row for a dimension scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub gamma: f64,
    pub p: f64,
    pub ell: usize,
    pub i: usize,
    pub dim_ker: usize,
    pub dim_coker: usize,
    pub gap: f64,
}

/// Dimensions of `delta_+^(ell-i) delta_-^i` over a list of isotropic weights.
pub fn difference_scan(ell: usize, i: usize, gammas: &[f64], n: usize) -> Result<Vec<ScanRow>> {
    let rows = par::map(gammas, |&gamma| -> Result<ScanRow> {
        let op = discrete_weighted_operator(OperatorKind::Difference { ell, i }, n, WeightSpec::isotropic(gamma), false)?;
        let d = kernel_cokernel_dims(&op, NullCounting::default().gap_factor)?;
        Ok(ScanRow {
            gamma,
            p: 2.0,
            ell,
            i,
            dim_ker: d.dim_ker,
            dim_coker: d.dim_coker,
            gap: d.gap.min_sv_gap(),
        })
    });
    rows.into_iter().collect()
}

/// One weight inside each interval `I_0, ..., I_ell` (p = 2): the integers `0..=ell`.
pub fn interval_representatives(ell: usize) -> Vec<f64> {
    (0..=ell).map(|j| j as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(op: &WeightedOperator) -> DVector<f64> {
        DVector::from_element(op.section.col_x.len(), 1.0)
    }

    #[test]
    fn difference_sections_annihilate_polynomials() {
        let w = WeightSpec::isotropic(0.0);
        let op = discrete_weighted_operator(OperatorKind::Difference { ell: 1, i: 0 }, 64, w, false).unwrap();
        assert_eq!(op.section.matrix.nrows(), 128);
        assert_eq!((&op.section.matrix * ones(&op)).amax(), 0.0);
        let op = discrete_weighted_operator(OperatorKind::Difference { ell: 2, i: 1 }, 64, w, false).unwrap();
        let lin = DVector::from_iterator(129, op.section.col_index.iter().map(|&i| i as f64));
        assert_eq!((&op.section.matrix * lin).amax(), 0.0);
    }

    #[test]
    fn regularized_derivative_kills_constants() {
        let op = discrete_weighted_operator(OperatorKind::Regularized { ell: 1 }, 128, WeightSpec::isotropic(0.0), false).unwrap();
        assert!((&op.section.matrix * ones(&op)).amax() < 1e-14);
    }

    #[test]
    fn first_difference_dims() {
        for (gamma, want) in [(0.0, (1, 0)), (1.0, (0, 1))] {
            let op = discrete_weighted_operator(OperatorKind::Difference { ell: 1, i: 0 }, 128, WeightSpec::isotropic(gamma), false).unwrap();
            let d = kernel_cokernel_dims(&op, 1e4).unwrap();
            assert_eq!((d.dim_ker, d.dim_coker), want, "gamma={gamma} {:?}", d.gap);
        }
    }

    #[test]
    fn borderline_is_rejected_by_default() {
        let r = discrete_weighted_operator(OperatorKind::Difference { ell: 1, i: 0 }, 64, WeightSpec::isotropic(0.5), false);
        assert!(matches!(r, Err(Error::BorderlineWeight(_))));
    }

    #[test]
    fn anisotropic_weights_move_the_index_by_one() {
        let dims = |gm: f64, gp: f64| {
            let op = discrete_weighted_operator(OperatorKind::Difference { ell: 2, i: 1 }, 128, WeightSpec::new(gm, gp), false).unwrap();
            let d = kernel_cokernel_dims(&op, 1e4).unwrap();
            assert_eq!((d.dim_ker, d.dim_coker), predicted_dims(2, &op.weights));
            d.index()
        };
        let steps = [dims(0.0, 0.0), dims(0.0, 1.0), dims(1.0, 1.0), dims(1.0, 2.0), dims(2.0, 2.0)];
        assert!(steps.windows(2).all(|w| w[0] - w[1] == 1), "{steps:?}");
    }

    #[test]
    fn adjoint_of_adjoint_restores_weights() {
        let op = discrete_weighted_operator(OperatorKind::Difference { ell: 3, i: 1 }, 64, WeightSpec::new(0.2, 1.3), false).unwrap();
        let back = op.adjoint().adjoint();
        assert!((back.weights.gamma_minus - 0.2).abs() < 1e-12 && (back.weights.gamma_plus - 1.3).abs() < 1e-12);
        assert_eq!(back.section.matrix, op.section.matrix);
    }

    #[test]
    fn sixth_order_stencils_are_exact_on_low_polynomials() {
        let apply = |st: &[f64], p: i32| -> f64 {
            let c = (st.len() / 2) as f64;
            st.iter().enumerate().map(|(q, a)| a * (q as f64 - c + 0.3).powi(p)).sum()
        };
        assert!((apply(&D2_6, 2) - 2.0).abs() < 1e-12);
        assert!((apply(&D2_6, 5) - 20.0 * 0.027).abs() < 1e-11);
        assert!((apply(&D4_6, 4) - 24.0).abs() < 1e-11);
        assert!((apply(&D4_6, 6) - 360.0 * 0.09).abs() < 1e-9);
    }

    #[test]
    fn parity_split_matches_full_section() {
        let sol = crate::stripes::solve_stripe(0.1, 1.0, 32, 1e-12).unwrap();
        let st = Arc::new(discrete_stripe(&sol, 16).unwrap());
        for gamma in [0.0, 2.0] {
            let split = sh_weighted_operator(st.clone(), 96, WeightSpec::isotropic(gamma)).unwrap();
            assert_eq!(split.blocks.len(), 2);
            let mut full = split.clone();
            full.blocks = vec![null_block(&split.conjugated)];
            let c = NullCounting::default();
            let (a, b) = (null_report(&split, &c).unwrap(), null_report(&full, &c).unwrap());
            assert_eq!((a.structural, a.genuine), (b.structural, b.genuine));
            assert!(subspace_angle(&a.null_basis, &b.null_basis) < 1e-10);
        }
    }

    #[test]
    fn borderline_ratio_decreases_slowly() {
        let t = borderline_range_test(OperatorKind::Difference { ell: 1, i: 0 }, 0.5, &[8, 16, 32]).unwrap();
        assert!(t.is_decreasing(), "{:?}", t.rows);
        assert!(t.decay_factor() > 1.0 && t.decay_factor() < 2.0);
    }

    #[test]
    fn hardy_ratios_stay_bounded() {
        let fit = hardy_constant_fit(1.5, 6, 3).unwrap();
        assert_eq!(fit.samples.len(), 6);
        assert!(fit.constant.is_finite() && fit.constant > 0.0 && fit.constant < 1.0);
    }
}
