//! Bloch-wave spectrum of the linearization about a stripe, the effective
//! diffusivity `lambda_2`, and the conjugacy between the twisted-boundary and
//! shifted-derivative forms of the Bloch operator.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::stripes::{continue_family, cos_series, StripeDerivatives, StripeSolution};

type C64 = Complex<f64>;

/// Options for the Bloch scan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlochOptions {
    /// Fourier truncation `|n| <= n_fourier`; `None` picks it from the stripe.
    pub n_fourier: Option<usize>,
    /// Minimal distance of the rest of the spectrum from 0 at `sigma = 0`.
    pub simplicity_gap: f64,
    /// Eigenvalues closer than this are treated as one cluster when tracking.
    pub crossing_gap: f64,
}

impl Default for BlochOptions {
    fn default() -> Self {
        BlochOptions {
            n_fourier: None,
            simplicity_gap: 1e-3,
            crossing_gap: 1e-8,
        }
    }
}

/// Fourier truncation large enough to carry the potential and the translation mode.
pub fn default_fourier_size(sol: &StripeSolution) -> usize {
    let amax = sol.cos_coeffs.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let m_eff = sol
        .cos_coeffs
        .iter()
        .rposition(|a| a.abs() > 1e-16 * amax)
        .unwrap_or(1);
    (2 * m_eff + 6).clamp(16, 64)
}

/// Exponential Fourier coefficients `c_n`, `n = -2M..2M`, of `u_p^2` in `xi`.
fn square_coefficients(sol: &StripeSolution) -> Vec<f64> {
    let m = sol.cos_coeffs.len() - 1;
    let mut uh = vec![0.0; 2 * m + 1];
    uh[m] = sol.cos_coeffs[0];
    for j in 1..=m {
        uh[m + j] = 0.5 * sol.cos_coeffs[j];
        uh[m - j] = 0.5 * sol.cos_coeffs[j];
    }
    let mut sq = vec![0.0; 4 * m + 1];
    for (i, a) in uh.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (j, b) in uh.iter().enumerate() {
            sq[i + j] += a * b;
        }
    }
    sq
}

fn symbol(mu: f64, q: f64) -> f64 {
    let s = 1.0 - q * q;
    -(s * s) + mu
}

/// Bloch operator `-(1+(d_x+i sigma)^2)^2 + mu - 3 u_p^2` in the basis
/// `e^{i n k x}`, `|n| <= n_fourier`.
pub fn assemble_bloch(sol: &StripeSolution, sigma: f64) -> DMatrix<C64> {
    assemble_bloch_sized(sol, sigma, default_fourier_size(sol))
}

pub fn assemble_bloch_sized(sol: &StripeSolution, sigma: f64, n_fourier: usize) -> DMatrix<C64> {
    let sq = square_coefficients(sol);
    let half = (sq.len() - 1) / 2;
    let dim = 2 * n_fourier + 1;
    let mut a = DMatrix::<C64>::zeros(dim, dim);
    for r in 0..dim {
        let n = r as isize - n_fourier as isize;
        for c in 0..dim {
            let d = n - (c as isize - n_fourier as isize);
            let idx = d + half as isize;
            if idx >= 0 && (idx as usize) < sq.len() {
                a[(r, c)] = C64::new(-3.0 * sq[idx as usize], 0.0);
            }
        }
        a[(r, r)] += C64::new(symbol(sol.mu, n as f64 * sol.k + sigma), 0.0);
    }
    a
}

/// Fourier coefficients of `u_p'` in the Bloch basis.
pub fn translation_mode(sol: &StripeSolution, n_fourier: usize) -> DVector<C64> {
    let dim = 2 * n_fourier + 1;
    let mut v = DVector::<C64>::zeros(dim);
    for (m, &a) in sol.cos_coeffs.iter().enumerate().skip(1) {
        if m > n_fourier {
            break;
        }
        let c = 0.5 * m as f64 * sol.k * a;
        v[n_fourier + m] = C64::new(0.0, c);
        v[n_fourier - m] = C64::new(0.0, -c);
    }
    v
}

fn rayleigh(a: &DMatrix<C64>, v: &DVector<C64>) -> f64 {
    let av = a * v;
    (v.dotc(&av)).re / v.norm_squared()
}

fn hermitian_eigen(a: DMatrix<C64>) -> SymmetricEigen<C64, nalgebra::Dyn> {
    SymmetricEigen::new(a)
}

/// Neutral branch through `lambda(0) = 0`, tracked by eigenvector overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionBranch {
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Largest eigenvalue of the full Bloch operator at each sigma.
    pub lambda_max: Vec<f64>,
    /// Distance of the rest of the spectrum from 0 at `sigma = 0`.
    pub gap_at_zero: f64,
    pub n_fourier: usize,
}

struct Tracker {
    vec: DVector<C64>,
}

impl Tracker {
    /// Picks the eigen-cluster with maximal overlap and returns the
    /// Rayleigh quotient of the projected vector.
    fn step(
        &mut self,
        a: &DMatrix<C64>,
        eig: &SymmetricEigen<C64, nalgebra::Dyn>,
        sigma: f64,
        gap: f64,
    ) -> Result<f64> {
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut clusters: Vec<Vec<usize>> = vec![];
        for &i in &order {
            match clusters.last_mut() {
                Some(c) if (eig.eigenvalues[i] - eig.eigenvalues[*c.last().unwrap()]).abs() < gap => {
                    c.push(i)
                }
                _ => clusters.push(vec![i]),
            }
        }
        let norm = self.vec.norm_squared();
        let weights: Vec<f64> = clusters
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&i| eig.eigenvectors.column(i).dotc(&self.vec).norm_sqr())
                    .sum::<f64>()
                    / norm
            })
            .collect();
        let mut idx: Vec<usize> = (0..clusters.len()).collect();
        idx.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]));
        if idx.len() > 1 && weights[idx[1]] > 0.25 {
            return Err(Error::BranchCrossing { sigma });
        }
        let best = &clusters[idx[0]];
        let mut v = DVector::<C64>::zeros(self.vec.len());
        for &i in best {
            let col = eig.eigenvectors.column(i);
            v += col * col.dotc(&self.vec);
        }
        let nv = v.norm();
        v /= C64::new(nv, 0.0);
        let lambda = rayleigh(a, &v);
        self.vec = v;
        Ok(lambda)
    }
}

fn max_eigenvalue(a: &DMatrix<C64>, eig: &SymmetricEigen<C64, nalgebra::Dyn>) -> f64 {
    let (i, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("nonempty spectrum");
    rayleigh(a, &eig.eigenvectors.column(i).into_owned())
}

/// Tracks the neutral branch over `sigma_j = j k / n_sigma`, `j = 0..n_sigma`.
pub fn dispersion_branch(sol: &StripeSolution, n_sigma: usize) -> Result<DispersionBranch> {
    dispersion_branch_with(sol, n_sigma, &BlochOptions::default())
}

pub fn dispersion_branch_with(
    sol: &StripeSolution,
    n_sigma: usize,
    opts: &BlochOptions,
) -> Result<DispersionBranch> {
    if n_sigma < 2 {
        return Err(Error::InvalidInput("n_sigma must be at least 2".into()));
    }
    let n_f = opts.n_fourier.unwrap_or_else(|| default_fourier_size(sol));
    let sigma: Vec<f64> = (0..n_sigma).map(|j| j as f64 * sol.k / n_sigma as f64).collect();
    let mats: Vec<DMatrix<C64>> = par::map(&sigma, |&s| assemble_bloch_sized(sol, s, n_f));
    let eigs: Vec<SymmetricEigen<C64, nalgebra::Dyn>> =
        par::map(&mats, |m| hermitian_eigen(m.clone()));
    let (lambda, gap_at_zero) = track(sol, &sigma, &mats, &eigs, n_f, opts)?;
    let lambda_max = mats.iter().zip(&eigs).map(|(a, e)| max_eigenvalue(a, e)).collect();
    Ok(DispersionBranch {
        sigma,
        lambda,
        lambda_max,
        gap_at_zero,
        n_fourier: n_f,
    })
}

fn track(
    sol: &StripeSolution,
    sigma: &[f64],
    mats: &[DMatrix<C64>],
    eigs: &[SymmetricEigen<C64, nalgebra::Dyn>],
    n_f: usize,
    opts: &BlochOptions,
) -> Result<(Vec<f64>, f64)> {
    let e0 = translation_mode(sol, n_f);
    let mut tracker = Tracker { vec: e0 };
    let mut lambda = Vec::with_capacity(sigma.len());
    for (j, s) in sigma.iter().enumerate() {
        lambda.push(tracker.step(&mats[j], &eigs[j], *s, opts.crossing_gap)?);
    }
    // the rest of the spectrum at sigma = 0
    let ev = &eigs[0].eigenvalues;
    let mut by_abs: Vec<f64> = ev.iter().map(|v| v.abs()).collect();
    by_abs.sort_by(f64::total_cmp);
    Ok((lambda, by_abs.get(1).copied().unwrap_or(f64::INFINITY)))
}

/// Least-squares coefficients of the neutral branch near `sigma = 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BranchFit {
    /// Linear coefficient from the unconstrained fit in `sigma, sigma^2, sigma^3`.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Relative rms misfit of the `sigma^2, sigma^3` fit.
    pub misfit: f64,
}

/// Neutral-branch values along `sigma`, which must start at 0 and move in small steps.
pub fn branch_values(sol: &StripeSolution, sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.first() != Some(&0.0) {
        return Err(Error::InvalidInput("branch tracking starts at sigma = 0".into()));
    }
    let opts = BlochOptions::default();
    let n_f = default_fourier_size(sol);
    let mats: Vec<DMatrix<C64>> = par::map(sigma, |&s| assemble_bloch_sized(sol, s, n_f));
    let eigs: Vec<_> = par::map(&mats, |m| hermitian_eigen(m.clone()));
    Ok(track(sol, sigma, &mats, &eigs, n_f, &opts)?.0)
}

/// Samples the branch on `sigma in (0, window k]` and fits
/// `lambda = lambda_2 sigma^2 + lambda_3 sigma^3` with weights `sigma^-4`.
/// The linear coefficient comes from a separate fit in `sigma..sigma^4` on `[-window k, window k]`.
pub fn lambda2_fit(sol: &StripeSolution, window: f64, n_samples: usize) -> Result<BranchFit> {
    let mut sigma = vec![0.0];
    sigma.extend((1..=n_samples).map(|j| window * sol.k * j as f64 / n_samples as f64));
    let lambda = branch_values(sol, &sigma)?;
    let s = &sigma[1..];
    let l = &lambda[1..];

    // lambda / sigma^2 = lambda_2 + lambda_3 sigma
    let a = DMatrix::from_fn(s.len(), 2, |i, j| s[i].powi(j as i32));
    let b = DVector::from_iterator(s.len(), s.iter().zip(l).map(|(s, l)| l / (s * s)));
    let coef = lstsq(&a, &b)?;
    let resid = (&a * &coef - &b).norm() / (b.norm() + f64::MIN_POSITIVE);

    // linear coefficient from samples on both sides of sigma = 0
    let minus: Vec<f64> = sigma.iter().map(|s| -s).collect();
    let lambda_m = branch_values(sol, &minus)?;
    let s2: Vec<f64> = s.iter().chain(&minus[1..]).copied().collect();
    let l2: Vec<f64> = l.iter().chain(&lambda_m[1..]).copied().collect();
    let a1 = DMatrix::from_fn(s2.len(), 4, |i, j| s2[i].powi(j as i32 + 1));
    let b1 = DVector::from_column_slice(&l2);
    let coef1 = lstsq(&a1, &b1)?;
    Ok(BranchFit {
        lambda1: coef1[0],
        lambda2: coef[0],
        lambda3: coef[1],
        misfit: resid,
    })
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-14)
        .map_err(|_| Error::InvalidInput(format!("least squares failed for {}x{} system", a.nrows(), a.ncols())))
}

/// Jet data at `sigma = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lambda2Jet {
    pub lambda2: f64,
    /// Imaginary part of the quotient, zero by construction of `e_1`.
    pub imag_residue: f64,
    /// Max-norm of `L_0 e_0`.
    pub l0e0_residual: f64,
    /// Max-norm of `L_1 e_0 + L_0 e_1`.
    pub hierarchy_residual: f64,
    /// Sample points in x on one period.
    pub x: Vec<f64>,
    pub e0: Vec<f64>,
    /// `e_1 = i k d_k u_p`; stored is the imaginary part.
    pub e1_imag: Vec<f64>,
}

/// `lambda_2 <e0,e0> = <L_1 e_1 + L_2 e_0, e_0>` on one period.
pub fn lambda2_from_jet(sol: &StripeSolution, derivs: &StripeDerivatives) -> Lambda2Jet {
    let k = sol.k;
    let a = &sol.cos_coeffs;
    let b = &derivs.dk_coeffs;
    let n = 8 * sol.n_modes;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut l0e0 = 0.0f64;
    let mut hier = 0.0f64;
    let mut xs = Vec::with_capacity(n);
    let mut e0 = Vec::with_capacity(n);
    let mut e1 = Vec::with_capacity(n);
    for j in 0..n {
        let xi = 2.0 * PI * j as f64 / n as f64;
        // x-derivatives of u_p and d_k u_p
        let ud: Vec<f64> = (0..6).map(|d| k.powi(d as i32) * cos_series(a, xi, d)).collect();
        let bd: Vec<f64> = (0..5).map(|d| k.powi(d as i32) * cos_series(b, xi, d)).collect();
        let u = ud[0];
        let pot = sol.mu - 3.0 * u * u;
        // L_1 e_1 = 4k (1 + d^2) d (d_k u_p), real
        let l1e1 = 4.0 * k * (bd[1] + bd[3]);
        let l2e0 = 2.0 * ud[1] + 6.0 * ud[3];
        num += (l1e1 + l2e0) * ud[1];
        den += ud[1] * ud[1];
        let l0 = |d0: f64, d2: f64, d4: f64| -(d0 + 2.0 * d2 + d4) + pot * d0;
        l0e0 = l0e0.max(l0(ud[1], ud[3], ud[5]).abs());
        // imaginary part of L_1 e_0 + L_0 e_1
        let l1e0 = -4.0 * (ud[2] + ud[4]);
        hier = hier.max((l1e0 + k * l0(bd[0], bd[2], bd[4])).abs());
        xs.push(xi / k);
        e0.push(ud[1]);
        e1.push(k * bd[0]);
    }
    Lambda2Jet {
        lambda2: num / den,
        imag_residue: 0.0,
        l0e0_residual: l0e0,
        hierarchy_residual: hier,
        x: xs,
        e0,
        e1_imag: e1,
    }
}

/// Cross-check of the integrated `lambda_2` formula by k-differencing over the family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiffusivityCrossCheck {
    /// `d_k` acting on the periodic profile at frozen `x`.
    pub frozen_x: f64,
    /// `d_k` acting on the whole integral over the k-dependent period.
    pub whole_integral: f64,
    pub step: f64,
}

/// Evaluates `-2 int [k d_k((u'')^2 - (u')^2) + 3 (u'')^2 - (u')^2] / int (u')^2`
/// under both readings of the k-derivative, by centred differences in k.
pub fn lambda2_integrated(sol: &StripeSolution, step: f64) -> Result<DiffusivityCrossCheck> {
    let k = sol.k;
    let fam = continue_family(sol.mu, &[k - step, k, k + step])?;
    let n = 8 * sol.n_modes;
    let frozen = |s: &StripeSolution| -> f64 {
        (0..n)
            .map(|j| {
                let xi = 2.0 * PI * j as f64 / n as f64;
                let u1 = k * s.eval_xi(xi, 1);
                let u2 = k * k * s.eval_xi(xi, 2);
                u2 * u2 - u1 * u1
            })
            .sum::<f64>()
            * (2.0 * PI / k)
            / n as f64
    };
    let whole = |s: &StripeSolution| -> f64 {
        let ks = s.k;
        (0..n)
            .map(|j| {
                let xi = 2.0 * PI * j as f64 / n as f64;
                let u1 = ks * s.eval_xi(xi, 1);
                let u2 = ks * ks * s.eval_xi(xi, 2);
                u2 * u2 - u1 * u1
            })
            .sum::<f64>()
            * (2.0 * PI / ks)
            / n as f64
    };
    let mut base = 0.0;
    let mut den = 0.0;
    for j in 0..n {
        let xi = 2.0 * PI * j as f64 / n as f64;
        let u1 = k * sol.eval_xi(xi, 1);
        let u2 = k * k * sol.eval_xi(xi, 2);
        base += 3.0 * u2 * u2 - u1 * u1;
        den += u1 * u1;
    }
    let dx = 2.0 * PI / k / n as f64;
    base *= dx;
    den *= dx;
    let d_frozen = (frozen(&fam[2]) - frozen(&fam[0])) / (2.0 * step);
    let d_whole = (whole(&fam[2]) - whole(&fam[0])) / (2.0 * step);
    Ok(DiffusivityCrossCheck {
        frozen_x: -2.0 * (k * d_frozen + base) / den,
        whole_integral: -2.0 * (k * d_whole + base) / den,
        step,
    })
}

/// Full Bloch summary at one stripe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlochData {
    pub sigma_grid: Vec<f64>,
    pub branch: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub lambda2_fit: f64,
    pub lambda2_jet: f64,
    pub e0: Vec<f64>,
    pub e1_imag: Vec<f64>,
    pub stable: bool,
}

/// Default fit window as a fraction of `k`.
pub const FIT_WINDOW: f64 = 0.02;
pub const FIT_SAMPLES: usize = 10;

pub fn bloch_data(sol: &StripeSolution, derivs: &StripeDerivatives, n_sigma: usize) -> Result<BlochData> {
    let br = dispersion_branch(sol, n_sigma)?;
    let fit = lambda2_fit(sol, FIT_WINDOW, FIT_SAMPLES)?;
    let jet = lambda2_from_jet(sol, derivs);
    let stable = zero_only_margin(&br, sol.k) > 0.0 && jet.lambda2 < 0.0;
    Ok(BlochData {
        sigma_grid: br.sigma,
        branch: br.lambda,
        lambda_max: br.lambda_max,
        lambda2_fit: fit.lambda2,
        lambda2_jet: jet.lambda2,
        e0: jet.e0,
        e1_imag: jet.e1_imag,
        stable,
    })
}

/// `min_{sigma != 0} -lambda_max(sigma) / (d(sigma)/k)^2` with `d` the distance
/// to the nearest multiple of `k`; positive iff no eigenvalue reaches 0 away from `sigma = 0`.
pub fn zero_only_margin(br: &DispersionBranch, k: f64) -> f64 {
    br.sigma
        .iter()
        .zip(&br.lambda_max)
        .filter(|(s, _)| **s > 0.0)
        .map(|(s, l)| {
            let d = s.min(k - s) / k;
            -l / (d * d)
        })
        .fold(f64::INFINITY, f64::min)
}

pub const CLAUSE_ZERO_ONLY: &str = "zero eigenvalue only at sigma = 0";
pub const CLAUSE_SIMPLE: &str = "simple zero eigenvalue at sigma = 0";
pub const CLAUSE_LAMBDA2: &str = "lambda2 nonzero";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub clauses: Vec<Clause>,
    pub lambda2: f64,
    pub lambda_at_zero: f64,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }
}

/// Scans the spectrum and evaluates each clause with its margin.
pub fn hypothesis_report(sol: &StripeSolution, derivs: &StripeDerivatives, n_sigma: usize) -> Result<HypothesisReport> {
    let opts = BlochOptions::default();
    let br = dispersion_branch_with(sol, n_sigma, &opts)?;
    let jet = lambda2_from_jet(sol, derivs);
    let margin = zero_only_margin(&br, sol.k);
    let clauses = vec![
        Clause {
            name: CLAUSE_ZERO_ONLY.into(),
            passed: margin > 0.0,
            margin,
        },
        Clause {
            name: CLAUSE_SIMPLE.into(),
            passed: br.gap_at_zero > opts.simplicity_gap && br.lambda[0].abs() < 1e-10,
            margin: br.gap_at_zero,
        },
        Clause {
            name: CLAUSE_LAMBDA2.into(),
            passed: jet.lambda2.abs() > 1e-10,
            margin: jet.lambda2.abs(),
        },
    ];
    Ok(HypothesisReport {
        clauses,
        lambda2: jet.lambda2,
        lambda_at_zero: br.lambda[0],
    })
}

/// Fails with the first violated clause.
pub fn verify_hypotheses(sol: &StripeSolution, derivs: &StripeDerivatives, n_sigma: usize) -> Result<HypothesisReport> {
    let rep = hypothesis_report(sol, derivs, n_sigma)?;
    if let Some(c) = rep.clauses.iter().find(|c| !c.passed) {
        return Err(Error::HypothesisViolated {
            clause: c.name.clone(),
        });
    }
    Ok(rep)
}

/// Unitary DFT on `2N+1` samples: coefficient index `n = -N..N`.
fn dft(n_f: usize, period: f64, k: f64, sigma: f64) -> (DMatrix<C64>, Vec<f64>) {
    let dim = 2 * n_f + 1;
    let x: Vec<f64> = (0..dim).map(|j| period * j as f64 / dim as f64).collect();
    let scale = 1.0 / (dim as f64).sqrt();
    // columns are the basis functions e^{i(nk+sigma)x} sampled on the grid
    let f = DMatrix::from_fn(dim, dim, |j, c| {
        let n = c as f64 - n_f as f64;
        C64::from_polar(scale, (n * k + sigma) * x[j])
    });
    (f, x)
}

fn potential_on(sol: &StripeSolution, x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xx| {
            let u = sol.eval_xi(sol.k * xx, 0);
            sol.mu - 3.0 * u * u
        })
        .collect()
}

fn sh_from_derivative(d: &DMatrix<C64>, pot: &[f64]) -> DMatrix<C64> {
    let dim = d.nrows();
    let id = DMatrix::<C64>::identity(dim, dim);
    let inner = &id + d * d;
    let mut p = -(&inner * &inner);
    for j in 0..dim {
        p[(j, j)] += C64::new(pot[j], 0.0);
    }
    p
}

/// `P(sigma)`: samples of Bloch-twisted functions, differentiated through the twisted basis.
pub fn twisted_operator(sol: &StripeSolution, sigma: f64, n_f: usize) -> DMatrix<C64> {
    let period = 2.0 * PI / sol.k;
    let (f, x) = dft(n_f, period, sol.k, sigma);
    let dim = f.nrows();
    let diag = DMatrix::from_fn(dim, dim, |r, c| {
        if r == c {
            C64::new(0.0, (r as f64 - n_f as f64) * sol.k + sigma)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let d = &f * diag * f.adjoint();
    sh_from_derivative(&d, &potential_on(sol, &x))
}

/// `P_BL(sigma)`: periodic samples with the shifted derivative `d_x + i sigma`.
pub fn shifted_operator(sol: &StripeSolution, sigma: f64, n_f: usize) -> DMatrix<C64> {
    let period = 2.0 * PI / sol.k;
    let (f, x) = dft(n_f, period, sol.k, 0.0);
    let dim = f.nrows();
    let diag = DMatrix::from_fn(dim, dim, |r, c| {
        if r == c {
            C64::new(0.0, (r as f64 - n_f as f64) * sol.k)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let mut d = &f * diag * f.adjoint();
    if sigma != 0.0 {
        for j in 0..dim {
            d[(j, j)] += C64::new(0.0, sigma);
        }
    }
    sh_from_derivative(&d, &potential_on(sol, &x))
}

/// Real spectrum of a numerically Hermitian matrix.
pub fn hermitian_spectrum(a: &DMatrix<C64>) -> Vec<f64> {
    let h = (a + a.adjoint()).scale(0.5);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn hausdorff(a: &[f64], b: &[f64]) -> f64 {
    let one = |p: &[f64], q: &[f64]| {
        p.iter()
            .map(|x| q.iter().map(|y| (x - y).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

/// Hausdorff distance between the spectra of `P(sigma)` and `P_BL(sigma)`.
pub fn conjugacy_check(sol: &StripeSolution, sigma: f64) -> f64 {
    let n_f = default_fourier_size(sol);
    let p = twisted_operator(sol, sigma, n_f);
    let q = shifted_operator(sol, sigma, n_f);
    hausdorff(&hermitian_spectrum(&p), &hermitian_spectrum(&q))
}

/// Multiplication by `e^{i sigma x}` on the sample grid used by the conjugacy check.
pub fn bloch_twist(sol: &StripeSolution, sigma: f64, n_f: usize) -> DMatrix<C64> {
    let dim = 2 * n_f + 1;
    let period = 2.0 * PI / sol.k;
    DMatrix::from_fn(dim, dim, |r, c| {
        if r == c {
            C64::from_polar(1.0, sigma * period * r as f64 / dim as f64)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stripes::{partial_k, solve_stripe};

    fn base() -> (StripeSolution, StripeDerivatives) {
        let s = solve_stripe(0.1, 1.0, 32, 1e-10).unwrap();
        let d = partial_k(&s).unwrap();
        (s, d)
    }

    #[test]
    fn bloch_matrix_annihilates_translation_mode() {
        let (s, _) = base();
        let n_f = default_fourier_size(&s);
        let a = assemble_bloch_sized(&s, 0.0, n_f);
        let v = translation_mode(&s, n_f);
        assert!((&a * &v).camax() < 1e-9);
        let h = (&a - a.adjoint()).camax();
        assert!(h < 1e-12);
        let a = assemble_bloch_sized(&s, 0.37, n_f);
        assert!((&a - a.adjoint()).camax() < 1e-12);
    }

    #[test]
    fn branch_starts_at_zero_and_is_negative() {
        let (s, _) = base();
        let br = dispersion_branch(&s, 32).unwrap();
        assert!(br.lambda[0].abs() < 1e-10, "{}", br.lambda[0]);
        assert!(br.gap_at_zero > 1e-3);
        assert!(br.lambda[1..].iter().all(|l| *l < 0.0));
        assert!(zero_only_margin(&br, s.k) > 0.0);
    }

    #[test]
    fn branch_is_even_in_sigma() {
        let (s, _) = base();
        let plus: Vec<f64> = (0..=20).map(|j| 0.01 * j as f64).collect();
        let minus: Vec<f64> = plus.iter().map(|s| -s).collect();
        let lp = branch_values(&s, &plus).unwrap();
        let lm = branch_values(&s, &minus).unwrap();
        for (a, b) in lp.iter().zip(&lm) {
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn jet_and_fit_agree() {
        let (s, d) = base();
        let jet = lambda2_from_jet(&s, &d);
        assert!(jet.l0e0_residual < 1e-8);
        assert!(jet.hierarchy_residual < 1e-8);
        assert!(jet.lambda2 < 0.0);
        let fit = lambda2_fit(&s, FIT_WINDOW, FIT_SAMPLES).unwrap();
        let rel = (fit.lambda2 - jet.lambda2).abs() / jet.lambda2.abs();
        assert!(rel < 1e-3, "fit {} jet {} rel {rel}", fit.lambda2, jet.lambda2);
        assert!(fit.lambda1.abs() < 1e-8, "lambda1 {}", fit.lambda1);
    }

    #[test]
    fn frozen_x_reading_matches_jet() {
        let (s, d) = base();
        let jet = lambda2_from_jet(&s, &d);
        let cc = lambda2_integrated(&s, 1e-3).unwrap();
        assert!((cc.frozen_x - jet.lambda2).abs() < 1e-5 * jet.lambda2.abs(), "{cc:?} {}", jet.lambda2);
    }

    #[test]
    fn hypotheses_at_band_centre_and_eckhaus_unstable() {
        let (s, d) = base();
        let rep = verify_hypotheses(&s, &d, 32).unwrap();
        assert!(rep.passed());
        let s2 = solve_stripe(0.1, 1.1, 32, 1e-10).unwrap();
        let d2 = partial_k(&s2).unwrap();
        match verify_hypotheses(&s2, &d2, 32) {
            Err(Error::HypothesisViolated { clause }) => assert_eq!(clause, CLAUSE_ZERO_ONLY),
            other => panic!("expected violation, got {other:?}"),
        }
        assert!(matches!(verify_hypotheses(&s, &d, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn conjugacy_distances() {
        let (s, _) = base();
        assert!(conjugacy_check(&s, 0.1) < 1e-8);
        assert!(conjugacy_check(&s, 0.0) < 1e-12);
        let n_f = default_fourier_size(&s);
        let e = bloch_twist(&s, 0.1, n_f);
        let q = shifted_operator(&s, 0.1, n_f);
        let moved = &e * q * e.adjoint();
        let p = twisted_operator(&s, 0.1, n_f);
        assert!(hausdorff(&hermitian_spectrum(&p), &hermitian_spectrum(&moved)) < 1e-8);
    }
}
