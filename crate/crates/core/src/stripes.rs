//! Even periodic stripes of the stationary Swift-Hohenberg equation
//! `-(k^2 d_xi^2 + 1)^2 u + mu u - u^3 = 0` and their wavenumber derivative.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;

/// One periodic stripe `u_p(xi; k) = sum_m a_m cos(m xi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeSolution {
    pub mu: f64,
    pub k: f64,
    pub n_modes: usize,
    pub cos_coeffs: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StripeOptions {
    /// Bound on the pointwise residual of the accepted solution.
    pub tol: f64,
    /// Newton stops once the coefficient update is below this.
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Modes are doubled until the spectral tail is resolved, up to this cap.
    pub max_modes: usize,
    /// Below this coefficient size the solution counts as the zero branch.
    pub zero_threshold: f64,
}

impl Default for StripeOptions {
    fn default() -> Self {
        StripeOptions {
            tol: 1e-10,
            newton_tol: 1e-12,
            max_iter: 50,
            max_modes: 256,
            zero_threshold: 1e-6,
        }
    }
}

/// Leading-order Landau amplitude of the `cos xi` mode.
pub fn landau_amplitude(mu: f64, k: f64) -> f64 {
    let d = 1.0 - k * k;
    2.0 * ((mu - d * d).max(0.0) / 3.0).sqrt()
}

/// Value of `d^order/dxi^order sum_m c_m cos(m xi)`.
pub fn cos_series(coeffs: &[f64], xi: f64, order: usize) -> f64 {
    let shift = order as f64 * PI / 2.0;
    coeffs
        .iter()
        .enumerate()
        .map(|(m, &a)| {
            if a == 0.0 {
                0.0
            } else {
                let mf = m as f64;
                a * mf.powi(order as i32) * (mf * xi + shift).cos()
            }
        })
        .sum()
}

/// Pointwise residual of the stripe equation at `xi`.
fn stripe_residual_at(mu: f64, k: f64, a: &[f64], xi: f64) -> f64 {
    let k2 = k * k;
    let mut lin = 0.0;
    let mut u = 0.0;
    for (m, &am) in a.iter().enumerate() {
        let mf = m as f64;
        let c = (mf * xi).cos();
        let s = 1.0 - k2 * mf * mf;
        lin += -(s * s) * am * c;
        u += am * c;
    }
    lin + mu * u - u * u * u
}

struct Collocation {
    n_grid: usize,
    table: Vec<f64>,
    modes: usize,
}

impl Collocation {
    fn new(n_modes: usize) -> Self {
        let modes = n_modes + 1;
        let n_grid = 4 * n_modes;
        let mut table = vec![0.0; n_grid * modes];
        for j in 0..n_grid {
            let xi = 2.0 * PI * j as f64 / n_grid as f64;
            for m in 0..modes {
                table[j * modes + m] = (m as f64 * xi).cos();
            }
        }
        Collocation {
            n_grid,
            table,
            modes,
        }
    }

    fn synth(&self, a: &[f64]) -> Vec<f64> {
        (0..self.n_grid)
            .map(|j| {
                let row = &self.table[j * self.modes..(j + 1) * self.modes];
                row.iter().zip(a).map(|(c, a)| c * a).sum()
            })
            .collect()
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.n_grid as f64;
        (0..self.modes)
            .map(|m| {
                let s: f64 = (0..self.n_grid)
                    .map(|j| f[j] * self.table[j * self.modes + m])
                    .sum();
                if m == 0 {
                    s * inv
                } else {
                    2.0 * s * inv
                }
            })
            .collect()
    }
}

fn linear_symbol(mu: f64, k: f64, m: usize) -> f64 {
    let s = 1.0 - k * k * (m * m) as f64;
    -(s * s) + mu
}

fn galerkin_residual(mu: f64, k: f64, col: &Collocation, a: &[f64]) -> Vec<f64> {
    let u = col.synth(a);
    let cube: Vec<f64> = u.iter().map(|v| v * v * v).collect();
    let p = col.project(&cube);
    (0..col.modes)
        .map(|m| linear_symbol(mu, k, m) * a[m] - p[m])
        .collect()
}

/// Galerkin matrix of the linearization `-(1+k^2 d^2)^2 + mu - 3 u^2` on cosines.
fn galerkin_jacobian(mu: f64, k: f64, col: &Collocation, a: &[f64]) -> DMatrix<f64> {
    let u = col.synth(a);
    let m = col.modes;
    let mut jac = DMatrix::<f64>::zeros(m, m);
    let mut f = vec![0.0; col.n_grid];
    for n in 0..m {
        for j in 0..col.n_grid {
            f[j] = 3.0 * u[j] * u[j] * col.table[j * m + n];
        }
        let p = col.project(&f);
        for r in 0..m {
            jac[(r, n)] = -p[r];
        }
        jac[(n, n)] += linear_symbol(mu, k, n);
    }
    jac
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn newton(mu: f64, k: f64, seed: &[f64], opts: &StripeOptions) -> Result<Vec<f64>> {
    let col = Collocation::new(seed.len() - 1);
    let mut a = seed.to_vec();
    let mut r = galerkin_residual(mu, k, &col, &a);
    for _ in 0..opts.max_iter {
        let jac = galerkin_jacobian(mu, k, &col, &a);
        let rhs = DVector::from_iterator(r.len(), r.iter().map(|v| -v));
        let delta = jac.lu().solve(&rhs).ok_or(Error::SingularLinearization)?;
        let r_norm = max_abs(&r);
        let mut step = 1.0;
        let (mut a_new, mut r_new);
        loop {
            a_new = a.iter().zip(delta.iter()).map(|(x, d)| x + step * d).collect::<Vec<_>>();
            r_new = galerkin_residual(mu, k, &col, &a_new);
            if max_abs(&r_new) <= r_norm || step < 1e-4 {
                break;
            }
            step *= 0.5;
        }
        let update = step * delta.amax();
        a = a_new;
        r = r_new;
        if update < opts.newton_tol {
            return Ok(a);
        }
    }
    Err(Error::MaxIterations {
        iterations: opts.max_iter,
        residual: max_abs(&r),
    })
}

fn fine_residual(mu: f64, k: f64, a: &[f64]) -> f64 {
    let n = 8 * (a.len() - 1).max(1);
    (0..n)
        .map(|j| stripe_residual_at(mu, k, a, 2.0 * PI * j as f64 / n as f64).abs())
        .fold(0.0, f64::max)
}

/// Solves from an explicit coefficient seed, doubling the mode count while the
/// spectral tail is unresolved.
pub fn solve_stripe_from(
    mu: f64,
    k: f64,
    seed: &[f64],
    opts: &StripeOptions,
) -> Result<StripeSolution> {
    if !(mu > 0.0) || !(k > 0.0) {
        return Err(Error::InvalidInput(format!("need mu>0 and k>0, got mu={mu}, k={k}")));
    }
    if seed.len() < 9 {
        return Err(Error::InvalidInput("n_modes must be at least 8".into()));
    }
    if max_abs(seed) == 0.0 {
        return Err(Error::NoNontrivialStripe { mu, k });
    }
    let mut seed = seed.to_vec();
    loop {
        let a = newton(mu, k, &seed, opts)?;
        let amax = max_abs(&a);
        if amax < opts.zero_threshold {
            return Err(Error::NoNontrivialStripe { mu, k });
        }
        let m = a.len() - 1;
        let tail = a[m].abs().max(a[m - 1].abs()) / amax;
        if tail >= 1e-10 && 2 * m <= opts.max_modes {
            seed = a;
            seed.resize(2 * m + 1, 0.0);
            continue;
        }
        let residual_norm = fine_residual(mu, k, &a);
        if residual_norm >= opts.tol {
            return Err(Error::MaxIterations {
                iterations: opts.max_iter,
                residual: residual_norm,
            });
        }
        return Ok(StripeSolution {
            mu,
            k,
            n_modes: m,
            cos_coeffs: a,
            residual_norm,
        });
    }
}

/// Solves the stripe equation from the Landau seed on `cos xi`.
pub fn solve_stripe(mu: f64, k: f64, n_modes: usize, tol: f64) -> Result<StripeSolution> {
    let opts = StripeOptions {
        tol,
        ..Default::default()
    };
    solve_stripe_with(mu, k, n_modes, &opts)
}

pub fn solve_stripe_with(mu: f64, k: f64, n_modes: usize, opts: &StripeOptions) -> Result<StripeSolution> {
    if n_modes < 8 {
        return Err(Error::InvalidInput("n_modes must be at least 8".into()));
    }
    let mut seed = vec![0.0; n_modes + 1];
    seed[1] = landau_amplitude(mu, k);
    solve_stripe_from(mu, k, &seed, opts)
}

/// Continues the stripe family along `k_grid`, seeding each solve from its neighbour.
pub fn continue_family(mu: f64, k_grid: &[f64]) -> Result<Vec<StripeSolution>> {
    continue_family_with(mu, k_grid, 32, &StripeOptions::default())
}

pub fn continue_family_with(
    mu: f64,
    k_grid: &[f64],
    n_modes: usize,
    opts: &StripeOptions,
) -> Result<Vec<StripeSolution>> {
    let mut out: Vec<StripeSolution> = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let res = match out.last() {
            None => solve_stripe_with(mu, k, n_modes, opts),
            Some(prev) => solve_stripe_from(mu, k, &prev.cos_coeffs, opts),
        };
        match res {
            Ok(s) => out.push(s),
            Err(_) => {
                return Err(Error::ContinuationBreakdown {
                    last_good_k: out.last().map(|s| s.k),
                    failed_k: k,
                })
            }
        }
    }
    // branch-jump guard: successive changes must follow the local slope
    if out.len() >= 3 {
        let rates: Vec<f64> = out
            .windows(2)
            .map(|w| coeff_distance(&w[0].cos_coeffs, &w[1].cos_coeffs) / (w[1].k - w[0].k).abs())
            .collect();
        let mut sorted = rates.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        for (i, r) in rates.iter().enumerate() {
            if *r > 10.0 * median.max(1e-8) {
                return Err(Error::ContinuationBreakdown {
                    last_good_k: Some(out[i].k),
                    failed_k: out[i + 1].k,
                });
            }
        }
    }
    Ok(out)
}

fn coeff_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

impl StripeSolution {
    /// `d^order/dxi^order u_p` at `xi`.
    pub fn eval_xi(&self, xi: f64, order: usize) -> f64 {
        cos_series(&self.cos_coeffs, xi, order)
    }

    /// `u_p(k x - phase)` and its first four x-derivatives.
    pub fn eval_x(&self, x: f64, phase: f64) -> [f64; 5] {
        let xi = self.k * x - phase;
        let mut out = [0.0; 5];
        let mut kp = 1.0;
        for (d, o) in out.iter_mut().enumerate() {
            *o = kp * self.eval_xi(xi, d);
            kp *= self.k;
        }
        out
    }

    /// Sup norm of the profile.
    pub fn amplitude(&self) -> f64 {
        let n = 16 * self.n_modes;
        (0..n)
            .map(|j| self.eval_xi(2.0 * PI * j as f64 / n as f64, 0).abs())
            .fold(self.eval_xi(0.0, 0).abs(), f64::max)
    }

    /// Period in x.
    pub fn period(&self) -> f64 {
        2.0 * PI / self.k
    }

    /// Galerkin matrix of the even-subspace linearization at this solution.
    pub fn even_linearization(&self) -> DMatrix<f64> {
        let col = Collocation::new(self.n_modes);
        galerkin_jacobian(self.mu, self.k, &col, &self.cos_coeffs)
    }
}

/// Wavenumber derivative of a stripe and derived evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeDerivatives {
    pub k: f64,
    /// Cosine coefficients of `d_k u_p`.
    pub dk_coeffs: Vec<f64>,
    /// Cosine coefficients of `u_p` (copied for self-contained evaluation).
    pub up_coeffs: Vec<f64>,
    /// Sample points in xi on [0, 2 pi).
    pub grid: Vec<f64>,
    pub d_xi: Vec<f64>,
    pub d_k: Vec<f64>,
    /// `u_p' = k d_xi u_p` on the same samples.
    pub up_prime: Vec<f64>,
    /// Max-norm residual of the defining linear equation on a fine grid.
    pub residual_norm: f64,
}

/// Solves `[-(1+k^2 d^2)^2 + mu - 3 u_p^2] d_k u = 4k (1 + k^2 d^2) d^2 u_p` in the even subspace.
pub fn partial_k(sol: &StripeSolution) -> Result<StripeDerivatives> {
    let jac = sol.even_linearization();
    let k = sol.k;
    let a = &sol.cos_coeffs;
    let rhs = DVector::from_iterator(
        a.len(),
        a.iter().enumerate().map(|(m, &am)| {
            let m2 = (m * m) as f64;
            4.0 * k * (1.0 - k * k * m2) * (-m2) * am
        }),
    );
    let svd_min = jac.clone().svd(false, false).singular_values.min();
    if svd_min < 1e-12 * jac.amax() {
        return Err(Error::SingularLinearization);
    }
    let b = jac.lu().solve(&rhs).ok_or(Error::SingularLinearization)?;
    let dk_coeffs: Vec<f64> = b.iter().copied().collect();

    let nf = 8 * sol.n_modes;
    let mut residual_norm = 0.0f64;
    for j in 0..nf {
        let xi = 2.0 * PI * j as f64 / nf as f64;
        let u = cos_series(a, xi, 0);
        let k2 = k * k;
        let lhs = -(cos_series(&dk_coeffs, xi, 0)
            + 2.0 * k2 * cos_series(&dk_coeffs, xi, 2)
            + k2 * k2 * cos_series(&dk_coeffs, xi, 4))
            + (sol.mu - 3.0 * u * u) * cos_series(&dk_coeffs, xi, 0);
        let r = 4.0 * k * (cos_series(a, xi, 2) + k2 * cos_series(a, xi, 4));
        residual_norm = residual_norm.max((lhs - r).abs());
    }

    let ns = 4 * sol.n_modes;
    let grid: Vec<f64> = (0..ns).map(|j| 2.0 * PI * j as f64 / ns as f64).collect();
    let d_xi: Vec<f64> = grid.iter().map(|&xi| cos_series(a, xi, 1)).collect();
    let d_k: Vec<f64> = grid.iter().map(|&xi| cos_series(&dk_coeffs, xi, 0)).collect();
    let up_prime = d_xi.iter().map(|v| k * v).collect();
    Ok(StripeDerivatives {
        k,
        dk_coeffs,
        up_coeffs: a.clone(),
        grid,
        d_xi,
        d_k,
        up_prime,
        residual_norm,
    })
}

impl StripeDerivatives {
    /// `d^order/dxi^order d_k u_p` at `xi`.
    pub fn eval_dk_xi(&self, xi: f64, order: usize) -> f64 {
        cos_series(&self.dk_coeffs, xi, order)
    }

    /// `u_{p,k}(x) = (x - phase/k) d_xi u_p + d_k u_p` at `xi = k x - phase`.
    pub fn up_kstar(&self, x: f64, phase: f64) -> f64 {
        let xi = self.k * x - phase;
        (x - phase / self.k) * cos_series(&self.up_coeffs, xi, 1) + cos_series(&self.dk_coeffs, xi, 0)
    }

    /// Jet in x of `u_p(k x - phase)`.
    pub fn up_jet<const N: usize>(&self, x: f64, phase: f64) -> Jet<N> {
        series_jet(&self.up_coeffs, Jet::variable(x).scale(self.k) + (-phase), 0)
    }

    /// Jet in x of `d_xi u_p(k x - phase)`.
    pub fn dxi_jet<const N: usize>(&self, x: f64, phase: f64) -> Jet<N> {
        series_jet(&self.up_coeffs, Jet::variable(x).scale(self.k) + (-phase), 1)
    }

    /// Jet in x of `d_k u_p(k x - phase)`.
    pub fn dk_jet<const N: usize>(&self, x: f64, phase: f64) -> Jet<N> {
        series_jet(&self.dk_coeffs, Jet::variable(x).scale(self.k) + (-phase), 0)
    }

    /// Jet in x of `u_{p,k}` about the phase-shifted stripe.
    pub fn up_kstar_jet<const N: usize>(&self, x: f64, phase: f64) -> Jet<N> {
        let shift = Jet::variable(x) + (-phase / self.k);
        shift * self.dxi_jet(x, phase) + self.dk_jet(x, phase)
    }
}

/// Jet of `sum_m c_m d^order/dxi^order cos(m alpha(x))` for a jet `alpha` (order <= 2).
pub fn series_jet<const N: usize>(coeffs: &[f64], alpha: Jet<N>, order: usize) -> Jet<N> {
    let mut out = Jet::<N>::zero();
    for (m, &c) in coeffs.iter().enumerate() {
        if c == 0.0 || m == 0 {
            if m == 0 && order == 0 {
                out = out + c;
            }
            continue;
        }
        let mf = m as f64;
        let (s, co) = alpha.scale(mf).sin_cos();
        let term = match order {
            0 => co.scale(c),
            1 => s.scale(-c * mf),
            2 => co.scale(-c * mf * mf),
            3 => s.scale(c * mf * mf * mf),
            _ => co.scale(c * mf.powi(4)),
        };
        out += term;
    }
    out
}

/// Cubic Hermite interpolation of the stripe family in the wavenumber.
#[derive(Debug, Clone)]
pub struct StripeFamily {
    pub mu: f64,
    pub k_star: f64,
    pub spacing: f64,
    pub ks: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
    pub dk: Vec<Vec<f64>>,
}

/// Profile jets returned by [`StripeFamily::profile_jets`].
#[derive(Debug, Clone, Copy)]
pub struct ProfileJets<const N: usize> {
    pub u: Jet<N>,
    pub u_xi: Jet<N>,
    pub u_k: Jet<N>,
}

impl StripeFamily {
    /// Continues the family on a uniform k-grid of `k_star +- half_width`,
    /// with `k_star` itself a node.
    pub fn around(sol: &StripeSolution, half_width: f64, spacing: f64) -> Result<Self> {
        let n_side = (half_width / spacing).ceil() as usize;
        let mut up: Vec<StripeSolution> = vec![sol.clone()];
        let opts = StripeOptions::default();
        for i in 1..=n_side {
            let k = sol.k + i as f64 * spacing;
            let prev = up.last().expect("nonempty");
            let s = solve_stripe_from(sol.mu, k, &pad(&prev.cos_coeffs, sol.n_modes), &opts)
                .map_err(|_| Error::ContinuationBreakdown {
                    last_good_k: Some(prev.k),
                    failed_k: k,
                })?;
            up.push(s);
        }
        let mut down: Vec<StripeSolution> = vec![];
        for i in 1..=n_side {
            let k = sol.k - i as f64 * spacing;
            let prev = down.last().unwrap_or(sol);
            let s = solve_stripe_from(sol.mu, k, &pad(&prev.cos_coeffs, sol.n_modes), &opts)
                .map_err(|_| Error::ContinuationBreakdown {
                    last_good_k: Some(prev.k),
                    failed_k: k,
                })?;
            down.push(s);
        }
        let mut all: Vec<StripeSolution> = down.into_iter().rev().collect();
        all.extend(up);
        let n_modes = all.iter().map(|s| s.n_modes).max().unwrap_or(sol.n_modes);
        let mut ks = Vec::with_capacity(all.len());
        let mut coeffs = Vec::with_capacity(all.len());
        let mut dk = Vec::with_capacity(all.len());
        for (i, s) in all.iter().enumerate() {
            let d = partial_k(s)?;
            ks.push(sol.k + (i as f64 - n_side as f64) * spacing);
            coeffs.push(pad(&s.cos_coeffs, n_modes));
            dk.push(pad(&d.dk_coeffs, n_modes));
        }
        // the centre node is the input solution, bit for bit
        ks[n_side] = sol.k;
        Ok(StripeFamily {
            mu: sol.mu,
            k_star: sol.k,
            spacing,
            ks,
            coeffs,
            dk,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.ks[0], *self.ks.last().expect("nonempty"))
    }

    fn interval(&self, kappa: f64) -> Result<usize> {
        let (lo, hi) = self.range();
        if !(kappa >= lo && kappa <= hi) {
            return Err(Error::OutOfBand { k: kappa, lo, hi });
        }
        let i = ((kappa - lo) / self.spacing).floor() as isize;
        Ok(i.clamp(0, self.ks.len() as isize - 2) as usize)
    }

    /// Interpolated coefficient jets `c_m(kappa(x))` and `c_m'(kappa(x))`.
    pub fn coeff_jets<const N: usize>(&self, kappa: Jet<N>) -> Result<(Vec<Jet<N>>, Vec<Jet<N>>)> {
        let i = self.interval(kappa.value())?;
        let h = self.ks[i + 1] - self.ks[i];
        let t = (kappa + (-self.ks[i])).scale(1.0 / h);
        let one = Jet::<N>::constant(1.0);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = t3.scale(2.0) - t2.scale(3.0) + one;
        let h10 = t3 - t2.scale(2.0) + t;
        let h01 = t2.scale(3.0) - t3.scale(2.0);
        let h11 = t3 - t2;
        // derivatives with respect to kappa
        let d00 = (t2.scale(6.0) - t.scale(6.0)).scale(1.0 / h);
        let d10 = (t2.scale(3.0) - t.scale(4.0) + one).scale(1.0 / h);
        let d01 = (t.scale(6.0) - t2.scale(6.0)).scale(1.0 / h);
        let d11 = (t2.scale(3.0) - t.scale(2.0)).scale(1.0 / h);
        let (c0, c1, g0, g1) = (&self.coeffs[i], &self.coeffs[i + 1], &self.dk[i], &self.dk[i + 1]);
        let mut vals = Vec::with_capacity(c0.len());
        let mut ders = Vec::with_capacity(c0.len());
        for m in 0..c0.len() {
            vals.push(
                h00.scale(c0[m]) + h10.scale(h * g0[m]) + h01.scale(c1[m]) + h11.scale(h * g1[m]),
            );
            ders.push(
                d00.scale(c0[m]) + d10.scale(h * g0[m]) + d01.scale(c1[m]) + d11.scale(h * g1[m]),
            );
        }
        Ok((vals, ders))
    }

    /// Jets of `U(alpha, kappa)`, `U_xi` and `U_k` along `x -> (alpha(x), kappa(x))`.
    pub fn profile_jets<const N: usize>(&self, alpha: Jet<N>, kappa: Jet<N>) -> Result<ProfileJets<N>> {
        let (c, dc) = self.coeff_jets(kappa)?;
        let mut u = Jet::<N>::zero();
        let mut u_xi = Jet::<N>::zero();
        let mut u_k = Jet::<N>::zero();
        for m in 0..c.len() {
            if m == 0 {
                u += c[0];
                u_k += dc[0];
                continue;
            }
            let mf = m as f64;
            let (s, co) = alpha.scale(mf).sin_cos();
            u += c[m] * co;
            u_xi += (c[m] * s).scale(-mf);
            u_k += dc[m] * co;
        }
        Ok(ProfileJets { u, u_xi, u_k })
    }
}

fn pad(v: &[f64], n_modes: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    if out.len() < n_modes + 1 {
        out.resize(n_modes + 1, 0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> StripeSolution {
        solve_stripe(0.1, 1.0, 32, 1e-10).unwrap()
    }

    #[test]
    fn amplitude_near_landau_value() {
        let s = base();
        let a = s.amplitude();
        assert!((a - 0.36515).abs() / 0.36515 < 0.05, "amplitude {a}");
        assert!(s.residual_norm < 1e-10);
    }

    #[test]
    fn outside_band_has_no_stripe() {
        assert!(matches!(
            solve_stripe(0.1, 1.35, 32, 1e-10),
            Err(Error::NoNontrivialStripe { .. })
        ));
    }

    #[test]
    fn zero_seed_is_rejected() {
        let seed = vec![0.0; 33];
        assert!(matches!(
            solve_stripe_from(0.1, 1.0, &seed, &StripeOptions::default()),
            Err(Error::NoNontrivialStripe { .. })
        ));
    }

    #[test]
    fn tiny_seed_converges_to_zero_branch() {
        let mut seed = vec![0.0; 33];
        seed[1] = 1e-9;
        // far outside the band the only solution is zero
        assert!(matches!(
            solve_stripe_from(0.1, 1.3, &seed, &StripeOptions::default()),
            Err(Error::NoNontrivialStripe { .. })
        ));
    }

    #[test]
    fn partial_k_residual_and_finite_difference() {
        let s = base();
        let d = partial_k(&s).unwrap();
        assert!(d.residual_norm < 1e-9, "{}", d.residual_norm);
        let mut errs = vec![];
        for &h in &[4e-3, 2e-3] {
            let fam = continue_family(0.1, &[1.0 - h, 1.0, 1.0 + h]).unwrap();
            let err = (0..64)
                .map(|j| {
                    let xi = 2.0 * PI * j as f64 / 64.0;
                    let fd = (fam[2].eval_xi(xi, 0) - fam[0].eval_xi(xi, 0)) / (2.0 * h);
                    (fd - d.eval_dk_xi(xi, 0)).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // second order: halving h divides the error by about four
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
    }

    #[test]
    fn symmetries_of_derivatives() {
        let s = base();
        let d = partial_k(&s).unwrap();
        for &xi in &[0.3, 1.1, 2.9] {
            assert!((s.eval_xi(xi, 1) + s.eval_xi(-xi, 1)).abs() < 1e-14);
            assert!((d.eval_dk_xi(xi, 0) - d.eval_dk_xi(-xi, 0)).abs() < 1e-14);
        }
        assert!(s.eval_xi(0.0, 1).abs() < 1e-15);
        assert!((s.eval_xi(0.7, 0) - s.eval_xi(0.7 + 2.0 * PI, 0)).abs() < 1e-14);
    }

    #[test]
    fn fourth_derivative_matches_finite_differences() {
        let s = base();
        let h = 1e-2;
        let f = |x: f64| s.eval_x(x, 0.4)[0];
        let x = 0.37;
        let fd = (f(x - 2.0 * h) - 4.0 * f(x - h) + 6.0 * f(x) - 4.0 * f(x + h) + f(x + 2.0 * h)) / h.powi(4);
        assert!((fd - s.eval_x(x, 0.4)[4]).abs() < 1e-3);
    }

    #[test]
    fn family_amplitude_peaks_near_band_centre() {
        let grid: Vec<f64> = (0..21).map(|i| 0.9 + 0.01 * i as f64).collect();
        let fam = continue_family(0.2, &grid).unwrap();
        assert_eq!(fam.len(), 21);
        let (imax, _) = fam
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.amplitude()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((grid[imax] - 1.0).abs() <= 0.03, "peak at {}", grid[imax]);
    }

    #[test]
    fn single_point_family_equals_direct_solve() {
        let fam = continue_family(0.1, &[1.0]).unwrap();
        assert_eq!(fam[0], base());
    }

    #[test]
    fn continuation_stops_at_band_edge() {
        let grid: Vec<f64> = (0..36).map(|i| 1.0 + 0.01 * i as f64).collect();
        match continue_family(0.1, &grid) {
            Err(Error::ContinuationBreakdown { failed_k, .. }) => {
                let edge = (1.0 + 0.1f64.sqrt()).sqrt();
                assert!((failed_k - edge).abs() < 0.03, "failed at {failed_k}, edge {edge}");
            }
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn hermite_family_reproduces_nodes_and_interpolates() {
        let s = base();
        let fam = StripeFamily::around(&s, 0.01, 0.001).unwrap();
        let (c, _) = fam.coeff_jets(Jet::<3>::constant(1.0)).unwrap();
        for m in 0..s.cos_coeffs.len() {
            assert_eq!(c[m].value(), s.cos_coeffs[m]);
        }
        let kq = 1.0 + 0.0031;
        let direct = solve_stripe(0.1, kq, 32, 1e-10).unwrap();
        let (c, _) = fam.coeff_jets(Jet::<3>::constant(kq)).unwrap();
        for m in 0..direct.cos_coeffs.len() {
            let e = (c[m].value() - direct.cos_coeffs[m]).abs();
            assert!(e < 1e-11, "mode {m}: {e}");
        }
    }
}
