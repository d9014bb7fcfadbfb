//! Leading-order far-field response `M_k(phi0, 0)`, `M_phi(phi0, 0)` to a
//! localized impurity, phase sweeps and pinning phases.
//!
//! `M_phi` pairs `g` with `u_{p,k} = x d_xi u_p(k x - phi0) + d_k u_p(k x - phi0)`, the
//! k-derivative of the stripe at fixed `phi0`. Pairing instead with
//! `(x - phi0/k) d_xi u_p + d_k u_p` gives `M_phi - (phi0/k) M_k`; the full solver
//! selects the former (see [`crate::defectsolve::epsilon_sweep`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::quad::simpson_weights;
use crate::stripes::{StripeDerivatives, StripeSolution};

/// A localized inhomogeneity `g(x, u, u_x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImpuritySpec {
    /// `e^{-(x-c)^2/w^2} (a + b u)`.
    GaussianTimesAffine { width: f64, a: f64, b: f64, center: f64 },
    /// `bump((x-c)/r) (a + b u)` with `bump(y) = e^{-1/(1-y^2)}` on `|y| < 1`.
    CompactBump { radius: f64, a: f64, b: f64, center: f64 },
    /// `d_u G` for `G = e^{-(x-c)^2/w^2} (alpha u + beta u^2/2)`.
    Gradient { width: f64, alpha: f64, beta: f64, center: f64 },
    /// `c e^{-(x-x0)^2/w^2} u_x`; not of the form `d_u G(x, u)`.
    GaussianDrift { width: f64, c: f64, center: f64 },
    Sum { parts: Vec<ImpuritySpec> },
    Zero,
}

fn gauss(x: f64, c: f64, w: f64) -> f64 {
    let y = (x - c) / w;
    (-y * y).exp()
}

fn bump(x: f64, c: f64, r: f64) -> f64 {
    let y = (x - c) / r;
    if y.abs() < 1.0 {
        (-1.0 / (1.0 - y * y)).exp()
    } else {
        0.0
    }
}

impl ImpuritySpec {
    /// The Gaussian used in the headline validation runs.
    pub fn gaussian(width: f64, a: f64, b: f64) -> Self {
        ImpuritySpec::GaussianTimesAffine { width, a, b, center: 0.0 }
    }

    /// `g(x, u, p)` with `p = u_x`.
    pub fn eval(&self, x: f64, u: f64, p: f64) -> f64 {
        match self {
            ImpuritySpec::GaussianTimesAffine { width, a, b, center } => gauss(x, *center, *width) * (a + b * u),
            ImpuritySpec::CompactBump { radius, a, b, center } => bump(x, *center, *radius) * (a + b * u),
            ImpuritySpec::Gradient { width, alpha, beta, center } => gauss(x, *center, *width) * (alpha + beta * u),
            ImpuritySpec::GaussianDrift { width, c, center } => c * gauss(x, *center, *width) * p,
            ImpuritySpec::Sum { parts } => parts.iter().map(|g| g.eval(x, u, p)).sum(),
            ImpuritySpec::Zero => 0.0,
        }
    }

    /// `d g / d u`.
    pub fn d_u(&self, x: f64, u: f64, p: f64) -> f64 {
        match self {
            ImpuritySpec::GaussianTimesAffine { width, b, center, .. } => gauss(x, *center, *width) * b,
            ImpuritySpec::CompactBump { radius, b, center, .. } => bump(x, *center, *radius) * b,
            ImpuritySpec::Gradient { width, beta, center, .. } => gauss(x, *center, *width) * beta,
            ImpuritySpec::GaussianDrift { .. } | ImpuritySpec::Zero => 0.0,
            ImpuritySpec::Sum { parts } => parts.iter().map(|g| g.d_u(x, u, p)).sum(),
        }
    }

    /// `d g / d u_x`.
    pub fn d_p(&self, x: f64, u: f64, p: f64) -> f64 {
        match self {
            ImpuritySpec::GaussianDrift { width, c, center } => c * gauss(x, *center, *width),
            ImpuritySpec::Sum { parts } => parts.iter().map(|g| g.d_p(x, u, p)).sum(),
            _ => 0.0,
        }
    }

    /// True when `g = d_u G(x, u)` for some localized `G`.
    pub fn is_gradient(&self) -> bool {
        match self {
            ImpuritySpec::GaussianDrift { c, .. } => *c == 0.0,
            ImpuritySpec::Sum { parts } => parts.iter().all(|g| g.is_gradient()),
            _ => true,
        }
    }

    /// `g(x - s, u, p)`.
    pub fn shifted(&self, s: f64) -> Self {
        let mut g = self.clone();
        g.shift_in_place(s);
        g
    }

    fn shift_in_place(&mut self, s: f64) {
        match self {
            ImpuritySpec::GaussianTimesAffine { center, .. }
            | ImpuritySpec::CompactBump { center, .. }
            | ImpuritySpec::Gradient { center, .. }
            | ImpuritySpec::GaussianDrift { center, .. } => *center += s,
            ImpuritySpec::Sum { parts } => parts.iter_mut().for_each(|g| g.shift_in_place(s)),
            ImpuritySpec::Zero => {}
        }
    }

    /// Interval outside which `|g|` is negligible, and a bound on the neglected mass
    /// per unit of `|a + b u| + |p|`.
    pub fn support(&self) -> (f64, f64, f64) {
        let gauss_support = |c: f64, w: f64| {
            let x = (8.0 * w).max(20.0);
            // int_X^inf e^{-y^2/w^2} dy <= w^2/(2X) e^{-X^2/w^2}, both tails
            let tail = w * w / x * (-(x / w).powi(2)).exp();
            (c - x, c + x, tail)
        };
        match self {
            ImpuritySpec::GaussianTimesAffine { width, center, .. }
            | ImpuritySpec::Gradient { width, center, .. }
            | ImpuritySpec::GaussianDrift { width, center, .. } => gauss_support(*center, *width),
            ImpuritySpec::CompactBump { radius, center, .. } => (center - radius, center + radius, 0.0),
            ImpuritySpec::Sum { parts } => parts.iter().map(|g| g.support()).fold(
                (f64::INFINITY, f64::NEG_INFINITY, 0.0),
                |(a, b, t), (c, d, s)| (a.min(c), b.max(d), t + s),
            ),
            ImpuritySpec::Zero => (-1.0, 1.0, 0.0),
        }
    }

    /// Sup of the amplitude parameters, used to scale the tail bound.
    fn amplitude_bound(&self, umax: f64, pmax: f64) -> f64 {
        match self {
            ImpuritySpec::GaussianTimesAffine { a, b, .. } | ImpuritySpec::CompactBump { a, b, .. } => {
                a.abs() + b.abs() * umax
            }
            ImpuritySpec::Gradient { alpha, beta, .. } => alpha.abs() + beta.abs() * umax,
            ImpuritySpec::GaussianDrift { c, .. } => c.abs() * pmax,
            ImpuritySpec::Sum { parts } => parts.iter().map(|g| g.amplitude_bound(umax, pmax)).sum(),
            ImpuritySpec::Zero => 0.0,
        }
    }
}

/// Quadrature settings for the response integrals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResponseQuadrature {
    /// Grid spacing as a fraction of the period.
    pub points_per_period: usize,
    /// Allowed bound on the truncated tails.
    pub tail_tol: f64,
}

impl Default for ResponseQuadrature {
    fn default() -> Self {
        ResponseQuadrature {
            points_per_period: 128,
            tail_tol: 1e-14,
        }
    }
}

/// `lambda2 k int_0^{2 pi/k} (d_xi u_p)^2 dx`.
fn denominator(sol: &StripeSolution, lambda2: f64) -> f64 {
    let n = 8 * sol.n_modes;
    let s: f64 = (0..n)
        .map(|j| sol.eval_xi(2.0 * PI * j as f64 / n as f64, 1).powi(2))
        .sum();
    lambda2 * sol.k * s * (2.0 * PI / sol.k) / n as f64
}

/// `(M_k, M_phi)` at `(phi0, 0)`.
pub fn response_coefficients(
    sol: &StripeSolution,
    derivs: &StripeDerivatives,
    lambda2: f64,
    g: &ImpuritySpec,
    phi0: f64,
) -> Result<(f64, f64)> {
    response_coefficients_with(sol, derivs, lambda2, g, phi0, &ResponseQuadrature::default())
}

pub fn response_coefficients_with(
    sol: &StripeSolution,
    derivs: &StripeDerivatives,
    lambda2: f64,
    g: &ImpuritySpec,
    phi0: f64,
    q: &ResponseQuadrature,
) -> Result<(f64, f64)> {
    if lambda2.abs() < 1e-10 {
        return Err(Error::ZeroDiffusivity(lambda2));
    }
    let k = sol.k;
    let (lo, hi, tail) = g.support();
    let umax = sol.amplitude();
    let pmax = k * (0..64)
        .map(|j| sol.eval_xi(2.0 * PI * j as f64 / 64.0, 1).abs())
        .fold(0.0, f64::max)
        * 1.1;
    // the u_{p,k} weight grows linearly; bound it on the truncated interval's edge
    let weight = pmax / k * (lo.abs().max(hi.abs()) + phi0.abs() / k + 1.0) + 1.0;
    let tail_bound = tail * g.amplitude_bound(umax, pmax) * weight;
    if tail_bound > q.tail_tol {
        return Err(Error::TailBoundExceeded(tail_bound));
    }
    let h_target = 2.0 * PI / k / q.points_per_period as f64;
    let mut n = ((hi - lo) / h_target).ceil() as usize;
    n += n % 2;
    let h = (hi - lo) / n as f64;
    let w = simpson_weights(n, h);
    let mut ik = 0.0;
    let mut iphi = 0.0;
    for (j, wj) in w.iter().enumerate() {
        let x = lo + j as f64 * h;
        let xi = k * x - phi0;
        let u = sol.eval_xi(xi, 0);
        let dxi = sol.eval_xi(xi, 1);
        let gv = g.eval(x, u, k * dxi);
        if gv == 0.0 {
            continue;
        }
        ik += wj * gv * dxi;
        iphi += wj * gv * (derivs.up_kstar(x, phi0) + phi0 / k * dxi);
    }
    let den = denominator(sol, lambda2);
    Ok((PI * ik / den, PI * iphi / den))
}

/// `M_k`, `M_phi` over a uniform phase grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub phi0_grid: Vec<f64>,
    pub mk: Vec<f64>,
    pub mphi: Vec<f64>,
    /// Trapezoid mean of `M_k` over one period of `phi0`.
    pub mean_mk: f64,
}

impl ResponseCurve {
    /// `oint M_k dphi0` by the trapezoid rule.
    pub fn mk_integral(&self) -> f64 {
        2.0 * PI * self.mean_mk
    }
}

pub fn phase_sweep(
    sol: &StripeSolution,
    derivs: &StripeDerivatives,
    lambda2: f64,
    g: &ImpuritySpec,
    n_phases: usize,
) -> Result<ResponseCurve> {
    if n_phases < 16 {
        return Err(Error::InvalidInput("phase sweep needs at least 16 phases".into()));
    }
    let grid: Vec<f64> = (0..n_phases).map(|j| 2.0 * PI * j as f64 / n_phases as f64).collect();
    let vals = par::map(&grid, |&p| response_coefficients(sol, derivs, lambda2, g, p));
    let mut mk = Vec::with_capacity(n_phases);
    let mut mphi = Vec::with_capacity(n_phases);
    for v in vals {
        let (a, b) = v?;
        mk.push(a);
        mphi.push(b);
    }
    let mean_mk = mk.iter().sum::<f64>() / n_phases as f64;
    Ok(ResponseCurve {
        phi0_grid: grid,
        mk,
        mphi,
        mean_mk,
    })
}

/// A zero of `M_k(., 0)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PinningPhase {
    pub phi_star: f64,
    pub slope: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PinningReport {
    pub roots: Vec<PinningPhase>,
    /// Set when the whole curve vanishes, so every phase is a degenerate root.
    pub identically_zero: bool,
}

/// Trigonometric interpolant of equispaced periodic samples.
struct TrigInterp {
    a0: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    nyquist: Option<f64>,
}

impl TrigInterp {
    fn new(v: &[f64]) -> Self {
        let n = v.len();
        let half = n / 2;
        let mut a = vec![0.0; half + 1];
        let mut b = vec![0.0; half + 1];
        for (m, (am, bm)) in a.iter_mut().zip(b.iter_mut()).enumerate() {
            for (j, vj) in v.iter().enumerate() {
                let t = 2.0 * PI * (m * j) as f64 / n as f64;
                *am += vj * t.cos();
                *bm += vj * t.sin();
            }
            *am *= 2.0 / n as f64;
            *bm *= 2.0 / n as f64;
        }
        let nyquist = if n % 2 == 0 { Some(0.5 * a[half]) } else { None };
        TrigInterp {
            a0: 0.5 * a[0],
            a,
            b,
            nyquist,
        }
    }

    fn eval(&self, t: f64, deriv: bool) -> f64 {
        let top = self.a.len() - 1;
        let mut s = if deriv { 0.0 } else { self.a0 };
        for m in 1..=top {
            let mf = m as f64;
            let (sn, cs) = (mf * t).sin_cos();
            let (am, bm) = if m == top && self.nyquist.is_some() {
                (self.nyquist.unwrap(), 0.0)
            } else {
                (self.a[m], self.b[m])
            };
            s += if deriv {
                mf * (bm * cs - am * sn)
            } else {
                am * cs + bm * sn
            };
        }
        s
    }
}

/// Locates the zeros of `M_k` on `[0, 2 pi)` by bisection on the trigonometric
/// interpolant of the sampled curve; slopes are that interpolant's derivative.
pub fn pinning_phases(curve: &ResponseCurve) -> PinningReport {
    let scale = curve.mk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-14 {
        return PinningReport {
            roots: vec![],
            identically_zero: true,
        };
    }
    let f = TrigInterp::new(&curve.mk);
    // scan on a refined grid so that roots between samples are bracketed
    let n = 8 * curve.mk.len();
    let t: Vec<f64> = (0..=n).map(|j| 2.0 * PI * j as f64 / n as f64).collect();
    let v: Vec<f64> = t.iter().map(|&x| f.eval(x, false)).collect();
    let mut roots = vec![];
    for j in 0..n {
        let (a, b) = (v[j], v[j + 1]);
        let root = if a == 0.0 {
            Some(t[j])
        } else if a * b < 0.0 {
            let (mut lo, mut hi, mut flo) = (t[j], t[j + 1], a);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let fm = f.eval(mid, false);
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (fm < 0.0) == (flo < 0.0) {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            Some(0.5 * (lo + hi))
        } else {
            None
        };
        if let Some(r) = root {
            let slope = f.eval(r, true);
            roots.push(PinningPhase {
                phi_star: r.rem_euclid(2.0 * PI),
                slope,
                degenerate: slope.abs() < 1e-8,
            });
        }
    }
    PinningReport {
        roots,
        identically_zero: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::lambda2_from_jet;
    use crate::stripes::{partial_k, solve_stripe};

    fn setup() -> (StripeSolution, StripeDerivatives, f64) {
        let s = solve_stripe(0.1, 1.0, 32, 1e-10).unwrap();
        let d = partial_k(&s).unwrap();
        let l = lambda2_from_jet(&s, &d).lambda2;
        (s, d, l)
    }

    #[test]
    fn even_impurity_symmetries() {
        let (s, d, l) = setup();
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.0);
        let (mk, mphi) = response_coefficients(&s, &d, l, &g, 0.0).unwrap();
        assert!(mk.abs() < 1e-12, "{mk}");
        assert!(mphi.abs() > 1e-3);
        let g2 = ImpuritySpec::gaussian(2.0, 2.0, 0.0);
        let (mk1, mp1) = response_coefficients(&s, &d, l, &g, 0.7).unwrap();
        let (mk2, mp2) = response_coefficients(&s, &d, l, &g2, 0.7).unwrap();
        assert!((mk2 - 2.0 * mk1).abs() <= 1e-14 * mk1.abs().max(1.0));
        assert!((mp2 - 2.0 * mp1).abs() <= 1e-14 * mp1.abs().max(1.0));
        let (a, b) = response_coefficients(&s, &d, -l, &g, 0.7).unwrap();
        assert_eq!(a, -mk1);
        assert_eq!(b, -mp1);
    }

    #[test]
    fn translation_covariance() {
        let (s, d, l) = setup();
        let g = ImpuritySpec::gaussian(1.5, 0.4, 0.8);
        let shift = 0.83;
        let (a, _) = response_coefficients(&s, &d, l, &g, 0.4).unwrap();
        let (b, _) = response_coefficients(&s, &d, l, &g.shifted(shift), 0.4 + s.k * shift).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs().max(1e-3));
    }

    #[test]
    fn quadrature_converged() {
        let (s, d, l) = setup();
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let q1 = ResponseQuadrature { points_per_period: 64, ..Default::default() };
        let q2 = ResponseQuadrature { points_per_period: 128, ..Default::default() };
        let a = response_coefficients_with(&s, &d, l, &g, 1.1, &q1).unwrap();
        let b = response_coefficients_with(&s, &d, l, &g, 1.1, &q2).unwrap();
        assert!((a.0 - b.0).abs() < 1e-8 * b.0.abs());
        assert!((a.1 - b.1).abs() < 1e-8 * b.1.abs());
    }

    #[test]
    fn errors() {
        let (s, d, _) = setup();
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.0);
        assert!(matches!(
            response_coefficients(&s, &d, 1e-12, &g, 0.0),
            Err(Error::ZeroDiffusivity(_))
        ));
        assert!(phase_sweep(&s, &d, -4.0, &g, 8).is_err());
    }

    #[test]
    fn gradient_mean_vanishes_and_drift_does_not() {
        let (s, d, l) = setup();
        let g = ImpuritySpec::Gradient { width: 2.0, alpha: 1.0, beta: 0.5, center: 0.3 };
        let c = phase_sweep(&s, &d, l, &g, 64).unwrap();
        assert!(c.mk_integral().abs() < 1e-8);
        let rep = pinning_phases(&c);
        assert!(rep.roots.iter().filter(|r| !r.degenerate).count() >= 2);
        let drift = ImpuritySpec::GaussianDrift { width: 2.0, c: 1.0, center: 0.0 };
        let c = phase_sweep(&s, &d, l, &drift, 64).unwrap();
        let expected = PI.sqrt() * 2.0 * s.k / (2.0 * l);
        assert!((c.mean_mk - expected).abs() < 1e-6 * expected.abs(), "{} {expected}", c.mean_mk);
    }

    #[test]
    fn even_curve_has_roots_at_zero_and_pi() {
        let (s, d, l) = setup();
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let c = phase_sweep(&s, &d, l, &g, 64).unwrap();
        assert!((c.mk[0] - response_coefficients(&s, &d, l, &g, 2.0 * PI).unwrap().0).abs() < 1e-10);
        let rep = pinning_phases(&c);
        let near = |p: f64| rep.roots.iter().any(|r| {
            let d = (r.phi_star - p).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d) < 1e-8
        });
        assert!(near(0.0) && near(PI), "{:?}", rep.roots);
    }

    #[test]
    fn zero_curve_is_flagged() {
        let (s, d, l) = setup();
        let c = phase_sweep(&s, &d, l, &ImpuritySpec::Zero, 16).unwrap();
        let rep = pinning_phases(&c);
        assert!(rep.identically_zero && rep.roots.is_empty());
    }
}
