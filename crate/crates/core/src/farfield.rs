//! Partition of unity, phase modulation of the far-field stripes, the
//! commutator `K` produced by gluing them, and its cokernel pairings.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::quad::{gauss_legendre, CompositeGauss};
use crate::stripes::{partial_k, StripeDerivatives, StripeFamily, StripeSolution};

/// `e^{-1/t}` for `t > 0`, else 0.
fn flat(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

fn flat_jet<const N: usize>(t: Jet<N>) -> Jet<N> {
    if t.value() > 0.0 {
        (-t.recip()).exp()
    } else {
        Jet::zero()
    }
}

/// Smooth step `S(t) = f(t) / (f(t) + f(1-t))`.
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = flat(t);
        a / (a + flat(1.0 - t))
    }
}

fn smooth_step_jet<const N: usize>(t: Jet<N>) -> Jet<N> {
    let v = t.value();
    if v <= 0.0 {
        Jet::zero()
    } else if v >= 1.0 {
        Jet::constant(1.0)
    } else {
        let a = flat_jet(t);
        let b = flat_jet(Jet::constant(1.0) - t);
        a * (a + b).recip()
    }
}

/// `chi_+ = S((x + w) / 2w)`, `chi_-(x) = chi_+(-x)`, `theta = chi_+ - chi_-`,
/// and `Theta` with `Theta' = theta`, `Theta(x) = |x|` once `|x| >= w`.
#[derive(Debug, Clone)]
pub struct PartitionGeometry {
    pub transition_width: f64,
    pub c: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PartitionGeometry {
    pub fn new(transition_width: f64) -> Result<Self> {
        if !(transition_width > 0.0 && transition_width <= 0.5) {
            return Err(Error::InvalidInput(format!(
                "transition width must lie in (0, 1/2], got {transition_width}"
            )));
        }
        Ok(Self::build(transition_width))
    }

    /// Partition with an arbitrary transition width. Far-field quantities do not
    /// depend on the width; wide transitions keep the core correction smooth.
    pub fn wide(transition_width: f64) -> Result<Self> {
        if !(transition_width > 0.0 && transition_width.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "transition width must be positive, got {transition_width}"
            )));
        }
        Ok(Self::build(transition_width))
    }

    fn build(transition_width: f64) -> Self {
        let (nodes, weights) = gauss_legendre(24);
        let mut g = PartitionGeometry {
            transition_width,
            c: 0.0,
            nodes,
            weights,
        };
        g.c = transition_width - g.theta_integral(transition_width);
        g
    }

    pub fn chi_plus(&self, x: f64) -> f64 {
        smooth_step((x + self.transition_width) / (2.0 * self.transition_width))
    }

    pub fn chi_minus(&self, x: f64) -> f64 {
        self.chi_plus(-x)
    }

    pub fn theta(&self, x: f64) -> f64 {
        self.chi_plus(x) - self.chi_minus(x)
    }

    pub fn theta_prime(&self, x: f64) -> f64 {
        self.theta_jet::<2>(x).0[1]
    }

    /// `int_0^x theta` for `0 <= x <= w`, eight Gauss panels.
    fn theta_integral(&self, x: f64) -> f64 {
        let panels = 8;
        let h = x / panels as f64;
        let mut s = 0.0;
        for p in 0..panels {
            let a = p as f64 * h;
            for (t, w) in self.nodes.iter().zip(&self.weights) {
                s += w * self.theta(a + 0.5 * h * (t + 1.0));
            }
        }
        0.5 * h * s
    }

    #[allow(non_snake_case)]
    pub fn Theta(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax >= self.transition_width {
            ax
        } else {
            self.c + self.theta_integral(ax)
        }
    }

    pub fn chi_plus_jet<const N: usize>(&self, x: f64) -> Jet<N> {
        let t = (Jet::variable(x) + self.transition_width).scale(1.0 / (2.0 * self.transition_width));
        smooth_step_jet(t)
    }

    pub fn chi_minus_jet<const N: usize>(&self, x: f64) -> Jet<N> {
        let t = (Jet::variable(x).scale(-1.0) + self.transition_width)
            .scale(1.0 / (2.0 * self.transition_width));
        smooth_step_jet(t)
    }

    pub fn theta_jet<const N: usize>(&self, x: f64) -> Jet<N> {
        if x >= self.transition_width {
            Jet::constant(1.0)
        } else if x <= -self.transition_width {
            Jet::constant(-1.0)
        } else {
            self.chi_plus_jet(x) - self.chi_minus_jet(x)
        }
    }

    #[allow(non_snake_case)]
    pub fn Theta_jet<const N: usize>(&self, x: f64) -> Jet<N> {
        if x.abs() >= self.transition_width {
            let mut c = [0.0; N];
            c[0] = x.abs();
            if N > 1 {
                c[1] = x.signum();
            }
            return Jet(c);
        }
        let th = self.theta_jet::<N>(x);
        let mut c = [0.0; N];
        c[0] = self.Theta(x);
        for j in 1..N {
            c[j] = th.0[j - 1] / j as f64;
        }
        Jet(c)
    }
}

/// Far-field matching variables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FarFieldParams {
    pub phi0: f64,
    pub k0: f64,
    pub phi1: f64,
    pub k1: f64,
}

impl FarFieldParams {
    pub fn new(phi0: f64, k0: f64, phi1: f64, k1: f64) -> Self {
        FarFieldParams { phi0, k0, phi1, k1 }
    }

    /// `phi(x) = k0 x - phi0 + k1 Theta(x) - phi1 theta(x)`.
    pub fn phase_jet<const N: usize>(&self, geom: &PartitionGeometry, x: f64) -> Jet<N> {
        let xj = Jet::<N>::variable(x);
        xj.scale(self.k0) + (-self.phi0) + geom.Theta_jet::<N>(x).scale(self.k1)
            - geom.theta_jet::<N>(x).scale(self.phi1)
    }

    /// `phi^+-(x) = k0 x - phi0 +- (k1 x - phi1)`.
    pub fn side_phase_jet<const N: usize>(&self, x: f64, sign: f64) -> Jet<N> {
        let xj = Jet::<N>::variable(x);
        xj.scale(self.k0) + (-self.phi0) + (xj.scale(self.k1) + (-self.phi1)).scale(sign)
    }
}

/// Stripe, its k-derivative and the interpolated family around it.
#[derive(Debug, Clone)]
pub struct StripeContext {
    pub sol: StripeSolution,
    pub derivs: StripeDerivatives,
    pub family: StripeFamily,
}

/// Half-width and node spacing of the default k-family. The half-width is
/// clipped to stay inside the existence band `mu > (1 - k^2)^2`.
pub const FAMILY_HALF_WIDTH: f64 = 0.1;
pub const FAMILY_SPACING: f64 = 0.001;

impl StripeContext {
    pub fn new(sol: StripeSolution) -> Result<Self> {
        let root = sol.mu.max(0.0).sqrt();
        let edge = ((1.0 + root).sqrt() - sol.k).min(sol.k - (1.0 - root).max(0.0).sqrt());
        let half = FAMILY_HALF_WIDTH.min(0.8 * edge).max(FAMILY_SPACING);
        Self::with_family(sol, half, FAMILY_SPACING)
    }

    pub fn with_family(sol: StripeSolution, half_width: f64, spacing: f64) -> Result<Self> {
        let derivs = partial_k(&sol)?;
        let family = StripeFamily::around(&sol, half_width, spacing)?;
        Ok(StripeContext { sol, derivs, family })
    }

    pub fn k(&self) -> f64 {
        self.sol.k
    }

    pub fn mu(&self) -> f64 {
        self.sol.mu
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.sol.k
    }
}

/// Jets at one point of the modulated stripe, its far-field pieces and its
/// tangents with respect to `phi1`, `k1`.
#[derive(Debug, Clone, Copy)]
pub struct ModulatedJets {
    pub u: Jet<5>,
    pub u_plus: Jet<5>,
    pub u_minus: Jet<5>,
    pub d_phi1: Jet<5>,
    pub d_k1: Jet<5>,
}

/// Jets of the modulated profile `u^psi` and its tangents `(d_phi1, d_k1)` at `x`.
pub fn core_jets(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    psi: &FarFieldParams,
    x: f64,
) -> Result<[Jet<5>; 3]> {
    let k = ctx.k();
    let phi = psi.phase_jet::<6>(geom, x);
    let alpha: Jet<5> = (Jet::<6>::variable(x).scale(k) + phi).truncate();
    let kappa: Jet<5> = (phi.differentiate() + k).truncate();
    let p = ctx.family.profile_jets(alpha, kappa)?;
    let th = geom.theta_jet::<5>(x);
    let thp: Jet<5> = geom.theta_jet::<6>(x).differentiate().truncate();
    let big = geom.Theta_jet::<5>(x);
    Ok([p.u, -(p.u_xi * th + p.u_k * thp), p.u_xi * big + p.u_k * th])
}

/// All jets of the modulated profile at `x`.
pub fn modulated_jets(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    psi: &FarFieldParams,
    x: f64,
) -> Result<ModulatedJets> {
    let k = ctx.k();
    let phi = psi.phase_jet::<6>(geom, x);
    let alpha: Jet<5> = (Jet::<6>::variable(x).scale(k) + phi).truncate();
    let kappa: Jet<5> = (phi.differentiate() + k).truncate();
    let p = ctx.family.profile_jets(alpha, kappa)?;
    let th = geom.theta_jet::<5>(x);
    let thp: Jet<5> = geom.theta_jet::<6>(x).differentiate().truncate();
    let big = geom.Theta_jet::<5>(x);
    let d_phi1 = -(p.u_xi * th + p.u_k * thp);
    let d_k1 = p.u_xi * big + p.u_k * th;
    let side = |sign: f64| -> Result<Jet<5>> {
        let a = Jet::<5>::variable(x).scale(k) + psi.side_phase_jet::<5>(x, sign);
        let kap = Jet::<5>::constant(k + psi.k0 + sign * psi.k1);
        Ok(ctx.family.profile_jets(a, kap)?.u)
    };
    Ok(ModulatedJets {
        u: p.u,
        u_plus: side(1.0)?,
        u_minus: side(-1.0)?,
        d_phi1,
        d_k1,
    })
}

/// Grid samples of [`modulated_jets`] (values only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulatedStripe {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u_plus: Vec<f64>,
    pub u_minus: Vec<f64>,
    pub d_phi1: Vec<f64>,
    pub d_k1: Vec<f64>,
}

pub fn modulated_stripe(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    psi: &FarFieldParams,
    grid: &[f64],
) -> Result<ModulatedStripe> {
    let mut out = ModulatedStripe {
        x: grid.to_vec(),
        u: vec![],
        u_plus: vec![],
        u_minus: vec![],
        d_phi1: vec![],
        d_k1: vec![],
    };
    for &x in grid {
        let j = modulated_jets(ctx, geom, psi, x)?;
        out.u.push(j.u.value());
        out.u_plus.push(j.u_plus.value());
        out.u_minus.push(j.u_minus.value());
        out.d_phi1.push(j.d_phi1.value());
        out.d_k1.push(j.d_k1.value());
    }
    Ok(out)
}

/// `L_SH u + F(u)` from a jet of `u`.
pub fn sh_residual(mu: f64, u: &Jet<5>) -> f64 {
    let d = u.derivs();
    -(d[0] + 2.0 * d[2] + d[4]) + mu * d[0] - d[0].powi(3)
}

/// `L_SH v + F'(u) v` from jets of `u` and `v`.
pub fn sh_linear(mu: f64, u: f64, v: &Jet<5>) -> f64 {
    let d = v.derivs();
    -(d[0] + 2.0 * d[2] + d[4]) + (mu - 3.0 * u * u) * d[0]
}

/// Commutator `K(psi)` at one point.
pub fn commutator_at(ctx: &StripeContext, geom: &PartitionGeometry, psi: &FarFieldParams, x: f64) -> Result<f64> {
    let j = modulated_jets(ctx, geom, psi, x)?;
    let mu = ctx.mu();
    Ok(sh_residual(mu, &j.u)
        - geom.chi_plus(x) * sh_residual(mu, &j.u_plus)
        - geom.chi_minus(x) * sh_residual(mu, &j.u_minus))
}

pub fn commutator_k(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    psi: &FarFieldParams,
    grid: &[f64],
) -> Result<Vec<f64>> {
    grid.iter().map(|&x| commutator_at(ctx, geom, psi, x)).collect()
}

/// Partial derivatives of `K` at `psi = 0` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KPartials {
    pub phi0: f64,
    pub k0: f64,
    pub phi1: f64,
    pub k1: f64,
}

/// Closed forms of the partial derivatives of `K` at `psi = 0`:
/// `K_phi1 = [theta, L0] d_xi u_p - L0(theta' d_k u_p)`,
/// `K_k1 = L0(Theta d_xi u_p + theta d_k u_p) - theta L0 u_{p,k}`,
/// and `K_phi0`, `K_k0` from the full chain rule, which leaves the factor `1 - chi_+ - chi_-`.
pub fn k_partials_at(ctx: &StripeContext, geom: &PartitionGeometry, x: f64) -> KPartials {
    let d = &ctx.derivs;
    let mu = ctx.mu();
    let u = d.up_jet::<5>(x, 0.0).value();
    let dxi = d.dxi_jet::<5>(x, 0.0);
    let dk = d.dk_jet::<5>(x, 0.0);
    let upk = d.up_kstar_jet::<5>(x, 0.0);
    let th = geom.theta_jet::<5>(x);
    let thp: Jet<5> = geom.theta_jet::<6>(x).differentiate().truncate();
    let big = geom.Theta_jet::<5>(x);
    let l0 = |v: &Jet<5>| sh_linear(mu, u, v);
    let th0 = th.value();
    let phi1 = th0 * l0(&dxi) - l0(&(th * dxi)) - l0(&(thp * dk));
    let k1 = l0(&(big * dxi + th * dk)) - th0 * l0(&upk);
    let rest = 1.0 - geom.chi_plus(x) - geom.chi_minus(x);
    KPartials {
        phi0: -rest * l0(&dxi),
        k0: rest * l0(&upk),
        phi1,
        k1,
    }
}

/// `(K_phi1, K_k1)` on a grid, by closed form and by centred differences of
/// [`commutator_k`] with step `h`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KLinearization {
    pub x: Vec<f64>,
    pub k_phi1: Vec<f64>,
    pub k_k1: Vec<f64>,
    pub k_phi0: Vec<f64>,
    pub k_k0: Vec<f64>,
    pub fd_phi1: Vec<f64>,
    pub fd_k1: Vec<f64>,
}

pub fn k_linearization(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    grid: &[f64],
    h: f64,
) -> Result<KLinearization> {
    let mut out = KLinearization {
        x: grid.to_vec(),
        k_phi1: vec![],
        k_k1: vec![],
        k_phi0: vec![],
        k_k0: vec![],
        fd_phi1: vec![],
        fd_k1: vec![],
    };
    let p = |phi1, k1| FarFieldParams::new(0.0, 0.0, phi1, k1);
    for &x in grid {
        let kp = k_partials_at(ctx, geom, x);
        out.k_phi1.push(kp.phi1);
        out.k_k1.push(kp.k1);
        out.k_phi0.push(kp.phi0);
        out.k_k0.push(kp.k0);
        let fp = (commutator_at(ctx, geom, &p(h, 0.0), x)? - commutator_at(ctx, geom, &p(-h, 0.0), x)?)
            / (2.0 * h);
        let fk = (commutator_at(ctx, geom, &p(0.0, h), x)? - commutator_at(ctx, geom, &p(0.0, -h), x)?)
            / (2.0 * h);
        out.fd_phi1.push(fp);
        out.fd_k1.push(fk);
    }
    Ok(out)
}

/// Bracket whose constancy in `x0` expresses the off-diagonal pairing:
/// `2 [sum_{j<4} (-1)^j u_k^(j) u^(4-j) + 2 sum_{j<2} (-1)^j u_k^(j) u^(2-j)]`.
pub fn kk_bracket(derivs: &StripeDerivatives, x0: f64) -> f64 {
    let u = derivs.up_jet::<5>(x0, 0.0).derivs();
    let v = derivs.up_kstar_jet::<5>(x0, 0.0).derivs();
    let mut s4 = 0.0;
    for j in 0..4 {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        s4 += sign * v[j] * u[4 - j];
    }
    let s2 = v[0] * u[2] - v[1] * u[1];
    2.0 * (s4 + 2.0 * s2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
}

impl Identity {
    pub fn holds(&self) -> bool {
        self.residual < self.tolerance
    }
}

/// Cokernel pairings and the identities they satisfy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingReport {
    /// `[[<u',K_phi1>, <u_k,K_phi1>], [<u',K_k1>, <u_k,K_k1>]]`.
    pub pairings: [[f64; 2]; 2],
    pub kk_mean: f64,
    pub kk_spread: f64,
    pub diffusivity_rhs: f64,
    pub identities: Vec<Identity>,
}

impl PairingReport {
    pub fn determinant(&self) -> f64 {
        let p = &self.pairings;
        p[0][0] * p[1][1] - p[0][1] * p[1][0]
    }

    /// The off-diagonal value `<u', K_k1>`.
    pub fn off_diagonal(&self) -> f64 {
        self.pairings[1][0]
    }
}

pub const ID_DIAGONAL: &str = "diagonal pairings vanish";
pub const ID_OFFDIAG: &str = "off-diagonal pairings coincide";
pub const ID_KK: &str = "bracket constant in x0";
pub const ID_DIFFUSIVITY: &str = "off-diagonal equals -lambda2/pi int (u')^2";
pub const ID_DETERMINANT: &str = "pairing determinant nonzero";

/// Panels over `[-w, w]` no wider than `w/32` or a 64th of a period.
fn support_rule(ctx: &StripeContext, geom: &PartitionGeometry) -> CompositeGauss {
    let w = geom.transition_width;
    let panels = (((2.0 * w) / (ctx.period() / 64.0)).ceil() as usize).max(64);
    CompositeGauss::new(-w, w, panels, 10)
}

/// Computes the four pairings and checks the identities against `lambda2`.
pub fn cokernel_pairings(ctx: &StripeContext, geom: &PartitionGeometry, lambda2: f64) -> PairingReport {
    let rule = support_rule(ctx, geom);
    let d = &ctx.derivs;
    let k = ctx.k();
    let mut p = [[0.0; 2]; 2];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let kp = k_partials_at(ctx, geom, *x);
        let up = k * d.dxi_jet::<1>(*x, 0.0).value();
        let uk = d.up_kstar(*x, 0.0);
        p[0][0] += w * up * kp.phi1;
        p[0][1] += w * uk * kp.phi1;
        p[1][0] += w * up * kp.k1;
        p[1][1] += w * uk * kp.k1;
    }
    let period = ctx.period();
    let x0s: Vec<f64> = (0..32).map(|j| period * (j as f64 + 0.37) / 32.0).collect();
    let b: Vec<f64> = x0s.iter().map(|&x0| kk_bracket(d, x0)).collect();
    let mean = b.iter().sum::<f64>() / b.len() as f64;
    let spread = (b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b.len() as f64).sqrt();

    let n = 8 * ctx.sol.n_modes;
    let int_up2 = (0..n)
        .map(|j| {
            let xi = 2.0 * PI * j as f64 / n as f64;
            (k * ctx.sol.eval_xi(xi, 1)).powi(2)
        })
        .sum::<f64>()
        * period
        / n as f64;
    let rhs = -lambda2 / PI * int_up2;
    let scale = p[1][0].abs().max(f64::MIN_POSITIVE);
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let identities = vec![
        Identity {
            name: ID_DIAGONAL.into(),
            residual: p[0][0].abs().max(p[1][1].abs()) / scale,
            tolerance: 1e-8,
        },
        Identity {
            name: ID_OFFDIAG.into(),
            residual: (p[1][0] - k * p[0][1]).abs() / scale,
            tolerance: 1e-8,
        },
        Identity {
            name: ID_KK.into(),
            residual: spread / mean.abs().max(f64::MIN_POSITIVE),
            tolerance: 1e-6,
        },
        Identity {
            name: ID_DIFFUSIVITY.into(),
            residual: (p[1][0] - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE),
            tolerance: 1e-3,
        },
        Identity {
            name: ID_DETERMINANT.into(),
            residual: 1e-6 * scale * scale / det.abs().max(f64::MIN_POSITIVE),
            tolerance: 1.0,
        },
    ];
    PairingReport {
        pairings: p,
        kk_mean: mean,
        kk_spread: spread,
        diffusivity_rhs: rhs,
        identities,
    }
}

/// Like [`cokernel_pairings`], failing with the first violated identity.
pub fn checked_pairings(ctx: &StripeContext, geom: &PartitionGeometry, lambda2: f64) -> Result<PairingReport> {
    let rep = cokernel_pairings(ctx, geom, lambda2);
    if let Some(id) = rep.identities.iter().find(|i| !i.holds()) {
        return Err(Error::IdentityViolation {
            name: id.name.clone(),
            residual: id.residual,
        });
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::lambda2_from_jet;
    use crate::stripes::solve_stripe;

    fn ctx() -> StripeContext {
        StripeContext::new(solve_stripe(0.1, 1.0, 32, 1e-10).unwrap()).unwrap()
    }

    #[test]
    fn partition_identities() {
        let g = PartitionGeometry::new(0.3).unwrap();
        for j in 0..1000 {
            let x = -1.5 + 3.0 * j as f64 / 999.0;
            assert!((g.chi_plus(x) + g.chi_minus(x) - 1.0).abs() <= 1e-15);
            assert_eq!(g.theta(-x), -g.theta(x));
            assert!((g.Theta(-x) - g.Theta(x)).abs() < 1e-15);
        }
        assert_eq!(g.Theta(2.0), 2.0);
        assert_eq!(g.Theta(-2.0), 2.0);
        assert_eq!(g.theta(1.0), 1.0);
        assert!(g.c > 0.0);
        // continuity at the edge of the transition
        let w = g.transition_width;
        assert!((g.Theta(w - 1e-12) - w).abs() < 1e-11);
        assert!(PartitionGeometry::new(0.7).is_err());
    }

    #[test]
    fn theta_jet_matches_finite_differences() {
        let g = PartitionGeometry::new(0.5).unwrap();
        let x = 0.13;
        let h = 1e-4;
        let fd = (g.theta(x + h) - g.theta(x - h)) / (2.0 * h);
        assert!((fd - g.theta_prime(x)).abs() < 1e-6);
        let fd = (g.Theta(x + h) - g.Theta(x - h)) / (2.0 * h);
        assert!((fd - g.theta(x)).abs() < 1e-7);
    }

    #[test]
    fn identity_modulation_and_far_field() {
        let c = ctx();
        let g = PartitionGeometry::new(0.5).unwrap();
        let zero = FarFieldParams::default();
        for &x in &[-3.1, -0.2, 0.0, 0.4, 2.7] {
            let j = modulated_jets(&c, &g, &zero, x).unwrap();
            assert_eq!(j.u.value(), c.sol.eval_x(x, 0.0)[0]);
        }
        let psi = FarFieldParams::new(0.3, 0.004, 0.02, -0.003);
        for &x in &[-3.1, -1.2, 1.0, 2.7] {
            let j = modulated_jets(&c, &g, &psi, x).unwrap();
            let side = if x > 0.0 { j.u_plus } else { j.u_minus };
            assert!((j.u.value() - side.value()).abs() < 1e-12);
            assert!(commutator_at(&c, &g, &psi, x).unwrap().abs() < 1e-10);
        }
        let shift = FarFieldParams::new(0.3, 0.0, 0.0, 0.0);
        let j = modulated_jets(&c, &g, &shift, 0.9).unwrap();
        assert!((j.u.value() - c.sol.eval_x(0.9 - 0.3 / c.k(), 0.0)[0]).abs() < 1e-13);
    }

    #[test]
    fn commutator_is_quadratic_remainder() {
        let c = ctx();
        let g = PartitionGeometry::new(0.5).unwrap();
        let grid: Vec<f64> = (0..41).map(|j| -1.0 + j as f64 / 20.0).collect();
        let dir = FarFieldParams::new(0.0, 0.0, 0.7, 0.4);
        let lin: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let kp = k_partials_at(&c, &g, x);
                dir.phi1 * kp.phi1 + dir.k1 * kp.k1
            })
            .collect();
        let mut errs = vec![];
        for &s in &[4e-3, 2e-3] {
            let psi = FarFieldParams::new(0.0, 0.0, s * dir.phi1, s * dir.k1);
            let k = commutator_k(&c, &g, &psi, &grid).unwrap();
            let e = k.iter().zip(&lin).map(|(a, b)| (a - s * b).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.5 && ratio < 4.5, "{errs:?}");
        assert!(commutator_k(&c, &g, &FarFieldParams::default(), &grid)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn closed_form_partials_match_differences() {
        let c = ctx();
        let g = PartitionGeometry::new(0.5).unwrap();
        let grid: Vec<f64> = (0..21).map(|j| -0.6 + 0.06 * j as f64).collect();
        let mut errs = vec![];
        for &h in &[2e-5, 1e-5] {
            let lin = k_linearization(&c, &g, &grid, h).unwrap();
            let scale = lin.k_phi1.iter().chain(&lin.k_k1).fold(0.0f64, |m, v| m.max(v.abs()));
            let e = lin
                .k_phi1
                .iter()
                .zip(&lin.fd_phi1)
                .chain(lin.k_k1.iter().zip(&lin.fd_k1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                / scale;
            errs.push(e);
            assert!(lin.k_phi0.iter().chain(&lin.k_k0).all(|v| v.abs() < 1e-10));
        }
        assert!(errs[1] < 1e-5, "{errs:?}");
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
    }

    #[test]
    fn pairing_identities_hold() {
        let c = ctx();
        let lambda2 = lambda2_from_jet(&c.sol, &c.derivs).lambda2;
        let a = cokernel_pairings(&c, &PartitionGeometry::new(0.5).unwrap(), lambda2);
        for id in &a.identities {
            assert!(id.holds(), "{} residual {}", id.name, id.residual);
        }
        let b = cokernel_pairings(&c, &PartitionGeometry::new(0.25).unwrap(), lambda2);
        for i in 0..2 {
            for j in 0..2 {
                let d = (a.pairings[i][j] - b.pairings[i][j]).abs() / a.off_diagonal().abs();
                assert!(d < 1e-6);
            }
        }
        assert!((a.kk_mean - a.off_diagonal()).abs() < 1e-8 * a.off_diagonal().abs());
    }
}
