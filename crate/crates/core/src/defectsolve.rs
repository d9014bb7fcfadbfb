//! Full stationary problem on a truncated line: the modulated stripe `u^psi`
//! plus a core correction `w`, with unknowns `(w, phi1, k1)` for given
//! `(phi0, k0)` and impurity amplitude `eps`.
//!
//! The residual splits as `[L_SH u^psi + F(u^psi)] + L_h w + [F(u^psi + w) - F(u^psi)]
//! + eps g(x, u^psi + w, u^psi_x + D_h w)`. The first bracket is evaluated from exact
//! jets of `u^psi`, so the far field contributes nothing once `w` vanishes; the
//! remaining terms use fourth-order finite differences on a uniform grid with two
//! ghost nodes per side.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::banded::BorderedBand;
use crate::bloch::lambda2_from_jet;
use crate::error::{Error, Result};
use crate::farfield::{core_jets, sh_linear, sh_residual, FarFieldParams, PartitionGeometry, StripeContext};
use crate::jet::Jet;
use crate::par;
use crate::response::{response_coefficients, ImpuritySpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Half-domain `L` in periods `2 pi / k_*`.
    pub periods: f64,
    /// Grid points per period; `h = (2 pi / k_*) / points_per_period`.
    pub points_per_period: usize,
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Vanishing derivatives imposed at each end (`w`, `w'`, `w''`).
    pub bc_order: usize,
    /// Exponent of the algebraic weight in [`DefectSolution::weighted_norm`].
    pub weight_gamma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            periods: 40.0,
            points_per_period: 32,
            newton_tol: 1e-10,
            max_iter: 30,
            bc_order: 3,
            weight_gamma: 2.0,
        }
    }
}

impl SolverConfig {
    pub fn with_periods(mut self, periods: f64) -> Self {
        self.periods = periods;
        self
    }
}

/// Partition used by the solver: one period wide. The far-field offsets do not
/// depend on the partition, while a transition narrower than a few grid cells
/// leaves the core correction under-resolved.
pub fn solver_partition(ctx: &StripeContext) -> PartitionGeometry {
    PartitionGeometry::wide(ctx.period()).expect("positive period")
}

/// Uniform grid `x_j = -L + j h`, `j = 0..=n`, with two ghosts per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectGrid {
    pub half_length: f64,
    pub h: f64,
    pub n: usize,
}

pub const GHOSTS: usize = 2;

impl DefectGrid {
    pub fn new(k: f64, cfg: &SolverConfig) -> Result<Self> {
        if cfg.periods <= 0.0 || cfg.points_per_period < 8 {
            return Err(Error::InvalidInput("domain needs periods > 0 and >= 8 points per period".into()));
        }
        let period = 2.0 * PI / k;
        let h = period / cfg.points_per_period as f64;
        // an even number of intervals keeps x = 0 on the grid
        let n = 2 * (cfg.periods * cfg.points_per_period as f64).round() as usize;
        Ok(DefectGrid {
            half_length: n as f64 * h / 2.0,
            h,
            n,
        })
    }

    pub fn x(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|j| self.x(j)).collect()
    }

    /// Number of `w` unknowns, ghosts included.
    pub fn n_w(&self) -> usize {
        self.n + 1 + 2 * GHOSTS
    }

    /// Total unknowns: `w` plus `(phi1, k1)`.
    pub fn n_unknowns(&self) -> usize {
        self.n_w() + 2
    }

    /// Column of node `j` (ghosts at `-2, -1, n+1, n+2`).
    fn col(&self, j: isize) -> usize {
        (j + GHOSTS as isize) as usize
    }
}

/// Unknowns of the defect problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectState {
    /// Values at `j = -2..=n+2`.
    pub w: Vec<f64>,
    pub phi1: f64,
    pub k1: f64,
}

impl DefectState {
    pub fn zero(grid: &DefectGrid) -> Self {
        DefectState {
            w: vec![0.0; grid.n_w()],
            phi1: 0.0,
            k1: 0.0,
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut z = self.w.clone();
        z.push(self.phi1);
        z.push(self.k1);
        z
    }

    fn from_vec(z: &[f64]) -> Self {
        let n = z.len() - 2;
        DefectState {
            w: z[..n].to_vec(),
            phi1: z[n],
            k1: z[n + 1],
        }
    }
}

const D1: [f64; 5] = [1.0, -8.0, 0.0, 8.0, -1.0];
const D2: [f64; 5] = [-1.0, 16.0, -30.0, 16.0, -1.0];
const D4_WIDE: [f64; 7] = [-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0];
const D4_NARROW: [f64; 5] = [1.0, -4.0, 6.0, -4.0, 1.0];

/// Stencil of `L_h = -(1 + d_x^2)^2 + mu` at node `j`, as `(offset, weight)`.
fn linear_stencil(grid: &DefectGrid, j: usize, mu: f64) -> Vec<(isize, f64)> {
    let h = grid.h;
    let mut c = [0.0; 7];
    c[3] += mu - 1.0;
    for (i, d) in D2.iter().enumerate() {
        c[i + 1] -= 2.0 * d / (12.0 * h * h);
    }
    if j >= 1 && j < grid.n {
        for (i, d) in D4_WIDE.iter().enumerate() {
            c[i] -= d / (6.0 * h.powi(4));
        }
    } else {
        for (i, d) in D4_NARROW.iter().enumerate() {
            c[i + 1] -= d / h.powi(4);
        }
    }
    c.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i as isize - 3, *v))
        .collect()
}

fn apply_stencil(w: &[f64], grid: &DefectGrid, j: usize, st: &[(isize, f64)]) -> f64 {
    st.iter().map(|(o, c)| c * w[grid.col(j as isize + o)]).sum()
}

fn d1_stencil(h: f64) -> Vec<(isize, f64)> {
    D1.iter().enumerate().map(|(i, d)| (i as isize - 2, d / (12.0 * h))).collect()
}

fn d2_stencil(h: f64) -> Vec<(isize, f64)> {
    D2.iter().enumerate().map(|(i, d)| (i as isize - 2, d / (12.0 * h * h))).collect()
}

/// Everything held fixed during a solve.
#[derive(Debug, Clone, Copy)]
pub struct DefectProblem<'a> {
    pub ctx: &'a StripeContext,
    pub geom: &'a PartitionGeometry,
    pub g: &'a ImpuritySpec,
    /// `(phi0, k0)`; the `phi1`, `k1` fields are ignored.
    pub psi0: FarFieldParams,
    pub eps: f64,
    pub grid: DefectGrid,
}

impl<'a> DefectProblem<'a> {
    pub fn new(
        ctx: &'a StripeContext,
        geom: &'a PartitionGeometry,
        g: &'a ImpuritySpec,
        psi0: FarFieldParams,
        eps: f64,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        if cfg.bc_order != 3 {
            return Err(Error::InvalidInput(format!(
                "bc_order must be 3 for a square system, got {}",
                cfg.bc_order
            )));
        }
        Ok(DefectProblem {
            ctx,
            geom,
            g,
            psi0,
            eps,
            grid: DefectGrid::new(ctx.k(), cfg)?,
        })
    }

    fn psi(&self, s: &DefectState) -> FarFieldParams {
        FarFieldParams::new(self.psi0.phi0, self.psi0.k0, s.phi1, s.k1)
    }

    fn jets(&self, s: &DefectState) -> Result<Vec<[Jet<5>; 3]>> {
        let psi = self.psi(s);
        let grid = self.grid;
        par::map_range(grid.n + 1, |j| core_jets(self.ctx, self.geom, &psi, grid.x(j)))
            .into_iter()
            .collect()
    }
}

/// Residual and Jacobian of the square system.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub residual: Vec<f64>,
    pub jacobian: BorderedBand,
}

/// Row layout: three boundary rows at the left end, one collocation row per node,
/// three boundary rows at the right end. Unknowns: `w_{-2..n+2}`, `phi1`, `k1`.
pub fn assemble_system(problem: &DefectProblem, state: &DefectState) -> Result<AssembledSystem> {
    assemble(problem, state, true).map(|(r, j)| AssembledSystem {
        residual: r,
        jacobian: j.expect("jacobian requested"),
    })
}

/// Residual only.
pub fn defect_residual(problem: &DefectProblem, state: &DefectState) -> Result<Vec<f64>> {
    assemble(problem, state, false).map(|(r, _)| r)
}

fn assemble(problem: &DefectProblem, state: &DefectState, with_jac: bool) -> Result<(Vec<f64>, Option<BorderedBand>)> {
    let grid = problem.grid;
    let n_unknowns = grid.n_unknowns();
    let n_rows = 3 + (grid.n + 1) + 3;
    // square-system count: collocations plus six boundary rows against nodes,
    // four ghosts and two scalars
    assert_eq!(n_rows, n_unknowns);
    assert_eq!(state.w.len(), grid.n_w());
    let mu = problem.ctx.mu();
    let g = problem.g;
    let eps = problem.eps;
    let h = grid.h;
    let w = &state.w;
    let jets = problem.jets(state)?;
    let d1 = d1_stencil(h);
    let d2 = d2_stencil(h);
    let c_phi = grid.n_w();
    let c_k = c_phi + 1;
    let mut res = vec![0.0; n_rows];
    let mut jac = with_jac.then(|| BorderedBand::new(n_unknowns, 2));

    let bc_rows = |node: usize, first_row: usize, res: &mut Vec<f64>, jac: &mut Option<BorderedBand>| {
        let stencils: [Vec<(isize, f64)>; 3] = [vec![(0, 1.0)], d1.clone(), d2.clone()];
        for (r, st) in stencils.iter().enumerate() {
            res[first_row + r] = apply_stencil(w, &grid, node, st);
            if let Some(m) = jac.as_mut() {
                for (o, c) in st {
                    m.add(first_row + r, grid.col(node as isize + o), *c);
                }
            }
        }
    };
    bc_rows(0, 0, &mut res, &mut jac);

    for (j, [u, dphi, dk]) in jets.iter().enumerate() {
        let row = 3 + j;
        let x = grid.x(j);
        let lin = linear_stencil(&grid, j, mu);
        let uu = u.value();
        let wj = w[grid.col(j as isize)];
        let wx = apply_stencil(w, &grid, j, &d1);
        let total = uu + wj;
        let p = u.deriv(1) + wx;
        let cubic = -(total.powi(3) - uu.powi(3));
        res[row] = sh_residual(mu, u) + apply_stencil(w, &grid, j, &lin) + cubic + eps * g.eval(x, total, p);
        if let Some(m) = jac.as_mut() {
            let gu = eps * g.d_u(x, total, p);
            let gp = eps * g.d_p(x, total, p);
            for (o, c) in &lin {
                m.add(row, grid.col(j as isize + o), *c);
            }
            m.add(row, grid.col(j as isize), -3.0 * total * total + gu);
            if gp != 0.0 {
                for (o, c) in &d1 {
                    m.add(row, grid.col(j as isize + o), gp * c);
                }
            }
            // tangents enter through the exact part and through the local terms
            let shift = -3.0 * (total * total - uu * uu);
            for (col, t) in [(c_phi, dphi), (c_k, dk)] {
                let v = sh_linear(mu, uu, t) + (shift + gu) * t.value() + gp * t.deriv(1);
                m.add(row, col, v);
            }
        }
    }
    bc_rows(grid.n, 3 + grid.n + 1, &mut res, &mut jac);
    Ok((res, jac))
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Max of `|w|` over dyadic windows `2^i T <= |x| < 2^{i+1} T` (the first window
/// starts at 0; the last one ends at `L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub windows: Vec<(f64, f64, f64)>,
}

impl DecayReport {
    pub fn new(grid: &DefectGrid, w_nodes: &[f64], period: f64) -> Self {
        let l = grid.half_length;
        let mut edges = vec![0.0];
        let mut e = period;
        while e < l {
            edges.push(e);
            e *= 2.0;
        }
        edges.push(l + 0.5 * grid.h);
        let windows = edges
            .windows(2)
            .map(|ab| {
                let m = w_nodes
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| {
                        let ax = grid.x(*j).abs();
                        ax >= ab[0] && ax < ab[1]
                    })
                    .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
                (ab[0], ab[1].min(l), m)
            })
            .collect();
        DecayReport { windows }
    }

    /// Largest growth factor between consecutive windows that reach the outer half.
    pub fn outer_growth(&self, half_length: f64) -> f64 {
        let scale = self.windows.iter().fold(0.0f64, |m, w| m.max(w.2));
        let floor = 1e-13 * scale.max(1e-300);
        self.windows
            .windows(2)
            .filter(|p| p[1].1 > 0.5 * half_length)
            .map(|p| (p[1].2 - floor).max(0.0) / p[0].2.max(floor))
            .fold(0.0, f64::max)
    }

    pub fn decays(&self, half_length: f64) -> bool {
        self.outer_growth(half_length) <= 1.0
    }
}

/// Converged defect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectSolution {
    pub grid: DefectGrid,
    pub x: Vec<f64>,
    /// `w` at the nodes (ghosts dropped).
    pub w: Vec<f64>,
    /// Reconstructed `u = u^psi + w` at the nodes.
    pub u: Vec<f64>,
    pub state: DefectState,
    pub psi: FarFieldParams,
    pub eps: f64,
    pub k_star: f64,
    pub residual_norm: f64,
    pub residual_history: Vec<f64>,
    pub decay_report: DecayReport,
    pub weighted_norm: f64,
    pub weight_gamma: f64,
}

/// `sum_{l <= 4} || <x>^{gamma + l} d_x^l w ||_{L^2}` on the grid.
pub fn weighted_norm(grid: &DefectGrid, w: &[f64], gamma: f64) -> f64 {
    let h = grid.h;
    let d1 = d1_stencil(h);
    let d2 = d2_stencil(h);
    let mut acc = 0.0;
    for j in 0..=grid.n {
        let x = grid.x(j);
        let weight = (1.0 + x * x).sqrt();
        let ders = [
            w[grid.col(j as isize)],
            apply_stencil(w, grid, j, &d1),
            apply_stencil(w, grid, j, &d2),
        ];
        for (l, d) in ders.iter().enumerate() {
            acc += h * (weight.powf(gamma + l as f64) * d).powi(2);
        }
        // third and fourth derivatives by nesting the second-order stencils
        if j >= 2 && j + 2 <= grid.n {
            let c = |i: isize| w[grid.col(i)];
            let ji = j as isize;
            let d3 = (-c(ji - 2) + 2.0 * c(ji - 1) - 2.0 * c(ji + 1) + c(ji + 2)) / (2.0 * h.powi(3));
            let d4 = (c(ji - 2) - 4.0 * c(ji - 1) + 6.0 * c(ji) - 4.0 * c(ji + 1) + c(ji + 2)) / h.powi(4);
            acc += h * ((weight.powf(gamma + 3.0) * d3).powi(2) + (weight.powf(gamma + 4.0) * d4).powi(2));
        }
    }
    acc.sqrt()
}

/// Leading-order initial guess `phi1 = eps M_phi`, `k1 = eps M_k`.
pub fn leading_order_guess(ctx: &StripeContext, g: &ImpuritySpec, phi0: f64, eps: f64) -> Result<(f64, f64)> {
    if eps == 0.0 {
        return Ok((0.0, 0.0));
    }
    let l2 = lambda2_from_jet(&ctx.sol, &ctx.derivs).lambda2;
    let (mk, mphi) = response_coefficients(&ctx.sol, &ctx.derivs, l2, g, phi0)?;
    Ok((eps * mphi, eps * mk))
}

fn newton(problem: &DefectProblem, cfg: &SolverConfig, init: DefectState) -> Result<(DefectState, Vec<f64>)> {
    let mut state = init;
    let mut history = vec![];
    let mut sys = assemble_system(problem, &state)?;
    let mut norm = max_norm(&sys.residual);
    history.push(norm);
    for _ in 0..cfg.max_iter {
        if norm < cfg.newton_tol {
            return Ok(polish(problem, state, sys, history));
        }
        let rhs: Vec<f64> = sys.residual.iter().map(|r| -r).collect();
        let step = sys.jacobian.solve(&rhs)?;
        let z = state.to_vec();
        let mut t = 1.0;
        loop {
            let trial = DefectState::from_vec(&z.iter().zip(&step).map(|(a, b)| a + t * b).collect::<Vec<_>>());
            match assemble_system(problem, &trial) {
                Ok(s) => {
                    let n = max_norm(&s.residual);
                    if n < norm || n < cfg.newton_tol {
                        state = trial;
                        sys = s;
                        norm = n;
                        break;
                    }
                }
                Err(e @ Error::OutOfBand { .. }) if t < 1.0 / 64.0 => return Err(e),
                Err(Error::OutOfBand { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
            if t < 1.0 / 64.0 {
                history.push(norm);
                return Err(Error::NewtonDivergence { history });
            }
        }
        history.push(norm);
    }
    if norm < cfg.newton_tol {
        Ok(polish(problem, state, sys, history))
    } else {
        Err(Error::NewtonDivergence { history })
    }
}

/// One extra full step once the tolerance is met. The slow far-field directions
/// are poorly conditioned, so a small residual can still hide a visible error there.
fn polish(
    problem: &DefectProblem,
    state: DefectState,
    sys: AssembledSystem,
    mut history: Vec<f64>,
) -> (DefectState, Vec<f64>) {
    let norm = *history.last().expect("nonempty");
    let rhs: Vec<f64> = sys.residual.iter().map(|r| -r).collect();
    let Ok(step) = sys.jacobian.solve(&rhs) else {
        return (state, history);
    };
    let z: Vec<f64> = state.to_vec().iter().zip(&step).map(|(a, b)| a + b).collect();
    let trial = DefectState::from_vec(&z);
    match defect_residual(problem, &trial) {
        Ok(r) if max_norm(&r) <= norm => {
            history.push(max_norm(&r));
            (trial, history)
        }
        _ => (state, history),
    }
}

/// Solves for `(w, phi1, k1)`. Without `init`, starts from `w = 0` and the
/// leading-order far-field prediction.
pub fn solve_defect(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    g: &ImpuritySpec,
    psi0: FarFieldParams,
    eps: f64,
    cfg: &SolverConfig,
    init: Option<DefectState>,
) -> Result<DefectSolution> {
    let problem = DefectProblem::new(ctx, geom, g, psi0, eps, cfg)?;
    let grid = problem.grid;
    if geom.transition_width < 4.0 * grid.h {
        log::warn!(
            "transition width {} spans fewer than four grid cells (h = {})",
            geom.transition_width,
            grid.h
        );
    }
    let init = match init {
        Some(s) if s.w.len() == grid.n_w() => s,
        Some(s) => DefectState {
            w: vec![0.0; grid.n_w()],
            ..s
        },
        None => {
            let (phi1, k1) = leading_order_guess(ctx, g, psi0.phi0, eps)?;
            DefectState {
                w: vec![0.0; grid.n_w()],
                phi1,
                k1,
            }
        }
    };
    let (state, history) = newton(&problem, cfg, init)?;
    let psi = problem.psi(&state);
    let jets = problem.jets(&state)?;
    let w_nodes: Vec<f64> = state.w[GHOSTS..GHOSTS + grid.n + 1].to_vec();
    let u: Vec<f64> = jets.iter().zip(&w_nodes).map(|(j, w)| j[0].value() + w).collect();
    let decay_report = DecayReport::new(&grid, &w_nodes, ctx.period());
    if !decay_report.decays(grid.half_length) {
        return Err(Error::DecayViolation(decay_report.outer_growth(grid.half_length)));
    }
    Ok(DefectSolution {
        grid,
        x: grid.nodes(),
        weighted_norm: weighted_norm(&grid, &state.w, cfg.weight_gamma),
        weight_gamma: cfg.weight_gamma,
        w: w_nodes,
        u,
        state,
        psi,
        eps,
        k_star: ctx.k(),
        residual_norm: *history.last().expect("nonempty"),
        residual_history: history,
        decay_report,
    })
}

/// Residual reached when `(phi1, k1)` are frozen and only `w` is solved for, by
/// Gauss-Newton on the overdetermined system. A rigid decomposition leaves a
/// residual proportional to the frozen offset.
pub fn frozen_gauge_residual(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    g: &ImpuritySpec,
    psi0: FarFieldParams,
    eps: f64,
    cfg: &SolverConfig,
    frozen: &DefectState,
    iterations: usize,
) -> Result<f64> {
    let problem = DefectProblem::new(ctx, geom, g, psi0, eps, cfg)?;
    let nw = problem.grid.n_w();
    let mut state = frozen.clone();
    let mut best = f64::INFINITY;
    for _ in 0..iterations {
        let sys = assemble_system(&problem, &state)?;
        best = best.min(max_norm(&sys.residual));
        // normal equations restricted to the w columns
        let rows = sys.residual.len();
        let mut ata = BorderedBand::new(nw, 0);
        let mut atb = vec![0.0; nw];
        let cols: Vec<Vec<(usize, f64)>> = (0..rows)
            .map(|r| {
                let lo = r.saturating_sub(8);
                let hi = (r + 8).min(nw);
                (lo..hi)
                    .map(|c| (c, sys.jacobian.get(r, c)))
                    .filter(|(_, v)| *v != 0.0)
                    .collect()
            })
            .collect();
        for (r, entries) in cols.iter().enumerate() {
            for &(a, va) in entries {
                atb[a] -= va * sys.residual[r];
                for &(b, vb) in entries {
                    ata.add(a, b, va * vb);
                }
            }
        }
        let dw = ata.solve(&atb)?;
        for (w, d) in state.w.iter_mut().zip(&dw) {
            *w += d;
        }
    }
    let r = defect_residual(&problem, &state)?;
    Ok(best.min(max_norm(&r)))
}

/// Far-field offsets fitted from a sampled field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarFieldFit {
    /// Fitted `u ~ U(kappa x - beta, kappa)` on the right and left windows.
    pub kappa_plus: f64,
    pub beta_plus: f64,
    pub kappa_minus: f64,
    pub beta_minus: f64,
    pub k1: f64,
    pub phi1: f64,
    pub correlation: f64,
}

fn fit_window(ctx: &StripeContext, xs: &[f64], us: &[f64], kappa0: f64) -> Result<(f64, f64, f64)> {
    let fam = &ctx.family;
    let model = |kappa: f64, beta: f64, x: f64| -> Result<[f64; 3]> {
        let p = fam.profile_jets(
            Jet::<1>::constant(kappa * x - beta),
            Jet::<1>::constant(kappa),
        )?;
        Ok([p.u.value(), p.u_xi.value(), p.u_k.value()])
    };
    let sse = |kappa: f64, beta: f64| -> Result<f64> {
        xs.iter().zip(us).map(|(&x, &u)| Ok((model(kappa, beta, x)?[0] - u).powi(2))).sum()
    };
    // coarse scan in beta fixes the branch
    let mut beta = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..64 {
        let b = 2.0 * PI * i as f64 / 64.0;
        let e = sse(kappa0, b)?;
        if e < best {
            best = e;
            beta = b;
        }
    }
    let mut kappa = kappa0;
    for _ in 0..30 {
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &u) in xs.iter().zip(us) {
            let [v, vxi, vk] = model(kappa, beta, x)?;
            let jk = x * vxi + vk;
            let jb = -vxi;
            let r = u - v;
            a11 += jk * jk;
            a12 += jk * jb;
            a22 += jb * jb;
            b1 += jk * r;
            b2 += jb * r;
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            return Err(Error::FitFailure(0.0));
        }
        let dk = (a22 * b1 - a12 * b2) / det;
        let db = (a11 * b2 - a12 * b1) / det;
        kappa += dk;
        beta += db;
        if dk.abs() < 1e-15 && db.abs() < 1e-13 {
            break;
        }
    }
    let norm: f64 = us.iter().map(|u| u * u).sum();
    let corr = 1.0 - sse(kappa, beta)? / norm.max(1e-300);
    Ok((kappa, beta, corr))
}

fn wrap_pi(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Fits the far-field phase in the windows `L/2 <= |x| <= 3L/4` of a sampled field
/// against translated and stretched stripe profiles.
pub fn measure_field(ctx: &StripeContext, x: &[f64], u: &[f64], half_length: f64, k0: f64) -> Result<FarFieldFit> {
    let pick = |sign: f64| -> (Vec<f64>, Vec<f64>) {
        x.iter()
            .zip(u)
            .filter(|(xx, _)| {
                let s = sign * **xx;
                s >= 0.5 * half_length && s <= 0.75 * half_length
            })
            .map(|(a, b)| (*a, *b))
            .unzip()
    };
    let (xp, up) = pick(1.0);
    let (xm, um) = pick(-1.0);
    let (kp, bp, cp) = fit_window(ctx, &xp, &up, ctx.k() + k0)?;
    let (km, bm, cm) = fit_window(ctx, &xm, &um, ctx.k() + k0)?;
    let correlation = cp.min(cm);
    if !(correlation >= 0.99) {
        return Err(Error::FitFailure(correlation));
    }
    Ok(FarFieldFit {
        kappa_plus: kp,
        beta_plus: bp,
        kappa_minus: km,
        beta_minus: bm,
        k1: 0.5 * (kp - km),
        phi1: 0.5 * wrap_pi(bp - bm),
        correlation,
    })
}

/// Far-field `(k1, phi1)` read off the reconstructed field, independent of the
/// ansatz bookkeeping.
pub fn measure_farfield(ctx: &StripeContext, defect: &DefectSolution) -> Result<(f64, f64)> {
    let f = measure_field(ctx, &defect.x, &defect.u, defect.grid.half_length, defect.psi.k0)?;
    Ok((f.k1, f.phi1))
}

/// Solved `k1`, `phi1` along an amplitude sweep and their quadratic fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeReport {
    pub eps: Vec<f64>,
    pub k1: Vec<f64>,
    pub phi1: Vec<f64>,
    /// `k1 ~ a_k eps + b_k eps^2`.
    pub a_k: f64,
    pub b_k: f64,
    pub a_phi: f64,
    pub b_phi: f64,
    /// Root-mean-square misfit of the two fits.
    pub misfit_k: f64,
    pub misfit_phi: f64,
}

/// Least squares for `y ~ a e + b e^2`; returns `(a, b, rms misfit)`.
pub fn fit_linear_quadratic(eps: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&e, &v) in eps.iter().zip(y) {
        s11 += e * e;
        s12 += e * e * e;
        s22 += e.powi(4);
        t1 += e * v;
        t2 += e * e * v;
    }
    let det = s11 * s22 - s12 * s12;
    let a = (s22 * t1 - s12 * t2) / det;
    let b = (s11 * t2 - s12 * t1) / det;
    let rms = (eps
        .iter()
        .zip(y)
        .map(|(&e, &v)| (v - a * e - b * e * e).powi(2))
        .sum::<f64>()
        / eps.len() as f64)
        .sqrt();
    (a, b, rms)
}

/// Sweeps the amplitude, warm-starting each solve from the previous one.
pub fn epsilon_sweep(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    g: &ImpuritySpec,
    psi0: FarFieldParams,
    eps_list: &[f64],
    cfg: &SolverConfig,
) -> Result<SlopeReport> {
    if eps_list.len() < 4 {
        return Err(Error::InvalidInput("amplitude sweep needs at least 4 values".into()));
    }
    let mut k1 = vec![];
    let mut phi1 = vec![];
    let mut prev: Option<(f64, DefectState)> = None;
    for &eps in eps_list {
        let init = match &prev {
            None => None,
            Some((e0, s)) => {
                // scale the previous state to the new amplitude
                let r = eps / e0;
                Some(DefectState {
                    w: s.w.iter().map(|v| v * r).collect(),
                    phi1: s.phi1 * r,
                    k1: s.k1 * r,
                })
            }
        };
        let sol = solve_defect(ctx, geom, g, psi0, eps, cfg, init)?;
        k1.push(sol.state.k1);
        phi1.push(sol.state.phi1);
        prev = Some((eps, sol.state));
    }
    let (a_k, b_k, misfit_k) = fit_linear_quadratic(eps_list, &k1);
    let (a_phi, b_phi, misfit_phi) = fit_linear_quadratic(eps_list, &phi1);
    Ok(SlopeReport {
        eps: eps_list.to_vec(),
        k1,
        phi1,
        a_k,
        b_k,
        a_phi,
        b_phi,
        misfit_k,
        misfit_phi,
    })
}

/// One row of a truncation study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncationRow {
    pub periods: f64,
    pub k1: f64,
    pub phi1: f64,
    /// `|k1(L) - k1(previous L)|`.
    pub diff_k1: Option<f64>,
    /// `log2` of the ratio of successive differences.
    pub order: Option<f64>,
}

/// Re-solves on each half-length (in periods); independent solves run in parallel.
pub fn truncation_study(
    ctx: &StripeContext,
    geom: &PartitionGeometry,
    g: &ImpuritySpec,
    psi0: FarFieldParams,
    eps: f64,
    cfg: &SolverConfig,
    periods: &[f64],
) -> Result<Vec<TruncationRow>> {
    let sols = par::map(periods, |&p| {
        solve_defect(ctx, geom, g, psi0, eps, &cfg.with_periods(p), None)
    });
    let mut rows: Vec<TruncationRow> = vec![];
    for (p, s) in periods.iter().zip(sols) {
        let s = s?;
        let diff = rows.last().map(|r| (s.state.k1 - r.k1).abs());
        let order = match (rows.last().and_then(|r| r.diff_k1), diff) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some((a / b).log2()),
            _ => None,
        };
        rows.push(TruncationRow {
            periods: *p,
            k1: s.state.k1,
            phi1: s.state.phi1,
            diff_k1: diff,
            order,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stripes::solve_stripe;
    use std::sync::OnceLock;

    fn ctx() -> &'static StripeContext {
        static C: OnceLock<StripeContext> = OnceLock::new();
        C.get_or_init(|| StripeContext::new(solve_stripe(0.1, 1.0, 32, 1e-10).unwrap()).unwrap())
    }

    fn small() -> SolverConfig {
        SolverConfig {
            periods: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn exact_stripe_has_zero_residual() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let p = DefectProblem::new(c, &geom, &g, FarFieldParams::new(0.3, 0.0, 0.0, 0.0), 0.0, &small()).unwrap();
        let r = defect_residual(&p, &DefectState::zero(&p.grid)).unwrap();
        assert!(max_norm(&r) < 1e-10, "{}", max_norm(&r));
    }

    #[test]
    fn far_field_is_exact() {
        let c = ctx();
        let geom = PartitionGeometry::new(0.5).unwrap();
        let g = ImpuritySpec::Zero;
        let p = DefectProblem::new(c, &geom, &g, FarFieldParams::new(0.3, 0.0, 0.0, 0.0), 0.0, &small()).unwrap();
        let s = DefectState {
            phi1: 0.02,
            k1: 0.01,
            ..DefectState::zero(&p.grid)
        };
        let r = defect_residual(&p, &s).unwrap();
        let (mut inner, mut outer) = (0.0f64, 0.0f64);
        for j in 0..=p.grid.n {
            let v = r[3 + j].abs();
            if p.grid.x(j).abs() > 1.0 {
                outer = outer.max(v);
            } else {
                inner = inner.max(v);
            }
        }
        assert!(outer < 1e-10, "{outer}");
        assert!(inner > 1e-4, "{inner}");
    }

    #[test]
    fn jacobian_matches_differences() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::Sum {
            parts: vec![
                ImpuritySpec::gaussian(2.0, 1.0, 0.5),
                ImpuritySpec::GaussianDrift { width: 1.0, c: 0.7, center: 0.4 },
            ],
        };
        let cfg = SolverConfig { periods: 4.0, ..Default::default() };
        let p = DefectProblem::new(c, &geom, &g, FarFieldParams::new(1.1, 0.0, 0.0, 0.0), 0.3, &cfg).unwrap();
        let n = p.grid.n_w();
        let state = DefectState {
            w: (0..n).map(|i| 0.01 * (0.37 * i as f64).sin()).collect(),
            phi1: 0.01,
            k1: -0.005,
        };
        let dir: Vec<f64> = (0..n + 2).map(|i| (1.3 * i as f64).cos()).collect();
        let sys = assemble_system(&p, &state).unwrap();
        let jv = sys.jacobian.apply(&dir);
        let z = state.to_vec();
        let mut errs = vec![];
        for hfd in [4e-2, 2e-2] {
            let at = |s: f64| {
                let zz: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
                defect_residual(&p, &DefectState::from_vec(&zz)).unwrap()
            };
            let (rp, rm) = (at(hfd), at(-hfd));
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * hfd)).collect();
            let e = fd.iter().zip(&jv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / max_norm(&jv);
            errs.push(e);
        }
        assert!(errs[0] < 1e-3, "{errs:?}");
        assert!(errs[1] < 0.5 * errs[0], "{errs:?}");
    }

    #[test]
    fn zero_amplitude_recovers_stripe() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let s = solve_defect(c, &geom, &g, FarFieldParams::new(0.5, 0.0, 0.0, 0.0), 0.0, &small(), None).unwrap();
        assert!(s.state.phi1.abs() < 1e-12 && s.state.k1.abs() < 1e-12);
        assert!(max_norm(&s.w) < 1e-12);
        let (k1, phi1) = measure_farfield(c, &s).unwrap();
        assert!(k1.abs() < 1e-10 && phi1.abs() < 1e-10, "{k1} {phi1}");
    }

    #[test]
    fn even_impurity_forces_zero_jump() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let s = solve_defect(c, &geom, &g, FarFieldParams::new(0.0, 0.0, 0.0, 0.0), 1e-3, &small(), None).unwrap();
        assert!(s.state.k1.abs() < 1e-9, "{}", s.state.k1);
        assert!(s.residual_norm < 1e-10);
    }

    #[test]
    fn solved_jump_tracks_response() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let phi0 = PI / 2.0;
        let eps = 1e-3;
        let cfg = SolverConfig::default();
        let s = solve_defect(c, &geom, &g, FarFieldParams::new(phi0, 0.0, 0.0, 0.0), eps, &cfg, None).unwrap();
        let (phi1, k1) = leading_order_guess(c, &g, phi0, eps).unwrap();
        assert!((s.state.k1 / k1 - 1.0).abs() < 0.1, "{} {k1}", s.state.k1);
        assert!((s.state.phi1 - phi1).abs() < 0.1 * eps, "{} {phi1}", s.state.phi1);
        let (mk1, mphi1) = measure_farfield(c, &s).unwrap();
        assert!((mk1 - s.state.k1).abs() < 1e-6 * s.state.k1.abs() + 1e-10, "{mk1} {}", s.state.k1);
        // the phase offset is checked in absolute terms: point conditions at the
        // ends leave a phase-dependent far-field residue near 1e-8
        assert!((mphi1 - s.state.phi1).abs() < 1e-6, "{mphi1} {}", s.state.phi1);
        // a global translation moves both fitted phases by kappa s
        let shift = 0.3;
        let shifted: Vec<f64> = s.x.iter().map(|x| x - shift).collect();
        let a = measure_field(c, &s.x, &s.u, s.grid.half_length, 0.0).unwrap();
        let b = measure_field(c, &shifted, &s.u, s.grid.half_length - shift, 0.0).unwrap();
        let db = wrap_pi(b.beta_plus - a.beta_plus + a.kappa_plus * shift);
        assert!(db.abs() < 1e-8, "{db}");
        assert!(s.decay_report.decays(s.grid.half_length));
        assert!(s.weighted_norm.is_finite() && s.weighted_norm > 0.0);
    }

    #[test]
    fn sweep_slopes_match_response() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let phi0 = 1.1;
        let r = epsilon_sweep(c, &geom, &g, FarFieldParams::new(phi0, 0.0, 0.0, 0.0), &[1e-3, 2e-3, 4e-3, 8e-3], &small())
            .unwrap();
        let l2 = lambda2_from_jet(&c.sol, &c.derivs).lambda2;
        let (mk, mphi) = response_coefficients(&c.sol, &c.derivs, l2, &g, phi0).unwrap();
        assert!((r.a_k / mk - 1.0).abs() < 0.01, "{} {mk}", r.a_k);
        assert!((r.a_phi / mphi - 1.0).abs() < 0.01, "{} {mphi}", r.a_phi);
        // the sign flip of the amplitude flips both offsets up to second order
        let cfg = small();
        let psi0 = FarFieldParams::new(phi0, 0.0, 0.0, 0.0);
        let plus = solve_defect(c, &geom, &g, psi0, 2e-3, &cfg, None).unwrap();
        let minus = solve_defect(c, &geom, &g, psi0, -2e-3, &cfg, None).unwrap();
        assert!((plus.state.k1 + minus.state.k1).abs() < 2.0 * r.b_k.abs() * 4e-6 + 1e-10);
        assert!((plus.state.phi1 + minus.state.phi1).abs() < 2.0 * r.b_phi.abs() * 4e-6 + 1e-10);
    }

    #[test]
    fn decomposition_is_rigid() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
        let cfg = SolverConfig { periods: 6.0, ..Default::default() };
        let psi0 = FarFieldParams::new(1.1, 0.0, 0.0, 0.0);
        let s = solve_defect(c, &geom, &g, psi0, 1e-3, &cfg, None).unwrap();
        let mut frozen = s.state.clone();
        frozen.phi1 += 1e-4;
        let r = frozen_gauge_residual(c, &geom, &g, psi0, 1e-3, &cfg, &frozen, 3).unwrap();
        assert!(r > 1e3 * cfg.newton_tol, "{r}");
    }

    #[test]
    fn rejects_bad_config() {
        let c = ctx();
        let geom = solver_partition(c);
        let g = ImpuritySpec::Zero;
        let cfg = SolverConfig { bc_order: 2, ..Default::default() };
        assert!(DefectProblem::new(c, &geom, &g, FarFieldParams::new(0.0, 0.0, 0.0, 0.0), 0.0, &cfg).is_err());
        assert!(epsilon_sweep(c, &geom, &g, FarFieldParams::new(0.0, 0.0, 0.0, 0.0), &[1e-3], &small()).is_err());
    }

    #[test]
    fn fit_recovers_coefficients() {
        let e = [1e-3, 2e-3, 4e-3, 8e-3];
        let y: Vec<f64> = e.iter().map(|x| 0.7 * x - 3.0 * x * x).collect();
        let (a, b, r) = fit_linear_quadratic(&e, &y);
        assert!((a - 0.7).abs() < 1e-12 && (b + 3.0).abs() < 1e-8 && r < 1e-15);
    }
}
