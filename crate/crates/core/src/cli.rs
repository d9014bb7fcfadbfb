//! Batch front end: configuration resolution, pipelines and report files.
//!
//! A run is fully described by a [`RunConfig`]; values come from built-in
//! defaults, then an optional JSON config file, then command-line flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::acceptance;
use crate::bloch::{bloch_data, hypothesis_report, FIT_SAMPLES, FIT_WINDOW};
use crate::defectsolve::{epsilon_sweep, solve_defect, solver_partition, SolverConfig};
use crate::error::Error;
use crate::farfield::{cokernel_pairings, FarFieldParams, PartitionGeometry, StripeContext};
use crate::fredholmlab::{
    borderline_range_test, discrete_weighted_operator, hardy_constant_fit, interval_representatives,
    kernel_cokernel_dims_with, sh_linearization_index_scan, NullCounting, OperatorKind, ShScanConfig, WeightSpec,
};
use crate::par;
use crate::response::{phase_sweep, pinning_phases, response_coefficients, ImpuritySpec, ResponseQuadrature};
use crate::stripes::{continue_family, solve_stripe, StripeOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Stripes,
    Bloch,
    Pairings,
    Response,
    Solve,
    Sweep,
    Fredholm,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "stripe-impurity", version, about = "Swift-Hohenberg stripes with localized impurities")]
pub struct Cli {
    /// Pipeline to run; may instead come from the config file.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// JSON config file with `command`, `output_dir`, `format` and `parameters`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Format of tabular outputs.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub phi0: Option<f64>,
    /// Impurity as JSON (`{"kind": "gaussian_times_affine", ...}`) or a preset name.
    #[arg(long)]
    pub impurity: Option<String>,
    /// Any other parameter, as `key=value` with a JSON value (bare words are strings).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Log level for stderr.
    #[arg(long, default_value = "warn")]
    pub log_level: log::LevelFilter,
}

/// Fully resolved run description; echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub parameters: BTreeMap<String, Value>,
    pub output_dir: PathBuf,
    pub format: Format,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    command: Option<Command>,
    output_dir: Option<PathBuf>,
    format: Option<Format>,
    #[serde(default)]
    parameters: Map<String, Value>,
}

/// Parameter name and default; `None` marks a required key.
type Schema = Vec<(&'static str, Option<Value>)>;

fn stripe_keys(required: bool) -> Schema {
    let need = |v: Value| if required { None } else { Some(v) };
    vec![
        ("mu", need(json!(0.1))),
        ("k", need(json!(1.0))),
        ("n_modes", Some(json!(32))),
        ("tol", Some(json!(1e-10))),
    ]
}

fn schema(command: Command) -> Schema {
    let mut s = match command {
        Command::Verify | Command::Fredholm => stripe_keys(false),
        _ => stripe_keys(true),
    };
    let solver = [
        ("periods", Some(json!(40.0))),
        ("points_per_period", Some(json!(32))),
        ("newton_tol", Some(json!(1e-10))),
        ("partition_width", Some(Value::Null)),
    ];
    match command {
        Command::Stripes => s.push(("k_grid", Some(Value::Null))),
        Command::Bloch => s.push(("n_sigma", Some(json!(64)))),
        Command::Pairings => s.extend([("transition_width", Some(json!(0.5)))]),
        Command::Response => s.extend([("impurity", None), ("n_phases", Some(json!(64)))]),
        Command::Solve => {
            s.extend([("impurity", None), ("eps", None), ("phi0", None), ("k0", Some(json!(0.0)))]);
            s.extend(solver);
        }
        Command::Sweep => {
            s.extend([
                ("impurity", None),
                ("phi0", None),
                ("k0", Some(json!(0.0))),
                ("eps_list", Some(json!([1e-3, 2e-3, 4e-3, 8e-3]))),
            ]);
            s.extend(solver);
        }
        Command::Fredholm => s.extend([
            ("operator", Some(json!({"kind": "difference", "ell": 1, "i": 0}))),
            ("gammas", Some(Value::Null)),
            ("p", Some(json!(2.0))),
            ("n", Some(Value::Null)),
            ("points_per_period", Some(json!(32))),
            ("gap_factor", Some(json!(1e4))),
            ("borderline_gamma", Some(Value::Null)),
            ("borderline_n", Some(json!([8, 16, 32, 64]))),
            ("hardy_gamma", Some(Value::Null)),
            ("hardy_samples", Some(json!(20))),
            ("seed", Some(json!(7))),
        ]),
        Command::Verify => s.push(("criteria", Some(json!((1..=12).collect::<Vec<u8>>())))),
    }
    s
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Merges defaults, the config file and flags, rejecting unknown and missing keys.
    pub fn resolve(cli: &Cli) -> Result<Self, Error> {
        let file = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<ConfigFile>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ConfigFile {
                command: None,
                output_dir: None,
                format: None,
                parameters: Map::new(),
            },
        };
        let Some(command) = cli.command.or(file.command) else {
            return Err(Error::Config("missing required keys: command".into()));
        };
        let mut given: BTreeMap<String, Value> = file.parameters.into_iter().collect();
        let flags = [("mu", cli.mu), ("k", cli.k), ("eps", cli.eps), ("phi0", cli.phi0)];
        for (key, v) in flags {
            if let Some(v) = v {
                given.insert(key.into(), json!(v));
            }
        }
        if let Some(imp) = &cli.impurity {
            given.insert("impurity".into(), parse_value(imp));
        }
        for kv in &cli.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            given.insert(key.trim().into(), parse_value(raw.trim()));
        }
        let schema = schema(command);
        let unknown: Vec<&String> = given.keys().filter(|k| !schema.iter().any(|(s, _)| s == k)).collect();
        if !unknown.is_empty() {
            let allowed: Vec<&str> = schema.iter().map(|(s, _)| *s).collect();
            return Err(Error::Config(format!("unknown keys {unknown:?}; allowed: {allowed:?}")));
        }
        let missing: Vec<&str> = schema
            .iter()
            .filter(|(k, d)| d.is_none() && !given.contains_key(*k))
            .map(|(k, _)| *k)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let mut parameters = BTreeMap::new();
        for (key, default) in schema {
            let v = given.remove(key).or(default).expect("required keys checked");
            parameters.insert(key.to_string(), v);
        }
        Ok(RunConfig {
            command,
            parameters,
            output_dir: cli.out.clone().or(file.output_dir).unwrap_or_else(|| PathBuf::from("out")),
            format: cli.format.or(file.format).unwrap_or_default(),
        })
    }

    fn raw(&self, key: &str) -> &Value {
        self.parameters.get(key).unwrap_or(&Value::Null)
    }

    fn typed<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, Error> {
        serde_json::from_value(self.raw(key).clone()).map_err(|e| Error::Config(format!("parameter {key}: {e}")))
    }

    fn optional<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>, Error> {
        if self.raw(key).is_null() {
            Ok(None)
        } else {
            self.typed(key).map(Some)
        }
    }

    fn f64(&self, key: &str) -> Result<f64, Error> {
        self.typed(key)
    }

    fn usize(&self, key: &str) -> Result<usize, Error> {
        self.typed(key)
    }

    fn impurity(&self) -> Result<ImpuritySpec, Error> {
        match self.raw("impurity") {
            Value::String(name) => preset_impurity(name),
            _ => self.typed("impurity"),
        }
    }
}

/// Named impurities for quick runs.
pub fn preset_impurity(name: &str) -> Result<ImpuritySpec, Error> {
    match name {
        "gaussian" => Ok(ImpuritySpec::gaussian(2.0, 1.0, 0.5)),
        "gradient" => Ok(ImpuritySpec::Gradient { width: 2.0, alpha: 1.0, beta: 0.5, center: 0.0 }),
        "drift" => Ok(ImpuritySpec::GaussianDrift { width: 2.0, c: 1.0, center: 0.0 }),
        "asymmetric" => Ok(acceptance::pinning_impurity()),
        _ => Err(Error::Config(format!(
            "unknown impurity preset {name:?}; use gaussian, gradient, drift, asymmetric or a JSON object"
        ))),
    }
}

/// A table cell; floats are written with 17 significant digits.
#[derive(Debug, Clone)]
pub enum Cell {
    F(f64),
    I(i64),
    B(bool),
    S(String),
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::F(v) => format_float(*v),
            Cell::I(v) => v.to_string(),
            Cell::B(v) => v.to_string(),
            Cell::S(v) => v.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(v) if v.is_finite() => json!(v),
            Cell::F(v) => json!(v.to_string()),
            Cell::I(v) => json!(v),
            Cell::B(v) => json!(v),
            Cell::S(v) => json!(v),
        }
    }
}

/// Scientific notation with 17 significant digits.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Collects output files of one run.
struct Outputs {
    dir: PathBuf,
    format: Format,
    files: Vec<String>,
}

impl Outputs {
    fn table(&mut self, stem: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), Error> {
        let name = match self.format {
            Format::Csv => format!("{stem}.csv"),
            Format::Json => format!("{stem}.json"),
        };
        let path = self.dir.join(&name);
        match self.format {
            Format::Csv => {
                let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
                w.write_record(header).map_err(io_err)?;
                for r in rows {
                    w.write_record(r.iter().map(Cell::text)).map_err(io_err)?;
                }
                w.flush()?;
            }
            Format::Json => {
                let objs: Vec<Value> = rows
                    .iter()
                    .map(|r| Value::Object(header.iter().zip(r).map(|(h, c)| (h.to_string(), c.json())).collect()))
                    .collect();
                write_json(&path, &objs)?;
            }
        }
        self.files.push(name);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        write_json(&self.dir.join(name), value)?;
        self.files.push(name.into());
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Tolerances and defaults a pipeline used, for the manifest.
type Tolerances = BTreeMap<&'static str, Value>;

/// Outcome of a pipeline: its tolerances and whether every check passed.
struct Report {
    tolerances: Tolerances,
    passed: bool,
}

fn stripe_tolerances(cfg: &RunConfig) -> Result<Tolerances, Error> {
    let o = StripeOptions::default();
    Ok(BTreeMap::from([
        ("stripe_residual", json!(cfg.f64("tol")?)),
        ("stripe_newton_update", json!(o.newton_tol)),
        ("stripe_max_iter", json!(o.max_iter)),
        ("stripe_max_modes", json!(o.max_modes)),
        ("stripe_zero_threshold", json!(o.zero_threshold)),
    ]))
}

fn context(cfg: &RunConfig) -> Result<StripeContext, Error> {
    let sol = solve_stripe(cfg.f64("mu")?, cfg.f64("k")?, cfg.usize("n_modes")?, cfg.f64("tol")?)?;
    StripeContext::new(sol)
}

fn solver_config(cfg: &RunConfig) -> Result<SolverConfig, Error> {
    Ok(SolverConfig {
        periods: cfg.f64("periods")?,
        points_per_period: cfg.usize("points_per_period")?,
        newton_tol: cfg.f64("newton_tol")?,
        ..SolverConfig::default()
    })
}

fn partition(cfg: &RunConfig, ctx: &StripeContext) -> Result<PartitionGeometry, Error> {
    match cfg.optional::<f64>("partition_width")? {
        Some(w) => PartitionGeometry::wide(w),
        None => Ok(solver_partition(ctx)),
    }
}

fn solver_tolerances(t: &mut Tolerances, s: &SolverConfig, geom: &PartitionGeometry) {
    t.insert("solver_newton_tol", json!(s.newton_tol));
    t.insert("solver_max_iter", json!(s.max_iter));
    t.insert("solver_bc_order", json!(s.bc_order));
    t.insert("solver_weight_gamma", json!(s.weight_gamma));
    t.insert("partition_transition_width", json!(geom.transition_width));
}

fn run_stripes(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let mu = cfg.f64("mu")?;
    let sol = solve_stripe(mu, cfg.f64("k")?, cfg.usize("n_modes")?, cfg.f64("tol")?)?;
    out.json("stripe.json", &sol)?;
    if let Some(grid) = cfg.optional::<Vec<f64>>("k_grid")? {
        let fam = continue_family(mu, &grid)?;
        let rows: Vec<Vec<Cell>> = fam
            .iter()
            .map(|s| vec![Cell::F(s.k), Cell::F(s.amplitude()), Cell::F(s.residual_norm)])
            .collect();
        out.table("family", &["k", "amplitude", "residual"], &rows)?;
    }
    Ok(Report {
        tolerances: stripe_tolerances(cfg)?,
        passed: true,
    })
}

fn run_bloch(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ctx = context(cfg)?;
    let n_sigma = cfg.usize("n_sigma")?;
    let data = bloch_data(&ctx.sol, &ctx.derivs, n_sigma)?;
    let hyp = hypothesis_report(&ctx.sol, &ctx.derivs, n_sigma)?;
    let rows: Vec<Vec<Cell>> = data
        .sigma_grid
        .iter()
        .zip(&data.branch)
        .zip(&data.lambda_max)
        .map(|((s, l), m)| vec![Cell::F(*s), Cell::F(*l), Cell::F(*m)])
        .collect();
    out.table("dispersion", &["sigma", "lambda", "lambda_max"], &rows)?;
    out.json("bloch.json", &json!({ "bloch": data, "hypotheses": hyp }))?;
    let mut t = stripe_tolerances(cfg)?;
    t.insert("lambda2_fit_window", json!(FIT_WINDOW));
    t.insert("lambda2_fit_samples", json!(FIT_SAMPLES));
    Ok(Report {
        tolerances: t,
        passed: hyp.passed(),
    })
}

fn lambda2(ctx: &StripeContext) -> f64 {
    crate::bloch::lambda2_from_jet(&ctx.sol, &ctx.derivs).lambda2
}

fn run_pairings(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ctx = context(cfg)?;
    let geom = PartitionGeometry::new(cfg.f64("transition_width")?)?;
    let rep = cokernel_pairings(&ctx, &geom, lambda2(&ctx));
    let rows: Vec<Vec<Cell>> = rep
        .identities
        .iter()
        .map(|i| vec![Cell::S(i.name.clone()), Cell::F(i.residual), Cell::F(i.tolerance), Cell::B(i.holds())])
        .collect();
    out.table("identities", &["identity", "residual", "tolerance", "holds"], &rows)?;
    out.json("pairings.json", &rep)?;
    let mut t = stripe_tolerances(cfg)?;
    for i in &rep.identities {
        t.insert(identity_key(&i.name), json!(i.tolerance));
    }
    Ok(Report {
        tolerances: t,
        passed: rep.identities.iter().all(|i| i.holds()),
    })
}

fn identity_key(name: &str) -> &'static str {
    use crate::farfield::{ID_DETERMINANT, ID_DIAGONAL, ID_DIFFUSIVITY, ID_KK, ID_OFFDIAG};
    match name {
        n if n == ID_DIAGONAL => "identity_diagonal",
        n if n == ID_OFFDIAG => "identity_off_diagonal",
        n if n == ID_KK => "identity_kk_constancy",
        n if n == ID_DIFFUSIVITY => "identity_diffusivity",
        n if n == ID_DETERMINANT => "identity_determinant",
        _ => "identity_other",
    }
}

fn response_tolerances(t: &mut Tolerances) {
    let q = ResponseQuadrature::default();
    t.insert("response_points_per_period", json!(q.points_per_period));
    t.insert("response_tail_tol", json!(q.tail_tol));
}

fn run_response(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ctx = context(cfg)?;
    let g = cfg.impurity()?;
    let curve = phase_sweep(&ctx.sol, &ctx.derivs, lambda2(&ctx), &g, cfg.usize("n_phases")?)?;
    let rows: Vec<Vec<Cell>> = (0..curve.phi0_grid.len())
        .map(|j| vec![Cell::F(curve.phi0_grid[j]), Cell::F(curve.mk[j]), Cell::F(curve.mphi[j])])
        .collect();
    out.table("response", &["phi0", "Mk", "Mphi"], &rows)?;
    let pins = pinning_phases(&curve);
    out.json(
        "pinning.json",
        &json!({ "mean_mk": curve.mean_mk, "mk_integral": curve.mk_integral(), "pinning": pins }),
    )?;
    let mut t = stripe_tolerances(cfg)?;
    response_tolerances(&mut t);
    Ok(Report {
        tolerances: t,
        passed: true,
    })
}

fn run_solve(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ctx = context(cfg)?;
    let g = cfg.impurity()?;
    let scfg = solver_config(cfg)?;
    let geom = partition(cfg, &ctx)?;
    let (phi0, k0, eps) = (cfg.f64("phi0")?, cfg.f64("k0")?, cfg.f64("eps")?);
    let psi = FarFieldParams::new(phi0, k0, 0.0, 0.0);
    let sol = solve_defect(&ctx, &geom, &g, psi, eps, &scfg, None)?;
    let (mk, mphi) = response_coefficients(&ctx.sol, &ctx.derivs, lambda2(&ctx), &g, phi0)?;
    out.json("defect.json", &sol)?;
    let rows: Vec<Vec<Cell>> = (0..sol.x.len())
        .map(|j| vec![Cell::F(sol.x[j]), Cell::F(sol.u[j]), Cell::F(sol.w[j])])
        .collect();
    out.table("defect", &["x", "u", "w"], &rows)?;
    out.json(
        "prediction.json",
        &json!({ "k1": sol.state.k1, "phi1": sol.state.phi1, "eps_Mk": eps * mk, "eps_Mphi": eps * mphi }),
    )?;
    let mut t = stripe_tolerances(cfg)?;
    solver_tolerances(&mut t, &scfg, &geom);
    response_tolerances(&mut t);
    Ok(Report {
        tolerances: t,
        passed: true,
    })
}

fn run_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ctx = context(cfg)?;
    let g = cfg.impurity()?;
    let scfg = solver_config(cfg)?;
    let geom = partition(cfg, &ctx)?;
    let phi0 = cfg.f64("phi0")?;
    let eps: Vec<f64> = cfg.typed("eps_list")?;
    let psi = FarFieldParams::new(phi0, cfg.f64("k0")?, 0.0, 0.0);
    let rep = epsilon_sweep(&ctx, &geom, &g, psi, &eps, &scfg)?;
    let (mk, mphi) = response_coefficients(&ctx.sol, &ctx.derivs, lambda2(&ctx), &g, phi0)?;
    let rows: Vec<Vec<Cell>> = (0..eps.len())
        .map(|j| vec![Cell::F(rep.eps[j]), Cell::F(rep.k1[j]), Cell::F(rep.phi1[j])])
        .collect();
    out.table("sweep", &["eps", "k1", "phi1"], &rows)?;
    out.json("slopes.json", &json!({ "fit": rep, "Mk": mk, "Mphi": mphi }))?;
    let mut t = stripe_tolerances(cfg)?;
    solver_tolerances(&mut t, &scfg, &geom);
    response_tolerances(&mut t);
    Ok(Report {
        tolerances: t,
        passed: true,
    })
}

/// `operator` is an [`OperatorKind`] object or the string `"sh"`.
fn run_fredholm(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let counting = NullCounting {
        gap_factor: cfg.f64("gap_factor")?,
        ..NullCounting::default()
    };
    let p = cfg.f64("p")?;
    let mut t: Tolerances = BTreeMap::from([
        ("null_rel_tol", json!(counting.rel_tol)),
        ("null_gap_factor", json!(counting.gap_factor)),
        ("null_edge_tol", json!(counting.edge_tol)),
    ]);
    if cfg.raw("operator") == &json!("sh") {
        let sol = solve_stripe(cfg.f64("mu")?, cfg.f64("k")?, cfg.usize("n_modes")?, cfg.f64("tol")?)?;
        let scan = ShScanConfig {
            n: cfg.optional("n")?.unwrap_or(ShScanConfig::default().n),
            points_per_period: cfg.usize("points_per_period")?,
        };
        let gammas = cfg.optional::<Vec<f64>>("gammas")?.unwrap_or_else(|| vec![2.0, 1.0, 0.0]);
        let rows = sh_linearization_index_scan(&sol, &gammas, &scan)?;
        let cells: Vec<Vec<Cell>> = rows
            .iter()
            .map(|r| {
                vec![
                    Cell::F(r.gamma),
                    Cell::I(r.dim_ker as i64),
                    Cell::I(r.dim_coker as i64),
                    Cell::F(r.cokernel_angle.unwrap_or(f64::NAN)),
                    Cell::F(r.gap.min_sv_gap()),
                ]
            })
            .collect();
        out.table("sh_scan", &["gamma", "dim_ker", "dim_coker", "cokernel_angle", "gap"], &cells)?;
        t.extend(stripe_tolerances(cfg)?);
        t.insert("sh_n", json!(scan.n));
        t.insert("sh_points_per_period", json!(scan.points_per_period));
        return Ok(Report { tolerances: t, passed: true });
    }
    let kind: OperatorKind = cfg.typed("operator")?;
    kind.validate()?;
    let ell = kind.ell();
    let i = match kind {
        OperatorKind::Difference { i, .. } => i,
        _ => 0,
    };
    let n = cfg.optional("n")?.unwrap_or(256);
    let gammas = cfg.optional::<Vec<f64>>("gammas")?.unwrap_or_else(|| interval_representatives(ell));
    let rows = par::map(&gammas, |&g| -> Result<Vec<Cell>, Error> {
        let op = discrete_weighted_operator(kind, n, WeightSpec::isotropic(g).with_p(p)?, false)?;
        let d = kernel_cokernel_dims_with(&op, &counting)?;
        Ok(vec![
            Cell::F(g),
            Cell::F(p),
            Cell::I(ell as i64),
            Cell::I(i as i64),
            Cell::I(d.dim_ker as i64),
            Cell::I(d.dim_coker as i64),
            Cell::F(d.gap.min_sv_gap()),
        ])
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    out.table("scan", &["gamma", "p", "ell", "i", "dim_ker", "dim_coker", "gap"], &rows)?;
    if let Some(gamma) = cfg.optional::<f64>("borderline_gamma")? {
        let ns: Vec<usize> = cfg.typed("borderline_n")?;
        let tab = borderline_range_test(kind, gamma, &ns)?;
        let cells: Vec<Vec<Cell>> = tab.rows.iter().map(|r| vec![Cell::I(r.n as i64), Cell::F(r.ratio)]).collect();
        out.table("borderline", &["n", "ratio"], &cells)?;
    }
    if let Some(gamma) = cfg.optional::<f64>("hardy_gamma")? {
        let fit = hardy_constant_fit(gamma, cfg.usize("hardy_samples")?, cfg.typed("seed")?)?;
        let cells: Vec<Vec<Cell>> = fit
            .samples
            .iter()
            .map(|s| vec![Cell::F(s.dilation), Cell::F(s.ratio)])
            .collect();
        out.table("hardy", &["dilation", "ratio"], &cells)?;
        t.insert("hardy_constant", json!(fit.constant));
    }
    Ok(Report { tolerances: t, passed: true })
}

fn run_verify(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, Error> {
    let ids: Vec<u8> = cfg.typed("criteria")?;
    let mut rows = vec![];
    let mut t = Tolerances::new();
    let mut passed = true;
    for id in ids {
        let o = acceptance::run(id);
        log::info!("{}", o.line());
        println!("{}", o.line());
        passed &= o.passed;
        rows.push(vec![
            Cell::I(o.id as i64),
            Cell::S(o.name.clone()),
            Cell::B(o.passed),
            Cell::F(o.value),
            Cell::F(o.tolerance),
            Cell::S(o.detail.clone()),
        ]);
        t.insert(acceptance::NAMES[(id - 1) as usize], json!(o.tolerance));
    }
    out.table("verify", &["criterion", "name", "passed", "value", "tolerance", "detail"], &rows)?;
    Ok(Report { tolerances: t, passed })
}

/// Executes a resolved configuration and writes `manifest.json`. Returns the exit status.
pub fn run(cfg: &RunConfig) -> i32 {
    if let Err(e) = fs::create_dir_all(&cfg.output_dir) {
        log::error!("cannot create {}: {e}", cfg.output_dir.display());
        return EXIT_NUMERICAL;
    }
    let mut out = Outputs {
        dir: cfg.output_dir.clone(),
        format: cfg.format,
        files: vec![],
    };
    let result = match cfg.command {
        Command::Stripes => run_stripes(cfg, &mut out),
        Command::Bloch => run_bloch(cfg, &mut out),
        Command::Pairings => run_pairings(cfg, &mut out),
        Command::Response => run_response(cfg, &mut out),
        Command::Solve => run_solve(cfg, &mut out),
        Command::Sweep => run_sweep(cfg, &mut out),
        Command::Fredholm => run_fredholm(cfg, &mut out),
        Command::Verify => run_verify(cfg, &mut out),
    };
    let (status, code, tolerances, error) = match result {
        Ok(r) if r.passed => ("ok", EXIT_OK, r.tolerances, None),
        Ok(r) => ("checks_failed", EXIT_NUMERICAL, r.tolerances, None),
        Err(e @ Error::Config(_)) => ("config_error", EXIT_CONFIG, Tolerances::new(), Some(e)),
        Err(e) => ("numerical_failure", EXIT_NUMERICAL, Tolerances::new(), Some(e)),
    };
    if let Some(e) = &error {
        log::error!("{e}");
    }
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": par::is_parallel(),
        "config": cfg,
        "tolerances": tolerances,
        "outputs": out.files,
        "status": status,
        "error": error.map(|e| json!({ "message": e.to_string(), "detail": format!("{e:?}") })),
    });
    if let Err(e) = write_json(&cfg.output_dir.join("manifest.json"), &manifest) {
        log::error!("{e}");
        return EXIT_NUMERICAL;
    }
    code
}

/// Parses arguments, sets up logging and the worker pool, and runs.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();
    par::configure_threads(par::threads_from_env());
    match RunConfig::resolve(&cli) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
    }
}
