//! Sweep orchestration: build a model, perturb it along a ladder of
//! directions and amplitudes, and evaluate every stability inequality as a
//! ratio of actual to bound.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distances::{distance_triple, dual_lower_bound, DistanceTriple};
use crate::error::{LabError, Result};
use crate::measure::{build_measure, QuotientMeasure};
use crate::model::{
    check_assumptions, make_gamma, make_gaussian, make_quartic, make_sphere, AssumptionReport, DiffusionSpec,
};
use crate::perturb::{
    direction_library, eps_ladder, make_perturbed, quadratic_fit, verify_approx_ipp, PerturbationDirection,
    RELAXED_DIRECTION, STANDARD_DIRECTIONS,
};
use crate::spectral::spectral_gap;
use crate::stein::{compute_ch, ChBreakdown};
use crate::targets::psi_family;

pub const SCHEMA_VERSION: u32 = 1;

/// Recorded in every report: which Poincaré constant of ν enters the bounds.
pub const PROVENANCE: &str = "C_P(nu) is the sharp Poincare constant of the quotient measure nu* computed by the \
spectral solver; all bounds are the quotient-level instantiation; perturbations explore the finite family rho(1 + eps p)";

/// Model ids of the acceptance catalog.
pub const CATALOG_IDS: [&str; 10] = [
    "gaussian:1",
    "gamma:1,1",
    "gamma:2,0.5",
    "gamma:0.5,2",
    "gamma:5,1",
    "sphere:1",
    "sphere:2",
    "sphere:3",
    "sphere:10",
    "quartic",
];

fn parse_numbers(args: &str, expected: usize, id: &str) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> = args.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if v.len() == expected => Ok(v),
        _ => Err(LabError::Config(format!("cannot parse model id {id:?}"))),
    }
}

/// Build a model from an id such as `gaussian`, `gaussian:2`, `gamma:2,0.5`,
/// `sphere:3` or `quartic`.
pub fn parse_model(id: &str) -> Result<DiffusionSpec> {
    let (family, args) = match id.split_once(':') {
        Some((f, a)) => (f.trim(), Some(a)),
        None => (id.trim(), None),
    };
    match (family, args) {
        ("gaussian", None) => make_gaussian(1.0),
        ("gaussian", Some(a)) => make_gaussian(parse_numbers(a, 1, id)?[0]),
        ("gamma", Some(a)) => {
            let v = parse_numbers(a, 2, id)?;
            make_gamma(v[0], v[1])
        }
        ("sphere", Some(a)) => {
            let d = a
                .trim()
                .parse::<u32>()
                .map_err(|_| LabError::Config(format!("cannot parse model id {id:?}")))?;
            make_sphere(d)
        }
        ("quartic", None) => make_quartic(),
        _ => Err(LabError::Config(format!("unknown model id {id:?}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Allowed excess of actual over bound, relative.
    pub ratio: f64,
    /// Absolute slack in the approximate integration by parts.
    pub ipp_slack: f64,
    /// Absolute slack of the dual Wasserstein check.
    pub dual_slack: f64,
    /// Allowed relative residual of the quadratic fit of δ.
    pub quadratic_fit: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ratio: 1e-6,
            ipp_slack: 1e-8,
            dual_slack: 1e-8,
            quadratic_fit: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub model: String,
    pub grid_size: usize,
    pub eps_steps: usize,
    pub directions: Vec<String>,
    pub out_dir: PathBuf,
    pub dual_seed: u64,
    pub dual_checks: usize,
    /// Worker threads; `0` lets the pool decide. Not part of the report.
    #[serde(skip_serializing)]
    pub workers: usize,
    pub tolerances: Tolerances,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut directions: Vec<String> = STANDARD_DIRECTIONS.iter().map(|s| s.to_string()).collect();
        directions.push(RELAXED_DIRECTION.to_string());
        SweepConfig {
            model: "gaussian:1".into(),
            grid_size: 4096,
            eps_steps: 8,
            directions,
            out_dir: PathBuf::from("out"),
            dual_seed: 20_240_601,
            dual_checks: 20,
            workers: 0,
            tolerances: Tolerances::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: SweepConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 64 {
            return Err(LabError::Config(format!("grid_size {} is below 64", self.grid_size)));
        }
        if self.eps_steps == 0 {
            return Err(LabError::Config("eps_steps must be positive".into()));
        }
        if self.directions.is_empty() {
            return Err(LabError::Config("no directions selected".into()));
        }
        for d in &self.directions {
            if d != RELAXED_DIRECTION && !STANDARD_DIRECTIONS.contains(&d.as_str()) {
                return Err(LabError::Config(format!("unknown direction {d:?}")));
            }
        }
        parse_model(&self.model)?;
        Ok(())
    }
}

/// Everything about the base model that the per-perturbation work shares.
pub struct ModelContext {
    pub id: String,
    pub measure: QuotientMeasure,
    pub assumptions: AssumptionReport,
    pub ch: ChBreakdown,
    pub density_sup: Option<f64>,
    pub directions: Vec<PerturbationDirection>,
}

impl ModelContext {
    pub fn build(id: &str, grid_size: usize, directions: &[String]) -> Result<Self> {
        let spec = parse_model(id)?;
        let measure = build_measure(&spec, grid_size)?;
        let assumptions = check_assumptions(&spec, measure.nodes());
        let ch = compute_ch(&measure)?;
        let density_sup = measure.density_sup();
        let directions = direction_library(&measure, directions)?;
        Ok(ModelContext {
            id: id.to_string(),
            measure,
            assumptions,
            ch,
            density_sup,
            directions,
        })
    }

    pub fn kappa(&self) -> Option<f64> {
        self.assumptions.ellipticity_kappa
    }

    pub fn direction(&self, label: &str) -> Result<&PerturbationDirection> {
        self.directions
            .iter()
            .find(|d| d.label == label)
            .ok_or_else(|| LabError::Config(format!("direction {label:?} is not available for {}", self.id)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundRecord {
    pub theorem: String,
    pub bound: f64,
    pub actual: f64,
    pub ratio: f64,
    pub applicable: bool,
    pub holds: bool,
}

impl BoundRecord {
    fn new(theorem: &str, actual: f64, bound: f64, applicable: bool, tol: f64) -> Self {
        let ratio = if bound > 0.0 {
            actual / bound
        } else if actual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let (bound, ratio) = if applicable {
            (bound, ratio)
        } else {
            (f64::NAN, f64::NAN)
        };
        BoundRecord {
            theorem: theorem.to_string(),
            bound,
            actual,
            ratio,
            applicable,
            holds: !applicable || ratio <= 1.0 + tol,
        }
    }
}

/// Theorem ids in report order.
pub const THEOREMS: [&str; 4] = ["w1_stability", "tv_stability", "kolmogorov_via_w1", "kolmogorov_via_tv"];

#[derive(Debug, Clone, Serialize)]
pub struct IppSummary {
    pub tested: usize,
    /// Largest `lhs / rhs` over the ψ family (0 when both vanish).
    pub max_ratio: f64,
    pub max_ratio_assembled: f64,
    pub all_hold: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub model: String,
    pub direction: String,
    pub relaxed: bool,
    pub eps: f64,
    pub eps_max: f64,
    pub delta: f64,
    pub c_p_mu: f64,
    pub c_p_nu: f64,
    pub distances: DistanceTriple,
    pub dual_lower_bound: f64,
    pub bounds: Vec<BoundRecord>,
    pub approx_ipp: IppSummary,
}

impl StabilityReport {
    pub fn bound(&self, theorem: &str) -> Option<&BoundRecord> {
        self.bounds.iter().find(|b| b.theorem == theorem)
    }

    pub fn all_hold(&self) -> bool {
        self.bounds.iter().all(|b| b.holds) && self.approx_ipp.all_hold
    }
}

/// Evaluate one `(direction, eps)` pair.
pub fn evaluate(
    ctx: &ModelContext,
    dir: &PerturbationDirection,
    eps: f64,
    config: &SweepConfig,
) -> Result<StabilityReport> {
    let m = &ctx.measure;
    let nu = make_perturbed(m, dir, eps)?;
    let d = distance_triple(m, &m.density_points, &nu.density_points)?;
    let dual = dual_lower_bound(
        m,
        &m.density_points,
        &nu.density_points,
        config.dual_seed,
        config.dual_checks,
    );
    if dual > d.w1 + config.tolerances.dual_slack {
        return Err(LabError::InvariantViolation(format!(
            "dual value {dual} exceeds W1 {} ({}, eps {eps})",
            d.w1, dir.label
        )));
    }
    let s = nu.delta.sqrt() + nu.c_p_sharp.sqrt() * nu.delta;
    let tol = config.tolerances.ratio;
    let ch_ok = ctx.ch.finite;
    let kappa = ctx.kappa();
    let ell = kappa.map(|k| 4.0 / k.sqrt() * s).unwrap_or(f64::NAN);
    let bounds = vec![
        BoundRecord::new(THEOREMS[0], d.w1, ctx.ch.c_h * s, ch_ok, tol),
        BoundRecord::new(THEOREMS[1], d.tv, ell, kappa.is_some(), tol),
        BoundRecord::new(
            THEOREMS[2],
            d.kolmogorov_upper,
            2.0 * (ctx.density_sup.unwrap_or(f64::NAN) * ctx.ch.c_h).sqrt() * s.sqrt(),
            ch_ok && ctx.density_sup.is_some(),
            tol,
        ),
        BoundRecord::new(THEOREMS[3], d.kolmogorov_upper, ell, kappa.is_some(), tol),
    ];
    let family = psi_family();
    let mut ipp = IppSummary {
        tested: family.len(),
        max_ratio: 0.0,
        max_ratio_assembled: 0.0,
        all_hold: true,
    };
    let ratio = |l: f64, r: f64| {
        if r > 0.0 {
            l / r
        } else if l <= config.tolerances.ipp_slack {
            0.0
        } else {
            f64::INFINITY
        }
    };
    for psi in &family {
        match verify_approx_ipp(m, &nu, psi) {
            Ok(r) => {
                ipp.max_ratio = ipp.max_ratio.max(ratio(r.lhs, r.rhs));
                ipp.max_ratio_assembled = ipp.max_ratio_assembled.max(ratio(r.lhs_assembled, r.rhs_assembled));
            }
            Err(LabError::InvariantViolation(_)) => ipp.all_hold = false,
            Err(e) => return Err(e),
        }
    }
    Ok(StabilityReport {
        model: ctx.id.clone(),
        direction: dir.label.clone(),
        relaxed: dir.relaxed,
        eps,
        eps_max: dir.eps_max,
        delta: nu.delta,
        c_p_mu: m.c_p(),
        c_p_nu: nu.c_p_sharp,
        distances: d,
        dual_lower_bound: dual,
        bounds,
        approx_ipp: ipp,
    })
}

/// Discretization floor of δ: at `eps = 0` it is the difference between the
/// exact `λ_μ` and the discrete first eigenvalue of μ*.
pub const DELTA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsRecord {
    pub direction: String,
    /// W₁ and δ decrease along the ladder towards `eps = 0`, where W₁ vanishes
    /// and δ is below [`DELTA_FLOOR`].
    pub w1_to_zero: bool,
    pub delta_to_zero: bool,
    pub max_w1_ratio: f64,
    pub quadratic_coefficient: f64,
    pub quadratic_residual: f64,
    /// Whether δ is expected to be second order (false for the relaxed
    /// direction, where it is first order).
    pub quadratic_expected: bool,
}

impl AsymptoticsRecord {
    pub fn holds(&self, tol: &Tolerances) -> bool {
        self.w1_to_zero
            && self.delta_to_zero
            && self.max_w1_ratio <= 1.0 + tol.ratio
            && (!self.quadratic_expected || self.quadratic_residual < tol.quadratic_fit)
    }
}

/// Behavior of W₁, δ and the W₁ ratio along each direction's ladder.
pub fn asymptotics(reports: &[StabilityReport]) -> Vec<AsymptoticsRecord> {
    let mut labels: Vec<&str> = reports.iter().map(|r| r.direction.as_str()).collect();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let mut rs: Vec<&StabilityReport> = reports.iter().filter(|r| r.direction == label).collect();
            rs.sort_by(|a, b| a.eps.total_cmp(&b.eps));
            let decreasing = |f: &dyn Fn(&StabilityReport) -> f64, floor: f64| {
                rs.first().is_some_and(|r| r.eps == 0.0 && f(r) <= floor) && rs.windows(2).all(|w| f(w[0]) <= f(w[1]))
            };
            let eps: Vec<f64> = rs.iter().map(|r| r.eps).collect();
            let delta: Vec<f64> = rs.iter().map(|r| r.delta).collect();
            let (c, res) = quadratic_fit(&eps, &delta);
            AsymptoticsRecord {
                direction: label.to_string(),
                w1_to_zero: decreasing(&|r| r.distances.w1, 0.0),
                delta_to_zero: decreasing(&|r| r.delta, DELTA_FLOOR),
                max_w1_ratio: rs
                    .iter()
                    .filter_map(|r| r.bound(THEOREMS[0]).filter(|b| b.applicable).map(|b| b.ratio))
                    .fold(0.0, f64::max),
                quadratic_coefficient: c,
                quadratic_residual: res,
                quadratic_expected: !rs.first().is_some_and(|r| r.relaxed),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct UtevReport {
    pub checked: usize,
    pub violations: usize,
    /// Smallest `C_P(ν) − 1 − d_TV²/(16(1+√2))` among checked reports.
    pub min_slack: f64,
    /// Informational: whether `C_P(ν) ≥ 1 + d_TV²/9` holds for every checked
    /// report.
    pub constant_nine_holds: bool,
}

/// `C_P(ν) ≥ 1 + d_TV²/(16(1+√2))` for gaussian-base reports with
/// `C_P(ν) ≤ 2`.
pub fn check_utev_gaussian(reports: &[StabilityReport]) -> Result<UtevReport> {
    let constant = 16.0 * (1.0 + 2f64.sqrt());
    let mut out = UtevReport {
        checked: 0,
        violations: 0,
        min_slack: f64::INFINITY,
        constant_nine_holds: true,
    };
    for r in reports {
        if (r.c_p_mu - 1.0).abs() > 1e-12 || !r.model.starts_with("gaussian") {
            return Err(LabError::InvalidParameter(format!(
                "report for {} is not on the standard gaussian",
                r.model
            )));
        }
        if r.c_p_nu > 2.0 {
            continue;
        }
        out.checked += 1;
        let tv2 = r.distances.tv * r.distances.tv;
        let slack = r.c_p_nu - 1.0 - tv2 / constant;
        out.min_slack = out.min_slack.min(slack);
        if slack < -1e-12 {
            out.violations += 1;
        }
        if r.c_p_nu < 1.0 + tv2 / 9.0 {
            out.constant_nine_holds = false;
        }
    }
    if out.violations > 0 {
        return Err(LabError::InvariantViolation(format!(
            "{} reports violate C_P(nu) >= 1 + d_TV^2/(16(1+sqrt 2))",
            out.violations
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub id: String,
    pub name: String,
    pub lambda_mu: f64,
    pub c_h: f64,
    pub c_h_finite: bool,
    pub ellipticity_kappa: Option<f64>,
    pub density_sup: Option<f64>,
    pub directions: Vec<DirectionSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionSummary {
    pub label: String,
    pub eps_max: f64,
    pub constraints_residual: [f64; 4],
    pub relaxed: bool,
}

pub struct SweepOutput {
    pub config: SweepConfig,
    pub model: ModelSummary,
    pub reports: Vec<StabilityReport>,
    pub asymptotics: Vec<AsymptoticsRecord>,
    pub utev: Option<UtevReport>,
    pub context: ModelContext,
    pub elapsed: Duration,
}

impl SweepOutput {
    pub fn all_hold(&self) -> bool {
        self.reports.iter().all(|r| r.all_hold())
    }
}

pub fn summarize(ctx: &ModelContext) -> ModelSummary {
    ModelSummary {
        id: ctx.id.clone(),
        name: ctx.measure.spec.name.clone(),
        lambda_mu: ctx.measure.spec.lambda_mu,
        c_h: ctx.ch.c_h,
        c_h_finite: ctx.ch.finite,
        ellipticity_kappa: ctx.kappa(),
        density_sup: ctx.density_sup,
        directions: ctx
            .directions
            .iter()
            .map(|d| DirectionSummary {
                label: d.label.clone(),
                eps_max: d.eps_max,
                constraints_residual: d.constraints_residual,
                relaxed: d.relaxed,
            })
            .collect(),
    }
}

/// Run the full ladder for every configured direction.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput> {
    config.validate()?;
    let start = Instant::now();
    let ctx = ModelContext::build(&config.model, config.grid_size, &config.directions)?;
    let tasks: Vec<(usize, f64)> = ctx
        .directions
        .iter()
        .enumerate()
        .flat_map(|(i, d)| eps_ladder(d.eps_max, config.eps_steps).into_iter().map(move |e| (i, e)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;
    let results: Vec<Result<StabilityReport>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, eps)| evaluate(&ctx, &ctx.directions[i], eps, config))
            .collect()
    });
    let mut reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.direction.cmp(&b.direction).then(a.eps.total_cmp(&b.eps)));
    let utev = if ctx.measure.spec.name.starts_with("gaussian") && (ctx.measure.c_p() - 1.0).abs() < 1e-12 {
        Some(check_utev_gaussian(&reports)?)
    } else {
        None
    };
    let asymptotics = asymptotics(&reports);
    Ok(SweepOutput {
        config: config.clone(),
        model: summarize(&ctx),
        reports,
        asymptotics,
        utev,
        context: ctx,
        elapsed: start.elapsed(),
    })
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    schema_version: u32,
    provenance: &'static str,
    config: &'a SweepConfig,
    model: &'a ModelSummary,
    asymptotics: &'a [AsymptoticsRecord],
    utev: &'a Option<UtevReport>,
    reports: &'a [StabilityReport],
}

/// The machine-readable report; contains no timing information so that it
/// is reproducible byte for byte.
pub fn report_json(out: &SweepOutput) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportDocument {
        schema_version: SCHEMA_VERSION,
        provenance: PROVENANCE,
        config: &out.config,
        model: &out.model,
        asymptotics: &out.asymptotics,
        utev: &out.utev,
        reports: &out.reports,
    })?)
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.10e}")
    }
}

/// Human-readable table of one sweep.
pub fn summary_table(out: &SweepOutput) -> String {
    let mut s = String::new();
    let m = &out.model;
    let _ = writeln!(s, "model {} ({})", m.id, m.name);
    let _ = writeln!(
        s,
        "lambda_mu = {:.6}  C_h = {:.6}{}  kappa = {}  density sup = {}",
        m.lambda_mu,
        m.c_h,
        if m.c_h_finite { "" } else { " (not finite)" },
        m.ellipticity_kappa.map_or("none".into(), |k| format!("{k:.6}")),
        m.density_sup.map_or("unbounded".into(), |k| format!("{k:.6}")),
    );
    let _ = writeln!(
        s,
        "{:<11} {:>10} {:>11} {:>11} {:>11} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "direction", "eps", "delta", "W1", "TV", "W1/bd", "TV/bd", "KW/bd", "KTV/bd", "ipp"
    );
    for r in &out.reports {
        let ratio = |t: &str| {
            r.bound(t)
                .filter(|b| b.applicable)
                .map_or("n/a".to_string(), |b| format!("{:.4}", b.ratio))
        };
        let _ = writeln!(
            s,
            "{:<11} {:>10.3e} {:>11.4e} {:>11.4e} {:>11.4e} {:>8} {:>8} {:>8} {:>8} {:>8.4}",
            r.direction,
            r.eps,
            r.delta,
            r.distances.w1,
            r.distances.tv,
            ratio(THEOREMS[0]),
            ratio(THEOREMS[1]),
            ratio(THEOREMS[2]),
            ratio(THEOREMS[3]),
            r.approx_ipp.max_ratio,
        );
    }
    for a in &out.asymptotics {
        let _ = writeln!(
            s,
            "asymptotics {:<11} W1->0 {} delta->0 {} max W1 ratio {:.4} delta ~ {:.4e} eps^2 (residual {:.3}{})",
            a.direction,
            a.w1_to_zero,
            a.delta_to_zero,
            a.max_w1_ratio,
            a.quadratic_coefficient,
            a.quadratic_residual,
            if a.quadratic_expected { "" } else { ", not expected" },
        );
    }
    if let Some(u) = &out.utev {
        let _ = writeln!(
            s,
            "Utev form: {} checked, {} violations, min slack {:.4e}, constant-9 form {}",
            u.checked,
            u.violations,
            u.min_slack,
            if u.constant_nine_holds { "holds" } else { "fails" }
        );
    }
    let _ = writeln!(
        s,
        "all inequalities hold: {}  ({} reports, {:.2} s)",
        out.all_hold(),
        out.reports.len(),
        out.elapsed.as_secs_f64()
    );
    s
}

/// Write `report.json`, `curves.csv`, `ch_profile.csv`, `eigenfunctions.csv`
/// and `summary.txt` under `dir`.
pub fn emit_outputs(out: &SweepOutput, dir: &Path) -> Result<()> {
    if out.reports.is_empty() {
        return Err(LabError::InvalidParameter("no reports to write".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(out)?)?;

    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    let mut header = vec!["direction".to_string(), "eps".into(), "delta".into(), "c_p_nu".into()];
    for t in THEOREMS {
        header.push(format!("{t}_actual"));
        header.push(format!("{t}_bound"));
    }
    w.write_record(&header)?;
    for r in &out.reports {
        let mut row = vec![
            r.direction.clone(),
            format!("{:.10e}", r.eps),
            format!("{:.10e}", r.delta),
            format!("{:.12e}", r.c_p_nu),
        ];
        for t in THEOREMS {
            let b = r.bound(t).expect("every report carries all theorems");
            row.push(format!("{:.10e}", b.actual));
            row.push(fmt_opt(b.bound));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    out.context.ch.write_csv(&dir.join("ch_profile.csv"))?;

    let m = &out.context.measure;
    let base = spectral_gap(m, &m.density_points)?;
    let mut columns = vec![("mu".to_string(), base.eigenfunction)];
    for d in &out.context.directions {
        let nu = make_perturbed(m, d, d.eps_max)?;
        columns.push((format!("{}@eps_max", d.label), nu.spectral.eigenfunction));
    }
    let mut w = csv::Writer::from_path(dir.join("eigenfunctions.csv"))?;
    let mut header = vec!["node".to_string()];
    header.extend(columns.iter().map(|c| c.0.clone()));
    w.write_record(&header)?;
    for (i, x) in m.nodes().iter().enumerate() {
        let mut row = vec![format!("{x:.17e}")];
        row.extend(columns.iter().map(|c| format!("{:.12e}", c.1[i])));
        w.write_record(&row)?;
    }
    w.flush()?;

    fs::write(dir.join("summary.txt"), summary_table(out))?;
    Ok(())
}
