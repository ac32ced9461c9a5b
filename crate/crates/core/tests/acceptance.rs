//! End-to-end acceptance suite. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero if
//! any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use poincare_core::harness::{report_json, run_sweep, SweepConfig, SweepOutput, CATALOG_IDS, THEOREMS};
use poincare_core::measure::{build_measure, QuotientMeasure};
use poincare_core::model::{check_assumptions, DiffusionSpec};
use poincare_core::spectral::spectral_gap;
use poincare_core::stein::{
    check_elliptic_bounds, check_lipschitz_bound, check_sup_bounds, compute_ch, max_disagreement, rewrite_lipschitz,
    solve_stein,
};
use poincare_core::targets::{bounded_family, lipschitz_family};

const GRID: usize = 4096;

struct Model {
    id: &'static str,
    spec: DiffusionSpec,
    measure: QuotientMeasure,
    build_time: Duration,
}

type Outcome = Result<String, String>;

fn models() -> Result<Vec<Model>, String> {
    CATALOG_IDS
        .iter()
        .map(|&id| {
            let spec = poincare_core::harness::parse_model(id).map_err(|e| format!("{id}: {e}"))?;
            let start = Instant::now();
            let measure = build_measure(&spec, GRID).map_err(|e| format!("{id}: {e}"))?;
            Ok(Model {
                id,
                spec,
                measure,
                build_time: start.elapsed(),
            })
        })
        .collect()
}

fn moment_identities(models: &[Model]) -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut slowest = Duration::ZERO;
    let mut failures = Vec::new();
    for m in models {
        let mo = &m.measure.moments;
        let errs = [mo.m1.abs(), (mo.m2 - 1.0).abs(), (mo.mh - m.spec.lambda_mu).abs()];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        slowest = slowest.max(m.build_time);
        if errs.iter().any(|&e| !(e <= 1e-8)) || m.build_time > Duration::from_secs(5) {
            failures.push(format!(
                "{} errs {:.1e} {:.1e} {:.1e} in {:.2?}",
                m.id, errs[0], errs[1], errs[2], m.build_time
            ));
        }
    }
    let detail = format!(
        "max |m1| {:.1e}, |m2-1| {:.1e}, |mh-lambda| {:.1e}; slowest build {:.2?}",
        worst[0], worst[1], worst[2], slowest
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn closed_forms(models: &[Model]) -> Outcome {
    let oracles: [(&str, fn(f64) -> f64); 3] = [
        ("gamma:1,1", |x| (x - 1.0).exp()),
        ("sphere:2", |_| 1.0 / (2.0 * 3f64.sqrt())),
        ("gaussian:1", |x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt()),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (id, rho) in oracles {
        let m = &models.iter().find(|m| m.id == id).unwrap().measure;
        let dev = m
            .nodes()
            .iter()
            .zip(m.density())
            .map(|(&x, &d)| ((d - rho(x)) / rho(x)).abs())
            .fold(0.0, f64::max);
        ok &= dev <= 1e-10;
        parts.push(format!("{id} {dev:.1e}"));
    }
    let detail = format!("sup relative deviation: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spectral_gaps(models: &[Model]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in models.iter().filter(|m| m.id != "quartic") {
        let start = Instant::now();
        let r = spectral_gap(&m.measure, &m.measure.density_points).map_err(|e| format!("{}: {e}", m.id))?;
        let elapsed = start.elapsed() + m.build_time;
        let expected = m.spec.lambda_mu;
        let err = (r.lambda1 - expected).abs();
        let pass = err <= 1e-3 && r.identity_correlation >= 0.999 && elapsed < Duration::from_secs(30);
        ok &= pass;
        if !pass {
            parts.push(format!(
                "{}: lambda1 {} vs {expected}, corr {}, {elapsed:.2?}",
                m.id, r.lambda1, r.identity_correlation
            ));
        } else {
            parts.push(format!("{} {:.1e}", m.id, err));
        }
    }
    let detail = format!("|lambda1 - expected|: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stein_residuals(models: &[Model]) -> Outcome {
    let (mut worst_res, mut worst_gap, mut worst_rewrite, mut worst_id) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    let mut solved = 0;
    for m in models {
        let targets = bounded_family().into_iter().chain(lipschitz_family());
        for t in targets {
            let sol = match solve_stein(&m.measure, &t) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("{} {}: {e}", m.id, t.label));
                    continue;
                }
            };
            solved += 1;
            worst_res = worst_res.max(sol.residual_max / sol.residual_tolerance());
            worst_gap = worst_gap.max(sol.representation_gap);
            if sol.residual_max > sol.residual_tolerance() || sol.representation_gap > 1e-7 {
                failures.push(format!(
                    "{} {}: residual {:.1e} (tol {:.1e}), gap {:.1e}",
                    m.id,
                    t.label,
                    sol.residual_max,
                    sol.residual_tolerance(),
                    sol.representation_gap
                ));
            }
            if t.lipschitz.is_some() {
                let d = rewrite_lipschitz(&m.measure, &t).map(|r| max_disagreement(&sol, &r));
                match d {
                    Ok(d) if d <= 1e-7 => worst_rewrite = worst_rewrite.max(d),
                    Ok(d) => failures.push(format!("{} {}: Lipschitz form differs by {d:.1e}", m.id, t.label)),
                    Err(e) => failures.push(format!("{} {}: {e}", m.id, t.label)),
                }
            }
            if t.label == "id" {
                let c_p = m.spec.c_p();
                let dev = sol.psi.iter().map(|p| (p + c_p).abs()).fold(0.0, f64::max);
                worst_id = worst_id.max(dev);
                if dev > 1e-8 {
                    failures.push(format!("{}: psi for Id deviates from -C_P by {dev:.1e}", m.id));
                }
            }
        }
    }
    let detail = format!(
        "{solved} solutions; max residual/tol {worst_res:.2}, representation gap {worst_gap:.1e}, \
         Lipschitz form {worst_rewrite:.1e}, |psi_Id + C_P| {worst_id:.1e}"
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn bound_suites(models: &[Model]) -> Outcome {
    let mut checks = 0usize;
    let mut failures = Vec::new();
    let mut tightest = 0.0f64;
    let mut record = |name: String, r: poincare_core::Result<Vec<poincare_core::stein::BoundCheck>>| match r {
        Ok(v) => {
            for b in v {
                checks += 1;
                if b.bound > 0.0 {
                    tightest = tightest.max(b.actual / b.bound);
                }
            }
        }
        Err(e) => failures.push(format!("{name}: {e}")),
    };
    for m in models {
        let kappa = check_assumptions(&m.spec, m.measure.nodes()).ellipticity_kappa;
        let ch = compute_ch(&m.measure).map_err(|e| format!("{}: {e}", m.id))?;
        for t in bounded_family() {
            let sol = solve_stein(&m.measure, &t).map_err(|e| e.to_string())?;
            record(format!("{} {} sup", m.id, t.label), check_sup_bounds(&m.measure, &sol));
            if let Some(k) = kappa {
                record(format!("{} {} elliptic", m.id, t.label), check_elliptic_bounds(&sol, k));
            }
        }
        if ch.finite {
            for t in lipschitz_family() {
                let sol = rewrite_lipschitz(&m.measure, &t).map_err(|e| e.to_string())?;
                record(
                    format!("{} {} lipschitz", m.id, t.label),
                    check_lipschitz_bound(&m.measure, &sol, &ch).map(|b| vec![b]),
                );
            }
        }
    }
    let detail = format!("{checks} inequality checks, tightest actual/bound {tightest:.4}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!(
            "{detail}; {} violations: {}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

fn tail_suites(models: &[Model]) -> Outcome {
    let mut failures = Vec::new();
    let (mut nodes, mut worst_tail, mut worst_minor) = (0usize, 0.0f64, f64::INFINITY);
    for m in models {
        match m.measure.verify_tail_bounds() {
            Ok(r) => {
                nodes += r.checked;
                worst_tail = worst_tail.max(r.max_ratio);
                if r.max_ratio > 1.0 {
                    failures.push(format!("{}: tail ratio {}", m.id, r.max_ratio));
                }
            }
            Err(e) => failures.push(format!("{}: {e}", m.id)),
        }
        match m.measure.verify_g_minorization() {
            Ok(r) => {
                for end in [&r.left, &r.right] {
                    nodes += end.checked;
                    if end.checked > 0 {
                        worst_minor = worst_minor.min(end.min_ratio);
                        if end.min_ratio < 1.0 || end.max_boundedness_ratio > 1.0 {
                            failures.push(format!("{}: minorization {:?}", m.id, end));
                        }
                    }
                }
            }
            Err(e) => failures.push(format!("{}: {e}", m.id)),
        }
    }
    let detail = format!("{nodes} node checks; max tail/bound {worst_tail:.4}, min tail/minorant {worst_minor:.4}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn stability(sweeps: &[(&str, Result<SweepOutput, String>)]) -> Outcome {
    let mut failures = Vec::new();
    let mut max_ratio = [0.0f64; 4];
    let mut ipp = 0.0f64;
    let mut reports = 0;
    let mut slowest = Duration::ZERO;
    for (id, s) in sweeps {
        let out = match s {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("{id}: {e}"));
                continue;
            }
        };
        slowest = slowest.max(out.elapsed);
        if out.elapsed > Duration::from_secs(300) {
            failures.push(format!("{id}: sweep took {:.1?}", out.elapsed));
        }
        for r in &out.reports {
            reports += 1;
            for (k, t) in THEOREMS.iter().enumerate() {
                let b = r.bound(t).unwrap();
                if b.applicable {
                    max_ratio[k] = max_ratio[k].max(b.ratio);
                }
                if !b.holds {
                    failures.push(format!("{id} {} eps {:.3e}: {t} ratio {}", r.direction, r.eps, b.ratio));
                }
            }
            ipp = ipp.max(r.approx_ipp.max_ratio);
            if !r.approx_ipp.all_hold {
                failures.push(format!("{id} {} eps {:.3e}: approximate IPP fails", r.direction, r.eps));
            }
        }
    }
    let detail = format!(
        "{reports} reports; max ratios W1 {:.3}, TV {:.3}, K via W1 {:.3}, K via TV {:.3}, IPP lhs/rhs {:.3}; slowest sweep {:.1?}",
        max_ratio[0], max_ratio[1], max_ratio[2], max_ratio[3], ipp, slowest
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn utev(sweeps: &[(&str, Result<SweepOutput, String>)]) -> Outcome {
    let out = sweeps
        .iter()
        .find(|(id, _)| *id == "gaussian:1")
        .and_then(|(_, s)| s.as_ref().ok())
        .ok_or("gaussian sweep failed")?;
    let u = out.utev.as_ref().ok_or("no Utev report for the gaussian sweep")?;
    let detail = format!(
        "{} perturbations checked, {} violations, min slack {:.2e}; constant-9 form {}",
        u.checked,
        u.violations,
        u.min_slack,
        if u.constant_nine_holds { "also holds" } else { "fails" }
    );
    if u.violations == 0 && u.checked > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn asymptotics(sweeps: &[(&str, Result<SweepOutput, String>)]) -> Outcome {
    let mut failures = Vec::new();
    let mut ladders = 0;
    let mut worst_fit = 0.0f64;
    for (id, s) in sweeps {
        let Ok(out) = s else {
            failures.push(format!("{id}: sweep failed"));
            continue;
        };
        for a in &out.asymptotics {
            ladders += 1;
            if a.quadratic_expected {
                worst_fit = worst_fit.max(a.quadratic_residual);
            }
            if !a.holds(&out.config.tolerances) {
                failures.push(format!(
                    "{id} {}: W1->0 {}, delta->0 {}, W1 ratio {:.3}, quadratic residual {:.3}",
                    a.direction, a.w1_to_zero, a.delta_to_zero, a.max_w1_ratio, a.quadratic_residual
                ));
            }
        }
    }
    let detail = format!("{ladders} ladders; worst quadratic-fit residual {worst_fit:.3}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn determinism(sweeps: &[(&str, Result<SweepOutput, String>)]) -> Outcome {
    let first = sweeps
        .iter()
        .find(|(id, _)| *id == "gaussian:1")
        .and_then(|(_, s)| s.as_ref().ok())
        .ok_or("gaussian sweep failed")?;
    let a = report_json(first).map_err(|e| e.to_string())?;
    for workers in [1, 3] {
        let config = SweepConfig {
            workers,
            ..first.config.clone()
        };
        let again = run_sweep(&config).map_err(|e| e.to_string())?;
        let b = report_json(&again).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("report differs when rerun with {workers} workers"));
        }
    }
    Ok(format!(
        "three gaussian sweeps gave byte-identical reports ({} bytes)",
        a.len()
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let models = match models() {
        Ok(m) => m,
        Err(e) => {
            println!("acceptance: cannot build catalog: {e}");
            return ExitCode::FAILURE;
        }
    };
    let sweeps: Vec<(&str, Result<SweepOutput, String>)> = CATALOG_IDS
        .iter()
        .map(|&id| {
            let config = SweepConfig {
                model: id.to_string(),
                ..SweepConfig::default()
            };
            (id, run_sweep(&config).map_err(|e| e.to_string()))
        })
        .collect();
    let results: Vec<(&str, Outcome)> = vec![
        ("moment identities", moment_identities(&models)),
        ("closed-form densities", closed_forms(&models)),
        ("spectral gaps", spectral_gaps(&models)),
        ("Stein residuals and representations", stein_residuals(&models)),
        ("Stein factor bound suites", bound_suites(&models)),
        ("tail and minorization suites", tail_suites(&models)),
        ("stability theorems end to end", stability(&sweeps)),
        ("Utev-form check", utev(&sweeps)),
        ("asymptotics along eps ladders", asymptotics(&sweeps)),
        ("determinism", determinism(&sweeps)),
    ];
    let mut failed = 0;
    for (k, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", k + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", k + 1)
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1?})",
        results.len() - failed,
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
