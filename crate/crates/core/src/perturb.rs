//! Perturbed measures `ν* = ρ(1 + εp)` that keep `∫x dν* = 0`,
//! `∫x² dν* = 1` and `∫h dν* ≤ λ_μ`, and the approximate integration by parts
//! they satisfy.

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::measure::{Moments, QuotientMeasure};
use crate::spectral::{spectral_gap, SpectralResult};
use crate::targets::TestFunction;

/// Direction labels of the standard library, in sweep order.
pub const STANDARD_DIRECTIONS: [&str; 5] = ["bump_left", "bump_right", "cubic", "quartic", "quintic"];

/// Label of the direction with `∫hp dμ* < 0`.
pub const RELAXED_DIRECTION: &str = "relaxed";

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationDirection {
    pub label: String,
    /// `p` at the grid nodes.
    pub p_values: Vec<f64>,
    /// `p` at the Gauss points.
    #[serde(skip)]
    pub p_points: Vec<f64>,
    /// `∫p dμ*, ∫xp dμ*, ∫x²p dμ*, ∫hp dμ*`.
    pub constraints_residual: [f64; 4],
    pub eps_max: f64,
    /// Whether `∫hp dμ* < 0` by construction.
    pub relaxed: bool,
}

fn smooth_bump(x: f64, c: f64, r: f64) -> f64 {
    let s = (x - c) / r;
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

fn taper(x: f64) -> f64 {
    (-x * x / 8.0).exp()
}

/// Raw (unprojected) direction by name.
pub fn raw_direction(label: &str) -> Result<fn(f64) -> f64> {
    let f: fn(f64) -> f64 = match label {
        "cubic" => |x| x * x * x * taper(x),
        "quintic" => |x| x.powi(5) * taper(x),
        "quartic" => |x| x.powi(4) * taper(x),
        "bump_left" => |x| smooth_bump(x, -1.5, 1.0),
        "bump_right" => |x| smooth_bump(x, 0.5, 0.75),
        other => return Err(LabError::InvalidParameter(format!("unknown direction {other}"))),
    };
    Ok(f)
}

struct Projector {
    /// Orthonormal basis values at the Gauss points.
    q: Vec<Vec<f64>>,
    /// Each orthonormal vector as a combination of `1, x, x², h`.
    coef: Vec<[f64; 4]>,
    mass: Vec<f64>,
}

impl Projector {
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mass.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * x * y).sum()
    }

    fn new(m: &QuotientMeasure) -> Self {
        let pts = &m.panels.points;
        let raw: Vec<Vec<f64>> = vec![
            vec![1.0; pts.len()],
            pts.clone(),
            pts.iter().map(|x| x * x).collect(),
            m.h_points.clone(),
        ];
        let mut p = Projector {
            q: Vec::new(),
            coef: Vec::new(),
            mass: m.mass_weights(),
        };
        for (k, b) in raw.iter().enumerate() {
            let mut v = b.clone();
            let mut c = [0.0; 4];
            c[k] = 1.0;
            let start = p.inner(&v, &v).sqrt();
            for _ in 0..2 {
                for j in 0..p.q.len() {
                    let r = p.inner(&v, &p.q[j]);
                    for (vi, qi) in v.iter_mut().zip(&p.q[j]) {
                        *vi -= r * qi;
                    }
                    for l in 0..4 {
                        c[l] -= r * p.coef[j][l];
                    }
                }
            }
            let norm = p.inner(&v, &v).sqrt();
            if norm <= 1e-9 * start {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            c.iter_mut().for_each(|x| *x /= norm);
            p.q.push(v);
            p.coef.push(c);
        }
        p
    }

    /// Remove the span from `values`, returning the coefficients on
    /// `1, x, x², h` that were subtracted.
    fn remove(&self, values: &mut [f64]) -> [f64; 4] {
        let mut c = [0.0; 4];
        for _ in 0..2 {
            for j in 0..self.q.len() {
                let r = self.inner(values, &self.q[j]);
                for (vi, qi) in values.iter_mut().zip(&self.q[j]) {
                    *vi -= r * qi;
                }
                for l in 0..4 {
                    c[l] += r * self.coef[j][l];
                }
            }
        }
        c
    }
}

fn basis_at(m: &QuotientMeasure, x: f64) -> [f64; 4] {
    [1.0, x, x * x, m.spec.h(x)]
}

fn constraints(m: &QuotientMeasure, p_points: &[f64]) -> [f64; 4] {
    let mass = m.mass_weights();
    let mut r = [0.0; 4];
    for (k, &x) in m.panels.points.iter().enumerate() {
        let w = mass[k] * p_points[k];
        r[0] += w;
        r[1] += w * x;
        r[2] += w * x * x;
        r[3] += w * m.h_points[k];
    }
    r
}

fn eps_cap(m: &QuotientMeasure, p_points: &[f64], p_at: &dyn Fn(f64) -> f64) -> f64 {
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for v in p_points.iter().copied().chain(m.panels.bounds.iter().map(|&x| p_at(x))) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    0.95 / (-lo).max(hi).max(f64::MIN_POSITIVE)
}

fn finish(
    m: &QuotientMeasure,
    label: &str,
    p_points: Vec<f64>,
    p_at: &dyn Fn(f64) -> f64,
    relaxed: bool,
) -> PerturbationDirection {
    let p_values = m.nodes().iter().map(|&x| p_at(x)).collect();
    PerturbationDirection {
        label: label.to_string(),
        p_values,
        constraints_residual: constraints(m, &p_points),
        eps_max: eps_cap(m, &p_points, p_at),
        p_points,
        relaxed,
    }
}

/// Project `raw` onto the μ*-orthogonal complement of `span{1, x, x², h}`.
pub fn project_direction<F>(m: &QuotientMeasure, label: &str, raw: F) -> Result<PerturbationDirection>
where
    F: Fn(f64) -> f64,
{
    let proj = Projector::new(m);
    let mut p: Vec<f64> = m.panels.points.iter().map(|&x| raw(x)).collect();
    let before = proj.inner(&p, &p).sqrt();
    let c = proj.remove(&mut p);
    let after = proj.inner(&p, &p).sqrt();
    if !(after > 1e-8 * before.max(1e-300)) {
        return Err(LabError::DegenerateDirection);
    }
    let p_at = |x: f64| {
        let b = basis_at(m, x);
        raw(x) - (0..4).map(|l| c[l] * b[l]).sum::<f64>()
    };
    Ok(finish(m, label, p, &p_at, false))
}

/// Direction with `∫hp dμ* < 0`: the cubic direction minus the component of
/// `h` orthogonal to `1, x, x²`, scaled to the same norm. `None` when `h`
/// lies in `span{1, x, x²}` and no such direction exists.
pub fn relaxed_direction(m: &QuotientMeasure) -> Result<Option<PerturbationDirection>> {
    let proj = Projector::new(m);
    if proj.q.len() < 4 {
        return Ok(None);
    }
    let cubic = project_direction(m, "cubic", raw_direction("cubic")?)?;
    let norm_cubic = proj.inner(&cubic.p_points, &cubic.p_points).sqrt();
    let (tilde, tc) = (&proj.q[3], proj.coef[3]);
    let cubic_raw = raw_direction("cubic")?;
    let mut cubic_proj = m.panels.points.iter().map(|&x| cubic_raw(x)).collect::<Vec<_>>();
    let cc = proj.remove(&mut cubic_proj);
    let p: Vec<f64> = cubic
        .p_points
        .iter()
        .zip(tilde)
        .map(|(a, t)| a - norm_cubic * t)
        .collect();
    let p_at = |x: f64| {
        let b = basis_at(m, x);
        let pc = cubic_raw(x) - (0..4).map(|l| cc[l] * b[l]).sum::<f64>();
        let t: f64 = (0..4).map(|l| tc[l] * b[l]).sum();
        pc - norm_cubic * t
    };
    Ok(Some(finish(m, RELAXED_DIRECTION, p, &p_at, true)))
}

/// Standard directions, followed by the relaxed one where it exists.
pub fn direction_library(m: &QuotientMeasure, labels: &[String]) -> Result<Vec<PerturbationDirection>> {
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        if label == RELAXED_DIRECTION {
            if let Some(d) = relaxed_direction(m)? {
                out.push(d);
            }
        } else {
            out.push(project_direction(m, label, raw_direction(label)?)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbedMeasure {
    pub direction: String,
    pub eps: f64,
    #[serde(skip)]
    pub density_points: Vec<f64>,
    /// Density at the grid nodes.
    pub density: Vec<f64>,
    #[serde(skip)]
    pub cdf_bounds: Vec<f64>,
    #[serde(skip)]
    pub cdf_points: Vec<f64>,
    /// CDF at the grid nodes.
    pub cdf: Vec<f64>,
    pub mass: f64,
    pub moments: Moments,
    pub spectral: SpectralResult,
    pub c_p_sharp: f64,
    /// `1/C_P(μ) − 1/C_P(ν)` before clamping at zero.
    pub delta_raw: f64,
    pub delta: f64,
}

pub fn make_perturbed(m: &QuotientMeasure, dir: &PerturbationDirection, eps: f64) -> Result<PerturbedMeasure> {
    if !(eps.abs() <= dir.eps_max * (1.0 + 1e-12)) {
        return Err(LabError::InvalidParameter(format!(
            "|eps| = {} exceeds eps_max = {}",
            eps.abs(),
            dir.eps_max
        )));
    }
    let density_points: Vec<f64> = m
        .density_points
        .iter()
        .zip(&dir.p_points)
        .map(|(r, p)| r * (1.0 + eps * p))
        .collect();
    if density_points.iter().any(|d| !(*d >= 0.0)) {
        return Err(LabError::InvariantViolation("perturbed density is negative".into()));
    }
    let density: Vec<f64> = m
        .density()
        .iter()
        .zip(&dir.p_values)
        .map(|(r, p)| r * (1.0 + eps * p))
        .collect();
    let weighted: Vec<f64> = density_points
        .iter()
        .zip(&m.panels.weights)
        .map(|(d, w)| d * w)
        .collect();
    let (cdf_bounds, cdf_points) = m.panels.cumulative(&weighted);
    let mut mass = 0.0;
    let mut mo = [0.0; 3];
    for (k, &x) in m.panels.points.iter().enumerate() {
        mass += weighted[k];
        mo[0] += weighted[k] * x;
        mo[1] += weighted[k] * x * x;
        mo[2] += weighted[k] * m.h_points[k];
    }
    let moments = Moments {
        m1: mo[0],
        m2: mo[1],
        mh: mo[2],
    };
    if (mass - 1.0).abs() > 1e-9 || moments.m1.abs() > 1e-9 || (moments.m2 - 1.0).abs() > 1e-9 {
        return Err(LabError::InvariantViolation(format!(
            "normalization lost: mass {mass}, m1 {}, m2 {}",
            moments.m1, moments.m2
        )));
    }
    if moments.mh > m.spec.lambda_mu + 1e-9 {
        return Err(LabError::InvariantViolation(format!(
            "∫h dν* = {} exceeds λ_μ = {}",
            moments.mh, m.spec.lambda_mu
        )));
    }
    let spectral = spectral_gap(m, &density_points)?;
    let delta_raw = m.spec.lambda_mu - spectral.lambda1;
    if delta_raw < -1e-9 {
        return Err(LabError::InvariantViolation(format!(
            "spectral gap {} exceeds λ_μ = {}",
            spectral.lambda1, m.spec.lambda_mu
        )));
    }
    let cdf = cdf_bounds[m.panels.node_range()].to_vec();
    Ok(PerturbedMeasure {
        direction: dir.label.clone(),
        eps,
        density_points,
        density,
        cdf_bounds,
        cdf_points,
        cdf,
        mass,
        moments,
        c_p_sharp: spectral.c_p_sharp,
        spectral,
        delta_raw,
        delta: delta_raw.max(0.0),
    })
}

/// `eps_max · k / steps` for `k = 0..=steps`.
pub fn eps_ladder(eps_max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| eps_max * k as f64 / steps.max(1) as f64).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxIppReport {
    pub psi: String,
    /// `|∫(hψ′ − xψ/C_P(ν)) dν*|`
    pub lhs: f64,
    /// `√δ (∫hψ′² dν*)^{1/2}`
    pub rhs: f64,
    /// `|∫(hψ′ − xψ/C_P(μ)) dν*|`
    pub lhs_assembled: f64,
    /// `(√δ + √C_P(ν) δ)(∫hψ′² dν*)^{1/2}`
    pub rhs_assembled: f64,
}

impl ApproxIppReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack && self.lhs_assembled <= self.rhs_assembled + slack
    }
}

/// Check both forms of the approximate integration by parts for one ψ.
pub fn verify_approx_ipp(m: &QuotientMeasure, nu: &PerturbedMeasure, psi: &TestFunction) -> Result<ApproxIppReport> {
    let (mut a, mut xpsi, mut gamma) = (0.0, 0.0, 0.0);
    for (k, &x) in m.panels.points.iter().enumerate() {
        let w = m.panels.weights[k] * nu.density_points[k];
        let dp = (psi.psi_prime)(x);
        let hp = m.h_points[k] * dp;
        a += w * hp;
        xpsi += w * x * (psi.psi)(x);
        gamma += w * hp * dp;
    }
    let c_nu = nu.c_p_sharp;
    let root = gamma.max(0.0).sqrt();
    let sd = nu.delta.sqrt();
    let report = ApproxIppReport {
        psi: psi.label.clone(),
        lhs: (a - xpsi / c_nu).abs(),
        rhs: sd * root,
        lhs_assembled: (a - xpsi / m.c_p()).abs(),
        rhs_assembled: (sd + c_nu.sqrt() * nu.delta) * root,
    };
    if !report.holds(1e-8) {
        return Err(LabError::InvariantViolation(format!(
            "approximate integration by parts fails for {} at eps = {}: {:?}",
            psi.label, nu.eps, report
        )));
    }
    Ok(report)
}

/// Least-squares fit `y ≈ c ε²`, returning `c` and `‖y − cε²‖ / ‖y‖`.
pub fn quadratic_fit(eps: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for (e, v) in eps.iter().zip(y) {
        let e2 = e * e;
        num += e2 * v;
        den += e2 * e2;
    }
    if den == 0.0 {
        return (0.0, 0.0);
    }
    let c = num / den;
    let (mut res, mut norm) = (0.0, 0.0);
    for (e, v) in eps.iter().zip(y) {
        res += (v - c * e * e).powi(2);
        norm += v * v;
    }
    let rel = if norm > 0.0 { (res / norm).sqrt() } else { 0.0 };
    (c, rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::build_measure;
    use crate::model::{make_gamma, make_gaussian, make_quartic, make_sphere};
    use crate::targets::psi_family;

    #[test]
    fn identity_direction_is_degenerate() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 256).unwrap();
        assert!(matches!(
            project_direction(&m, "x", |x| x),
            Err(LabError::DegenerateDirection)
        ));
        assert!(matches!(
            project_direction(&m, "quad", |x| 2.0 - x * x),
            Err(LabError::DegenerateDirection)
        ));
    }

    #[test]
    fn gaussian_cubic_is_third_hermite() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 512).unwrap();
        let d = project_direction(&m, "x3", |x| x * x * x).unwrap();
        for (x, p) in m.nodes().iter().zip(&d.p_values) {
            let he3 = x * x * x - 3.0 * x;
            assert!((p - he3).abs() < 1e-8 * (1.0 + he3.abs()), "{x}: {p} vs {he3}");
        }
        assert!(d.constraints_residual.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn eps_max_caps_the_larger_excursion() {
        let m = build_measure(&make_sphere(2).unwrap(), 256).unwrap();
        let d = project_direction(&m, "bump_right", raw_direction("bump_right").unwrap()).unwrap();
        let lo = d.p_points.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.p_points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(d.eps_max <= 0.95 / (-lo).max(hi) + 1e-15);
        for eps in [d.eps_max, -d.eps_max] {
            assert!(d.p_points.iter().all(|p| 1.0 + eps * p > 0.0));
        }
    }

    #[test]
    fn relaxed_direction_exists_only_for_nonquadratic_h() {
        for spec in [
            make_gaussian(1.0).unwrap(),
            make_gamma(2.0, 0.5).unwrap(),
            make_sphere(3).unwrap(),
        ] {
            let m = build_measure(&spec, 256).unwrap();
            assert!(relaxed_direction(&m).unwrap().is_none(), "{}", spec.name);
        }
        let m = build_measure(&make_quartic().unwrap(), 512).unwrap();
        let d = relaxed_direction(&m).unwrap().unwrap();
        assert!(d.constraints_residual[3] < -1e-3);
        assert!(d.constraints_residual[..3].iter().all(|r| r.abs() < 1e-9));
        let nu = make_perturbed(&m, &d, d.eps_max / 2.0).unwrap();
        assert!(nu.moments.mh < m.spec.lambda_mu);
        assert!(nu.delta > 0.0);
    }

    #[test]
    fn zero_eps_reproduces_base() {
        let m = build_measure(&make_gamma(1.0, 1.0).unwrap(), 512).unwrap();
        let d = project_direction(&m, "bump_left", raw_direction("bump_left").unwrap()).unwrap();
        let nu = make_perturbed(&m, &d, 0.0).unwrap();
        assert!(nu.delta < 1e-6);
        for psi in psi_family() {
            verify_approx_ipp(&m, &nu, &psi).unwrap();
        }
    }

    #[test]
    fn gaussian_cubic_gap_deficit() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 1024).unwrap();
        let d = project_direction(&m, "cubic", raw_direction("cubic").unwrap()).unwrap();
        let nu = make_perturbed(&m, &d, d.eps_max / 2.0).unwrap();
        assert!(nu.delta > 0.0);
        assert!(nu.c_p_sharp >= m.c_p() - 1e-6);
        for psi in psi_family() {
            verify_approx_ipp(&m, &nu, &psi).unwrap();
        }
    }

    #[test]
    fn gamma_bump_deficit_is_quadratic() {
        let m = build_measure(&make_gamma(1.0, 1.0).unwrap(), 1024).unwrap();
        let d = project_direction(&m, "bump_left", raw_direction("bump_left").unwrap()).unwrap();
        let eps: Vec<f64> = (1..=6).map(|k| d.eps_max * k as f64 / 60.0).collect();
        let deltas: Vec<f64> = eps.iter().map(|&e| make_perturbed(&m, &d, e).unwrap().delta).collect();
        let (c, rel) = quadratic_fit(&eps, &deltas);
        assert!(c > 0.0 && rel < 0.1, "c = {c}, residual {rel}");
    }

    #[test]
    fn quadratic_fit_recovers_exact_square() {
        let eps = [0.1, 0.2, 0.3];
        let (c, r) = quadratic_fit(&eps, &[0.03, 0.12, 0.27]);
        assert!((c - 3.0).abs() < 1e-12 && r < 1e-12);
    }
}
