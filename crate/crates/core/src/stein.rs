//! Explicit solutions of the Stein equation `hψ′ − λxψ = f − μ*(f)` and the
//! Lipschitz Stein factor `C_h`.

use std::path::Path;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::measure::QuotientMeasure;
use crate::targets::Target;

#[derive(Debug, Clone, Serialize)]
pub struct SteinSolution {
    pub label: String,
    pub mu_f: f64,
    /// Declared `‖f − μ*(f)‖_∞` (bounded targets only).
    pub sup_deviation: Option<f64>,
    pub lipschitz: Option<f64>,
    pub nodes: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_prime: Vec<f64>,
    pub h_psi_prime: Vec<f64>,
    /// Max over interior nodes of `|hψ′ − λxψ − (f − μ*f)|`, with `ψ′` from
    /// an eighth-order central difference of the computed `ψ`.
    pub residual_max: f64,
    /// Scale used in the residual tolerance: declared or sampled `‖f − μ*f‖`.
    pub deviation_scale: f64,
    /// Largest disagreement between the two explicit representations on
    /// `|x| ≤ 1`.
    pub representation_gap: f64,
}

impl SteinSolution {
    pub fn residual_tolerance(&self) -> f64 {
        1e-6 * (1.0 + self.deviation_scale)
    }
}

fn fd_residual(m: &QuotientMeasure, psi: &[f64], f_centered: &[f64]) -> f64 {
    let n = psi.len();
    let du = 1.0 / n as f64;
    let lambda = m.spec.lambda_mu;
    let mut worst: f64 = 0.0;
    const STENCIL: [f64; 4] = [672.0, -168.0, 32.0, -3.0];
    for i in 4..n - 4 {
        let j = m.panels.first_node + i;
        let u = m.panels.u_bounds[j];
        let dpsi_du = STENCIL
            .iter()
            .enumerate()
            .map(|(k, c)| c * (psi[i + k + 1] - psi[i - k - 1]))
            .sum::<f64>()
            / (840.0 * du);
        let dpsi = dpsi_du / m.panels.map.dx(u);
        let x = m.panels.bounds[j];
        let r = m.h_bounds[j] * dpsi - lambda * x * psi[i] - f_centered[i];
        worst = worst.max(r.abs());
    }
    worst
}

/// Solve the Stein equation with the integral representations: the left
/// tail form for `x ≤ 0` and the right tail form for `x > 0`.
pub fn solve_stein(m: &QuotientMeasure, target: &Target) -> Result<SteinSolution> {
    let p = &m.panels;
    let f = &target.f;
    let mu_f = m.expect(|x| f(x));
    let g: Vec<f64> = p
        .points
        .iter()
        .zip(m.mass_weights())
        .map(|(&x, w)| w * (f(x) - mu_f))
        .collect();
    let (left, _) = p.cumulative(&g);
    let (right, _) = p.cumulative_right(&g);
    let lambda = m.spec.lambda_mu;
    let n = m.n();
    let mut psi = Vec::with_capacity(n);
    let mut psi_prime = Vec::with_capacity(n);
    let mut h_psi_prime = Vec::with_capacity(n);
    let mut centered = Vec::with_capacity(n);
    let mut gap: f64 = 0.0;
    let mut sampled_dev: f64 = 0.0;
    for j in p.node_range() {
        let x = p.bounds[j];
        let zv = m.z * (-m.log_v_bounds[j]).exp();
        let from_left = zv * left[j];
        let from_right = -zv * right[j];
        let value = if x <= 0.0 { from_left } else { from_right };
        if x.abs() <= 1.0 {
            let d = (from_left - from_right).abs();
            if d > 1e-7 * value.abs().max(1.0) {
                return Err(LabError::NumericalFailure(format!(
                    "Stein representations disagree at x = {x}: {from_left} vs {from_right}"
                )));
            }
            gap = gap.max(d);
        }
        let c = f(x) - mu_f;
        sampled_dev = sampled_dev.max(c.abs());
        let hp = c + lambda * x * value;
        psi.push(value);
        h_psi_prime.push(hp);
        psi_prime.push(hp / m.h_bounds[j]);
        centered.push(c);
    }
    let residual_max = fd_residual(m, &psi, &centered);
    let sup_deviation = target.sup_deviation(mu_f);
    Ok(SteinSolution {
        label: target.label.clone(),
        mu_f,
        sup_deviation,
        lipschitz: target.lipschitz,
        nodes: m.nodes().to_vec(),
        psi,
        psi_prime,
        h_psi_prime,
        residual_max,
        deviation_scale: sup_deviation.unwrap_or(sampled_dev),
        representation_gap: gap,
    })
}

/// Integrals of `q` and `1 − q` used by the Lipschitz form and by `C_h`.
struct TailIntegrals {
    /// `∫ₐˣ q`
    lq_b: Vec<f64>,
    lq_p: Vec<f64>,
    /// `∫ₓᵇ (1 − q)`
    rq_b: Vec<f64>,
    rq_p: Vec<f64>,
}

fn tail_integrals(m: &QuotientMeasure) -> TailIntegrals {
    let p = &m.panels;
    let wq: Vec<f64> = p.weights.iter().zip(&m.q_points).map(|(w, q)| w * q).collect();
    let wqb: Vec<f64> = p.weights.iter().zip(&m.qbar_points).map(|(w, q)| w * q).collect();
    let (lq_b, lq_p) = p.cumulative(&wq);
    let (rq_b, rq_p) = p.cumulative_right(&wqb);
    TailIntegrals { lq_b, lq_p, rq_b, rq_p }
}

/// Solve the Stein equation for a Lipschitz target through the form
/// `ψ = −Z(1−q)/v ∫ₐˣ f′q − Z q/v ∫ₓᵇ f′(1−q)`, with `hψ′` from the matching
/// two-term expression.
pub fn rewrite_lipschitz(m: &QuotientMeasure, target: &Target) -> Result<SteinSolution> {
    let p = &m.panels;
    let fp = &target.f_prime;
    let a_w: Vec<f64> = p
        .points
        .iter()
        .zip(&p.weights)
        .zip(&m.q_points)
        .map(|((&x, w), q)| w * fp(x) * q)
        .collect();
    let b_w: Vec<f64> = p
        .points
        .iter()
        .zip(&p.weights)
        .zip(&m.qbar_points)
        .map(|((&x, w), q)| w * fp(x) * q)
        .collect();
    let (a_b, _) = p.cumulative(&a_w);
    let (b_b, _) = p.cumulative_right(&b_w);
    let t = tail_integrals(m);
    let lambda = m.spec.lambda_mu;
    let n = m.n();
    let mut psi = Vec::with_capacity(n);
    let mut psi_prime = Vec::with_capacity(n);
    let mut h_psi_prime = Vec::with_capacity(n);
    let mut centered = Vec::with_capacity(n);
    let mu_f = m.expect(|x| (target.f)(x));
    let mut sampled_dev: f64 = 0.0;
    for j in p.node_range() {
        let inv_v = (-m.log_v_bounds[j]).exp();
        let (a, b) = (a_b[j], b_b[j]);
        let value = -m.z * (m.qbar_bounds[j] * a + m.q_bounds[j] * b) * inv_v;
        let hp = lambda * m.z * (t.rq_b[j] * a - t.lq_b[j] * b) * inv_v;
        psi.push(value);
        h_psi_prime.push(hp);
        psi_prime.push(hp / m.h_bounds[j]);
        let c = a - b;
        sampled_dev = sampled_dev.max(c.abs());
        centered.push(c);
    }
    let residual_max = fd_residual(m, &psi, &centered);
    let sup_deviation = target.sup_deviation(mu_f);
    Ok(SteinSolution {
        label: target.label.clone(),
        mu_f,
        sup_deviation,
        lipschitz: target.lipschitz,
        nodes: m.nodes().to_vec(),
        psi,
        psi_prime,
        h_psi_prime,
        residual_max,
        deviation_scale: sup_deviation.unwrap_or(sampled_dev),
        representation_gap: 0.0,
    })
}

/// Pointwise agreement of two solutions, relative to `max(1, |ψ|)`.
pub fn max_disagreement(a: &SteinSolution, b: &SteinSolution) -> f64 {
    a.psi
        .iter()
        .zip(&b.psi)
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub actual: f64,
    pub bound: f64,
    pub slack: f64,
}

impl BoundCheck {
    fn new(name: &str, actual: f64, bound: f64) -> Result<Self> {
        if actual > bound * (1.0 + 1e-9) + 1e-12 {
            return Err(LabError::InvariantViolation(format!(
                "{name}: {actual:e} exceeds bound {bound:e}"
            )));
        }
        Ok(BoundCheck {
            name: name.to_string(),
            actual,
            bound,
            slack: bound - actual,
        })
    }
}

/// Sup-norm bounds for bounded targets:
/// `‖ψ‖ ≤ Z max(q(0), 1 − q(0)) ‖f − μf‖` and `‖xψ‖ ≤ C_P ‖f − μf‖`.
pub fn check_sup_bounds(m: &QuotientMeasure, sol: &SteinSolution) -> Result<Vec<BoundCheck>> {
    let dev = sol
        .sup_deviation
        .ok_or_else(|| LabError::InvalidParameter(format!("target {} has no declared bound", sol.label)))?;
    let sup_psi = sol.psi.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let sup_xpsi = sol
        .psi
        .iter()
        .zip(&sol.nodes)
        .map(|(v, x)| (v * x).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        BoundCheck::new("sup_psi", sup_psi, m.z * m.q_zero.max(1.0 - m.q_zero) * dev)?,
        BoundCheck::new("sup_x_psi", sup_xpsi, m.c_p() * dev)?,
    ])
}

/// Bounds under ellipticity `h ≥ κ`: `‖ψ′‖ ≤ (2/κ)‖f − μf‖` and
/// `‖hψ′²‖ ≤ (4/κ)‖f − μf‖²`.
pub fn check_elliptic_bounds(sol: &SteinSolution, kappa: f64) -> Result<Vec<BoundCheck>> {
    if !(kappa > 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let dev = sol
        .sup_deviation
        .ok_or_else(|| LabError::InvalidParameter(format!("target {} has no declared bound", sol.label)))?;
    let sup_dpsi = sol.psi_prime.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let sup_gamma = sol
        .h_psi_prime
        .iter()
        .zip(&sol.psi_prime)
        .map(|(hp, p)| (hp * p).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        BoundCheck::new("sup_psi_prime", sup_dpsi, 2.0 / kappa * dev)?,
        BoundCheck::new("sup_h_psi_prime_sq", sup_gamma, 4.0 / kappa * dev * dev)?,
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct ChBreakdown {
    pub nodes: Vec<f64>,
    pub a1_values: Vec<f64>,
    pub a2_values: Vec<f64>,
    pub sqrt_gamma_a1: Vec<f64>,
    pub sqrt_gamma_a2: Vec<f64>,
    pub left_integrals: Vec<f64>,
    pub right_integrals: Vec<f64>,
    pub objective: Vec<f64>,
    /// Supremum of the objective over every sample (nodes, Gauss points and
    /// tail panels).
    pub c_h: f64,
    pub argmax: f64,
    /// Sup of the objective over `{v ≥ 1e-3}`, `{v ≥ 1e-6}`, `{v ≥ 1e-12}`,
    /// `{v ≥ 1e-24}`.
    pub window_sups: [f64; 4],
    pub finite: bool,
}

/// The Stein factor `C_h` and its ingredients.
///
/// With `L(x) = ∫ₐˣ q` and `R(x) = ∫ₓᵇ (1 − q)`, integration by parts gives
/// `xq + (C_P/Z)v = L` and `(C_P/Z)v − x(1 − q) = R`, so
/// `√Γ(a₁) = λZ R/(v√h)`, `√Γ(a₂) = λZ L/(v√h)`: both are evaluated from the
/// integrals, which carries no cancellation near the ends.
pub fn compute_ch(m: &QuotientMeasure) -> Result<ChBreakdown> {
    let p = &m.panels;
    let t = tail_integrals(m);
    let lambda = m.spec.lambda_mu;
    let sample = |lv: f64, h: f64, q: f64, qbar: f64, lq: f64, rq: f64| {
        let inv_v = (-lv).exp();
        let sh = h.sqrt();
        let a1 = m.z * qbar * inv_v;
        let a2 = m.z * q * inv_v;
        let g1 = lambda * m.z * rq * inv_v / sh;
        let g2 = lambda * m.z * lq * inv_v / sh;
        (a1, a2, g1, g2, g1 * lq + g2 * rq)
    };
    let n = m.n();
    let mut out = ChBreakdown {
        nodes: m.nodes().to_vec(),
        a1_values: Vec::with_capacity(n),
        a2_values: Vec::with_capacity(n),
        sqrt_gamma_a1: Vec::with_capacity(n),
        sqrt_gamma_a2: Vec::with_capacity(n),
        left_integrals: Vec::with_capacity(n),
        right_integrals: Vec::with_capacity(n),
        objective: Vec::with_capacity(n),
        c_h: 0.0,
        argmax: 0.0,
        window_sups: [0.0; 4],
        finite: true,
    };
    for j in p.node_range() {
        let (a1, a2, g1, g2, obj) = sample(
            m.log_v_bounds[j],
            m.h_bounds[j],
            m.q_bounds[j],
            m.qbar_bounds[j],
            t.lq_b[j],
            t.rq_b[j],
        );
        out.a1_values.push(a1);
        out.a2_values.push(a2);
        out.sqrt_gamma_a1.push(g1);
        out.sqrt_gamma_a2.push(g2);
        out.left_integrals.push(t.lq_b[j]);
        out.right_integrals.push(t.rq_b[j]);
        out.objective.push(obj);
    }
    let levels = [1e-3f64.ln(), 1e-6f64.ln(), 1e-12f64.ln(), 1e-24f64.ln()];
    let mut consider = |x: f64, lv: f64, obj: f64| {
        if !obj.is_finite() {
            return;
        }
        if obj > out.c_h {
            out.c_h = obj;
            out.argmax = x;
        }
        for (s, &l) in out.window_sups.iter_mut().zip(&levels) {
            if lv >= l {
                *s = s.max(obj);
            }
        }
    };
    for j in 0..p.bounds.len() {
        let x = p.bounds[j];
        if x <= m.spec.a || x >= m.spec.b {
            continue;
        }
        let (.., obj) = sample(
            m.log_v_bounds[j],
            m.h_bounds[j],
            m.q_bounds[j],
            m.qbar_bounds[j],
            t.lq_b[j],
            t.rq_b[j],
        );
        consider(x, m.log_v_bounds[j], obj);
    }
    for k in 0..p.points.len() {
        let (.., obj) = sample(
            m.log_v_points[k],
            m.h_points[k],
            m.q_points[k],
            m.qbar_points[k],
            t.lq_p[k],
            t.rq_p[k],
        );
        consider(p.points[k], m.log_v_points[k], obj);
    }
    let w = out.window_sups;
    out.finite = !(w[1] > 1.05 * w[0] && w[2] > 1.05 * w[1] && w[3] > 1.05 * w[2]);
    Ok(out)
}

impl ChBreakdown {
    /// Write `node, a1, a2, sqrt_gamma_a1, sqrt_gamma_a2, objective` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "a1", "a2", "sqrt_gamma_a1", "sqrt_gamma_a2", "objective"])?;
        for i in 0..self.nodes.len() {
            w.write_record(&[
                format!("{:.17e}", self.nodes[i]),
                format!("{:.17e}", self.a1_values[i]),
                format!("{:.17e}", self.a2_values[i]),
                format!("{:.17e}", self.sqrt_gamma_a1[i]),
                format!("{:.17e}", self.sqrt_gamma_a2[i]),
                format!("{:.17e}", self.objective[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `‖√h ψ′‖_∞ ≤ C_h ‖f′‖_∞` on the grid.
pub fn check_lipschitz_bound(m: &QuotientMeasure, sol: &SteinSolution, ch: &ChBreakdown) -> Result<BoundCheck> {
    let lip = sol.lipschitz.ok_or_else(|| {
        LabError::InvalidParameter(format!("target {} has no declared Lipschitz constant", sol.label))
    })?;
    let actual = sol
        .h_psi_prime
        .iter()
        .zip(m.node_slice(&m.h_bounds))
        .map(|(hp, h)| (hp / h.sqrt()).abs())
        .fold(0.0, f64::max);
    BoundCheck::new("sqrt_h_psi_prime", actual, ch.c_h * lip)
}

/// `∫ (hψ′ − λxψ) dμ*` from the Lipschitz form, evaluated at the quadrature
/// points; vanishes for every Stein solution.
pub fn stein_mean(m: &QuotientMeasure, target: &Target) -> f64 {
    let p = &m.panels;
    let fp = &target.f_prime;
    let a_w: Vec<f64> = (0..p.points.len())
        .map(|k| p.weights[k] * fp(p.points[k]) * m.q_points[k])
        .collect();
    let b_w: Vec<f64> = (0..p.points.len())
        .map(|k| p.weights[k] * fp(p.points[k]) * m.qbar_points[k])
        .collect();
    let (_, a_p) = p.cumulative(&a_w);
    let (_, b_p) = p.cumulative_right(&b_w);
    let t = tail_integrals(m);
    let lambda = m.spec.lambda_mu;
    let mass = m.mass_weights();
    let mut s = 0.0;
    for k in 0..p.points.len() {
        let inv_v = (-m.log_v_points[k]).exp();
        let x = p.points[k];
        let psi = -m.z * (m.qbar_points[k] * a_p[k] + m.q_points[k] * b_p[k]) * inv_v;
        let hp = lambda * m.z * (t.rq_p[k] * a_p[k] - t.lq_p[k] * b_p[k]) * inv_v;
        s += mass[k] * (hp - lambda * x * psi);
    }
    s
}
