//! The invariant measure μ* of a quotient diffusion, discretized on Gauss
//! panels in a computational coordinate.
//!
//! The grid nodes sit at `u_i = (i + 1/2)/n` of a map `x(u)` onto the
//! (truncated) interval. Finite ends use a power map so that integrable
//! density singularities become smooth in `u`; infinite ends get extra
//! panels of the same width until `v` drops below `e^{-80}`.

use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::model::{DiffusionSpec, EndpointBehavior};
use crate::quadrature::{integrate, PanelRule, Tolerance};

pub const GAUSS_POINTS: usize = 10;
/// `ln(1e-12)`: the grid extends on infinite ends until `v` is below this.
pub const TRUNCATION_LOG_V: f64 = -27.631_021_115_928_547;
const TAIL_LOG_V: f64 = -80.0;
const MAX_TAIL_FACTOR: usize = 64;
const NEAR_END_PANELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointTransform {
    Identity,
    TailExtension { panels: usize },
    Power { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MapKind {
    Line,
    LeftFinite,
    RightFinite,
    BothFinite,
}

/// Map from the computational coordinate `u` to the state `x`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateMap {
    kind: MapKind,
    a: f64,
    b: f64,
    len: f64,
    kl: f64,
    kr: f64,
}

impl CoordinateMap {
    pub fn x(&self, u: f64) -> f64 {
        match self.kind {
            MapKind::Line => self.a + self.len * u,
            MapKind::LeftFinite => self.a + self.len * u.powf(self.kl),
            MapKind::RightFinite => self.b - self.len * (1.0 - u).powf(self.kr),
            MapKind::BothFinite => {
                let p = u.powf(self.kl);
                let q = (1.0 - u).powf(self.kr);
                if p <= q {
                    self.a + self.len * p / (p + q)
                } else {
                    self.b - self.len * q / (p + q)
                }
            }
        }
    }

    pub fn dx(&self, u: f64) -> f64 {
        self.dx_split(u, 1.0 - u)
    }

    /// `dx/du` with `u` and `1 − u` supplied separately, so that either can
    /// carry full relative precision.
    fn dx_split(&self, u: f64, w: f64) -> f64 {
        let (kl, kr) = (self.kl, self.kr);
        match self.kind {
            MapKind::Line => self.len,
            MapKind::LeftFinite => self.len * kl * u.powf(kl - 1.0),
            MapKind::RightFinite => self.len * kr * w.powf(kr - 1.0),
            MapKind::BothFinite => {
                let p = u.powf(kl);
                let q = w.powf(kr);
                let num = kl * u.powf(kl - 1.0) * q + kr * p * w.powf(kr - 1.0);
                self.len * num / ((p + q) * (p + q))
            }
        }
    }

    /// The finite end `u` is closest to in `x`, as `(is_left, s)` with `s`
    /// the computational distance to that end.
    fn nearest_end(&self, u: f64) -> Option<(bool, f64)> {
        match self.kind {
            MapKind::Line => None,
            MapKind::LeftFinite => Some((true, u)),
            MapKind::RightFinite => Some((false, 1.0 - u)),
            MapKind::BothFinite => {
                if u.powf(self.kl) <= (1.0 - u).powf(self.kr) {
                    Some((true, u))
                } else {
                    Some((false, 1.0 - u))
                }
            }
        }
    }

    /// Distance in `x` to the chosen end at computational distance `s`.
    fn end_distance(&self, left: bool, s: f64) -> f64 {
        let (k_near, k_far) = if left { (self.kl, self.kr) } else { (self.kr, self.kl) };
        let near = s.powf(k_near);
        match self.kind {
            MapKind::BothFinite => self.len * near / (near + (1.0 - s).powf(k_far)),
            _ => self.len * near,
        }
    }

    /// `x(u)` and `dx/du` at the parameter that maps exactly onto the rounded
    /// `x`. Close to a finite end the rounding of `x` is large relative to the
    /// distance to that end, and pairing the rounded point with the Jacobian at
    /// `u` would bias integrals of end-singular densities. Points that round
    /// onto the end are moved to the nearest interior float.
    pub fn point(&self, u: f64) -> (f64, f64) {
        let x = self.x(u);
        let Some((left, s0)) = self.nearest_end(u) else {
            return (x, self.dx(u));
        };
        let (x, target) = if left {
            let x = if x <= self.a { self.a.next_up() } else { x };
            (x, x - self.a)
        } else {
            let x = if x >= self.b { self.b.next_down() } else { x };
            (x, self.b - x)
        };
        let k = if left { self.kl } else { self.kr };
        let mut s = s0;
        for _ in 0..64 {
            let g = (self.end_distance(left, s) / target).ln();
            if !g.is_finite() || g.abs() <= 1e-15 {
                break;
            }
            s *= (-g / k).exp();
        }
        let (u, w) = if left { (s, 1.0 - s) } else { (1.0 - s, s) };
        (x, self.dx_split(u, w))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    pub nodes: Vec<f64>,
    pub left: EndpointTransform,
    pub right: EndpointTransform,
    /// Effective finite bounds of the node range (equal to the endpoint on
    /// finite ends).
    pub truncation: (f64, f64),
}

/// Gauss panels covering the numerical support.
#[derive(Debug, Clone)]
pub struct Panels {
    pub rule: PanelRule,
    /// `1 - partial`: integrals from each Gauss node to the panel's right edge.
    right_partial: Vec<Vec<f64>>,
    pub map: CoordinateMap,
    pub u_bounds: Vec<f64>,
    pub bounds: Vec<f64>,
    pub points: Vec<f64>,
    /// `dx` quadrature weights at `points`.
    pub weights: Vec<f64>,
    pub first_node: usize,
    pub node_count: usize,
}

impl Panels {
    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.rule.len()
    }

    pub fn panel(&self, j: usize) -> Range<usize> {
        j * self.m()..(j + 1) * self.m()
    }

    /// Bound indices of the grid nodes.
    pub fn node_range(&self) -> Range<usize> {
        self.first_node..self.first_node + self.node_count
    }

    /// Running integral from the left end, given weighted samples.
    pub fn cumulative(&self, weighted: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let mut at_bounds = vec![0.0; self.bounds.len()];
        let mut at_points = vec![0.0; self.points.len()];
        let mut buf = vec![0.0; m];
        for j in 0..self.len() {
            let r = self.panel(j);
            let w = &weighted[r.clone()];
            self.rule.partial_sums(w, &mut buf);
            for (k, b) in buf.iter().enumerate() {
                at_points[r.start + k] = at_bounds[j] + b;
            }
            at_bounds[j + 1] = at_bounds[j] + w.iter().sum::<f64>();
        }
        (at_bounds, at_points)
    }

    /// Running integral from the right end, given weighted samples.
    pub fn cumulative_right(&self, weighted: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let p = self.len();
        let mut at_bounds = vec![0.0; self.bounds.len()];
        let mut at_points = vec![0.0; self.points.len()];
        for j in (0..p).rev() {
            let r = self.panel(j);
            let w = &weighted[r.clone()];
            for k in 0..m {
                let s: f64 = self.right_partial[k].iter().zip(w).map(|(c, v)| c * v).sum();
                at_points[r.start + k] = at_bounds[j + 1] + s;
            }
            at_bounds[j] = at_bounds[j + 1] + w.iter().sum::<f64>();
        }
        (at_bounds, at_points)
    }

    /// Bounds and Gauss points merged into one increasing sequence, with the
    /// matching merge of two per-bound / per-point value arrays.
    pub fn merged(&self, at_bounds: &[f64], at_points: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let mut xs = Vec::with_capacity(self.bounds.len() + self.points.len());
        let mut vs = Vec::with_capacity(xs.capacity());
        for j in 0..self.len() {
            xs.push(self.bounds[j]);
            vs.push(at_bounds[j]);
            for k in 0..m {
                xs.push(self.points[j * m + k]);
                vs.push(at_points[j * m + k]);
            }
        }
        xs.push(*self.bounds.last().unwrap());
        vs.push(*at_bounds.last().unwrap());
        (xs, vs)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Moments {
    pub m1: f64,
    pub m2: f64,
    pub mh: f64,
}

/// Invariant measure `ρ = v/(Z h)` with its CDF, on the panel discretization.
#[derive(Debug, Clone)]
pub struct QuotientMeasure {
    pub spec: DiffusionSpec,
    pub grid: Grid,
    pub panels: Panels,
    pub z: f64,
    pub log_v_bounds: Vec<f64>,
    pub log_v_points: Vec<f64>,
    pub h_bounds: Vec<f64>,
    pub h_points: Vec<f64>,
    pub density_bounds: Vec<f64>,
    pub density_points: Vec<f64>,
    pub q_bounds: Vec<f64>,
    pub q_points: Vec<f64>,
    pub qbar_bounds: Vec<f64>,
    pub qbar_points: Vec<f64>,
    pub moments: Moments,
    pub q_zero: f64,
    pub closed_form_max_rel_dev: Option<f64>,
}

/// `ln v(t) = −λ ∫₀ᵗ u/h(u) du` by adaptive quadrature.
pub fn compute_log_v(spec: &DiffusionSpec, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    if !(t > spec.a && t < spec.b) {
        return Err(LabError::InvalidDomain(format!(
            "{t} outside the open interval ({}, {})",
            spec.a, spec.b
        )));
    }
    let (lo, hi, sign) = if t > 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
    let r = drift_integral(spec, lo, hi, Tolerance::default())?;
    Ok(-spec.lambda_mu * sign * r)
}

/// `∫ u/h(u) du` over `[lo, hi]`. Near a finite end where `h` vanishes
/// linearly the simple pole `r/(u − e)` is integrated in closed form and only
/// the bounded remainder goes to adaptive quadrature.
fn drift_integral(spec: &DiffusionSpec, lo: f64, hi: f64, tol: Tolerance) -> Result<f64> {
    let pole = |end: f64, behavior: EndpointBehavior| match behavior {
        EndpointBehavior::Finite {
            alpha,
            beta,
            density_exponent,
            ..
        } if alpha == 1.0 && beta == 1.0 => Some((end, -(density_exponent + 1.0) / spec.lambda_mu)),
        _ => None,
    };
    let chosen = if lo < 0.0 && hi <= 0.0 {
        pole(spec.a, spec.left)
    } else if lo >= 0.0 && hi > 0.0 {
        pole(spec.b, spec.right)
    } else {
        None
    };
    match chosen {
        Some((e, r)) => {
            let rest = integrate(|u| u / spec.h(u) - r / (u - e), lo, hi, tol)?;
            Ok(rest.value + r * ((hi - e) / (lo - e)).ln())
        }
        None => Ok(integrate(|u| u / spec.h(u), lo, hi, tol)?.value),
    }
}

/// `v(t) = exp(−λ ∫₀ᵗ u/h(u) du)`.
pub fn compute_v(spec: &DiffusionSpec, t: f64) -> Result<f64> {
    compute_log_v(spec, t).map(f64::exp)
}

fn find_truncation(spec: &DiffusionSpec, sign: f64) -> Result<f64> {
    let target = TRUNCATION_LOG_V - 0.5;
    let mut inner = 0.0;
    let mut t = sign;
    loop {
        if compute_log_v(spec, t)? < target {
            break;
        }
        inner = t;
        t *= 2.0;
        if t.abs() > 1e8 {
            return Err(LabError::ModelNotNormalizable(format!(
                "v does not decay below 1e-12 within |x| <= 1e8 on the {} side",
                if sign < 0.0 { "left" } else { "right" }
            )));
        }
    }
    let mut outer = t;
    for _ in 0..30 {
        let mid = 0.5 * (inner + outer);
        if compute_log_v(spec, mid)? < target {
            outer = mid;
        } else {
            inner = mid;
        }
    }
    Ok(outer)
}

struct PanelSamples {
    u0: f64,
    u1: f64,
    x0: f64,
    x1: f64,
    pts: Vec<f64>,
    w: Vec<f64>,
    h: Vec<f64>,
    /// `λ x/h` times the weight: integrand of `−ln v`.
    g: Vec<f64>,
}

fn sample_panel(spec: &DiffusionSpec, map: &CoordinateMap, rule: &PanelRule, u0: f64, u1: f64) -> Result<PanelSamples> {
    let half = 0.5 * (u1 - u0);
    let mid = 0.5 * (u1 + u0);
    let m = rule.len();
    let mut pts = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    let mut h = Vec::with_capacity(m);
    let mut g = Vec::with_capacity(m);
    for k in 0..m {
        let u = mid + half * rule.nodes[k];
        let (x, dxdu) = map.point(u);
        let wk = rule.weights[k] * half * dxdu;
        let hk = spec.h(x);
        if !(hk > 0.0 && hk.is_finite()) {
            return Err(LabError::VanishingDiffusion(x));
        }
        pts.push(x);
        w.push(wk);
        h.push(hk);
        g.push(spec.lambda_mu * x / hk * wk);
    }
    Ok(PanelSamples {
        u0,
        u1,
        x0: map.x(u0),
        x1: map.x(u1),
        pts,
        w,
        h,
        g,
    })
}

/// Panel samples with `ln v` at both edges and at the Gauss points.
struct Filled {
    s: PanelSamples,
    lv0: f64,
    lv1: f64,
    lv: Vec<f64>,
}

fn fill_from_left(rule: &PanelRule, s: PanelSamples, lv0: f64) -> Filled {
    let mut part = vec![0.0; rule.len()];
    rule.partial_sums(&s.g, &mut part);
    let total: f64 = s.g.iter().sum();
    let lv = part.iter().map(|p| lv0 - p).collect();
    Filled {
        lv0,
        lv1: lv0 - total,
        lv,
        s,
    }
}

fn fill_from_right(rule: &PanelRule, s: PanelSamples, lv1: f64) -> Filled {
    let total: f64 = s.g.iter().sum();
    let lv0 = lv1 + total;
    let mut f = fill_from_left(rule, s, lv0);
    f.lv1 = lv1;
    f
}

/// Build μ* with `n` grid nodes.
pub fn build_measure(spec: &DiffusionSpec, n: usize) -> Result<QuotientMeasure> {
    if n < 64 {
        return Err(LabError::InvalidParameter(format!("grid size {n} < 64")));
    }
    let rule = PanelRule::gauss_legendre(GAUSS_POINTS);
    let m = rule.len();
    let kl = spec.left.power_map_exponent();
    let kr = spec.right.power_map_exponent();
    let (a_t, b_t) = (
        if spec.a.is_finite() {
            spec.a
        } else {
            find_truncation(spec, -1.0)?
        },
        if spec.b.is_finite() {
            spec.b
        } else {
            find_truncation(spec, 1.0)?
        },
    );
    let map = match (spec.a.is_finite(), spec.b.is_finite()) {
        (false, false) => CoordinateMap {
            kind: MapKind::Line,
            a: a_t,
            b: b_t,
            len: b_t - a_t,
            kl: 1.0,
            kr: 1.0,
        },
        (true, false) => CoordinateMap {
            kind: MapKind::LeftFinite,
            a: a_t,
            b: b_t,
            len: b_t - a_t,
            kl,
            kr: 1.0,
        },
        (false, true) => CoordinateMap {
            kind: MapKind::RightFinite,
            a: a_t,
            b: b_t,
            len: b_t - a_t,
            kl: 1.0,
            kr,
        },
        (true, true) => CoordinateMap {
            kind: MapKind::BothFinite,
            a: a_t,
            b: b_t,
            len: b_t - a_t,
            kl,
            kr,
        },
    };
    let du = 1.0 / n as f64;
    let node_u: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * du).collect();
    let nodes: Vec<f64> = node_u.iter().map(|&u| map.x(u)).collect();
    if nodes.windows(2).any(|w| !(w[0] < w[1])) || nodes[0] <= spec.a || nodes[n - 1] >= spec.b {
        return Err(LabError::NumericalFailure(
            "grid nodes are not strictly increasing inside the interval".into(),
        ));
    }

    // interior panels and ln v at nodes, marching out from the node nearest 0
    let mut inner: Vec<PanelSamples> = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        inner.push(sample_panel(spec, &map, &rule, node_u[j], node_u[j + 1])?);
    }
    let j0 = (0..n)
        .min_by(|&i, &j| nodes[i].abs().partial_cmp(&nodes[j].abs()).unwrap())
        .unwrap();
    let mut node_lv = vec![0.0; n];
    // panels this close to a finite end see the pole of u/h and get adaptive
    // quadrature instead of the panel rule
    let near_end =
        |j: usize| (spec.a.is_finite() && j < NEAR_END_PANELS) || (spec.b.is_finite() && j + 1 + NEAR_END_PANELS >= n);
    let step = |j: usize| -> Result<f64> {
        if near_end(j) {
            Ok(spec.lambda_mu * drift_integral(spec, nodes[j], nodes[j + 1], end_tolerance())?)
        } else {
            Ok(inner[j].g.iter().sum::<f64>())
        }
    };
    node_lv[j0] = compute_log_v(spec, nodes[j0])?;
    for j in j0..n - 1 {
        node_lv[j + 1] = node_lv[j] - step(j)?;
    }
    for j in (0..j0).rev() {
        node_lv[j] = node_lv[j + 1] + step(j)?;
    }
    let mut filled: Vec<Filled> = Vec::with_capacity(n - 1);
    for (j, s) in inner.into_iter().enumerate() {
        let mut f = fill_from_left(&rule, s, node_lv[j]);
        f.lv1 = node_lv[j + 1];
        if near_end(j) {
            let reference = if spec.a.is_finite() && j < NEAR_END_PANELS {
                j + 1
            } else {
                j
            };
            f.lv = end_panel_log_v(spec, &f.s, nodes[reference], node_lv[reference])?;
        }
        filled.push(f);
    }

    let cap = MAX_TAIL_FACTOR * n;
    let done = |lv: f64, x: f64| lv < TAIL_LOG_V && lv - spec.h(x).ln() < TAIL_LOG_V;

    // left end
    let mut left_panels: Vec<Filled> = Vec::new();
    let left_transform;
    if spec.a.is_finite() {
        let s = sample_panel(spec, &map, &rule, 0.0, node_u[0])?;
        let lv = end_panel_log_v(spec, &s, nodes[0], node_lv[0])?;
        let mut s = s;
        s.x0 = spec.a;
        left_panels.push(Filled {
            s,
            lv0: f64::NEG_INFINITY,
            lv1: node_lv[0],
            lv,
        });
        left_transform = if kl == 1.0 {
            EndpointTransform::Identity
        } else {
            EndpointTransform::Power { exponent: kl }
        };
    } else {
        let mut u1 = node_u[0];
        let mut lv1 = node_lv[0];
        loop {
            let u0 = u1 - du;
            let s = sample_panel(spec, &map, &rule, u0, u1)?;
            let f = fill_from_right(&rule, s, lv1);
            lv1 = f.lv0;
            let x0 = f.s.x0;
            left_panels.push(f);
            u1 = u0;
            if done(lv1, x0) {
                break;
            }
            if left_panels.len() > cap {
                return Err(LabError::ModelNotNormalizable("left tail does not decay".into()));
            }
        }
        left_transform = EndpointTransform::TailExtension {
            panels: left_panels.len(),
        };
    }
    left_panels.reverse();

    // right end
    let mut right_panels: Vec<Filled> = Vec::new();
    let right_transform;
    if spec.b.is_finite() {
        let s = sample_panel(spec, &map, &rule, node_u[n - 1], 1.0)?;
        let lv = end_panel_log_v(spec, &s, nodes[n - 1], node_lv[n - 1])?;
        let mut s = s;
        s.x1 = spec.b;
        right_panels.push(Filled {
            s,
            lv0: node_lv[n - 1],
            lv1: f64::NEG_INFINITY,
            lv,
        });
        right_transform = if kr == 1.0 {
            EndpointTransform::Identity
        } else {
            EndpointTransform::Power { exponent: kr }
        };
    } else {
        let mut u0 = node_u[n - 1];
        let mut lv0 = node_lv[n - 1];
        loop {
            let u1 = u0 + du;
            let s = sample_panel(spec, &map, &rule, u0, u1)?;
            let f = fill_from_left(&rule, s, lv0);
            lv0 = f.lv1;
            let x1 = f.s.x1;
            right_panels.push(f);
            u0 = u1;
            if done(lv0, x1) {
                break;
            }
            if right_panels.len() > cap {
                return Err(LabError::ModelNotNormalizable("right tail does not decay".into()));
            }
        }
        right_transform = EndpointTransform::TailExtension {
            panels: right_panels.len(),
        };
    }

    let first_node = left_panels.len();
    let all: Vec<Filled> = left_panels
        .into_iter()
        .chain(filled.drain(..))
        .chain(right_panels)
        .collect();
    let p = all.len();
    let mut u_bounds = Vec::with_capacity(p + 1);
    let mut bounds = Vec::with_capacity(p + 1);
    let mut log_v_bounds = Vec::with_capacity(p + 1);
    let mut points = Vec::with_capacity(p * m);
    let mut weights = Vec::with_capacity(p * m);
    let mut h_points = Vec::with_capacity(p * m);
    let mut log_v_points = Vec::with_capacity(p * m);
    for f in &all {
        u_bounds.push(f.s.u0);
        bounds.push(f.s.x0);
        log_v_bounds.push(f.lv0);
        points.extend_from_slice(&f.s.pts);
        weights.extend_from_slice(&f.s.w);
        h_points.extend_from_slice(&f.s.h);
        log_v_points.extend_from_slice(&f.lv);
    }
    let last = all.last().unwrap();
    u_bounds.push(last.s.u1);
    bounds.push(last.s.x1);
    log_v_bounds.push(last.lv1);
    for j in 1..p {
        // interior bounds were computed from both neighbours; keep the node value
        log_v_bounds[j] = all[j - 1].lv1;
    }
    for (j, lv) in log_v_bounds.iter_mut().enumerate() {
        let r = first_node..first_node + n;
        if r.contains(&j) {
            *lv = node_lv[j - first_node];
        }
    }
    let h_bounds: Vec<f64> = bounds
        .iter()
        .map(|&x| if x <= spec.a || x >= spec.b { 0.0 } else { spec.h(x) })
        .collect();

    let right_partial: Vec<Vec<f64>> = rule
        .partial
        .iter()
        .map(|row| row.iter().map(|c| 1.0 - c).collect())
        .collect();
    let panels = Panels {
        rule,
        right_partial,
        map,
        u_bounds,
        bounds,
        points,
        weights,
        first_node,
        node_count: n,
    };

    let vh: Vec<f64> = log_v_points.iter().zip(&h_points).map(|(lv, h)| lv.exp() / h).collect();
    let z: f64 = vh.iter().zip(&panels.weights).map(|(a, w)| a * w).sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(LabError::ModelNotNormalizable(format!("Z = {z}")));
    }
    let density_points: Vec<f64> = vh.iter().map(|a| a / z).collect();
    let density_bounds: Vec<f64> = (0..panels.bounds.len())
        .map(|j| {
            let x = panels.bounds[j];
            if x <= spec.a || x >= spec.b {
                endpoint_density(spec, j == 0, &density_points)
            } else {
                (log_v_bounds[j].exp()) / (z * h_bounds[j])
            }
        })
        .collect();

    let mass: Vec<f64> = density_points.iter().zip(&panels.weights).map(|(d, w)| d * w).collect();
    let (q_bounds, q_points) = panels.cumulative(&mass);
    let (qbar_bounds, qbar_points) = panels.cumulative_right(&mass);

    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let mut mh = 0.0;
    for ((x, h), w) in panels.points.iter().zip(&h_points).zip(&mass) {
        m1 += w * x;
        m2 += w * x * x;
        mh += w * h;
    }

    let grid = Grid {
        nodes: nodes.clone(),
        left: left_transform,
        right: right_transform,
        truncation: (a_t, b_t),
    };
    let mut measure = QuotientMeasure {
        spec: spec.clone(),
        grid,
        panels,
        z,
        log_v_bounds,
        log_v_points,
        h_bounds,
        h_points,
        density_bounds,
        density_points,
        q_bounds,
        q_points,
        qbar_bounds,
        qbar_points,
        moments: Moments { m1, m2, mh },
        q_zero: 0.0,
        closed_form_max_rel_dev: None,
    };

    let jn = first_node + j0;
    let x_near = measure.panels.bounds[jn];
    let extra = if x_near == 0.0 {
        0.0
    } else {
        let (lo, hi, sign) = if x_near < 0.0 {
            (x_near, 0.0, 1.0)
        } else {
            (0.0, x_near, -1.0)
        };
        sign * integrate(
            |x| measure.density_at(x).unwrap_or(f64::NAN),
            lo,
            hi,
            Tolerance::default(),
        )?
        .value
    };
    measure.q_zero = measure.q_bounds[jn] + extra;

    if spec.has_closed_form_density() {
        let mut worst: f64 = 0.0;
        for j in measure.panels.node_range() {
            let x = measure.panels.bounds[j];
            let exact = spec.closed_form_density(x).unwrap();
            worst = worst.max(((measure.density_bounds[j] - exact) / exact).abs());
        }
        measure.closed_form_max_rel_dev = Some(worst);
    }
    if measure.q_bounds.windows(2).any(|w| w[1] < w[0]) {
        return Err(LabError::InvariantViolation("CDF is not nondecreasing".into()));
    }
    Ok(measure)
}

fn end_tolerance() -> Tolerance {
    Tolerance {
        abs: 1e-14,
        rel: 1e-13,
        max_panels: 1 << 12,
    }
}

fn end_panel_log_v(spec: &DiffusionSpec, s: &PanelSamples, x_node: f64, lv_node: f64) -> Result<Vec<f64>> {
    s.pts
        .iter()
        .map(|&x| {
            let (lo, hi, sign) = if x < x_node {
                (x, x_node, 1.0)
            } else {
                (x_node, x, -1.0)
            };
            let r = drift_integral(spec, lo, hi, end_tolerance())?;
            Ok(lv_node + sign * spec.lambda_mu * r)
        })
        .collect()
}

fn endpoint_density(spec: &DiffusionSpec, left: bool, density_points: &[f64]) -> f64 {
    let behavior = if left { spec.left } else { spec.right };
    match behavior {
        EndpointBehavior::Finite { density_exponent, .. } if density_exponent > 0.0 => 0.0,
        EndpointBehavior::Finite { density_exponent, .. } if density_exponent < 0.0 => f64::INFINITY,
        _ => {
            if left {
                density_points[0]
            } else {
                *density_points.last().unwrap()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailBoundReport {
    pub checked: usize,
    /// Largest `q(t)/bound(t)` over checked nodes (≤ 1 when the bound holds).
    pub max_ratio: f64,
    pub min_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndMinorization {
    pub checked: usize,
    pub region: Option<(f64, f64)>,
    /// Smallest `tail(t)/lower_bound(t)` (≥ 1 when the minorization holds).
    pub min_ratio: f64,
    /// Whether the transfer conditions `g > t g'` and
    /// `h <= λ t² (1 − g)/(g − t g')` held at every checked node.
    pub hypotheses_hold: bool,
    pub max_boundedness_ratio: f64,
    pub sup_boundedness: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinorizationReport {
    pub left: EndMinorization,
    pub right: EndMinorization,
}

/// Tail-mass minorant built from the declared endpoint constants, with its
/// derivative and the bound on `|x (g − 1)| / √h` it implies.
#[derive(Debug, Clone, Copy)]
pub struct Minorant {
    behavior: EndpointBehavior,
    lambda: f64,
    end: f64,
}

impl Minorant {
    pub fn new(spec: &DiffusionSpec, left: bool) -> Self {
        Minorant {
            behavior: if left { spec.left } else { spec.right },
            lambda: spec.lambda_mu,
            end: if left { spec.a } else { spec.b },
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        self.g_and_derivative(t).0
    }

    pub fn g_and_derivative(&self, t: f64) -> (f64, f64) {
        match self.behavior {
            EndpointBehavior::Infinite { c2, alpha, .. } => {
                let k = c2 / self.lambda;
                let r = t.abs();
                (
                    1.0 - k * r.powf(alpha - 2.0),
                    -k * (alpha - 2.0) * r.powf(alpha - 3.0) * t.signum(),
                )
            }
            EndpointBehavior::Finite { c2, alpha, .. } => {
                let k = 4.0 * c2 / (self.lambda * self.end * self.end);
                let d = (t - self.end).abs();
                let sign = if self.end < 0.0 { 1.0 } else { -1.0 };
                (1.0 - k * d.powf(alpha), -k * alpha * d.powf(alpha - 1.0) * sign)
            }
        }
    }

    /// Upper bound on `|x (g(x) − 1)| / √h(x)` from the growth constants.
    pub fn boundedness_bound(&self, x: f64) -> f64 {
        match self.behavior {
            EndpointBehavior::Infinite {
                c1, c2, alpha, beta, ..
            } => c2 / (self.lambda * c1.sqrt()) * x.abs().powf(alpha - 1.0 - 0.5 * beta),
            EndpointBehavior::Finite {
                c1, c2, alpha, beta, ..
            } => 4.0 * c2 / (self.lambda * self.end.abs() * c1.sqrt()) * (x - self.end).abs().powf(alpha - 0.5 * beta),
        }
    }

    pub fn is_finite_end(&self) -> bool {
        self.behavior.is_finite()
    }

    fn in_window(&self, t: f64) -> bool {
        match self.behavior {
            EndpointBehavior::Infinite { .. } => t.abs() >= 1e-3 && t * self.end.signum() > 0.0,
            EndpointBehavior::Finite { .. } => {
                t.abs() >= 1e-3
                    && if self.end < 0.0 {
                        t < 0.5 * self.end
                    } else {
                        t > 0.5 * self.end
                    }
            }
        }
    }

    /// Conditions under which the minorant transfers to the tail of q.
    pub fn admissible(&self, t: f64, h: f64) -> bool {
        let (g, dg) = self.g_and_derivative(t);
        let denom = g - t * dg;
        self.in_window(t) && (0.0..=1.0).contains(&g) && denom > 0.0 && h <= self.lambda * t * t * (1.0 - g) / denom
    }
}

impl QuotientMeasure {
    pub fn n(&self) -> usize {
        self.panels.node_count
    }

    pub fn nodes(&self) -> &[f64] {
        &self.grid.nodes
    }

    pub fn c_p(&self) -> f64 {
        self.spec.c_p()
    }

    pub fn node_slice<'a>(&self, at_bounds: &'a [f64]) -> &'a [f64] {
        &at_bounds[self.panels.node_range()]
    }

    pub fn v_values(&self) -> Vec<f64> {
        self.node_slice(&self.log_v_bounds).iter().map(|l| l.exp()).collect()
    }

    pub fn density(&self) -> &[f64] {
        self.node_slice(&self.density_bounds)
    }

    pub fn cdf(&self) -> &[f64] {
        self.node_slice(&self.q_bounds)
    }

    /// Quadrature mass weights `w_k ρ(x_k)`.
    pub fn mass_weights(&self) -> Vec<f64> {
        self.density_points
            .iter()
            .zip(&self.panels.weights)
            .map(|(d, w)| d * w)
            .collect()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.panels
            .points
            .iter()
            .zip(&self.panels.weights)
            .zip(&self.density_points)
            .map(|((&x, w), d)| w * d * f(x))
            .sum()
    }

    pub fn log_v_at(&self, x: f64) -> Result<f64> {
        compute_log_v(&self.spec, x)
    }

    pub fn density_at(&self, x: f64) -> Result<f64> {
        Ok(self.log_v_at(x)?.exp() / (self.z * self.spec.h(x)))
    }

    /// All sampled abscissae with the CDF at each, in increasing order.
    pub fn fine_cdf(&self) -> (Vec<f64>, Vec<f64>) {
        self.panels.merged(&self.q_bounds, &self.q_points)
    }

    /// Supremum of the density: the sampled maximum refined by golden-section
    /// search on exact evaluations, and exact values next to finite ends.
    /// `None` if a finite end carries an unbounded density.
    pub fn density_sup(&self) -> Option<f64> {
        let (x0, v0) = sampled_sup(&self.spec, &self.panels, &self.density_bounds, &self.density_points)?;
        let eval = |x: f64| self.density_at(x).unwrap_or(f64::NEG_INFINITY);
        let (xs, _) = self.panels.merged(&self.density_bounds, &self.density_points);
        let k = xs.partition_point(|&t| t < x0);
        let mut lo = xs[k.saturating_sub(1)].max(self.spec.a);
        let mut hi = xs[(k + 1).min(xs.len() - 1)].min(self.spec.b);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut sup = v0;
        let (mut c, mut d) = (hi - g * (hi - lo), lo + g * (hi - lo));
        let (mut fc, mut fd) = (eval(c), eval(d));
        for _ in 0..80 {
            if fc >= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - g * (hi - lo);
                fc = eval(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + g * (hi - lo);
                fd = eval(d);
            }
            if hi - lo <= 1e-14 * (1.0 + hi.abs()) {
                break;
            }
        }
        sup = sup.max(fc).max(fd);
        for end in [self.spec.a, self.spec.b] {
            if end.is_finite() {
                let inside = if end == self.spec.a { 1.0 } else { -1.0 };
                let step = inside * 1e-9 * (1.0 + end.abs());
                let (near, far) = (eval(end + step), eval(end + 2.0 * step));
                sup = sup.max(near).max(2.0 * near - far);
            }
        }
        Some(sup)
    }

    /// `∫ xψ dμ* − C_P ∫ hψ′ dμ*`.
    pub fn exact_ipp_residual<F, G>(&self, psi: F, psi_prime: G) -> f64
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        let cp = self.c_p();
        let mut s = 0.0;
        for (k, &x) in self.panels.points.iter().enumerate() {
            let w = self.panels.weights[k] * self.density_points[k];
            s += w * (x * psi(x) - cp * self.h_points[k] * psi_prime(x));
        }
        s
    }

    /// Check the tail bounds `q(t) ≤ min(q(0), −C_P/(Z t)) v(t)` for `t < 0`
    /// and the mirrored bound for `t > 0`, at every grid node.
    pub fn verify_tail_bounds(&self) -> Result<TailBoundReport> {
        let cp = self.c_p();
        let mut max_ratio: f64 = 0.0;
        let mut min_slack = f64::INFINITY;
        let mut checked = 0;
        for j in self.panels.node_range() {
            let t = self.panels.bounds[j];
            let v = self.log_v_bounds[j].exp();
            let (value, bound) = if t < 0.0 {
                (self.q_bounds[j], self.q_zero.min(-cp / (self.z * t)) * v)
            } else if t > 0.0 {
                (self.qbar_bounds[j], (1.0 - self.q_zero).min(cp / (self.z * t)) * v)
            } else {
                continue;
            };
            checked += 1;
            if value - bound > 1e-9 * bound {
                return Err(LabError::InvariantViolation(format!(
                    "tail bound fails at t = {t}: tail {value:e} > bound {bound:e}"
                )));
            }
            max_ratio = max_ratio.max(value / bound);
            min_slack = min_slack.min(bound - value);
        }
        Ok(TailBoundReport {
            checked,
            max_ratio,
            min_slack,
        })
    }

    fn check_end_minorization(&self, left: bool) -> Result<EndMinorization> {
        let g = Minorant::new(&self.spec, left);
        let cp = self.c_p();
        let range = self.panels.node_range();
        let order: Vec<usize> = if left { range.collect() } else { range.rev().collect() };
        let mut checked = 0;
        let mut region: Option<(f64, f64)> = None;
        let mut min_ratio = f64::INFINITY;
        let mut max_bd_ratio: f64 = 0.0;
        let mut sup_bd: f64 = 0.0;
        let mut hypotheses_hold = true;
        for j in order {
            let t = self.panels.bounds[j];
            let h = self.h_bounds[j];
            let hypotheses = g.admissible(t, h);
            let in_region = if g.is_finite_end() {
                g.in_window(t) && g.g(t) >= 0.0
            } else {
                hypotheses
            };
            if !in_region {
                if checked > 0 {
                    break;
                }
                continue;
            }
            hypotheses_hold &= hypotheses;
            let gv = g.g(t);
            let v = self.log_v_bounds[j].exp();
            let lower = cp / self.z * v * gv / t.abs();
            let tail = if left { self.q_bounds[j] } else { self.qbar_bounds[j] };
            if tail < lower * (1.0 - 1e-9) {
                return Err(LabError::InvariantViolation(format!(
                    "tail minorization fails at t = {t}: {tail:e} < {lower:e}"
                )));
            }
            if lower > 0.0 {
                min_ratio = min_ratio.min(tail / lower);
            }
            let bd = (t * (gv - 1.0)).abs() / h.sqrt();
            let bound = g.boundedness_bound(t);
            if bd > bound * (1.0 + 1e-9) {
                return Err(LabError::InvariantViolation(format!(
                    "|x(g-1)|/sqrt(h) = {bd:e} exceeds {bound:e} at t = {t}"
                )));
            }
            max_bd_ratio = max_bd_ratio.max(bd / bound);
            sup_bd = sup_bd.max(bd);
            checked += 1;
            region = Some(match region {
                None => (t, t),
                Some((lo, hi)) => (lo.min(t), hi.max(t)),
            });
        }
        Ok(EndMinorization {
            checked,
            region,
            min_ratio,
            hypotheses_hold: checked > 0 && hypotheses_hold,
            max_boundedness_ratio: max_bd_ratio,
            sup_boundedness: sup_bd,
        })
    }

    /// Check the minorization of both tails of q by the endpoint minorants.
    pub fn verify_g_minorization(&self) -> Result<MinorizationReport> {
        Ok(MinorizationReport {
            left: self.check_end_minorization(true)?,
            right: self.check_end_minorization(false)?,
        })
    }

    /// Write `node, v, density, cdf` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "v", "density", "cdf"])?;
        let v = self.v_values();
        for (i, j) in self.panels.node_range().enumerate() {
            w.write_record(&[
                format!("{:.17e}", self.panels.bounds[j]),
                format!("{:.17e}", v[i]),
                format!("{:.17e}", self.density_bounds[j]),
                format!("{:.17e}", self.q_bounds[j]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest finite interior sample of a density; `None` if a finite end
/// carries an unbounded density.
pub fn sampled_sup(spec: &DiffusionSpec, panels: &Panels, at_bounds: &[f64], at_points: &[f64]) -> Option<(f64, f64)> {
    for behavior in [spec.left, spec.right] {
        if let EndpointBehavior::Finite { density_exponent, .. } = behavior {
            if density_exponent < 0.0 {
                return None;
            }
        }
    }
    let (xs, vs) = panels.merged(at_bounds, at_points);
    xs.iter()
        .zip(&vs)
        .filter(|(x, v)| **x > spec.a && **x < spec.b && v.is_finite())
        .map(|(x, v)| (*x, *v))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog, make_gamma, make_gaussian, make_sphere};

    fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn v_closed_forms() {
        let g = make_gaussian(1.0).unwrap();
        assert!((compute_v(&g, 1.0).unwrap() - (-0.5f64).exp()).abs() < 1e-14);
        assert_eq!(compute_v(&g, 0.0).unwrap(), 1.0);
        // gamma(1,1): ∫₀ᵗ u/(1−u) du = −t − ln(1−t), so v(t) = e^t (1−t)
        let gm = make_gamma(1.0, 1.0).unwrap();
        for t in [-1.0f64, -5.0, 0.5, 0.99] {
            let exact = t.exp() * (1.0 - t);
            assert!((compute_v(&gm, t).unwrap() / exact - 1.0).abs() < 1e-11, "t={t}");
        }
        assert!(compute_v(&gm, 1.0).is_err());
    }

    #[test]
    fn gaussian_measure() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 1024).unwrap();
        assert!((m.z - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
        assert!(m.closed_form_max_rel_dev.unwrap() < 1e-10);
        assert!(m.moments.m1.abs() < 1e-12);
        assert!((m.moments.m2 - 1.0).abs() < 1e-11);
        assert!((m.moments.mh - 1.0).abs() < 1e-11);
        assert!((m.q_zero - 0.5).abs() < 1e-12);
        for (i, j) in m.panels.node_range().enumerate().step_by(37) {
            let x = m.nodes()[i];
            assert!((m.q_bounds[j] - normal_cdf(x)).abs() < 1e-12);
            assert!((m.qbar_bounds[j] - normal_cdf(-x)).abs() < 1e-12);
        }
        let (a_t, b_t) = m.grid.truncation;
        assert!(compute_v(&m.spec, a_t).unwrap() < 1e-12 && compute_v(&m.spec, b_t).unwrap() < 1e-12);
    }

    #[test]
    fn gaussian_variance_independent_of_cp() {
        let m = build_measure(&make_gaussian(2.0).unwrap(), 512).unwrap();
        assert!((m.moments.m2 - 1.0).abs() < 1e-11);
        assert!((m.z - 2.0 * (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn gamma_one_one_measure() {
        let m = build_measure(&make_gamma(1.0, 1.0).unwrap(), 1024).unwrap();
        // ρ = e^{x−1}: q = e^{x−1}, Z = e
        assert!((m.z - std::f64::consts::E).abs() < 1e-11);
        for (i, j) in m.panels.node_range().enumerate().step_by(53) {
            let x = m.nodes()[i];
            assert!((m.q_bounds[j] / (x - 1.0).exp() - 1.0).abs() < 1e-10);
        }
        assert!(m.moments.m1.abs() < 1e-11);
        assert!((m.moments.m2 - 1.0).abs() < 1e-11);
        assert!((m.q_zero - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(*m.q_bounds.last().unwrap(), m.q_bounds[m.q_bounds.len() - 1]);
        assert!((m.q_bounds.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_two_is_uniform() {
        let m = build_measure(&make_sphere(2).unwrap(), 512).unwrap();
        // v = (3 − t²)/3 so v/h ≡ 1/3 and Z = 2√3/3
        assert!((m.z - 2.0 / 3f64.sqrt()).abs() < 1e-11);
        let c = 1.0 / (2.0 * 3f64.sqrt());
        for d in m.density() {
            assert!((d / c - 1.0).abs() < 1e-11);
        }
        assert!((m.moments.mh - 2.0).abs() < 1e-11);
        assert!((m.density_sup().unwrap() - c).abs() < 1e-10);
    }

    #[test]
    fn singular_ends_are_regularized() {
        for spec in [make_sphere(1).unwrap(), make_gamma(0.5, 2.0).unwrap()] {
            let m = build_measure(&spec, 512).unwrap();
            assert_eq!(m.grid.right, EndpointTransform::Power { exponent: 2.0 });
            assert!(m.moments.m1.abs() < 1e-10, "{}", spec.name);
            assert!((m.moments.m2 - 1.0).abs() < 1e-10, "{}", spec.name);
            assert!((m.moments.mh - spec.lambda_mu).abs() < 1e-10, "{}", spec.name);
            assert!(m.closed_form_max_rel_dev.unwrap() < 1e-10, "{}", spec.name);
            assert!(m.density_sup().is_none());
        }
    }

    #[test]
    fn catalog_moments_and_refinement() {
        for spec in catalog().unwrap() {
            let a = build_measure(&spec, 256).unwrap();
            let b = build_measure(&spec, 512).unwrap();
            for (x, y) in [(a.z, b.z), (a.moments.m2, b.moments.m2), (a.moments.mh, b.moments.mh)] {
                assert!(((x - y) / y).abs() < 1e-8, "{}: {x} vs {y}", spec.name);
            }
            assert!((a.moments.m1 - b.moments.m1).abs() < 1e-8);
            assert!(
                (b.moments.m2 - 1.0).abs() < 1e-8,
                "{}: m2 = {}",
                spec.name,
                b.moments.m2
            );
        }
    }

    #[test]
    fn exact_ipp_identities() {
        let m = build_measure(&make_gamma(2.0, 0.5).unwrap(), 512).unwrap();
        assert!(m.exact_ipp_residual(|x| x, |_| 1.0).abs() < 1e-10);
        assert!(m.exact_ipp_residual(|_| 1.0, |_| 0.0).abs() < 1e-10);
        let g = build_measure(&make_gaussian(1.0).unwrap(), 512).unwrap();
        assert!(g.exact_ipp_residual(|x| x * x, |x| 2.0 * x).abs() < 1e-12);
    }

    #[test]
    fn tail_bound_examples() {
        let g = build_measure(&make_gaussian(1.0).unwrap(), 1024).unwrap();
        let r = g.verify_tail_bounds().unwrap();
        assert!(r.max_ratio < 1.0);
        // at t = −2 the bound is min(1/2, 1/(2√(2π))) e^{−2}
        let bound = 0.5f64.min(1.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt())) * (-2.0f64).exp();
        assert!(normal_cdf(-2.0) < bound);
        let gm = build_measure(&make_gamma(1.0, 1.0).unwrap(), 1024).unwrap();
        gm.verify_tail_bounds().unwrap();
        // 1 − q(0.5) = 1 − e^{−1/2} against min(1 − e^{−1}, 1/(e·0.5)) · e^{0.5}·0.5
        let lhs = 1.0 - (-0.5f64).exp();
        let rhs = (1.0 - (-1.0f64).exp()).min(1.0 / (std::f64::consts::E * 0.5)) * 0.5f64.exp() * 0.5;
        assert!(lhs <= rhs);
    }

    #[test]
    fn minorization_gaussian_and_gamma() {
        let g = build_measure(&make_gaussian(1.0).unwrap(), 1024).unwrap();
        let r = g.verify_g_minorization().unwrap();
        assert!(r.left.checked > 10 && r.right.checked > 10);
        let gm = build_measure(&make_gamma(1.0, 1.0).unwrap(), 2048).unwrap();
        let r = gm.verify_g_minorization().unwrap();
        assert!(r.left.checked > 10, "{r:?}");
        // closed forms on t < −4: q = e^{t−1}, v = e^t (1−t), Z = e
        for t in [-4.5, -8.0, -20.0] {
            let q = (t - 1.0f64).exp();
            let v = t.exp() * (1.0 - t);
            let g1 = 1.0 - 2.0 / t.abs();
            assert!(q >= -(1.0 / std::f64::consts::E) * v * g1 / t);
        }
        assert!(r.right.checked > 0, "{r:?}");
    }
}
