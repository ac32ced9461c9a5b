//! Quadrature primitives: Gauss–Legendre panel rules with a spectral
//! indefinite-integration matrix, and a globally adaptive Gauss–Kronrod
//! (10/21) integrator.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{LabError, Result};

/// Gauss–Legendre rule on `[-1, 1]` together with the matrix that maps
/// samples of `g` at the nodes to `∫_{-1}^{ξ_k} g`.
#[derive(Debug, Clone)]
pub struct PanelRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `partial[k][l] * weights[l]` integrates the Lagrange basis `ℓ_l` from
    /// `-1` to `nodes[k]`; stored divided by the weight so that it can be
    /// applied directly to already-weighted samples.
    pub partial: Vec<Vec<f64>>,
}

fn legendre_all(m: usize, x: f64) -> Vec<f64> {
    // P_0..=P_m at x
    let mut p = vec![0.0; m + 1];
    p[0] = 1.0;
    if m >= 1 {
        p[1] = x;
    }
    for j in 1..m {
        let jf = j as f64;
        p[j + 1] = ((2.0 * jf + 1.0) * x * p[j] - jf * p[j - 1]) / (jf + 1.0);
    }
    p
}

impl PanelRule {
    /// Nodes and weights transplanted to `[0, 1]`.
    pub fn unit(&self) -> Vec<(f64, f64)> {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .collect()
    }

    pub fn gauss_legendre(m: usize) -> Self {
        assert!(m >= 2, "need at least two Gauss points");
        let mut nodes = vec![0.0; m];
        let mut weights = vec![0.0; m];
        let mf = m as f64;
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
            for _ in 0..100 {
                let p = legendre_all(m, x);
                let dp = mf * (x * p[m] - p[m - 1]) / (x * x - 1.0);
                let dx = p[m] / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let p = legendre_all(m, x);
            let dp = mf * (x * p[m] - p[m - 1]) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        // ascending order
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
        let nodes: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
        let weights: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();

        let leg: Vec<Vec<f64>> = nodes.iter().map(|&x| legendre_all(m, x)).collect();
        let mut partial = vec![vec![0.0; m]; m];
        for k in 0..m {
            let xk = nodes[k];
            for l in 0..m {
                let mut s = 0.5 * (xk + 1.0);
                for j in 1..m {
                    s += 0.5 * leg[l][j] * (leg[k][j + 1] - leg[k][j - 1]);
                }
                partial[k][l] = s;
            }
        }
        PanelRule {
            nodes,
            weights,
            partial,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running integrals from the panel's left edge to each node, given
    /// samples already multiplied by their quadrature weights.
    pub fn partial_sums(&self, weighted: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.partial[k].iter().zip(weighted).map(|(s, w)| s * w).sum();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_panels: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-12,
            rel: 1e-10,
            max_panels: 1 << 20,
        }
    }
}

impl Tolerance {
    pub fn tight() -> Self {
        Tolerance {
            abs: 0.0,
            rel: 1e-13,
            max_panels: 1 << 14,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.000000000000000000000000000000000,
];

const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077208980029600,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];

const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
];

fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let x = hl * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * hl;
    let res_abs = res_abs * hl.abs();
    let res_asc = res_asc * hl.abs();
    let mut err = ((res_k - res_g) * hl).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss–Kronrod integration of `f` over a finite `[a, b]`.
///
/// When the requested tolerance is below what rounding allows, the routine
/// stops once every segment is at the resolution limit and accepts the
/// result if the estimate is within `1e-8` relative; otherwise it fails.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> Result<Integral> {
    if a == b {
        return Ok(Integral {
            value: 0.0,
            error: 0.0,
            panels: 0,
        });
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(LabError::NumericalFailure(format!(
            "adaptive quadrature needs finite bounds, got [{a}, {b}]"
        )));
    }
    let (v, e) = gk21(&f, a, b);
    if !v.is_finite() {
        return Err(LabError::NumericalFailure(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    let mut heap = BinaryHeap::new();
    heap.push(Segment {
        a,
        b,
        value: v,
        error: e,
    });
    let mut total = v;
    let mut total_err = e;
    let mut settled_value = 0.0;
    let mut settled_err = 0.0;
    let mut panels = 1;
    loop {
        let target = tol.abs.max(tol.rel * total.abs());
        if total_err <= target {
            break;
        }
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        let width = (seg.b - seg.a).abs();
        if panels >= tol.max_panels || width <= 1e-13 * (seg.a.abs() + seg.b.abs()).max(1e-300) {
            if panels >= tol.max_panels {
                heap.push(seg);
                break;
            }
            // at the resolution limit; freeze this segment
            settled_value += seg.value;
            settled_err += seg.error;
            total_err = settled_err + heap.iter().map(|s| s.error).sum::<f64>();
            if heap.is_empty() {
                break;
            }
            continue;
        }
        let (v1, e1) = gk21(&f, seg.a, mid);
        let (v2, e2) = gk21(&f, mid, seg.b);
        if !(v1.is_finite() && v2.is_finite()) {
            return Err(LabError::NumericalFailure(format!(
                "non-finite integrand near [{}, {}]",
                seg.a, seg.b
            )));
        }
        panels += 1;
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.error;
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: v2,
            error: e2,
        });
    }
    let value = settled_value + heap.iter().map(|s| s.value).sum::<f64>();
    let error = settled_err + heap.iter().map(|s| s.error).sum::<f64>();
    let target = tol.abs.max(tol.rel * value.abs());
    if error > target && error > 1e-8 * value.abs().max(1e-300) && error > tol.abs {
        return Err(LabError::NumericalFailure(format!(
            "adaptive quadrature on [{a}, {b}] did not converge: value {value:e}, error {error:e}"
        )));
    }
    Ok(Integral { value, error, panels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let r = PanelRule::gauss_legendre(10);
        for deg in 0..20 {
            let s: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(deg)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((s - exact).abs() < 1e-14, "deg {deg}: {s} vs {exact}");
        }
    }

    #[test]
    fn partial_matrix_reproduces_antiderivatives() {
        let r = PanelRule::gauss_legendre(10);
        // g(x) = 3x^2 + 1 -> G(x) = x^3 + x, G(-1) = -2
        let weighted: Vec<f64> = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * (3.0 * x * x + 1.0))
            .collect();
        let mut out = vec![0.0; 10];
        r.partial_sums(&weighted, &mut out);
        for (k, x) in r.nodes.iter().enumerate() {
            let exact = x.powi(3) + x + 2.0;
            assert!((out[k] - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn adaptive_handles_peaks_and_log_singularity() {
        let v = integrate(|x: f64| (-x * x).exp(), -10.0, 10.0, Tolerance::tight()).unwrap();
        assert!((v.value - std::f64::consts::PI.sqrt()).abs() < 1e-14);
        let v = integrate(|x: f64| -x.ln(), 0.0, 1.0, Tolerance::default()).unwrap();
        assert!((v.value - 1.0).abs() < 1e-9);
    }
}
