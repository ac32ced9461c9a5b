//! Wasserstein-1, total variation and Kolmogorov distances between measures on
//! an interval, and the Kolmogorov–Wasserstein comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::measure::QuotientMeasure;
use crate::quadrature::PanelRule;

/// A CDF sampled at increasing abscissae, interpolated by monotone cubic
/// Hermite pieces; `0` to the left of the samples and `1` to the right.
#[derive(Debug, Clone)]
pub struct Cdf {
    xs: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Cdf {
    pub fn new(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() != values.len() || xs.len() < 2 {
            return Err(LabError::InvalidCdf("need at least two matching samples".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::InvalidCdf("abscissae must be strictly increasing".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            return Err(LabError::InvalidCdf("values decrease".into()));
        }
        let (first, last) = (values[0], *values.last().unwrap());
        if first.abs() > 1e-9 || (last - 1.0).abs() > 1e-9 {
            return Err(LabError::InvalidCdf(format!(
                "limits are {first} and {last}, not 0 and 1"
            )));
        }
        let mut v = Vec::with_capacity(values.len());
        let mut run: f64 = 0.0;
        for y in values {
            run = run.max(y.clamp(0.0, 1.0));
            v.push(run);
        }
        let slopes = pchip_slopes(&xs, &v);
        Ok(Cdf { xs, values: v, slopes })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Evaluate at `x`, with `cursor` a monotone search hint.
    fn eval_from(&self, x: f64, cursor: &mut usize) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return if x < self.xs[0] { 0.0 } else { self.values[0] };
        }
        if x >= self.xs[n - 1] {
            return if x > self.xs[n - 1] { 1.0 } else { self.values[n - 1] };
        }
        if *cursor >= n - 1 || self.xs[*cursor] > x {
            *cursor = self.xs.partition_point(|&t| t <= x).saturating_sub(1);
        }
        while self.xs[*cursor + 1] < x {
            *cursor += 1;
        }
        let k = *cursor;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let y = (2.0 * t3 - 3.0 * t2 + 1.0) * self.values[k]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * self.values[k + 1]
            + (t3 - t2) * h * self.slopes[k + 1];
        y.clamp(0.0, 1.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut c = 0;
        self.eval_from(x, &mut c)
    }
}

fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
    let mut s = vec![0.0; n];
    s[0] = d[0];
    s[n - 1] = d[n - 2];
    for k in 1..n - 1 {
        if d[k - 1] * d[k] <= 0.0 {
            s[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            s[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
        }
    }
    s
}

fn merge(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a == b {
        return a.to_vec();
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if out.last().is_none_or(|&l| next > l) {
            out.push(next);
        }
    }
    out
}

struct Comparison {
    w1: f64,
    gap_at_samples: f64,
    gap_interpolated: f64,
}

fn compare(a: &Cdf, b: &Cdf) -> Comparison {
    let xs = merge(&a.xs, &b.xs);
    let rule = PanelRule::gauss_legendre(8).unit();
    let (mut ca, mut cb) = (0, 0);
    let mut w1 = 0.0;
    let mut gap: f64 = 0.0;
    let mut gap_in: f64 = 0.0;
    for x in &xs {
        gap = gap.max((a.eval_from(*x, &mut ca) - b.eval_from(*x, &mut cb)).abs());
    }
    let (mut ca, mut cb) = (0, 0);
    for w in xs.windows(2) {
        let len = w[1] - w[0];
        let mut s = 0.0;
        for &(t, wt) in &rule {
            let x = w[0] + len * t;
            let d = (a.eval_from(x, &mut ca) - b.eval_from(x, &mut cb)).abs();
            s += wt * d;
            gap_in = gap_in.max(d);
        }
        w1 += s * len;
    }
    Comparison {
        w1,
        gap_at_samples: gap,
        gap_interpolated: gap_in.max(gap),
    }
}

/// `∫ |F₁ − F₂|` over the merged sample grid.
pub fn wasserstein1(a: &Cdf, b: &Cdf) -> f64 {
    compare(a, b).w1
}

/// Kolmogorov distance: the largest gap at the merged samples, and an upper
/// value that also covers the interpolants between samples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Kolmogorov {
    pub value: f64,
    pub upper: f64,
}

pub fn kolmogorov(a: &Cdf, b: &Cdf) -> Kolmogorov {
    let c = compare(a, b);
    Kolmogorov {
        value: c.gap_at_samples,
        upper: c.gap_interpolated,
    }
}

/// `½ Σ w |d₁ − d₂|` for two densities sampled at common quadrature points.
pub fn total_variation(weights: &[f64], d1: &[f64], d2: &[f64]) -> Result<f64> {
    if weights.len() != d1.len() || weights.len() != d2.len() {
        return Err(LabError::InvalidDensity("length mismatch".into()));
    }
    let m1: f64 = weights.iter().zip(d1).map(|(w, d)| w * d).sum();
    let m2: f64 = weights.iter().zip(d2).map(|(w, d)| w * d).sum();
    if (m1 - 1.0).abs() > 1e-6 || (m2 - 1.0).abs() > 1e-6 {
        return Err(LabError::InvalidDensity(format!("masses {m1} and {m2} are not 1")));
    }
    Ok(0.5
        * weights
            .iter()
            .zip(d1.iter().zip(d2))
            .map(|(w, (a, b))| w * (a - b).abs())
            .sum::<f64>())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DistanceTriple {
    pub w1: f64,
    pub tv: f64,
    pub kolmogorov: f64,
    /// Kolmogorov distance including the interpolation allowance; used in
    /// every bound check.
    pub kolmogorov_upper: f64,
}

/// CDF of a density sampled at the Gauss points of `m`.
pub fn cdf_on_panels(m: &QuotientMeasure, density_points: &[f64]) -> Result<Cdf> {
    let weighted: Vec<f64> = density_points
        .iter()
        .zip(&m.panels.weights)
        .map(|(d, w)| d * w)
        .collect();
    let (b, p) = m.panels.cumulative(&weighted);
    let (xs, vs) = m.panels.merged(&b, &p);
    Cdf::new(xs, vs)
}

/// All three distances between two densities sampled at the Gauss points of
/// `m`.
pub fn distance_triple(m: &QuotientMeasure, d1: &[f64], d2: &[f64]) -> Result<DistanceTriple> {
    let a = cdf_on_panels(m, d1)?;
    let b = cdf_on_panels(m, d2)?;
    let c = compare(&a, &b);
    let tv = total_variation(&m.panels.weights, d1, d2)?;
    if c.gap_at_samples > tv + 1e-10 {
        return Err(LabError::InvariantViolation(format!(
            "Kolmogorov distance {} exceeds total variation {tv}",
            c.gap_at_samples
        )));
    }
    Ok(DistanceTriple {
        w1: c.w1,
        tv,
        kolmogorov: c.gap_at_samples,
        kolmogorov_upper: c.gap_interpolated,
    })
}

/// Largest `|∫f d(ν − μ)|` over `count` random piecewise-linear
/// 1-Lipschitz `f`; never exceeds `W₁`.
pub fn dual_lower_bound(m: &QuotientMeasure, d1: &[f64], d2: &[f64], seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = m.nodes();
    let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
    let mut best: f64 = 0.0;
    for _ in 0..count {
        let mut knots: Vec<f64> = (0..8).map(|_| rng.gen_range(lo..hi)).collect();
        knots.sort_by(|a, b| a.total_cmp(b));
        let slopes: Vec<f64> = (0..=knots.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let f = |x: f64| {
            let mut y = slopes[0] * (x.min(knots[0]) - knots[0]);
            for k in 0..knots.len() {
                let right = if k + 1 < knots.len() {
                    knots[k + 1]
                } else {
                    f64::INFINITY
                };
                if x > knots[k] {
                    y += slopes[k + 1] * (x.min(right) - knots[k]);
                }
            }
            y
        };
        let s: f64 = m
            .panels
            .points
            .iter()
            .enumerate()
            .map(|(k, &x)| m.panels.weights[k] * (d1[k] - d2[k]) * f(x))
            .sum();
        best = best.max(s.abs());
    }
    best
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KwReport {
    pub kolmogorov: f64,
    pub bound: f64,
}

/// `d_K ≤ 2 √(C W₁)` where `C` bounds the density of the reference measure.
pub fn check_kw_comparison(d: &DistanceTriple, density_sup: f64) -> Result<KwReport> {
    let bound = 2.0 * (density_sup * d.w1).sqrt();
    let r = KwReport {
        kolmogorov: d.kolmogorov_upper,
        bound,
    };
    if r.kolmogorov > bound * (1.0 + 1e-9) + 1e-12 {
        return Err(LabError::InvariantViolation(format!(
            "Kolmogorov {} exceeds 2√(C W₁) = {bound}",
            r.kolmogorov
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::build_measure;
    use crate::model::{make_gamma, make_gaussian};
    use crate::perturb::{make_perturbed, project_direction, raw_direction};

    fn uniform(a: f64, b: f64) -> Cdf {
        Cdf::new(vec![a, b], vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn uniform_shift() {
        let (a, b) = (uniform(0.0, 1.0), uniform(0.5, 1.5));
        assert!((wasserstein1(&a, &b) - 0.5).abs() < 1e-12);
        assert!((kolmogorov(&a, &b).value - 0.5).abs() < 1e-12);
        assert_eq!(wasserstein1(&a, &a), 0.0);
    }

    #[test]
    fn invalid_cdfs_are_rejected() {
        assert!(matches!(
            Cdf::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.7, 0.6]),
            Err(LabError::InvalidCdf(_))
        ));
        assert!(matches!(
            Cdf::new(vec![0.0, 1.0], vec![0.0, 0.5]),
            Err(LabError::InvalidCdf(_))
        ));
    }

    #[test]
    fn total_variation_extremes() {
        let w = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(
            total_variation(&w, &[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(total_variation(&w, &[0.5; 4], &[0.5; 4]).unwrap(), 0.0);
        assert!(matches!(
            total_variation(&w, &[0.5; 4], &[0.6; 4]),
            Err(LabError::InvalidDensity(_))
        ));
    }

    #[test]
    fn perturbation_identities() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 1024).unwrap();
        let d = project_direction(&m, "cubic", raw_direction("cubic").unwrap()).unwrap();
        let zero = make_perturbed(&m, &d, 0.0).unwrap();
        let t0 = distance_triple(&m, &m.density_points, &zero.density_points).unwrap();
        assert!(t0.w1 < 1e-9 && t0.tv < 1e-12 && t0.kolmogorov < 1e-12);
        let mut last = None;
        for k in 1..=4 {
            let eps = d.eps_max * k as f64 / 4.0;
            let nu = make_perturbed(&m, &d, eps).unwrap();
            let t = distance_triple(&m, &m.density_points, &nu.density_points).unwrap();
            let direct: f64 = 0.5
                * eps
                * m.mass_weights()
                    .iter()
                    .zip(&d.p_points)
                    .map(|(w, p)| w * p.abs())
                    .sum::<f64>();
            assert!((t.tv - direct).abs() < 1e-12 * (1.0 + direct));
            assert!(t.kolmogorov <= t.tv + 1e-10);
            assert!(dual_lower_bound(&m, &m.density_points, &nu.density_points, 7, 20) <= t.w1 + 1e-8);
            let density_sup = m.density_sup().unwrap();
            assert!((density_sup - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9);
            check_kw_comparison(&t, density_sup).unwrap();
            if let Some((e0, w0)) = last {
                let ratio: f64 = t.w1 / w0 * e0 / eps;
                assert!((ratio - 1.0).abs() < 0.05);
            }
            last = Some((eps, t.w1));
        }
    }

    #[test]
    fn gamma_density_sup_is_one() {
        let m = build_measure(&make_gamma(1.0, 1.0).unwrap(), 1024).unwrap();
        assert!((m.density_sup().unwrap() - 1.0).abs() < 1e-6);
    }
}
