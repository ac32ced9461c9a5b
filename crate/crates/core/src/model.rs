//! Catalog of quotient diffusions.
//!
//! A model is the triple (interval, h, λ): the generator on the interval is
//! `h φ'' − λ x φ'` and everything downstream is computed from it. Each model
//! also declares how `h` behaves near the two ends of the interval; those
//! declarations are verified by [`check_assumptions`], never inferred.

use std::fmt;
use std::sync::Arc;

use libm::lgamma as ln_gamma;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::quadrature::{integrate, Tolerance};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Declared growth of `h` near one end of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointBehavior {
    /// `c1 |t|^beta <= h(t) <= c2 |t|^alpha` for `|t| >= threshold`.
    Infinite {
        c1: f64,
        c2: f64,
        alpha: f64,
        beta: f64,
        threshold: f64,
    },
    /// `c1 d^beta <= h <= c2 d^alpha` for distances `0 < d <= radius` to the
    /// endpoint. `density_exponent` is the power of `d` in the invariant
    /// density near the endpoint.
    Finite {
        c1: f64,
        c2: f64,
        alpha: f64,
        beta: f64,
        radius: f64,
        density_exponent: f64,
    },
}

impl EndpointBehavior {
    pub fn is_finite(&self) -> bool {
        matches!(self, EndpointBehavior::Finite { .. })
    }

    pub fn c2(&self) -> f64 {
        match *self {
            EndpointBehavior::Infinite { c2, .. } | EndpointBehavior::Finite { c2, .. } => c2,
        }
    }

    /// Exponent `k` of the power map `d = w^k` that makes the density smooth
    /// in the computational coordinate `w`; 1 means no substitution. An
    /// integer `k ≤ 8` with `k(1 + density_exponent)` integral is preferred;
    /// otherwise `k = m/(1 + density_exponent)` with `m` the smallest integer
    /// giving `k ≥ 1`, so the density behaves like an integer power of `w`.
    pub fn power_map_exponent(&self) -> f64 {
        match *self {
            EndpointBehavior::Infinite { .. } => 1.0,
            EndpointBehavior::Finite { density_exponent, .. } => {
                let q = density_exponent + 1.0;
                let is_int = |v: f64| (v - v.round()).abs() < 1e-12;
                if is_int(density_exponent) && density_exponent >= 0.0 {
                    return 1.0;
                }
                (1..=8u32)
                    .map(f64::from)
                    .find(|&k| is_int(k * q) && k * q >= 1.0 - 1e-12)
                    .unwrap_or(q.ceil().max(1.0) / q)
            }
        }
    }
}

/// A one-dimensional quotient diffusion.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub name: String,
    pub a: f64,
    pub b: f64,
    pub lambda_mu: f64,
    pub left: EndpointBehavior,
    pub right: EndpointBehavior,
    h: ScalarFn,
    closed_form_density: Option<ScalarFn>,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("name", &self.name)
            .field("interval", &(self.a, self.b))
            .field("lambda_mu", &self.lambda_mu)
            .field("left", &self.left)
            .field("right", &self.right)
            .field("closed_form_density", &self.closed_form_density.is_some())
            .finish()
    }
}

impl DiffusionSpec {
    pub fn new(
        name: impl Into<String>,
        interval: (f64, f64),
        h: ScalarFn,
        lambda_mu: f64,
        left: EndpointBehavior,
        right: EndpointBehavior,
    ) -> Result<Self> {
        let (a, b) = interval;
        if !(lambda_mu > 0.0 && lambda_mu.is_finite()) {
            return Err(LabError::InvalidParameter(format!(
                "lambda_mu must be positive, got {lambda_mu}"
            )));
        }
        if !(a < 0.0 && 0.0 < b) {
            return Err(LabError::InvalidDomain(format!(
                "interval ({a}, {b}) must contain 0 in its interior"
            )));
        }
        if left.is_finite() != a.is_finite() || right.is_finite() != b.is_finite() {
            return Err(LabError::InvalidParameter(
                "endpoint behavior does not match interval ends".into(),
            ));
        }
        let h0 = h(0.0);
        if !(h0 > 0.0) {
            return Err(LabError::VanishingDiffusion(0.0));
        }
        Ok(DiffusionSpec {
            name: name.into(),
            a,
            b,
            lambda_mu,
            left,
            right,
            h,
            closed_form_density: None,
        })
    }

    pub fn with_closed_form_density(mut self, rho: ScalarFn) -> Self {
        self.closed_form_density = Some(rho);
        self
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        (self.h)(x)
    }

    pub fn h_fn(&self) -> ScalarFn {
        self.h.clone()
    }

    /// Sharp Poincaré constant `C_P(μ) = 1/λ_μ`.
    pub fn c_p(&self) -> f64 {
        1.0 / self.lambda_mu
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn closed_form_density(&self, x: f64) -> Option<f64> {
        self.closed_form_density.as_ref().map(|f| f(x))
    }

    pub fn has_closed_form_density(&self) -> bool {
        self.closed_form_density.is_some()
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LabError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// Ornstein–Uhlenbeck quotient: `h ≡ 1/c_p` on the real line.
pub fn make_gaussian(c_p: f64) -> Result<DiffusionSpec> {
    positive("c_p", c_p)?;
    let hv = 1.0 / c_p;
    let tail = EndpointBehavior::Infinite {
        c1: hv,
        c2: hv,
        alpha: 0.0,
        beta: -2.0,
        threshold: 1.0,
    };
    let spec = DiffusionSpec::new(
        format!("gaussian(c_p={c_p})"),
        (f64::NEG_INFINITY, f64::INFINITY),
        Arc::new(move |_| hv),
        1.0 / c_p,
        tail,
        tail,
    )?;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    Ok(spec.with_closed_form_density(Arc::new(move |x: f64| (-0.5 * x * x).exp() / norm)))
}

/// Laguerre quotient for the Gamma(s, θ) law, on `(−∞, √s]`.
pub fn make_gamma(s: f64, theta: f64) -> Result<DiffusionSpec> {
    positive("s", s)?;
    positive("theta", theta)?;
    let rs = s.sqrt();
    let left = EndpointBehavior::Infinite {
        c1: 1.0 / theta,
        c2: 2.0 / (theta * rs),
        alpha: 1.0,
        beta: 0.0,
        threshold: rs,
    };
    let right = EndpointBehavior::Finite {
        c1: 1.0 / (theta * rs),
        c2: 1.0 / (theta * rs),
        alpha: 1.0,
        beta: 1.0,
        radius: rs,
        density_exponent: s - 1.0,
    };
    let spec = DiffusionSpec::new(
        format!("gamma(s={s},theta={theta})"),
        (f64::NEG_INFINITY, rs),
        Arc::new(move |x: f64| (rs - x) / (theta * rs)),
        1.0 / theta,
        left,
        right,
    )?;
    let log_norm = s * rs.ln() - s - ln_gamma(s);
    Ok(spec.with_closed_form_density(Arc::new(move |x: f64| {
        if x >= rs {
            return 0.0;
        }
        (log_norm + (s - 1.0) * (rs - x).ln() + rs * x).exp()
    })))
}

/// Projection of the uniform law on the sphere `S^d` onto one coordinate.
pub fn make_sphere(d: u32) -> Result<DiffusionSpec> {
    if d < 1 {
        return Err(LabError::InvalidParameter("sphere dimension must be >= 1".into()));
    }
    let df = d as f64;
    let b = (df + 1.0).sqrt();
    let end = EndpointBehavior::Finite {
        c1: b,
        c2: 2.0 * b,
        alpha: 1.0,
        beta: 1.0,
        radius: b,
        density_exponent: 0.5 * df - 1.0,
    };
    let spec = DiffusionSpec::new(
        format!("sphere(d={d})"),
        (-b, b),
        Arc::new(move |t: f64| (b - t) * (b + t)),
        df,
        end,
        end,
    )?;
    // ∫ (d+1-t²)^{d/2-1} dt = (d+1)^{(d-1)/2} B(1/2, d/2)
    let log_z = 0.5 * (df - 1.0) * (df + 1.0).ln() + ln_gamma(0.5) + ln_gamma(0.5 * df) - ln_gamma(0.5 * df + 0.5);
    Ok(spec.with_closed_form_density(Arc::new(move |t: f64| {
        let w = df + 1.0 - t * t;
        if w <= 0.0 {
            return 0.0;
        }
        ((0.5 * df - 1.0) * w.ln() - log_z).exp()
    })))
}

/// Real polynomial with ascending coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn new(coefficients: Vec<f64>) -> Self {
        let mut c = coefficients;
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        Polynomial { coefficients: c }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coefficients.len() <= 1 {
            return Polynomial::new(vec![0.0]);
        }
        Polynomial::new(
            self.coefficients
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, c)| c * i as f64)
                .collect(),
        )
    }

    pub fn scaled(&self, a: f64) -> Polynomial {
        Polynomial::new(self.coefficients.iter().map(|c| c * a).collect())
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn leading(&self) -> f64 {
        *self.coefficients.last().unwrap_or(&0.0)
    }
}

/// Inverse of a strictly increasing function by bracketing, bisection and a
/// bracket-safeguarded Newton polish.
pub fn invert_increasing<F, D>(f: F, df: D, target: f64, domain: (f64, f64)) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let (dlo, dhi) = domain;
    let mut lo = if dlo.is_finite() { dlo } else { -1.0f64.min(dhi - 1.0) };
    let mut hi = if dhi.is_finite() { dhi } else { 1.0f64.max(dlo + 1.0) };
    let mut expand = 0;
    while f(lo) > target {
        if dlo.is_finite() {
            return Err(LabError::InvalidDomain(format!(
                "{target} below the image of the domain"
            )));
        }
        lo = 2.0 * lo - 1.0;
        expand += 1;
        if expand > 200 {
            return Err(LabError::InvalidDomain(format!("cannot bracket {target}")));
        }
    }
    while f(hi) < target {
        if dhi.is_finite() {
            return Err(LabError::InvalidDomain(format!(
                "{target} above the image of the domain"
            )));
        }
        hi = 2.0 * hi + 1.0;
        expand += 1;
        if expand > 200 {
            return Err(LabError::InvalidDomain(format!("cannot bracket {target}")));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x) - target;
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = df(x);
        let newton = x - fx / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - x).abs();
        x = next;
        if step <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return Ok(x);
        }
    }
    Ok(x)
}

/// Quotient of the Brascamp–Lieb diffusion for `dμ = e^{−φ}dx`:
/// `f0 = φ'`, `h = φ''∘(φ')^{-1}`, `λ = 1`.
pub fn make_log_concave(
    name: impl Into<String>,
    phi_prime: ScalarFn,
    phi_second: ScalarFn,
    domain: (f64, f64),
    left: EndpointBehavior,
    right: EndpointBehavior,
) -> Result<DiffusionSpec> {
    let (lo, hi) = domain;
    if !(lo < hi) {
        return Err(LabError::InvalidDomain(format!("empty domain ({lo}, {hi})")));
    }
    // strict convexity on a sample of the domain (0 included)
    let slo = if lo.is_finite() { lo } else { -50.0 };
    let shi = if hi.is_finite() { hi } else { 50.0 };
    let n = 4000;
    for i in 0..=n {
        let x = slo + (shi - slo) * i as f64 / n as f64;
        let x = if x.abs() < 1e-9 { 0.0 } else { x };
        if (lo.is_finite() && x <= lo) || (hi.is_finite() && x >= hi) {
            continue;
        }
        if !(phi_second(x) > 0.0) {
            return Err(LabError::NotStrictlyConvex(x));
        }
    }
    if lo < 0.0 && 0.0 < hi && !(phi_second(0.0) > 0.0) {
        return Err(LabError::NotStrictlyConvex(0.0));
    }
    let image_end = |sign: f64, end: f64| -> Result<f64> {
        if end.is_finite() {
            return Ok(phi_prime(end));
        }
        let mut x = sign;
        for _ in 0..64 {
            let v = phi_prime(x);
            if v.abs() > 1e12 {
                return Ok(sign * f64::INFINITY);
            }
            x *= 2.0;
        }
        Err(LabError::InvalidDomain(
            "phi' stays bounded on an infinite domain end".into(),
        ))
    };
    let a = image_end(-1.0, lo)?;
    let b = image_end(1.0, hi)?;
    let (pp, ps) = (phi_prime.clone(), phi_second.clone());
    let h: ScalarFn = Arc::new(move |t: f64| match invert_increasing(|x| pp(x), |x| ps(x), t, domain) {
        Ok(x) => ps(x),
        Err(_) => f64::NAN,
    });
    DiffusionSpec::new(name, (a, b), h, 1.0, left, right)
}

/// Scale `a > 0` such that `φ = a·p` satisfies `∫ φ'' e^{−φ} / ∫ e^{−φ} = 1`,
/// the unit-variance normalization of the eigenfunction `φ'`.
pub fn normalizing_scale(shape: &Polynomial) -> Result<f64> {
    let d1 = shape.derivative();
    let d2 = d1.derivative();
    let x0 = invert_increasing(|x| d1.eval(x), |x| d2.eval(x), 0.0, (f64::NEG_INFINITY, f64::INFINITY))?;
    let p0 = shape.eval(x0);
    let g = |a: f64| -> Result<f64> {
        // half-width where a (p - p0) exceeds 120
        let mut r = 1.0;
        while a * (shape.eval(x0 - r) - p0) < 120.0 || a * (shape.eval(x0 + r) - p0) < 120.0 {
            r *= 2.0;
            if r > 1e12 {
                return Err(LabError::ModelNotNormalizable("potential grows too slowly".into()));
            }
        }
        let w = |x: f64| (-a * (shape.eval(x) - p0)).exp();
        let tol = Tolerance::tight();
        let num = integrate(|x| a * d2.eval(x) * w(x), x0 - r, x0 + r, tol)?.value;
        let den = integrate(w, x0 - r, x0 + r, tol)?.value;
        Ok(num / den)
    };
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    if g(lo.exp())? > 1.0 || g(hi.exp())? < 1.0 {
        return Err(LabError::InvalidParameter(
            "cannot normalize potential: scale not bracketed".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp())? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Brascamp–Lieb quotient for a polynomial potential on the real line.
/// With `normalize`, the potential is rescaled so that its quotient measure
/// has unit variance. Growth constants are read off the leading term.
pub fn make_log_concave_polynomial(
    name: impl Into<String>,
    potential: &Polynomial,
    normalize: bool,
) -> Result<DiffusionSpec> {
    let deg = potential.degree();
    if deg < 2 || deg % 2 == 1 || potential.leading() <= 0.0 {
        return Err(LabError::InvalidParameter(
            "polynomial potential needs even degree >= 2 and positive leading coefficient".into(),
        ));
    }
    let phi = if normalize {
        potential.scaled(normalizing_scale(potential)?)
    } else {
        potential.clone()
    };
    let d1 = phi.derivative();
    let d2 = d1.derivative();
    // min of φ'' over a wide window, used as the lower growth constant
    let kappa = (0..=8000)
        .map(|i| d2.eval(-40.0 + 80.0 * i as f64 / 8000.0))
        .fold(f64::INFINITY, f64::min);
    let n = deg as f64;
    let lead = phi.leading();
    let alpha = (n - 2.0) / (n - 1.0);
    let asym = n * (n - 1.0) * lead * (1.0 / (n * lead)).powf(alpha);
    let c2 = if deg == 2 { asym } else { 1.5 * asym };
    let c1 = kappa.max(0.0);
    // smallest threshold past which h <= c2 |t|^alpha on a long window
    let (p1, p2) = (d1.clone(), d2.clone());
    let h_at = move |t: f64| -> f64 {
        invert_increasing(|x| p1.eval(x), |x| p2.eval(x), t, (f64::NEG_INFINITY, f64::INFINITY))
            .map(|x| p2.eval(x))
            .unwrap_or(f64::NAN)
    };
    let mut threshold = 1.0;
    'outer: for _ in 0..60 {
        for k in 0..=200 {
            let t = threshold * 1000f64.powf(k as f64 / 200.0);
            for s in [-1.0, 1.0] {
                if h_at(s * t) > c2 * t.powf(alpha) {
                    threshold *= 2.0;
                    continue 'outer;
                }
            }
        }
        break;
    }
    let tail = EndpointBehavior::Infinite {
        c1,
        c2,
        alpha,
        beta: 2.0 * alpha - 2.0,
        threshold,
    };
    let (q1, q2) = (d1.clone(), d2.clone());
    make_log_concave(
        name,
        Arc::new(move |x| q1.eval(x)),
        Arc::new(move |x| q2.eval(x)),
        (f64::NEG_INFINITY, f64::INFINITY),
        tail,
        tail,
    )
}

/// Catalog quartic: `φ ∝ x²/2 + x⁴/4`, normalized. Its `h` grows like
/// `3 a^{1/3} |t|^{2/3}` and is bounded below by `a = φ''(0)`.
pub fn make_quartic() -> Result<DiffusionSpec> {
    let shape = Polynomial::new(vec![0.0, 0.0, 0.5, 0.0, 0.25]);
    let a = normalizing_scale(&shape)?;
    let phi = shape.scaled(a);
    let d1 = phi.derivative();
    let d2 = d1.derivative();
    let tail = EndpointBehavior::Infinite {
        c1: a,
        c2: 3.0 * a.cbrt(),
        alpha: 2.0 / 3.0,
        beta: -2.0 / 3.0,
        threshold: 1.0,
    };
    make_log_concave(
        "log_concave_quartic",
        Arc::new(move |x| d1.eval(x)),
        Arc::new(move |x| d2.eval(x)),
        (f64::NEG_INFINITY, f64::INFINITY),
        tail,
        tail,
    )
}

/// Models in the acceptance lattice.
pub fn catalog() -> Result<Vec<DiffusionSpec>> {
    Ok(vec![
        make_gaussian(1.0)?,
        make_gamma(1.0, 1.0)?,
        make_gamma(2.0, 0.5)?,
        make_gamma(0.5, 2.0)?,
        make_gamma(5.0, 1.0)?,
        make_sphere(1)?,
        make_sphere(2)?,
        make_sphere(3)?,
        make_sphere(10)?,
        make_quartic()?,
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub positivity_ok: bool,
    pub ellipticity_kappa: Option<f64>,
    pub growth_ok_at_a: bool,
    pub growth_ok_at_b: bool,
    pub details: Vec<String>,
}

fn check_end(spec: &DiffusionSpec, left: bool, grid_end: f64, details: &mut Vec<String>) -> bool {
    let side = if left { "a" } else { "b" };
    let behavior = if left { spec.left } else { spec.right };
    let tol = 1e-12;
    let mut ok = true;
    match behavior {
        EndpointBehavior::Infinite {
            c1,
            c2,
            alpha,
            beta,
            threshold,
        } => {
            if !(alpha <= 2.0 + tol && beta >= 2.0 * alpha - 2.0 - tol && beta <= alpha + tol) {
                details.push(format!(
                    "{side}: exponents alpha={alpha}, beta={beta} outside 2a-2 <= b <= a <= 2"
                ));
                ok = false;
            }
            let top = (4.0 * grid_end.abs()).max(16.0 * threshold);
            for k in 0..=400 {
                let r = threshold * (top / threshold).powf(k as f64 / 400.0);
                let t = if left { -r } else { r };
                let hv = spec.h(t);
                let lo = c1 * r.powf(beta);
                let hi = c2 * r.powf(alpha);
                if !(lo <= hv * (1.0 + tol) && hv <= hi * (1.0 + tol)) {
                    details.push(format!("{side}: growth bound fails at t={t}: {lo} <= {hv} <= {hi}"));
                    ok = false;
                    break;
                }
            }
        }
        EndpointBehavior::Finite {
            c1,
            c2,
            alpha,
            beta,
            radius,
            ..
        } => {
            if !(alpha >= 1.0 - tol && beta <= 2.0 * alpha + tol) {
                details.push(format!(
                    "{side}: exponents alpha={alpha}, beta={beta} outside alpha >= 1, beta <= 2 alpha"
                ));
                ok = false;
            }
            let end = if left { spec.a } else { spec.b };
            for k in 0..=400 {
                let d = radius * 1e-10f64.powf(1.0 - k as f64 / 400.0);
                let t = if left { end + d } else { end - d };
                let d = (t - end).abs();
                if t <= spec.a || t >= spec.b {
                    continue;
                }
                let hv = spec.h(t);
                let lo = c1 * d.powf(beta);
                let hi = c2 * d.powf(alpha);
                if !(lo <= hv * (1.0 + tol) && hv <= hi * (1.0 + tol)) {
                    details.push(format!("{side}: growth bound fails at t={t}: {lo} <= {hv} <= {hi}"));
                    ok = false;
                    break;
                }
            }
        }
    }
    ok
}

/// Verify positivity of `h`, detect the ellipticity constant, and check the
/// declared endpoint growth on the given node set.
pub fn check_assumptions(spec: &DiffusionSpec, nodes: &[f64]) -> AssumptionReport {
    let mut details = Vec::new();
    let min_on_grid = nodes.iter().map(|&x| spec.h(x)).fold(f64::INFINITY, f64::min);
    let positivity_ok = min_on_grid > 0.0;
    if !positivity_ok {
        details.push(format!("h is not positive on the grid (min {min_on_grid:e})"));
    }

    let lo0 = *nodes.first().unwrap_or(&-1.0);
    let hi0 = *nodes.last().unwrap_or(&1.0);
    let mut running = min_on_grid;
    let mut history = vec![running];
    for k in 1..=4 {
        let scale = 2f64.powi(k);
        let lo_k = if spec.a.is_finite() {
            spec.a + (lo0 - spec.a) / scale
        } else {
            lo0 * scale
        };
        let hi_k = if spec.b.is_finite() {
            spec.b - (spec.b - hi0) / scale
        } else {
            hi0 * scale
        };
        for i in 0..=512 {
            let s = i as f64 / 512.0;
            running = running
                .min(spec.h(lo_k + (lo0 - lo_k) * s))
                .min(spec.h(hi0 + (hi_k - hi0) * s));
        }
        history.push(running);
    }
    let last = history[history.len() - 1];
    let prev = history[history.len() - 2];
    let ellipticity_kappa = if (last - prev).abs() < 1e-9 && last > 1e-9 {
        Some(last)
    } else {
        details.push(format!(
            "inf h not stabilized above tolerance (truncation sequence {history:?})"
        ));
        None
    };
    let growth_ok_at_a = check_end(spec, true, lo0, &mut details);
    let growth_ok_at_b = check_end(spec, false, hi0, &mut details);
    AssumptionReport {
        positivity_ok,
        ellipticity_kappa,
        growth_ok_at_a,
        growth_ok_at_b,
        details,
    }
}
