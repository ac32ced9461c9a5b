//! Test functions: bounded and Lipschitz Stein targets, and the smooth ψ
//! family used for integration-by-parts checks.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::model::ScalarFn;

/// A Stein target with its derivative and declared metadata.
#[derive(Clone)]
pub struct Target {
    pub label: String,
    pub f: ScalarFn,
    pub f_prime: ScalarFn,
    /// Declared `(inf f, sup f)` over the real line, for bounded targets.
    pub bounds: Option<(f64, f64)>,
    /// Declared `‖f′‖_∞`.
    pub lipschitz: Option<f64>,
}

impl std::fmt::Debug for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Target")
            .field("label", &self.label)
            .field("bounds", &self.bounds)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl Target {
    pub fn new<F, D>(
        label: impl Into<String>,
        f: F,
        f_prime: D,
        bounds: Option<(f64, f64)>,
        lipschitz: Option<f64>,
    ) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Target {
            label: label.into(),
            f: Arc::new(f),
            f_prime: Arc::new(f_prime),
            bounds,
            lipschitz,
        }
    }

    /// Constant target.
    pub fn constant(c: f64) -> Self {
        Target::new(format!("const({c})"), move |_| c, |_| 0.0, Some((c, c)), Some(0.0))
    }

    /// `‖f − μ*(f)‖_∞` implied by the declared bounds.
    pub fn sup_deviation(&self, mu_f: f64) -> Option<f64> {
        self.bounds.map(|(lo, hi)| (hi - mu_f).max(mu_f - lo).max(0.0))
    }
}

fn logistic_step(c: f64) -> Target {
    let s = 0.3;
    let f = move |x: f64| 1.0 / (1.0 + ((x - c) / s).exp());
    Target::new(
        format!("step({c})"),
        f,
        move |x: f64| {
            let y = f(x);
            -y * (1.0 - y) / s
        },
        Some((0.0, 1.0)),
        Some(0.25 / s),
    )
}

/// Ten bounded targets: five smoothed steps and five smooth bounded shapes.
pub fn bounded_family() -> Vec<Target> {
    let mut v: Vec<Target> = [-1.0, -0.5, 0.0, 0.5, 1.0].into_iter().map(logistic_step).collect();
    v.push(Target::new("sin", f64::sin, f64::cos, Some((-1.0, 1.0)), Some(1.0)));
    v.push(Target::new(
        "cos2x",
        |x: f64| (2.0 * x).cos(),
        |x: f64| -2.0 * (2.0 * x).sin(),
        Some((-1.0, 1.0)),
        Some(2.0),
    ));
    v.push(Target::new(
        "cauchy",
        |x: f64| 1.0 / (1.0 + x * x),
        |x: f64| -2.0 * x / ((1.0 + x * x) * (1.0 + x * x)),
        Some((0.0, 1.0)),
        Some(3.0 * 3f64.sqrt() / 8.0),
    ));
    v.push(Target::new(
        "gauss_bump",
        |x: f64| (-x * x).exp(),
        |x: f64| -2.0 * x * (-x * x).exp(),
        Some((0.0, 1.0)),
        Some((2.0 / std::f64::consts::E).sqrt()),
    ));
    v.push(Target::new(
        "tanh",
        f64::tanh,
        |x: f64| 1.0 / (x.cosh() * x.cosh()),
        Some((-1.0, 1.0)),
        Some(1.0),
    ));
    v
}

/// Ten 1-Lipschitz targets (several unbounded).
pub fn lipschitz_family() -> Vec<Target> {
    vec![
        Target::new("id", |x| x, |_| 1.0, None, Some(1.0)),
        Target::new("sin", f64::sin, f64::cos, Some((-1.0, 1.0)), Some(1.0)),
        Target::new(
            "tanh",
            f64::tanh,
            |x: f64| 1.0 / (x.cosh() * x.cosh()),
            Some((-1.0, 1.0)),
            Some(1.0),
        ),
        Target::new(
            "atan",
            f64::atan,
            |x: f64| 1.0 / (1.0 + x * x),
            Some((-PI / 2.0, PI / 2.0)),
            Some(1.0),
        ),
        Target::new(
            "softplus",
            |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x: f64| 1.0 / (1.0 + (-x).exp()),
            None,
            Some(1.0),
        ),
        Target::new(
            "hyperbola",
            |x: f64| (1.0 + x * x).sqrt(),
            |x: f64| x / (1.0 + x * x).sqrt(),
            None,
            Some(1.0),
        ),
        Target::new(
            "logcosh",
            |x: f64| x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2,
            f64::tanh,
            None,
            Some(1.0),
        ),
        Target::new(
            "half_sin2x",
            |x: f64| 0.5 * (2.0 * x).sin(),
            |x: f64| (2.0 * x).cos(),
            Some((-0.5, 0.5)),
            Some(1.0),
        ),
        Target::new("cos", f64::cos, |x: f64| -x.sin(), Some((-1.0, 1.0)), Some(1.0)),
        Target::new(
            "x_gauss",
            |x: f64| x * (-0.5 * x * x).exp(),
            |x: f64| (1.0 - x * x) * (-0.5 * x * x).exp(),
            Some((-(-0.5f64).exp(), (-0.5f64).exp())),
            Some(1.0),
        ),
    ]
}

/// A smooth test function ψ with derivative.
#[derive(Clone)]
pub struct TestFunction {
    pub label: String,
    pub psi: ScalarFn,
    pub psi_prime: ScalarFn,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({})", self.label)
    }
}

impl TestFunction {
    pub fn new<F, D>(label: &str, psi: F, psi_prime: D) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        TestFunction {
            label: label.to_string(),
            psi: Arc::new(psi),
            psi_prime: Arc::new(psi_prime),
        }
    }
}

/// Eight ψ used against perturbed measures.
pub fn psi_family() -> Vec<TestFunction> {
    vec![
        TestFunction::new("id", |x| x, |_| 1.0),
        TestFunction::new("square", |x| x * x, |x| 2.0 * x),
        TestFunction::new("sin", f64::sin, f64::cos),
        TestFunction::new("tanh", f64::tanh, |x: f64| 1.0 / (x.cosh() * x.cosh())),
        TestFunction::new("atan", f64::atan, |x: f64| 1.0 / (1.0 + x * x)),
        TestFunction::new(
            "damped_cube",
            |x: f64| x * x * x / (1.0 + x * x),
            |x: f64| x * x * (3.0 + x * x) / ((1.0 + x * x) * (1.0 + x * x)),
        ),
        TestFunction::new(
            "gauss",
            |x: f64| (-0.5 * x * x).exp(),
            |x: f64| -x * (-0.5 * x * x).exp(),
        ),
        TestFunction::new("cos", f64::cos, |x: f64| -x.sin()),
    ]
}

/// Ten polynomials and bumps for the exact integration-by-parts identity.
pub fn ipp_family() -> Vec<TestFunction> {
    let mut v = vec![
        TestFunction::new("one", |_| 1.0, |_| 0.0),
        TestFunction::new("x", |x| x, |_| 1.0),
        TestFunction::new("x2", |x| x * x, |x| 2.0 * x),
        TestFunction::new("x3", |x| x * x * x, |x| 3.0 * x * x),
        TestFunction::new("x4", |x: f64| x.powi(4), |x: f64| 4.0 * x.powi(3)),
        TestFunction::new("x5", |x: f64| x.powi(5), |x: f64| 5.0 * x.powi(4)),
    ];
    for c in [-1.0, -0.3, 0.4, 1.2] {
        v.push(TestFunction::new(
            &format!("bump({c})"),
            move |x: f64| (-2.0 * (x - c) * (x - c)).exp(),
            move |x: f64| -4.0 * (x - c) * (-2.0 * (x - c) * (x - c)).exp(),
        ));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_derivatives(label: &str, f: &ScalarFn, d: &ScalarFn) {
        for i in 0..200 {
            let x = -6.0 + 12.0 * i as f64 / 199.0;
            let e = 1e-5;
            let fd = (f(x + e) - f(x - e)) / (2.0 * e);
            assert!((fd - d(x)).abs() < 1e-7 * (1.0 + d(x).abs()), "{label} at {x}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for t in bounded_family().iter().chain(lipschitz_family().iter()) {
            check_derivatives(&t.label, &t.f, &t.f_prime);
        }
        for t in psi_family().iter().chain(ipp_family().iter()) {
            check_derivatives(&t.label, &t.psi, &t.psi_prime);
        }
    }

    #[test]
    fn declared_metadata_is_consistent() {
        for t in bounded_family().iter().chain(lipschitz_family().iter()) {
            let lip = t.lipschitz.unwrap();
            for i in 0..4001 {
                let x = -20.0 + 40.0 * i as f64 / 4000.0;
                assert!((t.f_prime)(x).abs() <= lip + 1e-12, "{}", t.label);
                if let Some((lo, hi)) = t.bounds {
                    let y = (t.f)(x);
                    assert!(y >= lo - 1e-12 && y <= hi + 1e-12, "{}", t.label);
                }
            }
        }
        assert_eq!(bounded_family().len(), 10);
        assert_eq!(lipschitz_family().len(), 10);
        assert_eq!(psi_family().len(), 8);
        assert_eq!(ipp_family().len(), 10);
    }
}
