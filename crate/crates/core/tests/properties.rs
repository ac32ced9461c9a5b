use std::sync::OnceLock;

use proptest::prelude::*;

use poincare_core::distances::{distance_triple, dual_lower_bound, total_variation, wasserstein1, Cdf};
use poincare_core::harness::{evaluate, parse_model, ModelContext, SweepConfig};
use poincare_core::measure::{build_measure, QuotientMeasure};
use poincare_core::model::make_gamma;
use poincare_core::perturb::{make_perturbed, STANDARD_DIRECTIONS};
use poincare_core::quadrature::PanelRule;
use poincare_core::spectral::{rayleigh_quotient, solve_tridiagonal, spectral_gap};
use poincare_core::stein::solve_stein;
use poincare_core::targets::Target;

fn gaussian() -> &'static ModelContext {
    static CTX: OnceLock<ModelContext> = OnceLock::new();
    CTX.get_or_init(|| {
        let labels: Vec<String> = STANDARD_DIRECTIONS.iter().map(|s| s.to_string()).collect();
        ModelContext::build("gaussian:1", 512, &labels).unwrap()
    })
}

fn sphere() -> &'static QuotientMeasure {
    static M: OnceLock<QuotientMeasure> = OnceLock::new();
    M.get_or_init(|| build_measure(&parse_model("sphere:3").unwrap(), 512).unwrap())
}

fn config() -> SweepConfig {
    SweepConfig {
        grid_size: 512,
        dual_checks: 5,
        ..SweepConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gauss_rule_is_exact_for_low_degree(deg in 0u32..20, lo in -3.0f64..3.0, len in 0.1f64..4.0) {
        let rule = PanelRule::gauss_legendre(10);
        let hi = lo + len;
        let half = 0.5 * len;
        let mid = lo + half;
        let approx: f64 = rule.nodes.iter().zip(&rule.weights).map(|(t, w)| w * half * (mid + half * t).powi(deg as i32)).sum();
        let exact = (hi.powi(deg as i32 + 1) - lo.powi(deg as i32 + 1)) / (deg as f64 + 1.0);
        prop_assert!((approx - exact).abs() <= 1e-11 * (1.0 + exact.abs()));
    }

    #[test]
    fn tridiagonal_solution_satisfies_system(seed in proptest::collection::vec(-1.0f64..1.0, 3 * 12)) {
        let n = 12;
        let lower = &seed[..n - 1];
        let upper = &seed[n..2 * n - 1];
        let diag: Vec<f64> = seed[2 * n..].iter().map(|d| d * 0.1).collect();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        if let Ok(x) = solve_tridiagonal(lower, &diag, upper, &rhs) {
            for i in 0..n {
                let mut r = diag[i] * x[i] - rhs[i];
                if i > 0 { r += lower[i - 1] * x[i - 1]; }
                if i + 1 < n { r += upper[i] * x[i + 1]; }
                let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
                prop_assert!(r.abs() <= 1e-10 * scale, "row {} residual {}", i, r);
            }
        }
    }

    #[test]
    fn grid_aligned_shift_has_w1_equal_to_shift(steps in 0usize..120, width in 0.5f64..3.0) {
        let h = 0.01;
        let xs: Vec<f64> = (0..800).map(|i| -1.0 + h * i as f64).collect();
        let cdf = |lo: f64| {
            xs.iter()
                .map(|&x| {
                    let t = ((x - lo) / width).clamp(0.0, 1.0);
                    t * t * (3.0 - 2.0 * t)
                })
                .collect::<Vec<_>>()
        };
        let shift = steps as f64 * h;
        let a = Cdf::new(xs.clone(), cdf(0.0)).unwrap();
        let b = Cdf::new(xs.clone(), cdf(shift)).unwrap();
        prop_assert!((wasserstein1(&a, &b) - shift).abs() < 1e-9, "w1 {} shift {}", wasserstein1(&a, &b), shift);
        prop_assert!((wasserstein1(&a, &b) - wasserstein1(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn perturbations_keep_normalization_and_order_distances(k in 0usize..5, frac in 0.0f64..=1.0) {
        let ctx = gaussian();
        let m = &ctx.measure;
        let dir = &ctx.directions[k];
        let nu = make_perturbed(m, dir, frac * dir.eps_max).unwrap();
        prop_assert!((nu.mass - 1.0).abs() < 1e-9);
        prop_assert!(nu.moments.m1.abs() < 1e-9 && (nu.moments.m2 - 1.0).abs() < 1e-9);
        prop_assert!(nu.moments.mh <= m.spec.lambda_mu + 1e-9);
        prop_assert!(nu.delta >= 0.0 && nu.delta_raw >= -1e-9);
        prop_assert!(nu.density_points.iter().all(|d| *d >= 0.0));
        let d = distance_triple(m, &m.density_points, &nu.density_points).unwrap();
        prop_assert!(d.kolmogorov <= d.tv + 1e-10);
        prop_assert!(d.kolmogorov <= d.kolmogorov_upper + 1e-15);
        prop_assert!((0.0..=1.0).contains(&d.tv));
        let back = distance_triple(m, &nu.density_points, &m.density_points).unwrap();
        prop_assert!((back.w1 - d.w1).abs() <= 1e-12 && (back.tv - d.tv).abs() <= 1e-12);
        let dual = dual_lower_bound(m, &m.density_points, &nu.density_points, 7, 8);
        prop_assert!(dual <= d.w1 + 1e-8);
        let tv = total_variation(&m.panels.weights, &m.density_points, &nu.density_points).unwrap();
        prop_assert!((tv - d.tv).abs() < 1e-15);
    }

    #[test]
    fn stability_inequalities_hold_for_any_amplitude(k in 0usize..5, frac in 0.0f64..=1.0) {
        let ctx = gaussian();
        let dir = &ctx.directions[k];
        let report = evaluate(ctx, dir, frac * dir.eps_max, &config()).unwrap();
        for b in &report.bounds {
            prop_assert!(b.applicable);
            prop_assert!(b.holds, "{} ratio {}", b.theorem, b.ratio);
        }
        prop_assert!(report.approx_ipp.all_hold);
        prop_assert!(report.c_p_nu >= 1.0 - 1e-9);
    }

    #[test]
    fn stein_solution_is_linear_in_the_target(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.3f64..3.0) {
        let m = sphere();
        let f = Target::new("sin", move |x: f64| (w * x).sin(), move |x: f64| w * (w * x).cos(), Some((-1.0, 1.0)), Some(w));
        let g = Target::new("atan", |x: f64| x.atan(), |x: f64| 1.0 / (1.0 + x * x), None, Some(1.0));
        let combo = Target::new(
            "combo",
            move |x: f64| a * (w * x).sin() + b * x.atan(),
            move |x: f64| a * w * (w * x).cos() + b / (1.0 + x * x),
            None,
            None,
        );
        let (sf, sg, sc) = (solve_stein(m, &f).unwrap(), solve_stein(m, &g).unwrap(), solve_stein(m, &combo).unwrap());
        for i in 0..sc.psi.len() {
            let lin = a * sf.psi[i] + b * sg.psi[i];
            prop_assert!((sc.psi[i] - lin).abs() <= 1e-10 * (1.0 + lin.abs()));
        }
        prop_assert!(sc.residual_max <= sc.residual_tolerance());
    }

    #[test]
    fn rayleigh_quotient_never_beats_the_gap(freq in 0.2f64..3.0, phase in -3.0f64..3.0) {
        let m = sphere();
        let q = rayleigh_quotient(m, &m.density_points, move |x| (freq * x + phase).sin(), move |x| freq * (freq * x + phase).cos()).unwrap();
        prop_assert!(q >= m.spec.lambda_mu * (1.0 - 1e-9));
    }

    #[test]
    fn gamma_gap_is_inverse_scale(s in 0.3f64..6.0, theta in 0.3f64..3.0) {
        let spec = make_gamma(s, theta).unwrap();
        let m = build_measure(&spec, 512).unwrap();
        prop_assert!(m.moments.m1.abs() < 1e-8 && (m.moments.m2 - 1.0).abs() < 1e-8);
        let r = spectral_gap(&m, &m.density_points).unwrap();
        prop_assert!((r.lambda1 * theta - 1.0).abs() < 1e-3);
        prop_assert!(r.identity_correlation > 0.999);
    }

    #[test]
    fn model_ids_round_trip(s in 0.1f64..10.0, theta in 0.1f64..10.0, d in 1u32..20) {
        let g = parse_model(&format!("gamma:{s},{theta}")).unwrap();
        prop_assert!((g.lambda_mu - 1.0 / theta).abs() < 1e-15);
        let sp = parse_model(&format!("sphere:{d}")).unwrap();
        prop_assert_eq!(sp.lambda_mu, d as f64);
    }
}
