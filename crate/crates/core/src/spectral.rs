//! Sharp Poincaré constants of one-dimensional densities with carré du champ
//! `hψ′²`, from a conforming piecewise-linear discretization of the Rayleigh
//! quotient.

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::measure::{Panels, QuotientMeasure};
use crate::model::{DiffusionSpec, EndpointBehavior};
use crate::quadrature::PanelRule;

#[derive(Debug, Clone, Serialize)]
pub struct SpectralResult {
    pub lambda1: f64,
    pub c_p_sharp: f64,
    pub nodes: Vec<f64>,
    /// Eigenfunction at `nodes`, with mean 0 and variance 1 under the measure
    /// and positive correlation with the identity.
    pub eigenfunction: Vec<f64>,
    pub rayleigh_residual: f64,
    /// `λ₁` on successively refined element sets (coarsest first).
    pub grid_convergence: Vec<f64>,
    /// Correlation of the eigenfunction with the identity.
    pub identity_correlation: f64,
}

impl SpectralResult {
    /// Change over the last refinement.
    pub fn precision(&self) -> f64 {
        match self.grid_convergence.as_slice() {
            [.., a, b] => (a - b).abs(),
            _ => f64::NAN,
        }
    }
}

/// Symmetric tridiagonal stiffness and mass forms.
#[derive(Debug, Clone)]
struct Pencil {
    nodes: Vec<f64>,
    kd: Vec<f64>,
    ko: Vec<f64>,
    md: Vec<f64>,
    mo: Vec<f64>,
}

impl Pencil {
    fn zeros(nodes: Vec<f64>) -> Self {
        let n = nodes.len();
        Pencil {
            nodes,
            kd: vec![0.0; n],
            ko: vec![0.0; n - 1],
            md: vec![0.0; n],
            mo: vec![0.0; n - 1],
        }
    }

    /// Add one quadrature sample `(t, wρ, h)` lying in element `e`.
    fn add(&mut self, e: usize, t: f64, mass: f64, h: f64) {
        let (x0, x1) = (self.nodes[e], self.nodes[e + 1]);
        let d = x1 - x0;
        let l = (x1 - t) / d;
        let r = (t - x0) / d;
        let k = mass * h / (d * d);
        self.kd[e] += k;
        self.kd[e + 1] += k;
        self.ko[e] -= k;
        self.md[e] += mass * l * l;
        self.md[e + 1] += mass * r * r;
        self.mo[e] += mass * l * r;
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn apply(&self, diag: &[f64], off: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = diag[i] * x[i];
                if i > 0 {
                    s += off[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    s += off[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    fn k_form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(&self.apply(&self.kd, &self.ko, x), y)
    }

    fn m_form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(&self.apply(&self.md, &self.mo, x), y)
    }

    fn variance(&self, x: &[f64]) -> f64 {
        let ones = vec![1.0; self.len()];
        let total = self.m_form(&ones, &ones);
        let mean = self.m_form(&ones, x) / total;
        self.m_form(x, x) / total - mean * mean
    }

    /// `S(K − σM)S` with `S = diag(M)^{-1/2}`, so that rows from the far
    /// tails carry the same scale as rows from the bulk.
    fn scaled_shift(&self, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let s: Vec<f64> = self.md.iter().map(|m| 1.0 / m.sqrt()).collect();
        let diag = (0..self.len())
            .map(|i| (self.kd[i] - sigma * self.md[i]) * s[i] * s[i])
            .collect();
        let off = (0..self.len() - 1)
            .map(|i| (self.ko[i] - sigma * self.mo[i]) * s[i] * s[i + 1])
            .collect();
        (diag, off)
    }

    /// Number of generalized eigenvalues below `sigma`, from the inertia of
    /// `K − σM`.
    fn count_below(&self, sigma: f64) -> usize {
        let (diag, off) = self.scaled_shift(sigma);
        let mut count = 0;
        let mut d_prev = 1.0;
        for i in 0..self.len() {
            let a = diag[i];
            let mut d = if i == 0 {
                a
            } else {
                let b = off[i - 1];
                a - b * b / d_prev
            };
            if d == 0.0 {
                d = -f64::EPSILON * (a.abs() + f64::MIN_POSITIVE);
            }
            if d < 0.0 {
                count += 1;
            }
            d_prev = d;
        }
        count
    }

    /// Second generalized eigenvalue, by spectrum slicing.
    fn lambda1(&self, upper_guess: f64) -> Result<f64> {
        let mut lo = 0.0;
        if self.count_below(lo) > 1 {
            return Err(LabError::NumericalFailure("stiffness form is not semidefinite".into()));
        }
        let mut hi = upper_guess.max(1e-300) * (1.0 + 1e-6);
        let mut tries = 0;
        while self.count_below(hi) < 2 {
            hi *= 2.0;
            tries += 1;
            if tries > 200 {
                return Err(LabError::NumericalFailure("cannot bracket the spectral gap".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
            if self.count_below(mid) >= 2 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Inverse iteration for the eigenvector at a computed eigenvalue.
    fn eigenvector(&self, lambda: f64, start: &[f64]) -> Result<Vec<f64>> {
        let sigma = lambda * (1.0 - 1e-12);
        let (diag, sub) = self.scaled_shift(sigma);
        let s: Vec<f64> = self.md.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut x = start.to_vec();
        for _ in 0..4 {
            let rhs: Vec<f64> = self
                .apply(&self.md, &self.mo, &x)
                .iter()
                .zip(&s)
                .map(|(r, s)| r * s)
                .collect();
            let z = solve_tridiagonal(&sub, &diag, &sub, &rhs)?;
            let mut y: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z * s).collect();
            let norm = self.m_form(&y, &y).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(LabError::NumericalFailure("inverse iteration broke down".into()));
            }
            y.iter_mut().for_each(|v| *v /= norm);
            x = y;
        }
        Ok(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tridiagonal solve with partial pivoting.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut du = upper.to_vec();
    let mut dl = lower.to_vec();
    let mut du2 = vec![0.0; n.saturating_sub(2)];
    let mut b = rhs.to_vec();
    for i in 0..n.saturating_sub(1) {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                return Err(LabError::NumericalFailure("singular tridiagonal system".into()));
            }
            let f = dl[i] / d[i];
            d[i + 1] -= f * du[i];
            b[i + 1] -= f * b[i];
            dl[i] = 0.0;
        } else {
            let f = d[i] / dl[i];
            d[i] = dl[i];
            let tmp = d[i + 1];
            d[i + 1] = du[i] - f * tmp;
            du[i] = tmp;
            if i + 2 < n {
                du2[i] = du[i + 1];
                du[i + 1] *= -f;
            }
            b.swap(i, i + 1);
            b[i + 1] -= f * b[i];
        }
    }
    if d[n - 1] == 0.0 {
        d[n - 1] = f64::EPSILON * d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        if i + 1 < n {
            s -= du[i] * x[i + 1];
        }
        if i + 2 < n {
            s -= du2[i] * x[i + 2];
        }
        x[i] = s / d[i];
    }
    Ok(x)
}

fn assemble_panels(panels: &Panels, h_points: &[f64], density_points: &[f64], stride: usize) -> Pencil {
    let last = panels.len();
    let mut idx: Vec<usize> = (0..last).step_by(stride).collect();
    idx.push(last);
    let nodes: Vec<f64> = idx.iter().map(|&i| panels.bounds[i]).collect();
    let mut pencil = Pencil::zeros(nodes);
    let m = panels.m();
    for j in 0..last {
        let e = (j / stride).min(idx.len() - 2);
        for k in panels.panel(j) {
            let mass = panels.weights[k] * density_points[k];
            pencil.add(e, panels.points[k], mass, h_points[k]);
        }
        debug_assert!(m > 0);
    }
    pencil
}

fn solve_pencil(p: &Pencil) -> Result<(f64, Vec<f64>, f64, f64)> {
    if p.md.iter().any(|v| !(*v > 0.0)) {
        return Err(LabError::DegenerateMeasure("mass form is singular".into()));
    }
    let id = p.nodes.clone();
    let var_id = p.variance(&id);
    let rq_id = p.k_form(&id, &id) / var_id;
    let lambda = p.lambda1(rq_id)?;
    if !(lambda > 1e-12) {
        return Err(LabError::NoGapDetected(lambda));
    }
    let mut y = p.eigenvector(lambda, &id)?;
    let ones = vec![1.0; p.len()];
    let total = p.m_form(&ones, &ones);
    let mean = p.m_form(&ones, &y) / total;
    y.iter_mut().for_each(|v| *v -= mean);
    let var = p.m_form(&y, &y) / total;
    let sd = var.sqrt();
    let mean_id = p.m_form(&ones, &id) / total;
    let centered_id: Vec<f64> = id.iter().map(|x| x - mean_id).collect();
    let mut corr = p.m_form(&y, &centered_id) / total / (sd * var_id.sqrt());
    let sign = if corr < 0.0 { -1.0 } else { 1.0 };
    corr *= sign;
    y.iter_mut().for_each(|v| *v *= sign / sd);
    let energy = p.k_form(&y, &y) / total;
    let residual = (energy - lambda).abs() / lambda;
    Ok((lambda, y, residual, corr))
}

/// Spectral gap of the density `density_points` (sampled at the Gauss points
/// of `m`) with respect to the carré du champ `h ψ′²`.
pub fn spectral_gap(m: &QuotientMeasure, density_points: &[f64]) -> Result<SpectralResult> {
    if density_points.len() != m.panels.points.len() {
        return Err(LabError::InvalidDensity(
            "density length does not match the grid".into(),
        ));
    }
    if density_points.iter().any(|d| !(*d >= 0.0)) {
        return Err(LabError::InvalidDensity("density must be nonnegative".into()));
    }
    let mut convergence = Vec::with_capacity(3);
    for stride in [4, 2] {
        let p = assemble_panels(&m.panels, &m.h_points, density_points, stride);
        convergence.push(solve_pencil(&p)?.0);
    }
    let p = assemble_panels(&m.panels, &m.h_points, density_points, 1);
    let (lambda1, y, rayleigh_residual, identity_correlation) = solve_pencil(&p)?;
    convergence.push(lambda1);
    Ok(SpectralResult {
        lambda1,
        c_p_sharp: 1.0 / lambda1,
        nodes: m.nodes().to_vec(),
        eigenfunction: y[m.panels.node_range()].to_vec(),
        rayleigh_residual,
        grid_convergence: convergence,
        identity_correlation,
    })
}

/// Spectral gap of a density given only at increasing sample points. Between
/// samples the density is linear, or, when CDF values are supplied, the
/// quadratic through both samples that carries the exact cell mass. A finite
/// end of the interval lying beyond the samples closes the grid with one more
/// cell, whose density follows the endpoint power law. Element integrals use
/// 3-point Gauss rules.
pub fn spectral_gap_from_samples(
    spec: &DiffusionSpec,
    xs: &[f64],
    density: &[f64],
    cdf: Option<&[f64]>,
) -> Result<SpectralResult> {
    if xs.len() != density.len() || xs.len() < 3 || cdf.is_some_and(|c| c.len() != xs.len()) {
        return Err(LabError::InvalidDensity("need at least three matching samples".into()));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(LabError::InvalidDensity("sample abscissae must increase".into()));
    }
    if density.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(LabError::InvalidDensity(
            "density must be finite and nonnegative".into(),
        ));
    }
    let rule = PanelRule::gauss_legendre(3).unit();
    let last = xs.len() - 1;
    let end_exponent = |end: &EndpointBehavior| match *end {
        EndpointBehavior::Finite { density_exponent, .. } => Some(density_exponent),
        EndpointBehavior::Infinite { .. } => None,
    };
    let left = end_exponent(&spec.left).filter(|_| spec.a < xs[0]);
    let right = end_exponent(&spec.right).filter(|_| spec.b > xs[last]);
    let offset = usize::from(left.is_some());

    let mut nodes = Vec::with_capacity(xs.len() + 2);
    let mut samples = Vec::with_capacity(3 * (xs.len() + 1));
    // Cell between an end and the outermost sample at distance `len`: with
    // density `C r^e` at distance `r` from the end, mass is uniform in
    // `w = (r/len)^(e+1)`.
    let end_cell = |elem: usize, end: f64, sign: f64, len: f64, e: f64, d_edge: f64, mass: Option<f64>| {
        let q = e + 1.0;
        let mass = mass.unwrap_or(d_edge * len / q).max(0.0);
        rule.iter()
            .map(|&(w, wt)| {
                let t = end + sign * len * w.powf(1.0 / q);
                (elem, t, wt * mass, spec.h(t))
            })
            .collect::<Vec<_>>()
    };
    if let Some(e) = left {
        nodes.push(spec.a);
        samples.extend(end_cell(
            0,
            spec.a,
            1.0,
            xs[0] - spec.a,
            e,
            density[0],
            cdf.map(|c| c[0]),
        ));
    }
    nodes.extend_from_slice(xs);
    for i in 0..last {
        let (x0, x1) = (xs[i], xs[i + 1]);
        let (d0, d1) = (density[i], density[i + 1]);
        let bulge = cdf.map_or(0.0, |c| 6.0 * ((c[i + 1] - c[i]) / (x1 - x0) - 0.5 * (d0 + d1)));
        for &(s, w) in &rule {
            let t = x0 + (x1 - x0) * s;
            let d = (d0 + (d1 - d0) * s + bulge * s * (1.0 - s)).max(0.0);
            samples.push((i + offset, t, w * (x1 - x0) * d, spec.h(t)));
        }
    }
    if let Some(e) = right {
        samples.extend(end_cell(
            last + offset,
            spec.b,
            -1.0,
            spec.b - xs[last],
            e,
            density[last],
            cdf.map(|c| 1.0 - c[last]),
        ));
        nodes.push(spec.b);
    }

    let total: f64 = samples.iter().map(|s| s.2).sum();
    if !(total > 0.0) {
        return Err(LabError::DegenerateMeasure("density has zero mass".into()));
    }
    let build = |stride: usize| {
        let end = nodes.len() - 1;
        let mut idx: Vec<usize> = (0..end).step_by(stride).collect();
        idx.push(end);
        let mut p = Pencil::zeros(idx.iter().map(|&i| nodes[i]).collect());
        for &(e, t, mass, h) in &samples {
            p.add((e / stride).min(idx.len() - 2), t, mass / total, h);
        }
        p
    };
    let mut convergence = vec![solve_pencil(&build(4))?.0, solve_pencil(&build(2))?.0];
    let (lambda1, y, rayleigh_residual, identity_correlation) = solve_pencil(&build(1))?;
    convergence.push(lambda1);
    Ok(SpectralResult {
        lambda1,
        c_p_sharp: 1.0 / lambda1,
        nodes,
        eigenfunction: y,
        rayleigh_residual,
        grid_convergence: convergence,
        identity_correlation,
    })
}

/// `∫ hψ′² dν / Var_ν(ψ)` by quadrature at the Gauss points of `m`.
pub fn rayleigh_quotient<F, D>(m: &QuotientMeasure, density_points: &[f64], psi: F, psi_prime: D) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let (mut mass, mut s1, mut s2, mut energy) = (0.0, 0.0, 0.0, 0.0);
    for (k, &x) in m.panels.points.iter().enumerate() {
        let w = m.panels.weights[k] * density_points[k];
        let p = psi(x);
        let dp = psi_prime(x);
        mass += w;
        s1 += w * p;
        s2 += w * p * p;
        energy += w * m.h_points[k] * dp * dp;
    }
    let mean = s1 / mass;
    let var = s2 / mass - mean * mean;
    if !(var > 1e-14 * (s2 / mass).max(1e-300)) {
        return Err(LabError::ConstantTestFunction);
    }
    Ok(energy / mass / var)
}

/// Eigenfunction dump: `node, eigenfunction`.
pub fn write_eigenfunction_csv(result: &SpectralResult, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "eigenfunction"])?;
    for (x, y) in result.nodes.iter().zip(&result.eigenfunction) {
        w.write_record(&[format!("{x:.17e}"), format!("{y:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Read the `node` and `density` columns of a headered measure dump.
/// Reads the `node` and `density` columns of a dumped measure, plus the
/// `cdf` column when present.
pub fn read_density_csv(path: &std::path::Path) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::InvalidDensity(format!("missing column {name:?}")))
    };
    let (ix, id) = (column("node")?, column("density")?);
    let ic = column("cdf").ok();
    let (mut xs, mut ds, mut cs) = (Vec::new(), Vec::new(), Vec::new());
    for record in r.records() {
        let record = record?;
        let parse = |i: usize| {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| LabError::InvalidDensity(format!("bad number in row {xs_len}", xs_len = xs.len() + 1)))
        };
        let (x, d) = (parse(ix)?, parse(id)?);
        if let Some(ic) = ic {
            cs.push(parse(ic)?);
        }
        xs.push(x);
        ds.push(d);
    }
    Ok((xs, ds, ic.map(|_| cs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::build_measure;
    use crate::model::{make_gamma, make_gaussian, make_sphere};

    #[test]
    fn tridiagonal_solver_matches_dense_product() {
        let lower = [2.0, -1.0, 0.5, 3.0];
        let diag = [1e-3, 4.0, -2.0, 1.0, 2.0];
        let upper = [1.0, 0.25, -1.5, 0.7];
        let x = [1.0, -2.0, 3.0, 0.5, -1.0];
        let mut b = vec![0.0; 5];
        for i in 0..5 {
            b[i] = diag[i] * x[i];
            if i > 0 {
                b[i] += lower[i - 1] * x[i - 1];
            }
            if i < 4 {
                b[i] += upper[i] * x[i + 1];
            }
        }
        let y = solve_tridiagonal(&lower, &diag, &upper, &b).unwrap();
        for (a, e) in y.iter().zip(&x) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn catalog_gaps() {
        for (spec, expected) in [
            (make_gaussian(1.0).unwrap(), 1.0),
            (make_gaussian(2.0).unwrap(), 0.5),
            (make_gamma(2.0, 0.5).unwrap(), 2.0),
            (make_sphere(3).unwrap(), 3.0),
        ] {
            let m = build_measure(&spec, 512).unwrap();
            let r = spectral_gap(&m, &m.density_points).unwrap();
            assert!((r.lambda1 - expected).abs() < 1e-8, "{}: {}", spec.name, r.lambda1);
            assert!(
                r.identity_correlation > 0.999999,
                "{}: corr {}",
                spec.name,
                r.identity_correlation
            );
            assert!(r.rayleigh_residual < 1e-6);
            let g = &r.grid_convergence;
            assert!(g[0] >= g[1] - 1e-9 && g[1] >= g[2] - 1e-9);
        }
    }

    #[test]
    fn rayleigh_quotients() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 512).unwrap();
        let rq = rayleigh_quotient(&m, &m.density_points, |x| x * x, |x| 2.0 * x).unwrap();
        assert!((rq - 2.0).abs() < 1e-10);
        let id = rayleigh_quotient(&m, &m.density_points, |x| x, |_| 1.0).unwrap();
        assert!((id - 1.0).abs() < 1e-12);
        assert!(matches!(
            rayleigh_quotient(&m, &m.density_points, |_| 2.0, |_| 0.0),
            Err(LabError::ConstantTestFunction)
        ));
    }

    #[test]
    fn degenerate_density_is_rejected() {
        let m = build_measure(&make_gaussian(1.0).unwrap(), 128).unwrap();
        let mut d = m.density_points.clone();
        let mid = d.len() / 2;
        for v in &mut d[mid - 200..mid + 200] {
            *v = 0.0;
        }
        assert!(matches!(spectral_gap(&m, &d), Err(LabError::DegenerateMeasure(_))));
    }

    #[test]
    fn gap_from_node_samples() {
        let spec = make_gaussian(1.0).unwrap();
        let m = build_measure(&spec, 2048).unwrap();
        let r = spectral_gap_from_samples(&spec, m.nodes(), m.density(), None).unwrap();
        assert!((r.lambda1 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gap_from_samples_with_cdf_closes_singular_ends() {
        for (spec, lambda) in [(make_gamma(0.5, 2.0).unwrap(), 0.5), (make_sphere(2).unwrap(), 2.0)] {
            let m = build_measure(&spec, 1024).unwrap();
            let cdf = &m.q_bounds[m.panels.node_range()];
            let r = spectral_gap_from_samples(&spec, m.nodes(), m.density(), Some(cdf)).unwrap();
            assert!(
                (r.lambda1 - lambda).abs() < 1e-6 * lambda,
                "{}: {}",
                spec.name,
                r.lambda1
            );
            assert_eq!(r.nodes.len(), r.eigenfunction.len());
            let linear = spectral_gap_from_samples(&spec, m.nodes(), m.density(), None).unwrap();
            assert!(
                (linear.lambda1 - lambda).abs() < 1e-2 * lambda,
                "{}: linear {}",
                spec.name,
                linear.lambda1
            );
            assert!((r.lambda1 - lambda).abs() <= (linear.lambda1 - lambda).abs().max(1e-9));
        }
    }
}
