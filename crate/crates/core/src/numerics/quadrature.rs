//! Gauss-Legendre rules and adaptive panel integration.

use crate::error::{Error, Result};

/// Nodes and weights of a Gauss-Legendre rule mapped to `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Map a rule on `[-1, 1]` to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> GaussLegendre {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        GaussLegendre {
            nodes: self.nodes.iter().map(|x| mid + half * x).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }
}

/// `n`-point Gauss-Legendre rule on `[a, b]`, exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<GaussLegendre> {
    if n == 0 {
        return Err(Error::domain("Gauss-Legendre rule needs at least one node"));
    }
    if !(a < b) {
        return Err(Error::domain(format!("invalid interval [{a}, {b}]")));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            deriv = dp;
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        if dp != 0.0 {
            deriv = dp;
        }
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(GaussLegendre { nodes, weights }.mapped(a, b))
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Adaptive panel integration: each panel is bisected until the rule on the
/// panel agrees with the sum over its halves within `tol` (absolute, scaled by
/// the panel's share of the interval), or until the change is at rounding level.
pub fn integrate_adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, rule: &GaussLegendre, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = panel(f, a, b, rule);
    refine(f, a, b, whole, rule, tol, 0)
}

fn panel(f: &impl Fn(f64) -> f64, a: f64, b: f64, rule: &GaussLegendre) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    half * rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
}

fn refine(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    whole: f64,
    rule: &GaussLegendre,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let left = panel(f, a, m, rule);
    let right = panel(f, m, b, rule);
    let split = left + right;
    // below rounding level further splitting only adds noise
    let floor = 16.0 * f64::EPSILON * (left.abs() + right.abs());
    if (split - whole).abs() <= tol.max(floor) || depth >= 30 {
        return split;
    }
    refine(f, a, m, left, rule, tol * 0.5, depth + 1)
        + refine(f, m, b, right, rule, tol * 0.5, depth + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth > 50 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth + 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth + 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 0)
    }

    #[test]
    fn midpoint_rule() {
        let gl = gauss_legendre(1, -1.0, 1.0).unwrap();
        assert_eq!(gl.nodes, vec![0.0]);
        assert!((gl.weights[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_nodes_is_domain_error() {
        assert!(matches!(gauss_legendre(0, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cubic_exact_with_two_nodes() {
        let gl = gauss_legendre(2, 0.0, 1.0).unwrap();
        let v = gl.integrate(|x| x * x * x);
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn exactness_degree() {
        for n in 1..40 {
            let gl = gauss_legendre(n, -0.5, 2.0).unwrap();
            let deg = 2 * n - 1;
            let got = gl.integrate(|x| x.powi(deg as i32));
            let want = (2.0f64.powi(deg as i32 + 1) - (-0.5f64).powi(deg as i32 + 1)) / (deg as f64 + 1.0);
            assert!(((got - want) / want).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn sqrt_against_adaptive_simpson() {
        let f = |t: f64| t.sqrt();
        let gl = gauss_legendre(30, 0.0, 5.0).unwrap();
        let got = gl.integrate(f);
        let oracle = adaptive_simpson(&f, 0.0, 5.0, 1e-13);
        // closed form also available: (2/3) 5^{3/2}
        assert!((oracle - 2.0 / 3.0 * 5f64.powf(1.5)).abs() < 1e-10);
        // sqrt has an endpoint singularity in its derivative, so a single panel
        // only reaches ~1e-5; the adaptive panel integrator meets the target
        let adaptive = integrate_adaptive(&f, 0.0, 5.0, &gauss_legendre(30, -1.0, 1.0).unwrap(), 1e-13);
        assert!((adaptive - oracle).abs() <= 1e-10);
        assert!((got - oracle).abs() < 1e-4);
    }
}
