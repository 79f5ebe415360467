//! Gauss–Hermite rules in the probabilists' convention: weights sum to one
//! and `Σ w_k f(z_k)` approximates `∫ f(z) φ(z) dz`.

use crate::error::{Error, Result};

pub const MAX_ORDER_1D: usize = 100;
pub const MAX_ORDER_2D: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Eigenvalues and first eigenvector components of a symmetric tridiagonal
/// matrix by the implicit QL method with Wilkinson-style shifts.
///
/// `diag` has length n, `off[i]` couples `i` and `i + 1` (length n - 1).
fn tridiagonal_ql(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    // only the first row of the eigenvector matrix is needed
    let mut z = vec![0.0; n];
    z[0] = 1.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 100, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    (d, z)
}

/// Q-point Gauss–Hermite rule via Golub–Welsch.
pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if order == 0 || order > MAX_ORDER_1D {
        return Err(Error::QuadratureOrder {
            order,
            max: MAX_ORDER_1D,
        });
    }
    Ok(golub_welsch(order))
}

/// Unchecked rule construction; accurate well beyond `MAX_ORDER_1D`, which
/// only bounds user-facing orders.
pub(crate) fn golub_welsch(order: usize) -> QuadratureRule {
    // Jacobi matrix of He_k: zero diagonal, off-diagonal sqrt(k).
    let diag = vec![0.0; order];
    let off: Vec<f64> = (1..order).map(|k| (k as f64).sqrt()).collect();
    let (vals, first) = tridiagonal_ql(&diag, &off);
    let mut pairs: Vec<(f64, f64)> = vals
        .into_iter()
        .zip(first.into_iter().map(|v| v * v))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for k in 0..order / 2 {
        let j = order - 1 - k;
        let z = 0.5 * (nodes[j] - nodes[k]);
        let w = 0.5 * (weights[j] + weights[k]);
        nodes[k] = -z;
        nodes[j] = z;
        weights[k] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    QuadratureRule { nodes, weights }
}

/// Product rule on Q x Q node pairs, first coordinate varying slowest.
pub fn tensor_grid(order: usize) -> Result<TensorRule> {
    if order == 0 || order > MAX_ORDER_2D {
        return Err(Error::QuadratureOrder {
            order,
            max: MAX_ORDER_2D,
        });
    }
    let r = gauss_hermite(order)?;
    let mut nodes = Vec::with_capacity(order * order);
    let mut weights = Vec::with_capacity(order * order);
    for (z1, w1) in r.nodes.iter().zip(&r.weights) {
        for (z2, w2) in r.nodes.iter().zip(&r.weights) {
            nodes.push([*z1, *z2]);
            weights.push(w1 * w2);
        }
    }
    Ok(TensorRule { nodes, weights })
}

/// Move a rule to `mode` with spread `1 / sqrt(curvature)`, folding the change
/// of measure into the weights so the result still targets `∫ f φ`.
pub fn adaptive_recenter(
    rule: &QuadratureRule,
    mode: f64,
    curvature: f64,
) -> Result<QuadratureRule> {
    if !(curvature > 0.0) || !curvature.is_finite() {
        return Err(Error::NonpositiveCurvature(curvature));
    }
    let scale = curvature.sqrt().recip();
    let mut nodes = Vec::with_capacity(rule.nodes.len());
    let mut weights = Vec::with_capacity(rule.nodes.len());
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let u = mode + z * scale;
        nodes.push(u);
        weights.push(w * scale * (0.5 * (z * z - u * u)).exp());
    }
    Ok(QuadratureRule { nodes, weights })
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(*z))
            .sum()
    }
}

impl TensorRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64, f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(z[0], z[1]))
            .sum()
    }

    /// 2-D analogue of [`adaptive_recenter`]: nodes `mode + L z` where `L` is
    /// lower triangular with `L Lᵀ` the inverse curvature matrix.
    pub fn recenter(&self, mode: [f64; 2], chol: [[f64; 2]; 2]) -> Result<TensorRule> {
        let det = chol[0][0] * chol[1][1];
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::NonpositiveCurvature(det));
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let mut weights = Vec::with_capacity(self.nodes.len());
        for (z, &w) in self.nodes.iter().zip(&self.weights) {
            let u0 = mode[0] + chol[0][0] * z[0];
            let u1 = mode[1] + chol[1][0] * z[0] + chol[1][1] * z[1];
            nodes.push([u0, u1]);
            let log_ratio = 0.5 * (z[0] * z[0] + z[1] * z[1] - u0 * u0 - u1 * u1);
            weights.push(w * det * log_ratio.exp());
        }
        Ok(TensorRule { nodes, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn one_point_rule() {
        let r = gauss_hermite(1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![1.0]);
        let t = tensor_grid(1).unwrap();
        assert_eq!(t.nodes, vec![[0.0, 0.0]]);
        assert_eq!(t.weights, vec![1.0]);
    }

    #[test]
    fn order_bounds() {
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(101).is_err());
        assert!(gauss_hermite(100).is_ok());
        assert!(tensor_grid(41).is_err());
    }

    #[test]
    fn symmetric_and_normalized() {
        for q in [2, 3, 7, 25, 50, 100] {
            let r = gauss_hermite(q).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..q {
                assert!((r.nodes[k] + r.nodes[q - 1 - k]).abs() < 1e-12);
            }
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn internal_high_orders() {
        // the 4x rules used for skewed maps go beyond the public limit
        for q in [200, 400] {
            let r = golub_welsch(q);
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(r.weights.iter().all(|w| *w >= 0.0));
            for k in [2u32, 4, 8, 12] {
                let got = r.integrate(|z| z.powi(k as i32));
                assert!(
                    (got / normal_moment(k) - 1.0).abs() < 1e-10,
                    "q={q} k={k} {got}"
                );
            }
            // a smooth non-polynomial: E[cos z] = exp(-1/2)
            assert!((r.integrate(f64::cos) - (-0.5f64).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn polynomial_exactness() {
        for q in [2usize, 5, 10, 20] {
            let r = gauss_hermite(q).unwrap();
            for k in 0..(2 * q as u32) {
                let exact = normal_moment(k);
                let got = r.integrate(|z| z.powi(k as i32));
                // odd moments cancel between terms of size Σ w |z|^k
                let scale = r.integrate(|z| z.abs().powi(k as i32));
                let tol = 1e-12 * scale.max(1.0);
                assert!(
                    (got - exact).abs() < tol,
                    "q={q} k={k} got={got} exact={exact}"
                );
            }
        }
    }

    #[test]
    fn known_low_order_rules() {
        let r5 = gauss_hermite(5).unwrap();
        assert!((r5.integrate(|z| z.powi(4)) - 3.0).abs() < 1e-10);
        let r20 = gauss_hermite(20).unwrap();
        assert!((r20.integrate(f64::exp) - 0.5f64.exp()).abs() < 1e-10);
        let t5 = tensor_grid(5).unwrap();
        assert!((t5.integrate(|a, b| a * a * b * b) - 1.0).abs() < 1e-10);
        let t20 = tensor_grid(20).unwrap();
        assert!((t20.integrate(|a, b| (a + b).exp()) - 1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn recentering() {
        let r = gauss_hermite(10).unwrap();
        let same = adaptive_recenter(&r, 0.0, 1.0).unwrap();
        for (a, b) in same.nodes.iter().zip(&r.nodes) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in same.weights.iter().zip(&r.weights) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(adaptive_recenter(&r, 0.0, 0.0).is_err());
        assert!(adaptive_recenter(&r, 0.0, -1.0).is_err());

        // polynomials remain exact after recentering
        let moved = adaptive_recenter(&gauss_hermite(20).unwrap(), 0.3, 0.8).unwrap();
        for k in 0..6u32 {
            assert!(
                (moved.integrate(|z| z.powi(k as i32)) - normal_moment(k)).abs() < 1e-10,
                "k={k}"
            );
        }
    }

    #[test]
    fn recentering_sharp_peak() {
        // ∫ N(u; 3, 0.1²) φ(u) du = N(3; 0, 1.01)
        let s2 = 0.01;
        let f = |u: f64| {
            (-(u - 3.0) * (u - 3.0) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
        };
        let exact = (-9.0f64 / (2.0 * 1.01)).exp() / (2.0 * std::f64::consts::PI * 1.01).sqrt();
        let r = gauss_hermite(10).unwrap();
        let mode = 3.0 / 1.01;
        let curvature = 1.01 / s2;
        let adaptive = adaptive_recenter(&r, mode, curvature).unwrap().integrate(f);
        let plain = r.integrate(f);
        let err_a = (adaptive - exact).abs();
        let err_p = (plain - exact).abs();
        assert!(err_a < 1e-8, "adaptive error {err_a}");
        assert!(err_p >= 10.0 * err_a, "plain {err_p} vs adaptive {err_a}");
    }

    #[test]
    fn error_decreases_with_order_on_logistic_integrand() {
        let f = |z: f64| 1.0 / (1.0 + (-(1.0 + 2.0 * z)).exp());
        let oracle = gauss_hermite(80).unwrap().integrate(f);
        let mut prev = f64::INFINITY;
        for q in [2, 4, 8, 16, 32] {
            let err = (gauss_hermite(q).unwrap().integrate(f) - oracle).abs();
            assert!(err <= prev, "q={q} err={err} prev={prev}");
            prev = err;
        }
    }

    #[test]
    fn tensor_recenter_identity_and_exactness() {
        let t = tensor_grid(6).unwrap();
        let same = t.recenter([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(same.nodes, t.nodes);
        let moved = tensor_grid(20)
            .unwrap()
            .recenter([0.3, -0.2], [[1.1, 0.0], [0.1, 1.05]])
            .unwrap();
        assert!((moved.integrate(|a, b| a * a * b * b) - 1.0).abs() < 1e-9);
        assert!((moved.integrate(|_, _| 1.0) - 1.0).abs() < 1e-12);
    }
}
