//! Unconstrained minimizers and central finite differences.
//!
//! Everything here minimizes; callers negate log-likelihoods.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_evals: usize,
    pub max_iters: usize,
    pub f_tol: f64,
    pub g_tol: f64,
    pub fd_step_scale: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            max_evals: 100_000,
            max_iters: 500,
            f_tol: 1e-9,
            g_tol: 1e-4,
            fd_step_scale: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    MaxEvaluations,
    LineSearchFailed,
    NonFinite,
}

impl Status {
    pub fn converged(self) -> bool {
        self == Status::Converged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evals: usize,
    pub status: Status,
    /// Objective value after each accepted step, starting with `f(x0)`.
    pub trace: Vec<f64>,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead with reflection 1, expansion 2, contraction 0.5, shrink 0.5.
///
/// The initial simplex offsets each coordinate by `0.1 (1 + |x_i|)`. Stops when
/// the spread of simplex values drops below `f_tol (1 + |f_best|)` and the
/// simplex has collapsed to within `sqrt(f_tol)` (relative) of its best vertex,
/// or after `max_evals` evaluations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimizeOptions,
) -> NelderMeadResult {
    let d = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        finite_or_inf(f(x))
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += 0.1 * (1.0 + x0[i].abs());
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    let status = loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let x_tol = opts.f_tol.sqrt();
        let collapsed = simplex[1..].iter().all(|(x, _)| {
            x.iter()
                .zip(&simplex[0].0)
                .all(|(a, b)| (a - b).abs() <= x_tol * (1.0 + b.abs()))
        });
        let flat = worst - best <= opts.f_tol * (1.0 + best.abs());
        if (flat && collapsed) || (best.is_infinite() && worst.is_infinite()) {
            break Status::Converged;
        }
        if evals >= opts.max_evals {
            break Status::MaxEvaluations;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let along = |t: f64, from: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(from)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let worst_x = simplex[d].0.clone();
        let xr = along(1.0, &worst_x);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0, &worst_x);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[d].1 {
            let xc = along(0.5, &worst_x);
            let fc = eval(&xc, &mut evals);
            (xc, fc.min(f64::INFINITY))
        } else {
            let xc = along(-0.5, &worst_x);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fr.min(simplex[d].1) {
            simplex[d] = (xc, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for item in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best_x
                .iter()
                .zip(&item.0)
                .map(|(b, xi)| b + 0.5 * (xi - b))
                .collect();
            let fx = eval(&x, &mut evals);
            *item = (x, fx);
        }
    };
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        f: fx,
        evals,
        status,
    }
}

fn fd_step(x: f64, scale: f64) -> f64 {
    let h = scale * (1.0 + x.abs());
    // representable step
    (x + h) - x
}

/// Central-difference gradient with per-coordinate step `scale (1 + |x_i|)`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step_scale: f64,
) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = fd_step(x[i], step_scale);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteObjective {
                coordinate: i,
                value: x[i],
            });
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Central-difference Hessian, exactly symmetric.
pub fn finite_diff_hessian<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step_scale: f64,
) -> Result<Vec<Vec<f64>>> {
    let d = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFiniteObjective {
            coordinate: 0,
            value: x.first().copied().unwrap_or(f64::NAN),
        });
    }
    let h: Vec<f64> = x.iter().map(|xi| fd_step(*xi, step_scale)).collect();
    let mut hess = vec![vec![0.0; d]; d];
    let mut xp = x.to_vec();
    let check = |v: f64, i: usize| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective {
                coordinate: i,
                value: x[i],
            })
        }
    };
    for i in 0..d {
        xp[i] = x[i] + h[i];
        let fp = check(f(&xp), i)?;
        xp[i] = x[i] - h[i];
        let fm = check(f(&xp), i)?;
        xp[i] = x[i];
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64, xp: &mut Vec<f64>| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let fpp = corner(1.0, 1.0, &mut xp);
            let fpm = corner(1.0, -1.0, &mut xp);
            let fmp = corner(-1.0, 1.0, &mut xp);
            let fmm = corner(-1.0, -1.0, &mut xp);
            let v = check((fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]), i)?;
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    Ok(hess)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// BFGS on an inverse-Hessian approximation with central finite-difference
/// gradients and backtracking Armijo search (`c1 = 1e-4`, halving).
///
/// A failed line search falls back once to steepest descent from an identity
/// inverse Hessian before giving up. Converged means the gradient norm is below
/// `g_tol` and the last accepted step changed `f` by less than
/// `f_tol · max(1, |f|)`; a gradient already below `g_tol` at the start, or
/// when no further decrease can be found, also counts.
pub fn bfgs_fd<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimizeOptions,
) -> BfgsResult {
    let d = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    evals += 1;
    let grad = |x: &[f64], evals: &mut usize, f: &mut F| {
        *evals += 2 * x.len();
        finite_diff_grad(|p| f(p), x, opts.fd_step_scale)
    };
    let mut g = match grad(&x, &mut evals, &mut f) {
        Ok(g) if fx.is_finite() => g,
        _ => {
            return BfgsResult {
                x,
                f: fx,
                gradient: vec![f64::NAN; d],
                gradient_norm: f64::NAN,
                iterations: 0,
                evals,
                status: Status::NonFinite,
                trace: vec![fx],
            }
        }
    };
    let mut h_inv = identity(d);
    let mut fresh = true;
    let mut last_rel_change = f64::INFINITY;
    let mut iterations = 0usize;
    let mut trace = vec![fx];

    let status = loop {
        let gn = norm(&g);
        if gn < opts.g_tol && (iterations == 0 || last_rel_change < opts.f_tol) {
            break Status::Converged;
        }
        if iterations >= opts.max_iters {
            break Status::MaxIterations;
        }
        if evals >= opts.max_evals {
            break Status::MaxEvaluations;
        }

        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if fresh {
                    break;
                }
                h_inv = identity(d);
                fresh = true;
            }
            let mut dir: Vec<f64> = h_inv.iter().map(|row| -dot(row, &g)).collect();
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                h_inv = identity(d);
                fresh = true;
                dir = g.iter().map(|v| -v).collect();
                slope = -gn * gn;
            }
            let mut t = if fresh {
                (1.0 / norm(&dir)).min(1.0)
            } else {
                1.0
            };
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
                let fnew = f(&xn);
                evals += 1;
                if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                    accepted = Some((xn, fnew, dir.iter().map(|v| t * v).collect()));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((xn, fnew, s)) = accepted else {
            break if gn < opts.g_tol {
                Status::Converged
            } else {
                Status::LineSearchFailed
            };
        };
        let gnew = match grad(&xn, &mut evals, &mut f) {
            Ok(v) => v,
            Err(_) => break Status::NonFinite,
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h_inv = identity(d)
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v * scale).collect())
                    .collect();
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = h_inv.iter().map(|row| dot(row, &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..d {
                for j in 0..d {
                    h_inv[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        } else {
            h_inv = identity(d);
            fresh = true;
        }
        last_rel_change = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        iterations += 1;
    };

    let gradient_norm = norm(&g);
    BfgsResult {
        x,
        f: fx,
        gradient: g,
        gradient_norm,
        iterations,
        evals,
        status,
        trace,
    }
}
