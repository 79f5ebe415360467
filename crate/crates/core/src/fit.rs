//! Maximum-likelihood fitting: Nelder–Mead warm-up, then BFGS, then a
//! finite-difference observed information for standard errors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{Evaluator, Integrator, Prepared, QuadSettings};
use crate::model::{Dataset, ModelSpec, OutcomeFamily, ParamVector};
use crate::optimize::{
    bfgs_fd, finite_diff_grad, finite_diff_hessian, nelder_mead, OptimizeOptions, Status,
};
use crate::ranef::{RanefFamily, TUKEY_H_CENTER, TUKEY_H_HALF_WIDTH};
use crate::special::expit;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub quad: QuadSettings,
    pub optimizer: OptimizeOptions,
    /// Nelder–Mead evaluations before BFGS; 0 skips the warm-up.
    pub warmup_evals: usize,
    pub start: Option<Vec<f64>>,
    /// Relative step of the Hessian used for standard errors. Smaller steps
    /// let quadrature rounding decide the sign of near-zero curvature (a
    /// correlation at its boundary, say).
    pub hessian_step: f64,
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            quad: QuadSettings::default(),
            optimizer: OptimizeOptions::default(),
            warmup_evals: 200,
            start: None,
            hessian_step: 1e-3,
            standard_errors: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelSpec,
    pub names: Vec<String>,
    pub theta: ParamVector,
    pub estimates: Vec<f64>,
    /// `None` when the Hessian is not positive definite or SEs were skipped.
    pub std_errors: Option<Vec<f64>>,
    pub loglik: f64,
    /// Optimizer converged and the observed information is positive definite.
    pub converged: bool,
    pub status: Status,
    pub iterations: usize,
    pub evals: usize,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.estimates[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        self.std_errors.as_ref().map(|s| s[i])
    }
}

fn pooled_design(data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.n_observations();
    let p1 = data.covariate_names.len() + 1;
    let mut x = DMatrix::zeros(n, p1);
    let mut y = DVector::zeros(n);
    let mut r = 0;
    for c in &data.clusters {
        for (row, &yt) in c.x.iter().zip(&c.y) {
            x[(r, 0)] = 1.0;
            for (j, v) in row.iter().enumerate() {
                x[(r, j + 1)] = *v;
            }
            y[r] = yt;
            r += 1;
        }
    }
    (x, y)
}

fn solve_normal(xtwx: DMatrix<f64>, xtwz: DVector<f64>) -> Option<DVector<f64>> {
    let p = xtwx.nrows();
    // small ridge guards against collinear or separated designs
    let ridge = 1e-8 * (1.0 + xtwx.diagonal().amax());
    let m = xtwx + DMatrix::identity(p, p) * ridge;
    m.cholesky().map(|c| c.solve(&xtwz))
}

/// Pooled logistic regression by damped IRLS, ignoring the clustering.
fn pooled_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let eta = x * &beta;
        let prob = eta.map(expit);
        let w = prob.map(|m| (m * (1.0 - m)).max(1e-6));
        let mut xtwx = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for r in 0..x.nrows() {
            let row = x.row(r);
            xtwx += row.transpose() * row * w[r];
            score += row.transpose() * (y[r] - prob[r]);
        }
        let Some(step) = solve_normal(xtwx, score) else {
            break;
        };
        let scale = (1.0 / step.amax()).min(1.0);
        let moved = step.amax() * scale;
        beta += step * scale;
        beta.apply(|b| *b = b.clamp(-20.0, 20.0));
        if moved < 1e-8 {
            break;
        }
    }
    beta
}

/// Zero coefficients, unit random-effect scale (zero log-sds and
/// correlation), mild shape values and unit residual scale.
pub fn neutral_start(model: &ModelSpec) -> Vec<f64> {
    let mut theta = vec![0.0; model.n_fixed()];
    if model.has_slope() {
        theta.extend([0.0, 0.0, 0.0]);
    } else {
        theta.push(0.0);
    }
    let shape_start: Vec<f64> = match &model.ranef.family {
        RanefFamily::TukeyGH { .. } => {
            vec![0.1, ((0.05 - TUKEY_H_CENTER) / TUKEY_H_HALF_WIDTH).atanh()]
        }
        RanefFamily::DiscreteK { locations, .. } => {
            vec![0.0; locations.len() - 1 + locations.len().saturating_sub(2)]
        }
        _ => Vec::new(),
    };
    theta.extend(
        shape_start
            .iter()
            .zip(&model.ranef.free_shape)
            .filter(|(_, free)| **free)
            .map(|(v, _)| *v),
    );
    if model.outcome == OutcomeFamily::GaussianIdentity {
        theta.push(0.0);
    }
    theta
}

/// Default starting values: pooled GLM coefficients, unit random-effect
/// scale and mild shape values.
pub fn auto_start(data: &Dataset, model: &ModelSpec) -> Result<Vec<f64>> {
    if data.clusters.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    let (x, y) = pooled_design(data);
    let mut theta = Vec::with_capacity(model.n_params());
    let mut resid_var = 1.0;
    match model.outcome {
        OutcomeFamily::BernoulliLogit => theta.extend(pooled_logistic(&x, &y).iter()),
        OutcomeFamily::GaussianIdentity => {
            let beta = solve_normal(x.transpose() * &x, x.transpose() * &y)
                .ok_or_else(|| Error::InvalidData("singular design".into()))?;
            let r = &y - &x * &beta;
            resid_var = (r.norm_squared() / y.len().max(1) as f64).max(1e-8);
            theta.extend(beta.iter());
        }
    }
    let mut rest = neutral_start(model);
    if model.outcome == OutcomeFamily::GaussianIdentity {
        // split the pooled residual variance between the two levels
        let half_log_sd = 0.5 * (0.5 * resid_var).ln();
        if !model.has_slope() {
            rest[model.n_fixed()] = half_log_sd;
        }
        *rest.last_mut().expect("sigma_eps") = half_log_sd;
    }
    theta.extend_from_slice(&rest[model.n_fixed()..]);
    debug_assert_eq!(theta.len(), model.n_params());
    Ok(theta)
}

fn check_outcome_variation(data: &Dataset, model: &ModelSpec) -> Result<()> {
    if model.outcome == OutcomeFamily::BernoulliLogit {
        let mut ys = data.clusters.iter().flat_map(|c| c.y.iter().copied());
        if let Some(first) = ys.next() {
            if ys.all(|y| y == first) {
                return Err(Error::InvalidData(
                    "outcome is constant; logistic model not estimable".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Log-likelihood as a function of the unconstrained vector; invalid
/// parameter values map to `-inf`.
pub struct Objective<'a> {
    pub model: &'a ModelSpec,
    pub prep: Prepared,
    pub integ: Integrator,
}

impl<'a> Objective<'a> {
    pub fn new(data: &Dataset, model: &'a ModelSpec, quad: QuadSettings) -> Result<Objective<'a>> {
        Ok(Objective {
            model,
            prep: Prepared::new(data, model)?,
            integ: Integrator::new(quad)?,
        })
    }

    pub fn loglik(&self, v: &[f64]) -> f64 {
        if v.iter().any(|x| !x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let Ok(theta) = ParamVector::from_vec(self.model, v) else {
            return f64::NEG_INFINITY;
        };
        match Evaluator::new(&self.prep, &self.integ, self.model, &theta) {
            Ok(ev) => {
                let ll = ev.total();
                if ll.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    ll
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

fn negated<'o>(obj: &'o Objective<'_>) -> impl FnMut(&[f64]) -> f64 + 'o {
    move |v: &[f64]| {
        let ll = obj.loglik(v);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    }
}

/// Inverse of a symmetric matrix through its Cholesky factor; `None` unless
/// positive definite.
pub fn spd_inverse(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d = m.len();
    let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    let chol = mat.cholesky()?;
    let inv = chol.inverse();
    Some(
        (0..d)
            .map(|i| (0..d).map(|j| inv[(i, j)]).collect())
            .collect(),
    )
}

pub fn fit(data: &Dataset, model: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    model.validate()?;
    let obj = Objective::new(data, model, opts.quad)?;
    check_outcome_variation(data, model)?;
    let start = match &opts.start {
        Some(s) => {
            if s.len() != model.n_params() {
                return Err(Error::Dimension(format!(
                    "start vector of length {} but model has {} parameters",
                    s.len(),
                    model.n_params()
                )));
            }
            s.clone()
        }
        None => auto_start(data, model)?,
    };

    let mut x0 = start;
    let mut evals = 0;
    if opts.warmup_evals > 0 {
        let warm = OptimizeOptions {
            max_evals: opts.warmup_evals,
            ..opts.optimizer
        };
        let nm = nelder_mead(negated(&obj), &x0, &warm);
        evals += nm.evals;
        if nm.f.is_finite() {
            x0 = nm.x;
        }
    }
    let bfgs = bfgs_fd(negated(&obj), &x0, &opts.optimizer);
    evals += bfgs.evals;
    let mut x = bfgs.x;
    let mut neg_ll = bfgs.f;
    let mut gradient_norm = bfgs.gradient_norm;

    let mut converged = bfgs.status.converged() && neg_ll.is_finite();
    let std_errors = if opts.standard_errors && neg_ll.is_finite() {
        let hess = finite_diff_hessian(negated(&obj), &x, opts.hessian_step);
        evals += 2 * x.len() * x.len() + 1;
        match hess.ok().and_then(|h| spd_inverse(&h)) {
            Some(inv) => {
                // one Newton step sharpens the optimum beyond the gradient
                // tolerance; kept only if the likelihood does not drop
                let cand: Vec<f64> = (0..x.len())
                    .map(|i| {
                        x[i] - (0..x.len())
                            .map(|j| inv[i][j] * bfgs.gradient[j])
                            .sum::<f64>()
                    })
                    .collect();
                let f_cand = negated(&obj)(&cand);
                evals += 1;
                if f_cand <= neg_ll {
                    if let Ok(g) =
                        finite_diff_grad(negated(&obj), &cand, opts.optimizer.fd_step_scale)
                    {
                        evals += 2 * cand.len();
                        gradient_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        x = cand;
                        neg_ll = f_cand;
                    }
                }
                Some((0..inv.len()).map(|i| inv[i][i].sqrt()).collect())
            }
            None => {
                converged = false;
                None
            }
        }
    } else {
        None
    };
    let loglik = -neg_ll;

    Ok(FitResult {
        names: model.param_names(),
        theta: ParamVector::from_vec(model, &x)?,
        estimates: x,
        std_errors,
        loglik,
        converged,
        status: bfgs.status,
        iterations: bfgs.iterations,
        evals,
        gradient_norm,
        model: model.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family_spec::parse_family_spec;
    use crate::model::{Cluster, RandomStructure};

    fn gaussian_groups() -> Dataset {
        // two groups of clusters with a known pattern of means
        let mut clusters = Vec::new();
        for i in 0..12 {
            let g = f64::from(i % 2);
            let shift = [0.3, -0.2, 0.5, -0.6, 0.1, -0.1][i as usize % 6];
            let y: Vec<f64> = (0..4)
                .map(|t| 1.0 + 2.0 * g + shift + [0.4, -0.3, 0.1, -0.2][t])
                .collect();
            clusters.push(Cluster {
                id: i.to_string(),
                y,
                x: vec![vec![g]; 4],
            });
        }
        Dataset {
            covariate_names: vec!["g".into()],
            clusters,
            true_ranef: None,
        }
    }

    #[test]
    fn balanced_gaussian_recovers_group_difference() {
        let d = gaussian_groups();
        let model = ModelSpec::new(
            OutcomeFamily::GaussianIdentity,
            vec!["g".into()],
            RandomStructure::InterceptOnly,
            parse_family_spec("normal").unwrap(),
        )
        .unwrap();
        let f = fit(&d, &model, &FitOptions::default()).unwrap();
        assert!(f.converged, "{f:?}");
        let mean = |g: f64| {
            let v: Vec<f64> = d
                .clusters
                .iter()
                .filter(|c| c.x[0][0] == g)
                .flat_map(|c| c.y.clone())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((f.estimate("g").unwrap() - (mean(1.0) - mean(0.0))).abs() < 1e-6);
        assert!((f.estimate("intercept").unwrap() - mean(0.0)).abs() < 1e-6);
        assert!(f
            .std_errors
            .as_ref()
            .unwrap()
            .iter()
            .all(|s| s.is_finite() && *s > 0.0));
    }

    #[test]
    fn constant_outcome_is_rejected() {
        let d = Dataset {
            covariate_names: vec!["x".into()],
            clusters: vec![Cluster {
                id: "a".into(),
                y: vec![1.0, 1.0],
                x: vec![vec![0.0], vec![1.0]],
            }],
            true_ranef: None,
        };
        let model = ModelSpec::new(
            OutcomeFamily::BernoulliLogit,
            vec!["x".into()],
            RandomStructure::InterceptOnly,
            parse_family_spec("normal").unwrap(),
        )
        .unwrap();
        assert!(matches!(
            fit(&d, &model, &FitOptions::default()),
            Err(Error::InvalidData(_))
        ));
        let bad_start = FitOptions {
            start: Some(vec![0.0]),
            ..FitOptions::default()
        };
        let mut d2 = d.clone();
        d2.clusters[0].y[0] = 0.0;
        assert!(matches!(
            fit(&d2, &model, &bad_start),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pooled_logistic_matches_saturated_fit() {
        // one binary covariate: the MLE reproduces the observed log-odds
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                1., 0., 1., 0., 1., 0., 1., 0., 1., 1., 1., 1., 1., 1., 1., 1.,
            ],
        );
        let y = DVector::from_vec(vec![1., 0., 0., 0., 1., 1., 1., 0.]);
        let b = pooled_logistic(&x, &y);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        assert!((b[0] - logit(0.25)).abs() < 1e-6);
        assert!((b[0] + b[1] - logit(0.75)).abs() < 1e-6);
    }
}
