use super::{ReplicationResult, ScenarioConfig};
use crate::ranef::{RanefFamily, TUKEY_H_CENTER, TUKEY_H_HALF_WIDTH};
use crate::special::median;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cluster_size: usize,
    pub family: String,
    pub parameter: String,
    /// NaN when the parameter has no counterpart in the true model.
    pub truth: f64,
    pub bias: f64,
    /// Sample standard deviation (n - 1 divisor).
    pub sd: f64,
    /// Mean squared error about the truth.
    pub mse: f64,
    pub median: f64,
    pub convergence_rate: f64,
    /// Estimates entering the statistics.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsepRow {
    pub cluster_size: usize,
    pub family: String,
    /// `mode` or `mean`.
    pub method: String,
    /// `b0` or `bw`.
    pub component: String,
    pub msep: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub msep: Vec<MsepRow>,
}

impl SummaryTable {
    pub fn row(&self, cluster_size: usize, family: &str, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.cluster_size == cluster_size && r.family == family && r.parameter == parameter
        })
    }

    pub fn msep_of(
        &self,
        cluster_size: usize,
        family: &str,
        method: &str,
        component: &str,
    ) -> Option<f64> {
        self.msep
            .iter()
            .find(|r| {
                r.cluster_size == cluster_size
                    && r.family == family
                    && r.method == method
                    && r.component == component
            })
            .map(|r| r.msep)
    }
}

/// True values of the fitted parameters, on the unconstrained scale.
pub fn true_values(config: &ScenarioConfig) -> Vec<(String, f64)> {
    let mut out = vec![("intercept".to_string(), config.true_betas[0])];
    out.extend(
        config
            .covariate_names()
            .into_iter()
            .zip(config.true_betas[1..].iter().copied()),
    );
    match config.true_family.family {
        RanefFamily::BivariateNormal {
            log_sd_intercept,
            log_sd_slope,
            atanh_correlation,
        } => out.extend([
            ("log_sd_intercept".to_string(), log_sd_intercept),
            ("log_sd_slope".to_string(), log_sd_slope),
            ("atanh_corr".to_string(), atanh_correlation),
        ]),
        RanefFamily::BivariateNormalMixture {
            component_centers: (m0, mw),
            component_sd: (s0, sw),
            component_correlation: rho,
        } => {
            let v0 = m0 * m0 + s0 * s0;
            let vw = mw * mw + sw * sw;
            let corr = (rho * s0 * sw + m0 * mw) / (v0 * vw).sqrt();
            out.extend([
                ("log_sd_intercept".to_string(), 0.5 * v0.ln()),
                ("log_sd_slope".to_string(), 0.5 * vw.ln()),
                ("atanh_corr".to_string(), corr.atanh()),
            ]);
        }
        _ => {
            let ls = if config.sigma_b > 0.0 {
                config.sigma_b.ln()
            } else {
                f64::NAN
            };
            out.push(("log_sigma_b".to_string(), ls));
        }
    }
    if let RanefFamily::TukeyGH { g, h } = config.true_family.family {
        out.push(("tukey_g".to_string(), g));
        out.push((
            "tukey_h_unconstrained".to_string(),
            ((h - TUKEY_H_CENTER) / TUKEY_H_HALF_WIDTH).atanh(),
        ));
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per (cluster size, fitted family, parameter) statistics. With
/// `convergent_only` the estimates of non-converged fits are left out; the
/// convergence rate always counts every fit.
pub fn summarize(
    results: &[ReplicationResult],
    truths: &[(String, f64)],
    convergent_only: bool,
) -> SummaryTable {
    let mut groups: Vec<((usize, usize), Vec<&ReplicationResult>)> = Vec::new();
    for r in results {
        let key = (r.cluster_size, r.family_index);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut table = SummaryTable::default();
    for ((size, _), members) in groups {
        let family = members[0].family.clone();
        let total = members.len();
        let conv = members.iter().filter(|r| r.converged).count() as f64 / total as f64;
        let used: Vec<&&ReplicationResult> = members
            .iter()
            .filter(|r| !convergent_only || r.converged)
            .collect();
        let Some(names) = members.iter().map(|r| &r.names).find(|n| !n.is_empty()) else {
            continue;
        };
        for (j, name) in names.iter().enumerate() {
            let est: Vec<f64> = used
                .iter()
                .filter_map(|r| r.estimates.get(j).copied())
                .filter(|v| v.is_finite())
                .collect();
            let truth = truths
                .iter()
                .find(|(n, _)| n == name)
                .map_or(f64::NAN, |(_, v)| *v);
            let (bias, sd, mse, med) = if est.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mu = mean(&est);
                let sd = if est.len() > 1 {
                    (est.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / (est.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                let mse = mean(&est.iter().map(|e| (e - truth).powi(2)).collect::<Vec<_>>());
                (mu - truth, sd, mse, median(&est))
            };
            table.rows.push(SummaryRow {
                cluster_size: size,
                family: family.clone(),
                parameter: name.clone(),
                truth,
                bias,
                sd,
                mse,
                median: med,
                convergence_rate: conv,
                n: est.len(),
            });
        }
        for (method, pick) in [("mode", 0usize), ("mean", 1)] {
            let comps = used.iter().map(|r| r.msep_mode.len()).max().unwrap_or(1);
            for c in 0..comps {
                let vals: Vec<f64> = used
                    .iter()
                    .filter_map(|r| {
                        if pick == 0 {
                            r.msep_mode.get(c)
                        } else {
                            r.msep_mean.get(c)
                        }
                    })
                    .copied()
                    .filter(|v| v.is_finite())
                    .collect();
                table.msep.push(MsepRow {
                    cluster_size: size,
                    family: family.clone(),
                    method: method.to_string(),
                    component: if c == 0 { "b0" } else { "bw" }.to_string(),
                    msep: if vals.is_empty() {
                        f64::NAN
                    } else {
                        mean(&vals)
                    },
                    n: vals.len(),
                });
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(est: f64, converged: bool) -> ReplicationResult {
        ReplicationResult {
            replication: 0,
            cluster_size: 2,
            family_index: 0,
            family: "normal".into(),
            seed: 0,
            names: vec!["intercept".into()],
            estimates: vec![est],
            std_errors: None,
            loglik: 0.0,
            converged,
            iterations: 0,
            msep_mode: vec![0.5],
            msep_mean: vec![0.25],
            error: None,
            predictions: None,
        }
    }

    #[test]
    fn two_estimates_around_truth() {
        let t = summarize(
            &[result(1.0, true), result(3.0, false)],
            &[("intercept".into(), 2.0)],
            false,
        );
        let r = &t.rows[0];
        assert_eq!(r.bias, 0.0);
        assert!((r.sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.mse, 1.0);
        assert_eq!(r.median, 2.0);
        assert_eq!(r.convergence_rate, 0.5);
        assert_eq!(t.msep_of(2, "normal", "mean", "b0"), Some(0.25));
        let conv = summarize(
            &[result(1.0, true), result(3.0, false)],
            &[("intercept".into(), 2.0)],
            true,
        );
        assert_eq!(conv.rows[0].n, 1);
        assert_eq!(conv.rows[0].bias, -1.0);
    }

    #[test]
    fn exact_estimates_have_no_error() {
        let t = summarize(
            &[result(2.0, true), result(2.0, true)],
            &[("intercept".into(), 2.0)],
            false,
        );
        assert_eq!(
            (t.rows[0].bias, t.rows[0].sd, t.rows[0].mse),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn mse_decomposes_with_population_variance() {
        let ests = [0.3, 1.7, 2.2, -0.4, 5.0];
        let rs: Vec<_> = ests.iter().map(|&e| result(e, true)).collect();
        let t = summarize(&rs, &[("intercept".into(), 1.0)], false);
        let r = &t.rows[0];
        let n = ests.len() as f64;
        let pop_var = r.sd * r.sd * (n - 1.0) / n;
        assert!((r.mse - (r.bias * r.bias + pop_var)).abs() < 1e-8);
    }
}
