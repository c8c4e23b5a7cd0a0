//! EM estimation of the click-model parameters from a click log.
//!
//! Each displayed item carries a latent preference `R in {0, 1}` with prior
//! `R_hat_d`. A preferred item at rank `k` is clicked with probability
//! `p_k = alpha_k + beta_k`, a non-preferred one with `beta_k`. The E-step
//! computes `P(R = 1 | c, k)`; the M-step re-estimates `(p_k, beta_k)` per
//! rank in closed form under `p_k >= beta_k` and refits `R_hat`.
//!
//! Note that the click probabilities are invariant under affine changes of
//! `R` compensated in `alpha` and `beta`, so the parameters are only
//! identified up to that transformation; the initialization selects the
//! solution.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::click_sim::{BiasParams, ClickLog};
use crate::data::{Dataset, Query};
use crate::error::{domain, Error, Result};
use crate::mlp::{sigmoid, Mlp, Optimizer, OptimizerState};
use crate::rng::seeded;

const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmRelevance {
    /// Free `R_hat` per query-item pair, updated in closed form.
    PerItem,
    /// MLP on item features refit on the posteriors each iteration.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub iterations: usize,
    /// Full-batch epochs of the relevance model per M-step.
    pub inner_epochs: usize,
    pub init_alpha: f64,
    pub init_beta: f64,
    pub relevance: EmRelevance,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 25,
            inner_epochs: 25,
            init_alpha: 0.3,
            init_beta: 0.3,
            relevance: EmRelevance::Regression,
            optimizer: Optimizer::adam(0.01),
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("EM needs at least one iteration".into()));
        }
        self.optimizer.validate()?;
        BiasParams::new(vec![self.init_alpha], vec![self.init_beta], 1)
            .map_err(|e| Error::Config(format!("EM initialization: {e}")))?;
        Ok(())
    }
}

/// Clips negative values to 0 and rescales a pair whose sum exceeds 1.
pub fn project_bias_params(alpha: &[f64], beta: &[f64], display_cutoff: usize) -> Result<BiasParams> {
    if alpha.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: beta.len(),
        });
    }
    let mut a_out = Vec::with_capacity(alpha.len());
    let mut b_out = Vec::with_capacity(beta.len());
    for (&a, &b) in alpha.iter().zip(beta) {
        if !a.is_finite() || !b.is_finite() {
            return domain(format!("non-finite bias parameters ({a}, {b})"));
        }
        let (a, b) = (a.max(0.0), b.max(0.0));
        let s = a + b;
        let (a, b) = if s > 1.0 { (a / s, b / s) } else { (a, b) };
        a_out.push(a.min(1.0));
        b_out.push(b.min(1.0));
    }
    BiasParams::new(a_out, b_out, display_cutoff)
}

/// Click counts for one item of one query at one rank.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    query: usize,
    item: usize,
    rank: usize,
    shown: f64,
    clicks: f64,
}

fn cells(log: &ClickLog, queries: &[&Query], k: usize) -> Result<Vec<Cell>> {
    let pos: HashMap<u64, usize> = queries.iter().enumerate().map(|(i, q)| (q.query_id, i)).collect();
    let mut acc: BTreeMap<(usize, usize, usize), (f64, f64)> = BTreeMap::new();
    for imp in &log.impressions {
        let qi = *pos
            .get(&imp.query_id)
            .ok_or_else(|| Error::Domain(format!("query {} is in the log but not in the dataset", imp.query_id)))?;
        for (r, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate().take(k) {
            if d >= queries[qi].len() {
                return Err(Error::MissingPropensity {
                    query_id: imp.query_id,
                    item: d,
                });
            }
            let e = acc.entry((qi, d, r)).or_insert((0.0, 0.0));
            e.0 += 1.0;
            if c {
                e.1 += 1.0;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((query, item, rank), (shown, clicks))| Cell {
            query,
            item,
            rank,
            shown,
            clicks,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub bias_hat: BiasParams,
    /// Final relevance estimates for every dataset query.
    pub r_hat: BTreeMap<u64, Vec<f64>>,
    /// Observed-data log-likelihood before each iteration and after the
    /// last.
    pub log_likelihood: Vec<f64>,
}

/// Optional starting point overriding the configured initialization.
#[derive(Debug, Clone, Default)]
pub struct EmInit {
    pub bias: Option<BiasParams>,
    pub r_hat: Option<BTreeMap<u64, Vec<f64>>>,
}

fn log_likelihood(cells: &[Cell], r: &[Vec<f64>], alpha: &[f64], beta: &[f64]) -> f64 {
    cells
        .iter()
        .map(|c| {
            let q = (alpha[c.rank] * r[c.query][c.item] + beta[c.rank]).clamp(PROB_EPS, 1.0 - PROB_EPS);
            c.clicks * q.ln() + (c.shown - c.clicks) * (1.0 - q).ln()
        })
        .sum()
}

/// EM over the impressions of `log` with `k` ranks of parameters.
pub fn em_estimate_bias(log: &ClickLog, dataset: &Dataset, k: usize, config: &EmConfig) -> Result<EmOutcome> {
    em_estimate_bias_from(log, dataset, k, config, &EmInit::default())
}

pub fn em_estimate_bias_from(
    log: &ClickLog,
    dataset: &Dataset,
    k: usize,
    config: &EmConfig,
    init: &EmInit,
) -> Result<EmOutcome> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    if k == 0 {
        return domain("K must be at least 1");
    }
    let queries: Vec<&Query> = dataset.all_queries().collect();
    let cells = cells(log, &queries, k)?;
    let (mut alpha, mut beta) = match &init.bias {
        Some(b) => (
            (1..=k).map(|r| b.alpha(r)).collect::<Vec<_>>(),
            (1..=k).map(|r| b.beta(r)).collect::<Vec<_>>(),
        ),
        None => (vec![config.init_alpha; k], vec![config.init_beta; k]),
    };
    let mut r: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| match init.r_hat.as_ref().and_then(|m| m.get(&q.query_id)) {
            Some(v) if v.len() == q.len() => Ok(v.clone()),
            Some(v) => Err(Error::DimensionMismatch {
                expected: q.len(),
                got: v.len(),
            }),
            None => Ok(vec![0.5; q.len()]),
        })
        .collect::<Result<_>>()?;

    let mut rng = seeded(config.seed);
    let mut model = match config.relevance {
        EmRelevance::Regression => Some(Mlp::scorer(dataset.feature_dim, &mut rng)?),
        EmRelevance::PerItem => None,
    };
    let mut opt_state = model
        .as_ref()
        .map(|m| OptimizerState::new(config.optimizer, m.num_params()));

    let mut trace = vec![log_likelihood(&cells, &r, &alpha, &beta)];
    for _ in 0..config.iterations {
        // E-step: posteriors of preference after a click / no click
        let post: Vec<(f64, f64)> = cells
            .iter()
            .map(|c| {
                let (a, b, prior) = (alpha[c.rank], beta[c.rank], r[c.query][c.item]);
                let p_click = (a * prior + b).max(PROB_EPS);
                let g1 = ((a + b) * prior / p_click).clamp(0.0, 1.0);
                let g0 = ((1.0 - a - b) * prior / (1.0 - a * prior - b).max(PROB_EPS)).clamp(0.0, 1.0);
                (g1, g0)
            })
            .collect();

        // M-step for the parameters, per rank
        let mut stats = vec![[0.0f64; 4]; k];
        for (c, &(g1, g0)) in cells.iter().zip(&post) {
            let s = &mut stats[c.rank];
            let rel_mass = c.clicks * g1 + (c.shown - c.clicks) * g0;
            s[0] += c.clicks * g1;
            s[1] += rel_mass;
            s[2] += c.clicks * (1.0 - g1);
            s[3] += c.shown - rel_mass;
        }
        for (rank, s) in stats.iter().enumerate() {
            let shown = s[1] + s[3];
            if shown <= 0.0 {
                continue;
            }
            let mut p = if s[1] > 0.0 { s[0] / s[1] } else { 0.0 };
            let mut b = if s[3] > 0.0 { s[2] / s[3] } else { 0.0 };
            if p < b {
                // constrained optimum lies on p = b
                p = (s[0] + s[2]) / shown;
                b = p;
            }
            alpha[rank] = p - b;
            beta[rank] = b;
        }

        // M-step for the relevance estimates
        let mut num: Vec<Vec<f64>> = queries.iter().map(|q| vec![0.0; q.len()]).collect();
        let mut den: Vec<Vec<f64>> = num.clone();
        for (c, &(g1, g0)) in cells.iter().zip(&post) {
            num[c.query][c.item] += c.clicks * g1 + (c.shown - c.clicks) * g0;
            den[c.query][c.item] += c.shown;
        }
        match (&mut model, &mut opt_state) {
            (Some(m), Some(st)) => {
                fit_soft_targets(m, st, &queries, &num, &den, config.inner_epochs)?;
                for (qi, q) in queries.iter().enumerate() {
                    for (d, item) in q.items.iter().enumerate() {
                        r[qi][d] = sigmoid(m.forward(&item.features)?);
                    }
                }
            }
            _ => {
                for qi in 0..queries.len() {
                    for d in 0..r[qi].len() {
                        if den[qi][d] > 0.0 {
                            r[qi][d] = num[qi][d] / den[qi][d];
                        }
                    }
                }
            }
        }
        let ll = log_likelihood(&cells, &r, &alpha, &beta);
        if !ll.is_finite() {
            return Err(Error::Divergence(format!("EM log-likelihood became {ll}")));
        }
        trace.push(ll);
    }
    Ok(EmOutcome {
        bias_hat: project_bias_params(&alpha, &beta, k)?,
        r_hat: queries
            .iter()
            .zip(r)
            .map(|(q, v)| (q.query_id, v))
            .collect(),
        log_likelihood: trace,
    })
}

/// Weighted cross-entropy of `sigmoid(model)` against posterior means,
/// each item weighted by its number of impressions.
fn fit_soft_targets(
    model: &mut Mlp,
    state: &mut OptimizerState,
    queries: &[&Query],
    num: &[Vec<f64>],
    den: &[Vec<f64>],
    epochs: usize,
) -> Result<()> {
    let total: f64 = den.iter().flatten().sum();
    if total <= 0.0 {
        return Ok(());
    }
    for _ in 0..epochs {
        let mut grad = vec![0.0; model.num_params()];
        for (qi, q) in queries.iter().enumerate() {
            for (d, item) in q.items.iter().enumerate() {
                let w = den[qi][d];
                if w == 0.0 {
                    continue;
                }
                let target = num[qi][d] / w;
                let s = model.forward(&item.features)?;
                model.accumulate_gradient(&item.features, w / total * (sigmoid(s) - target), &mut grad)?;
            }
        }
        state.step(model.params_mut(), &grad);
    }
    if !model.is_finite() {
        return Err(Error::Divergence("EM relevance model became non-finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_sim::{simulate_session, Impression};
    use crate::data::{generate_synthetic, Partition};
    use crate::policy::sample_ranking;
    use crate::rng::seeded;

    fn simulate(dataset: &Dataset, params: &BiasParams, n: usize, seed: u64) -> ClickLog {
        let mut rng = seeded(seed);
        let k = params.effective_cutoff();
        let queries = &dataset.train;
        ClickLog::new(
            (0..n)
                .map(|i| {
                    let q = &queries[i % queries.len()];
                    let scores = vec![0.0; q.len()];
                    let ranking = sample_ranking(&scores, k, &mut rng);
                    let clicks = simulate_session(&ranking, &q.relevance(), params, &mut rng);
                    Impression {
                        query_id: q.query_id,
                        partition: Partition::Train,
                        ranking,
                        clicks,
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn projection_examples() {
        let p = project_bias_params(&[1.2, 0.5, -0.1], &[0.3, 0.4, 0.5], 3).unwrap();
        assert!((p.alpha(1) - 0.8).abs() < 1e-12 && (p.beta(1) - 0.2).abs() < 1e-12);
        assert_eq!((p.alpha(2), p.beta(2)), (0.5, 0.4));
        assert_eq!((p.alpha(3), p.beta(3)), (0.0, 0.5));
        assert!(project_bias_params(&[f64::NAN], &[0.1], 1).is_err());
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let dataset = generate_synthetic(10, 8, 3, 1).unwrap();
        let truth = BiasParams::top5();
        let log = simulate(&dataset, &truth, 1_000_000, 2);
        let init = EmInit {
            bias: Some(truth.clone()),
            r_hat: Some(dataset.all_queries().map(|q| (q.query_id, q.relevance())).collect()),
        };
        let config = EmConfig {
            iterations: 1,
            relevance: EmRelevance::PerItem,
            ..Default::default()
        };
        let out = em_estimate_bias_from(&log, &dataset, 5, &config, &init).unwrap();
        for k in 1..=5 {
            assert!((out.bias_hat.alpha(k) - truth.alpha(k)).abs() < 0.02, "alpha_{k}");
            assert!((out.bias_hat.beta(k) - truth.beta(k)).abs() < 0.02, "beta_{k}");
        }
    }

    #[test]
    fn clicks_only_at_top_zero_lower_ranks() {
        let dataset = generate_synthetic(5, 6, 2, 3).unwrap();
        let params = BiasParams::new(vec![0.5, 0.0, 0.0], vec![0.2, 0.0, 0.0], 3).unwrap();
        let log = simulate(&dataset, &params, 5000, 4);
        let config = EmConfig {
            iterations: 10,
            relevance: EmRelevance::PerItem,
            ..Default::default()
        };
        let out = em_estimate_bias(&log, &dataset, 3, &config).unwrap();
        for k in 2..=3 {
            assert!(out.bias_hat.alpha(k) < 1e-9 && out.bias_hat.beta(k) < 1e-9);
        }
        assert!(out.bias_hat.weight(1) > 0.0);
    }

    #[test]
    fn per_item_log_likelihood_is_monotone() {
        let dataset = generate_synthetic(20, 10, 3, 5).unwrap();
        let log = simulate(&dataset, &BiasParams::top5(), 20_000, 6);
        let config = EmConfig {
            iterations: 30,
            relevance: EmRelevance::PerItem,
            ..Default::default()
        };
        let out = em_estimate_bias(&log, &dataset, 5, &config).unwrap();
        for w in out.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let dataset = generate_synthetic(10, 6, 3, 7).unwrap();
        let log = simulate(&dataset, &BiasParams::top5(), 3000, 8);
        let config = EmConfig {
            iterations: 3,
            inner_epochs: 5,
            ..Default::default()
        };
        let a = em_estimate_bias(&log, &dataset, 5, &config).unwrap();
        let b = em_estimate_bias(&log, &dataset, 5, &config).unwrap();
        assert_eq!(a.bias_hat, b.bias_hat);
        assert_eq!(a.log_likelihood, b.log_likelihood);
    }

    #[test]
    fn empty_log_is_error() {
        let dataset = generate_synthetic(5, 4, 2, 0).unwrap();
        assert!(matches!(
            em_estimate_bias(&ClickLog::default(), &dataset, 5, &EmConfig::default()),
            Err(Error::EmptyLog)
        ));
    }
}
