//! Plackett-Luce policy optimization against an estimated metric
//! `sum_d omega_hat_d mu_hat_d`.
//!
//! The per-item targets `mu_hat` depend only on the log, so they are
//! computed once per query; the policy only moves `omega_hat` through its
//! rank marginals. Gradients use the score-function form over sampled
//! rankings with a leave-one-out baseline.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::click_sim::{BiasParams, ClickLog};
use crate::data::{Dataset, Partition, Query};
use crate::error::{Error, Result};
use crate::estimators::{dr_query, per_item_ips, per_item_mu, per_item_naive};
use crate::mlp::{Mlp, Optimizer, OptimizerState};
use crate::policy::{sample_ranking, PlPolicy, PolicyMode, RankMarginals};
use crate::propensity::{omega, PropensityTable};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtrEstimator {
    Naive,
    Ips,
    Dm,
    Dr,
    /// True preferences and true position weights: the upper bound.
    FullInfo,
}

impl LtrEstimator {
    pub fn name(self) -> &'static str {
        match self {
            LtrEstimator::Naive => "naive",
            LtrEstimator::Ips => "ips",
            LtrEstimator::Dm => "dm",
            LtrEstimator::Dr => "dr",
            LtrEstimator::FullInfo => "full_info",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => LtrEstimator::Naive,
            "ips" => LtrEstimator::Ips,
            "dm" => LtrEstimator::Dm,
            "dr" => LtrEstimator::Dr,
            "full_info" | "full-info" => LtrEstimator::FullInfo,
            other => return Err(Error::Config(format!("unknown estimator {other:?}"))),
        })
    }

    /// Whether the estimator needs a relevance regression model.
    pub fn needs_regression(self) -> bool {
        matches!(self, LtrEstimator::Dm | LtrEstimator::Dr)
    }

    pub fn uses_log(self) -> bool {
        self != LtrEstimator::FullInfo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtrConfig {
    pub estimator: LtrEstimator,
    /// Rankings sampled per query per gradient step.
    pub n_samples: usize,
    pub optimizer: Optimizer,
    pub max_steps: usize,
    pub queries_per_step: usize,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Rankings sampled per validation query for its rank marginals.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for LtrConfig {
    fn default() -> Self {
        Self {
            estimator: LtrEstimator::Dr,
            n_samples: 32,
            optimizer: Optimizer::adam(0.01),
            max_steps: 1500,
            queries_per_step: 16,
            eval_interval: 50,
            patience: 6,
            eval_samples: 200,
            seed: 0,
        }
    }
}

impl LtrConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("queries_per_step", self.queries_per_step),
            ("eval_interval", self.eval_interval),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Sampled gradient of `E_y[sum_k w_k mu_hat_{y_k}]` with respect to the
/// scores, plus by-products of the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub grad: Vec<f64>,
    /// Mean sampled reward: an unbiased estimate of the objective.
    pub objective: f64,
    pub marginals: RankMarginals,
}

/// Adds the gradient of the Plackett-Luce log-probability of `ranking`
/// with respect to the scores, times `scale`, into `out`.
fn add_log_prob_gradient(scores: &[f64], ranking: &[usize], scale: f64, out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut denom: f64 = weights.iter().sum();
    for &chosen in ranking {
        out[chosen] += scale;
        for (g, &w) in out.iter_mut().zip(&weights) {
            if w > 0.0 {
                *g -= scale * w / denom;
            }
        }
        denom -= weights[chosen];
        weights[chosen] = 0.0;
        // guard against cancellation when few items remain
        if denom <= 0.0 {
            denom = weights.iter().sum();
        }
    }
}

/// Score-function gradient with a leave-one-out baseline: sample `i` is
/// compared against the mean reward of the other samples, which keeps the
/// estimate exactly unbiased. A single sample yields a zero gradient.
pub fn score_gradient(
    scores: &[f64],
    mu_hat: &[f64],
    bias: &BiasParams,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ScoreGradient> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    if mu_hat.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: mu_hat.len(),
        });
    }
    let k = bias.effective_cutoff().max(1);
    let samples: Vec<Vec<usize>> = (0..n_samples)
        .map(|_| sample_ranking(scores, k, rng))
        .collect();
    let rewards: Vec<f64> = samples
        .iter()
        .map(|y| {
            y.iter()
                .enumerate()
                .map(|(pos, &d)| bias.weight(pos + 1) * mu_hat[d])
                .sum()
        })
        .collect();
    let m = n_samples as f64;
    let mean = rewards.iter().sum::<f64>() / m;
    let mut grad = vec![0.0; scores.len()];
    if n_samples > 1 {
        // r_i - mean(others) = m/(m-1) (r_i - mean)
        for (y, r) in samples.iter().zip(&rewards) {
            let adv = (r - mean) / (m - 1.0);
            if adv != 0.0 {
                add_log_prob_gradient(scores, y, adv, &mut grad);
            }
        }
    }
    Ok(ScoreGradient {
        grad,
        objective: mean,
        marginals: RankMarginals::from_samples(&samples, scores.len(), k),
    })
}

/// [`score_gradient`] at the policy's scores for `query`.
pub fn policy_gradient(
    policy: &PlPolicy,
    query: &Query,
    mu_hat: &[f64],
    bias: &BiasParams,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ScoreGradient> {
    score_gradient(&policy.scores(query)?, mu_hat, bias, n_samples, rng)
}

/// Per-query targets for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryObjective {
    pub query_id: u64,
    pub mu_hat: Vec<f64>,
}

/// Everything an estimator needs besides the policy.
#[derive(Debug, Clone)]
pub struct LtrData<'a> {
    pub dataset: &'a Dataset,
    /// Impressions of the train and validation partitions.
    pub log: &'a ClickLog,
    pub props: &'a BTreeMap<u64, PropensityTable>,
    /// Regression estimates per query; required by DM and DR.
    pub r_hat: Option<&'a BTreeMap<u64, Vec<f64>>>,
    pub bias_hat: &'a BiasParams,
    pub true_bias: &'a BiasParams,
}

impl LtrData<'_> {
    /// Weights the estimator uses for `omega_hat`.
    pub fn weights(&self, est: LtrEstimator) -> &BiasParams {
        match est {
            LtrEstimator::FullInfo => self.true_bias,
            _ => self.bias_hat,
        }
    }

    fn r_hat_for(&self, qid: u64) -> Result<&Vec<f64>> {
        self.r_hat
            .ok_or_else(|| Error::Config("DM and DR need regression estimates".into()))?
            .get(&qid)
            .ok_or_else(|| Error::Domain(format!("no regression estimates for query {qid}")))
    }

    fn prop_for(&self, qid: u64) -> Result<&PropensityTable> {
        self.props
            .get(&qid)
            .ok_or(Error::MissingPropensity { query_id: qid, item: 0 })
    }

    /// Targets per query of a partition. Naive and IPS use the queries that
    /// have impressions; DM, DR and full information use every query, DR
    /// falling back to `R_hat` where a query was never logged.
    pub fn objectives(&self, est: LtrEstimator, partition: Partition) -> Result<Vec<QueryObjective>> {
        let groups = self.log.by_query(Some(partition));
        let mut out = Vec::new();
        for q in self.dataset.partition(partition) {
            let imps = groups.get(&q.query_id);
            let mu_hat = match (est, imps) {
                (LtrEstimator::FullInfo, _) => q.relevance(),
                (LtrEstimator::Dm, _) | (LtrEstimator::Dr, None) => self.r_hat_for(q.query_id)?.clone(),
                (LtrEstimator::Dr, Some(imps)) => {
                    per_item_mu(imps, self.prop_for(q.query_id)?, self.r_hat_for(q.query_id)?)?
                }
                (LtrEstimator::Ips, Some(imps)) => per_item_ips(imps, self.prop_for(q.query_id)?)?,
                (LtrEstimator::Naive, Some(imps)) => per_item_naive(imps, q.len())?,
                (LtrEstimator::Ips | LtrEstimator::Naive, None) => continue,
            };
            out.push(QueryObjective {
                query_id: q.query_id,
                mu_hat,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Mean sampled objective over the step's queries.
    pub train_objective: f64,
    /// Validation estimate, present on evaluation steps.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: PlPolicy,
    pub trace: Vec<TraceRow>,
    pub best_step: usize,
    pub best_validation: f64,
    /// Largest gap between `omega_hat . mu_hat` and the DR estimate over
    /// the validation evaluations (DR only).
    pub dr_identity_gap: f64,
}

impl TrainedPolicy {
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,train_objective,validation_estimate")?;
        for row in &self.trace {
            let v = row.validation.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{}", row.step, row.train_objective, v)?;
        }
        Ok(())
    }
}

/// Mean over `objectives` of `omega_hat . mu_hat` with Monte Carlo rank
/// marginals from `samples` rankings per query. For DR also returns the
/// largest deviation from the direct DR estimate.
fn evaluate(
    policy: &PlPolicy,
    objectives: &[QueryObjective],
    queries: &HashMap<u64, &Query>,
    data: &LtrData,
    est: LtrEstimator,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if objectives.is_empty() {
        return Err(Error::EmptyLog);
    }
    let bias = data.weights(est);
    let k = bias.effective_cutoff().max(1);
    let groups = data.log.by_query(Some(Partition::Validation));
    let mut total = 0.0;
    let mut gap = 0.0f64;
    for obj in objectives {
        let q = queries[&obj.query_id];
        let scores = policy.scores(q)?;
        let m = match policy.mode {
            PolicyMode::Stochastic => {
                let rankings: Vec<Vec<usize>> = (0..samples).map(|_| sample_ranking(&scores, k, rng)).collect();
                RankMarginals::from_samples(&rankings, q.len(), k)
            }
            PolicyMode::Deterministic => policy.marginals(&scores, k, crate::policy::MarginalMethod::Exact, rng)?,
        };
        let w = omega(&m, bias);
        let value: f64 = w.iter().zip(&obj.mu_hat).map(|(a, b)| a * b).sum();
        if est == LtrEstimator::Dr {
            if let Some(imps) = groups.get(&obj.query_id) {
                let (dr, _) = dr_query(imps, &w, data.prop_for(obj.query_id)?, data.r_hat_for(obj.query_id)?)?;
                gap = gap.max((dr - value).abs());
            }
        }
        total += value;
    }
    Ok((total / objectives.len() as f64, gap))
}

/// Stochastic gradient ascent on the chosen estimator's training objective,
/// keeping the checkpoint with the best validation estimate.
pub fn train_policy(init: Mlp, data: &LtrData, config: &LtrConfig) -> Result<TrainedPolicy> {
    config.validate()?;
    let est = config.estimator;
    let train = data.objectives(est, Partition::Train)?;
    let val = data.objectives(est, Partition::Validation)?;
    if train.is_empty() {
        return Err(Error::EmptyLog);
    }
    if val.is_empty() {
        return Err(Error::Config(
            "early stopping needs validation impressions for this estimator".into(),
        ));
    }
    let queries: HashMap<u64, &Query> = data.dataset.all_queries().map(|q| (q.query_id, q)).collect();
    let bias = data.weights(est);
    let mut policy = PlPolicy::new(init, PolicyMode::Stochastic);
    let mut state = OptimizerState::new(config.optimizer, policy.model.num_params());
    let mut rng = seeded(derive_seed(config.seed, &[0]));
    let eval_seed = derive_seed(config.seed, &[1]);

    let (v0, mut gap) = evaluate(&policy, &val, &queries, data, est, config.eval_samples, &mut seeded(eval_seed))?;
    let mut best = (policy.clone(), 0usize, v0);
    let mut trace = vec![TraceRow {
        step: 0,
        train_objective: f64::NAN,
        validation: Some(v0),
    }];
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    for step in 1..=config.max_steps {
        let mut grad = vec![0.0; policy.model.num_params()];
        let mut objective = 0.0;
        let batch = config.queries_per_step.min(train.len());
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let obj = &train[order[cursor]];
            cursor += 1;
            let q = queries[&obj.query_id];
            let sg = policy_gradient(&policy, q, &obj.mu_hat, bias, config.n_samples, &mut rng)?;
            objective += sg.objective / batch as f64;
            for (item, g) in q.items.iter().zip(&sg.grad) {
                if *g != 0.0 {
                    // ascent: the optimizer minimizes
                    policy.model.accumulate_gradient(&item.features, -g / batch as f64, &mut grad)?;
                }
            }
        }
        state.step(policy.model.params_mut(), &grad);
        if !policy.model.is_finite() {
            return Err(Error::Divergence(format!(
                "policy parameters became non-finite at step {step}"
            )));
        }
        let mut row = TraceRow {
            step,
            train_objective: objective,
            validation: None,
        };
        if step % config.eval_interval == 0 || step == config.max_steps {
            let (v, g) = evaluate(&policy, &val, &queries, data, est, config.eval_samples, &mut seeded(eval_seed))?;
            gap = gap.max(g);
            row.validation = Some(v);
            if v > best.2 {
                best = (policy.clone(), step, v);
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        trace.push(row);
        if since_best >= config.patience {
            break;
        }
    }
    Ok(TrainedPolicy {
        policy: best.0,
        trace,
        best_step: best.1,
        best_validation: best.2,
        dr_identity_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{enumerate_rankings, MarginalMethod};

    fn exact_objective(scores: &[f64], mu: &[f64], bias: &BiasParams) -> f64 {
        enumerate_rankings(scores, bias.effective_cutoff())
            .unwrap()
            .iter()
            .map(|(y, p)| {
                p * y
                    .iter()
                    .enumerate()
                    .map(|(pos, &d)| bias.weight(pos + 1) * mu[d])
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let scores = [0.3, -0.7, 1.2, 0.0];
        let ranking = [2, 0, 3];
        let mut g = vec![0.0; 4];
        add_log_prob_gradient(&scores, &ranking, 1.0, &mut g);
        let h = 1e-6;
        for i in 0..4 {
            let mut up = scores;
            up[i] += h;
            let mut down = scores;
            down[i] -= h;
            let fd = (crate::policy::pl_log_prob(&up, &ranking) - crate::policy::pl_log_prob(&down, &ranking)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn single_item_gradient_is_zero() {
        let mut rng = seeded(0);
        let bias = BiasParams::top5();
        let g = score_gradient(&[0.4], &[0.9], &bias, 50, &mut rng).unwrap();
        assert_eq!(g.grad, vec![0.0]);
        let g = score_gradient(&[0.4, 0.1], &[0.9, 0.2], &bias, 1, &mut rng).unwrap();
        assert_eq!(g.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_targets_give_zero_gradient() {
        let mut rng = seeded(1);
        let bias = BiasParams::top5();
        let g = score_gradient(&[0.2, -0.4, 0.9, 0.0, 0.3, 0.1], &[0.5; 6], &bias, 1000, &mut rng).unwrap();
        // with six items every top-5 ranking collects the same reward
        assert!(g.grad.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn sampled_gradient_matches_enumerated_objective() {
        let mut rng = seeded(2);
        let bias = BiasParams::top5();
        let scores = [0.5, -0.3, 0.1];
        let mu = [0.9, 0.1, 0.4];
        let g = score_gradient(&scores, &mu, &bias, 200_000, &mut rng).unwrap();
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..3 {
            let mut up = scores;
            up[i] += h;
            let mut down = scores;
            down[i] -= h;
            let fd = (exact_objective(&up, &mu, &bias) - exact_objective(&down, &mu, &bias)) / (2.0 * h);
            num += (g.grad[i] - fd).powi(2);
            den += fd * fd;
        }
        assert!((num / den).sqrt() < 3e-2, "rel err {}", (num / den).sqrt());
        let exact = exact_objective(&scores, &mu, &bias);
        let m = crate::policy::rank_marginals(&scores, 5, MarginalMethod::Exact, &mut rng).unwrap();
        let via_marginals: f64 = omega(&m, &bias).iter().zip(&mu).map(|(a, b)| a * b).sum();
        assert!((exact - via_marginals).abs() < 1e-12);
        assert!((g.objective - exact).abs() < 0.01);
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in [
            LtrEstimator::Naive,
            LtrEstimator::Ips,
            LtrEstimator::Dm,
            LtrEstimator::Dr,
            LtrEstimator::FullInfo,
        ] {
            assert_eq!(LtrEstimator::parse(e.name()).unwrap(), e);
        }
        assert!(LtrEstimator::parse("rps").is_err());
    }
}
