//! Relevance regression `R_hat_d` trained on clicks with a
//! cross-entropy loss estimator.
//!
//! Both losses are linear in per-item coefficients that depend only on the
//! log, so each query is reduced once to `(A_d, B_d)` with
//! `loss_q = -sum_d [A_d log R_hat_d + B_d log(1 - R_hat_d)]`.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::click_sim::{ClickLog, Impression};
use crate::data::{Dataset, Query};
use crate::error::{Error, Result};
use crate::estimators::ItemClickStats;
use crate::mlp::{sigmoid, Activation, Mlp, Optimizer, OptimizerState};
use crate::propensity::PropensityTable;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeLoss {
    /// Trust-bias corrected; undisplayed items do not contribute.
    New,
    /// Inverse-propensity-weighted click labels over every item.
    Prev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Queries per gradient step.
    pub batch_size: usize,
    pub clamp_eps: f64,
    pub hidden: Vec<usize>,
    pub loss: CeLoss,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(0.01),
            epochs: 100,
            batch_size: 16,
            clamp_eps: 1e-6,
            hidden: vec![32, 32],
            loss: CeLoss::New,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps={} outside (0, 0.5)", self.clamp_eps)));
        }
        Ok(())
    }
}

/// Per-item loss coefficients of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTarget {
    pub query_id: u64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn query_target(imps: &[&Impression], prop: &PropensityTable, loss: CeLoss) -> Result<QueryTarget> {
    let query_id = imps.first().ok_or(Error::EmptyLog)?.query_id;
    let n_items = prop.n_items();
    let stats = ItemClickStats::collect(imps, &prop.bias_hat, n_items)?;
    let n = imps.len() as f64;
    let (a, b) = (0..n_items)
        .map(|d| {
            let r = prop.rho_hat[d];
            match loss {
                CeLoss::New => (
                    (stats.clicks[d] - stats.beta_sum[d]) / (n * r),
                    (stats.alpha_sum[d] + stats.beta_sum[d] - stats.clicks[d]) / (n * r),
                ),
                CeLoss::Prev => {
                    let w = stats.clicks[d] / (n * r);
                    (w, 1.0 - w)
                }
            }
        })
        .unzip();
    Ok(QueryTarget { query_id, a, b })
}

/// One target per query of the log, in query-id order.
pub fn regression_targets(
    log: &ClickLog,
    props: &BTreeMap<u64, PropensityTable>,
    loss: CeLoss,
) -> Result<Vec<QueryTarget>> {
    log.by_query(None)
        .iter()
        .map(|(&qid, imps)| {
            let prop = props
                .get(&qid)
                .ok_or(Error::MissingPropensity { query_id: qid, item: 0 })?;
            query_target(imps, prop, loss)
        })
        .collect()
}

pub fn target_loss(target: &QueryTarget, r_hat: &[f64]) -> f64 {
    -target
        .a
        .iter()
        .zip(&target.b)
        .zip(r_hat)
        .map(|((a, b), r)| a * r.ln() + b * (1.0 - r).ln())
        .sum::<f64>()
}

/// Maps a raw model output into `(eps, 1 - eps)`.
pub fn squash(score: f64, eps: f64) -> f64 {
    eps + (1.0 - 2.0 * eps) * sigmoid(score)
}

pub fn predict(model: &Mlp, query: &Query, eps: f64) -> Result<Vec<f64>> {
    query
        .items
        .iter()
        .map(|i| Ok(squash(model.forward(&i.features)?, eps)))
        .collect()
}

fn lookup<'a>(queries: &HashMap<u64, &'a Query>, qid: u64) -> Result<&'a Query> {
    queries
        .get(&qid)
        .copied()
        .ok_or_else(|| Error::Domain(format!("query {qid} is in the log but not in the dataset")))
}

/// Mean loss over `targets` and its gradient with respect to the model
/// parameters.
pub fn loss_and_gradient(
    model: &Mlp,
    targets: &[&QueryTarget],
    queries: &HashMap<u64, &Query>,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let scale = 1.0 / targets.len().max(1) as f64;
    for t in targets {
        let q = lookup(queries, t.query_id)?;
        if q.len() != t.a.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: t.a.len(),
            });
        }
        for (d, item) in q.items.iter().enumerate() {
            let (a, b) = (t.a[d], t.b[d]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let s = model.forward(&item.features)?;
            let sig = sigmoid(s);
            let r = eps + (1.0 - 2.0 * eps) * sig;
            loss -= scale * (a * r.ln() + b * (1.0 - r).ln());
            let dr_ds = (1.0 - 2.0 * eps) * sig * (1.0 - sig);
            let dl_dr = -(a / r - b / (1.0 - r));
            model.accumulate_gradient(&item.features, scale * dl_dr * dr_ds, &mut grad)?;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct RegressionOutcome {
    pub model: Mlp,
    /// `R_hat` for every query of the dataset, every partition.
    pub estimates: BTreeMap<u64, Vec<f64>>,
    /// Mean training loss after each epoch; entry 0 is before training.
    pub loss_trace: Vec<f64>,
}

fn index(dataset: &Dataset) -> HashMap<u64, &Query> {
    dataset.all_queries().map(|q| (q.query_id, q)).collect()
}

/// Minibatch training of a fresh MLP on the log's queries.
pub fn train_regression(
    log: &ClickLog,
    props: &BTreeMap<u64, PropensityTable>,
    dataset: &Dataset,
    config: &RegressionConfig,
) -> Result<RegressionOutcome> {
    config.validate()?;
    let targets = regression_targets(log, props, config.loss)?;
    if targets.is_empty() {
        return Err(Error::EmptyLog);
    }
    let queries = index(dataset);
    let mut rng = seeded(config.seed);
    let mut sizes = vec![dataset.feature_dim];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut model = Mlp::new(&sizes, Activation::Tanh, &mut rng)?;
    let mut state = OptimizerState::new(config.optimizer, model.num_params());
    let all: Vec<&QueryTarget> = targets.iter().collect();
    let eps = config.clamp_eps;
    let mut loss_trace = vec![loss_and_gradient(&model, &all, &queries, eps)?.0];
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let batch: Vec<&QueryTarget> = batch.iter().map(|&i| &targets[i]).collect();
            let (_, grad) = loss_and_gradient(&model, &batch, &queries, eps)?;
            state.step(model.params_mut(), &grad);
        }
        let (loss, _) = loss_and_gradient(&model, &all, &queries, eps)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence(format!(
                "regression loss {loss} after epoch {}; learning rate {} may be too high",
                epoch + 1,
                config.optimizer.learning_rate()
            )));
        }
        loss_trace.push(loss);
    }
    let estimates = dataset
        .all_queries()
        .map(|q| Ok((q.query_id, predict(&model, q, eps)?)))
        .collect::<Result<_>>()?;
    Ok(RegressionOutcome {
        model,
        estimates,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_sim::{simulate_session, BiasParams};
    use crate::data::{Item, Partition};
    use crate::estimators::{ce_loss_new_query, ce_loss_prev_query};
    use crate::policy::{sample_ranking, RankMarginals};
    use crate::propensity::estimate_logging_marginals;
    use crate::rng::seeded;

    fn query(qid: u64, feats: &[[f64; 2]], labels: &[u8]) -> Query {
        Query {
            query_id: qid,
            items: feats
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (f, &l))| Item::new(i, f.to_vec(), l).unwrap())
                .collect(),
        }
    }

    fn log_for(q: &Query, params: &BiasParams, n: usize, k: usize, seed: u64) -> Vec<Impression> {
        let mut rng = seeded(seed);
        let scores = vec![0.0; q.len()];
        (0..n)
            .map(|_| {
                let ranking = sample_ranking(&scores, k, &mut rng);
                let clicks = simulate_session(&ranking, &q.relevance(), params, &mut rng);
                Impression {
                    query_id: q.query_id,
                    partition: Partition::Train,
                    ranking,
                    clicks,
                }
            })
            .collect()
    }

    #[test]
    fn target_loss_matches_estimator_losses() {
        let q = query(3, &[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.2, 0.1]], &[4, 0, 2, 1]);
        let p = BiasParams::top5();
        let imps = log_for(&q, &p, 50, 2, 1);
        let refs: Vec<&Impression> = imps.iter().collect();
        let m = estimate_logging_marginals(&refs, 3, 4).unwrap();
        let prop = PropensityTable::new(&m.marginals, &p, 0.2).unwrap();
        let r_hat = [0.3, 0.6, 0.1, 0.9];
        let t = query_target(&refs, &prop, CeLoss::New).unwrap();
        assert!((target_loss(&t, &r_hat) - ce_loss_new_query(&refs, &prop, &r_hat).unwrap()).abs() < 1e-12);
        let t = query_target(&refs, &prop, CeLoss::Prev).unwrap();
        assert!((target_loss(&t, &r_hat) - ce_loss_prev_query(&refs, &prop, &r_hat).unwrap()).abs() < 1e-12);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let q = query(0, &[[0.3, -1.0], [1.2, 0.4], [-0.5, 0.9]], &[3, 1, 0]);
        let p = BiasParams::top5();
        let imps = log_for(&q, &p, 40, 2, 2);
        let refs: Vec<&Impression> = imps.iter().collect();
        let m = estimate_logging_marginals(&refs, 0, 3).unwrap();
        let prop = PropensityTable::new(&m.marginals, &p, 0.1).unwrap();
        let mut rng = seeded(5);
        let mut model = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng).unwrap();
        let queries: HashMap<u64, &Query> = [(0, &q)].into_iter().collect();
        for loss in [CeLoss::New, CeLoss::Prev] {
            let t = query_target(&refs, &prop, loss).unwrap();
            let (_, grad) = loss_and_gradient(&model, &[&t], &queries, 1e-6).unwrap();
            let h = 1e-6;
            for i in 0..model.num_params() {
                let orig = model.params()[i];
                model.params_mut()[i] = orig + h;
                let up = loss_and_gradient(&model, &[&t], &queries, 1e-6).unwrap().0;
                model.params_mut()[i] = orig - h;
                let down = loss_and_gradient(&model, &[&t], &queries, 1e-6).unwrap().0;
                model.params_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(grad[i], fd) <= 1e-4 || (grad[i] - fd).abs() < 1e-9, "param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn undisplayed_item_gets_no_gradient() {
        let q = query(0, &[[1.0, 0.0], [0.0, 1.0]], &[4, 2]);
        let imps = vec![Impression {
            query_id: 0,
            partition: Partition::Train,
            ranking: vec![0],
            clicks: vec![true],
        }];
        let refs: Vec<&Impression> = imps.iter().collect();
        let p = BiasParams::top5();
        let prop = PropensityTable::new(&RankMarginals::from_ranking(&[0], 2, 5), &p, 0.1).unwrap();
        let t = query_target(&refs, &prop, CeLoss::New).unwrap();
        assert_eq!((t.a[1], t.b[1]), (0.0, 0.0));
        // with only the undisplayed item in the query, the gradient vanishes
        let t_only = QueryTarget {
            query_id: 0,
            a: vec![0.0, t.a[1]],
            b: vec![0.0, t.b[1]],
        };
        let mut rng = seeded(0);
        let model = Mlp::new(&[2, 3, 1], Activation::Tanh, &mut rng).unwrap();
        let queries: HashMap<u64, &Query> = [(0, &q)].into_iter().collect();
        let (loss, grad) = loss_and_gradient(&model, &[&t_only], &queries, 1e-6).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn recovers_relevance_without_bias() {
        let feats = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.5, -1.0]];
        let labels = [4, 0, 2, 1, 3];
        let q = query(0, &feats, &labels);
        let p = BiasParams::unbiased(5);
        let log = ClickLog::new(log_for(&q, &p, 100_000, 5, 9));
        let refs: Vec<&Impression> = log.impressions.iter().collect();
        let m = estimate_logging_marginals(&refs, 0, 5).unwrap();
        let props: BTreeMap<u64, PropensityTable> =
            [(0, PropensityTable::new(&m.marginals, &p, 0.01).unwrap())].into_iter().collect();
        let dataset = Dataset::from_partitions(vec![q.clone()], vec![], vec![]).unwrap();
        let config = RegressionConfig {
            optimizer: Optimizer::adam(0.02),
            epochs: 1500,
            batch_size: 1,
            ..Default::default()
        };
        let out = train_regression(&log, &props, &dataset, &config).unwrap();
        for (r_hat, r) in out.estimates[&0].iter().zip(q.relevance()) {
            assert!((r_hat - r).abs() < 0.05, "{r_hat} vs {r}");
        }
        let first = out.loss_trace[0];
        let last = *out.loss_trace.last().unwrap();
        assert!(last < first);
    }

    #[test]
    fn estimates_within_clamp_bounds() {
        let q = query(0, &[[50.0, -50.0], [-50.0, 50.0]], &[4, 0]);
        let mut rng = seeded(1);
        let mut model = Mlp::new(&[2, 2, 1], Activation::Tanh, &mut rng).unwrap();
        for p in model.params_mut() {
            *p *= 100.0;
        }
        for r in predict(&model, &q, 1e-6).unwrap() {
            assert!(r >= 1e-6 && r <= 1.0 - 1e-6);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let q = query(0, &[[1.0, f64::NAN], [0.0, 1.0]], &[4, 0]);
        let p = BiasParams::top5();
        let log = ClickLog::new(log_for(&q, &p, 100, 2, 4));
        let refs: Vec<&Impression> = log.impressions.iter().collect();
        let m = estimate_logging_marginals(&refs, 0, 2).unwrap();
        let props: BTreeMap<u64, PropensityTable> =
            [(0, PropensityTable::new(&m.marginals, &p, 0.1).unwrap())].into_iter().collect();
        let dataset = Dataset::from_partitions(vec![q], vec![], vec![]).unwrap();
        let config = RegressionConfig {
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_regression(&log, &props, &dataset, &config),
            Err(Error::Divergence(_))
        ));
    }
}
