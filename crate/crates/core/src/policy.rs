//! Plackett-Luce ranking policies over MLP scores.
//!
//! In stochastic mode a ranking is built by drawing items without
//! replacement with probability proportional to `exp(score)`; in
//! deterministic mode items are sorted by score, ties going to the lower
//! item index.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Query};
use crate::error::{domain, Error, Result};
use crate::mlp::{Mlp, Optimizer, OptimizerState};
use crate::rng::Rng;

/// Largest query size for which marginals are enumerated exactly.
pub const EXACT_THRESHOLD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlPolicy {
    pub model: Mlp,
    pub mode: PolicyMode,
}

impl PlPolicy {
    pub fn new(model: Mlp, mode: PolicyMode) -> Self {
        Self { model, mode }
    }

    pub fn scores(&self, query: &Query) -> Result<Vec<f64>> {
        self.model
            .forward_many(query.items.iter().map(|i| i.features.as_slice()))
    }

    /// Draws (or, in deterministic mode, returns) a ranking of length
    /// `min(len, |D|)`.
    pub fn rank(&self, scores: &[f64], len: usize, rng: &mut Rng) -> Vec<usize> {
        match self.mode {
            PolicyMode::Stochastic => sample_ranking(scores, len, rng),
            PolicyMode::Deterministic => {
                let mut r = deterministic_ranking(scores);
                r.truncate(len);
                r
            }
        }
    }

    pub fn marginals(
        &self,
        scores: &[f64],
        k: usize,
        method: MarginalMethod,
        rng: &mut Rng,
    ) -> Result<RankMarginals> {
        match self.mode {
            PolicyMode::Stochastic => rank_marginals(scores, k, method, rng),
            PolicyMode::Deterministic => Ok(RankMarginals::from_ranking(
                &deterministic_ranking(scores),
                scores.len(),
                k,
            )),
        }
    }
}

/// Samples a Plackett-Luce ranking prefix via the Gumbel-max construction:
/// perturbing each score with independent Gumbel noise and sorting yields
/// exactly the sequential sampling-without-replacement distribution.
pub fn sample_ranking(scores: &[f64], len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (s - (-u.ln()).ln(), i)
        })
        .collect();
    let len = len.min(scores.len());
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(len).map(|(_, i)| i).collect()
}

/// Items sorted by descending score; ties broken by ascending index.
pub fn deterministic_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Log-probability of a ranking prefix under Plackett-Luce.
pub fn pl_log_prob(scores: &[f64], ranking: &[usize]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut remaining: Vec<bool> = vec![true; scores.len()];
    let mut lp = 0.0;
    for &d in ranking {
        let denom: f64 = scores
            .iter()
            .zip(&remaining)
            .filter(|(_, &r)| r)
            .map(|(&s, _)| (s - max).exp())
            .sum();
        lp += (scores[d] - max) - denom.ln();
        remaining[d] = false;
    }
    lp
}

/// Every ranking prefix of length `min(k, |D|)` with its Plackett-Luce
/// probability.
pub fn enumerate_rankings(scores: &[f64], k: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = scores.len();
    if n > EXACT_THRESHOLD {
        return Err(Error::TooLarge(format!(
            "{n} items exceeds the exact-enumeration threshold of {EXACT_THRESHOLD}; use Monte Carlo marginals"
        )));
    }
    let len = k.min(n);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    let mut used = vec![false; n];
    fn recurse(
        weights: &[f64],
        len: usize,
        prob: f64,
        prefix: &mut Vec<usize>,
        used: &mut [bool],
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if prefix.len() == len {
            out.push((prefix.clone(), prob));
            return;
        }
        let denom: f64 = weights
            .iter()
            .zip(used.iter())
            .filter(|(_, &u)| !u)
            .map(|(w, _)| w)
            .sum();
        for d in 0..weights.len() {
            if used[d] {
                continue;
            }
            used[d] = true;
            prefix.push(d);
            recurse(weights, len, prob * weights[d] / denom, prefix, used, out);
            prefix.pop();
            used[d] = false;
        }
    }
    recurse(&weights, len, 1.0, &mut prefix, &mut used, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMethod {
    Exact,
    MonteCarlo(usize),
}

/// Rank marginals `P(item d at rank k)` for ranks `1..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMarginals {
    /// `probs[d][k-1]`
    pub probs: Vec<Vec<f64>>,
    pub method: MarginalMethod,
}

impl RankMarginals {
    pub fn zeros(n_items: usize, k_max: usize, method: MarginalMethod) -> Self {
        Self {
            probs: vec![vec![0.0; k_max]; n_items],
            method,
        }
    }

    pub fn n_items(&self) -> usize {
        self.probs.len()
    }

    pub fn k_max(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// `k` is 1-based; ranks outside `1..=k_max` have probability 0.
    pub fn get(&self, d: usize, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.probs[d].get(k - 1).copied().unwrap_or(0.0)
    }

    pub fn from_ranking(ranking: &[usize], n_items: usize, k_max: usize) -> Self {
        Self::from_weighted_rankings(
            std::iter::once((ranking, 1.0)),
            n_items,
            k_max,
            MarginalMethod::Exact,
        )
    }

    pub fn from_weighted_rankings<'a>(
        rankings: impl IntoIterator<Item = (&'a [usize], f64)>,
        n_items: usize,
        k_max: usize,
        method: MarginalMethod,
    ) -> Self {
        let mut m = Self::zeros(n_items, k_max, method);
        for (ranking, w) in rankings {
            for (pos, &d) in ranking.iter().enumerate().take(k_max) {
                m.probs[d][pos] += w;
            }
        }
        m
    }

    /// Empirical marginals from equally weighted sampled rankings.
    pub fn from_samples(rankings: &[Vec<usize>], n_items: usize, k_max: usize) -> Self {
        let w = 1.0 / rankings.len().max(1) as f64;
        Self::from_weighted_rankings(
            rankings.iter().map(|r| (r.as_slice(), w)),
            n_items,
            k_max,
            MarginalMethod::MonteCarlo(rankings.len()),
        )
    }
}

pub fn rank_marginals(
    scores: &[f64],
    k: usize,
    method: MarginalMethod,
    rng: &mut Rng,
) -> Result<RankMarginals> {
    if k == 0 {
        return domain("K must be at least 1");
    }
    match method {
        MarginalMethod::Exact => {
            let rankings = enumerate_rankings(scores, k)?;
            Ok(RankMarginals::from_weighted_rankings(
                rankings.iter().map(|(r, p)| (r.as_slice(), *p)),
                scores.len(),
                k,
                MarginalMethod::Exact,
            ))
        }
        MarginalMethod::MonteCarlo(m) => {
            if m == 0 {
                return domain("Monte Carlo marginals need at least one sample");
            }
            let samples: Vec<Vec<usize>> =
                (0..m).map(|_| sample_ranking(scores, k, rng)).collect();
            Ok(RankMarginals::from_samples(&samples, scores.len(), k))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            optimizer: Optimizer::adam(0.01),
        }
    }
}

/// Fits a scorer by squared-error regression of `relevance_prob` on item
/// features, full batch.
pub fn fit_relevance_regressor(
    queries: &[Query],
    feature_dim: usize,
    config: &SupervisedConfig,
    rng: &mut Rng,
) -> Result<Mlp> {
    config.optimizer.validate()?;
    let mut model = Mlp::scorer(feature_dim, rng)?;
    let items: Vec<_> = queries.iter().flat_map(|q| q.items.iter()).collect();
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = OptimizerState::new(config.optimizer, model.num_params());
    let scale = 1.0 / items.len() as f64;
    for epoch in 0..config.epochs {
        let mut grad = vec![0.0; model.num_params()];
        let mut loss = 0.0;
        for item in &items {
            let pred = model.forward(&item.features)?;
            let err = pred - item.relevance_prob;
            loss += err * err * scale;
            model.accumulate_gradient(&item.features, 2.0 * err * scale, &mut grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "supervised loss became {loss} at epoch {epoch}"
            )));
        }
        state.step(model.params_mut(), &grad);
    }
    Ok(model)
}

/// The logging policy: a scorer fit on a small fraction of the training
/// queries.
pub fn fit_logging_policy(
    dataset: &Dataset,
    fraction: f64,
    mode: PolicyMode,
    config: &SupervisedConfig,
    rng: &mut Rng,
) -> Result<PlPolicy> {
    let subset = crate::data::sample_fraction(&dataset.train, fraction, rng);
    let model = fit_relevance_regressor(&subset, dataset.feature_dim, config, rng)?;
    Ok(PlPolicy::new(model, mode))
}
