//! Logging-policy rank marginals, clipped propensities and expected position
//! weights.

use serde::{Deserialize, Serialize};

use crate::click_sim::{BiasParams, Impression};
use crate::error::{domain, Error, Result};
use crate::policy::{MarginalMethod, RankMarginals};

/// Frequentist estimate of the logging policy for one query: how often each
/// item was shown at each rank, divided by the query's impression count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggingMarginals {
    pub query_id: u64,
    /// `counts[d][k-1]`
    pub counts: Vec<Vec<u64>>,
    pub n_impressions: u64,
    pub marginals: RankMarginals,
}

pub fn estimate_logging_marginals(
    impressions: &[&Impression],
    query_id: u64,
    n_items: usize,
) -> Result<LoggingMarginals> {
    let relevant: Vec<&&Impression> = impressions
        .iter()
        .filter(|i| i.query_id == query_id)
        .collect();
    if relevant.is_empty() {
        return Err(Error::NoImpressions(query_id));
    }
    let k_max = relevant.iter().map(|i| i.ranking.len()).max().unwrap_or(0);
    let mut counts = vec![vec![0u64; k_max]; n_items];
    for imp in &relevant {
        for (pos, &d) in imp.ranking.iter().enumerate() {
            if d >= n_items {
                return domain(format!(
                    "query {query_id}: item {d} out of range for {n_items} items"
                ));
            }
            counts[d][pos] += 1;
        }
    }
    let n = relevant.len() as u64;
    let probs = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / n as f64).collect())
        .collect();
    Ok(LoggingMarginals {
        query_id,
        counts,
        n_impressions: n,
        marginals: RankMarginals {
            probs,
            method: MarginalMethod::MonteCarlo(n as usize),
        },
    })
}

/// `sum_k P(d at k) * alpha_k` without clipping.
pub fn expected_alpha(marginals: &RankMarginals, bias: &BiasParams) -> Vec<f64> {
    marginals
        .probs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(pos, p)| p * bias.alpha(pos + 1))
                .sum()
        })
        .collect()
}

/// Clipped propensities `max(sum_k pi0_hat(k|d) alpha_hat_k, tau)`.
pub fn rho_hat(marginals: &RankMarginals, alpha_hat: &BiasParams, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(expected_alpha(marginals, alpha_hat)
        .into_iter()
        .map(|r| r.max(tau))
        .collect())
}

/// Expected position weight `sum_k pi(k|d) (alpha_k + beta_k)` per item.
pub fn omega(policy_marginals: &RankMarginals, bias: &BiasParams) -> Vec<f64> {
    policy_marginals
        .probs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(pos, p)| p * bias.weight(pos + 1))
                .sum()
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return domain(format!("clipping threshold tau={tau} outside (0, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSetting {
    TopK,
    Full,
}

/// `min(1, 10/sqrt(N))` for top-k displays, `min(1, 100/sqrt(N))` for full
/// rankings.
pub fn clip_schedule(n: usize, setting: ClipSetting) -> Result<f64> {
    if n == 0 {
        return domain("N must be at least 1");
    }
    let c = match setting {
        ClipSetting::TopK => 10.0,
        ClipSetting::Full => 100.0,
    };
    Ok((c / (n as f64).sqrt()).min(1.0))
}

/// Clipped propensities for one query together with the bias estimates and
/// threshold that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    pub rho_hat: Vec<f64>,
    pub tau: f64,
    pub bias_hat: BiasParams,
}

impl PropensityTable {
    /// From logging marginals, either estimated from the log or computed
    /// from a known logging policy.
    pub fn new(marginals: &RankMarginals, bias_hat: &BiasParams, tau: f64) -> Result<Self> {
        Ok(Self {
            rho_hat: rho_hat(marginals, bias_hat, tau)?,
            tau,
            bias_hat: bias_hat.clone(),
        })
    }

    /// Propensities fixed to 1 for every item (no position correction).
    pub fn unit(n_items: usize, bias_hat: &BiasParams) -> Self {
        Self {
            rho_hat: vec![1.0; n_items],
            tau: 1.0,
            bias_hat: bias_hat.clone(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.rho_hat.len()
    }

    pub fn alpha_hat(&self, k: usize) -> f64 {
        self.bias_hat.alpha(k)
    }

    pub fn beta_hat(&self, k: usize) -> f64 {
        self.bias_hat.beta(k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_sim::{simulate_session, BiasParams};
    use crate::data::Partition;
    use crate::policy::{rank_marginals, sample_ranking};
    use crate::rng::seeded;

    fn imp(ranking: Vec<usize>) -> Impression {
        let n = ranking.len();
        Impression {
            query_id: 1,
            partition: Partition::Train,
            ranking,
            clicks: vec![false; n],
        }
    }

    #[test]
    fn deterministic_logging_marginals_are_indicators() {
        let imps: Vec<Impression> = (0..100).map(|_| imp(vec![2, 0, 1])).collect();
        let refs: Vec<&Impression> = imps.iter().collect();
        let m = estimate_logging_marginals(&refs, 1, 4).unwrap();
        assert_eq!(m.n_impressions, 100);
        assert_eq!(m.marginals.probs[2], vec![1.0, 0.0, 0.0]);
        assert_eq!(m.marginals.probs[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(m.marginals.probs[3], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn query_without_impressions_is_error() {
        let imps = [imp(vec![0])];
        let refs: Vec<&Impression> = imps.iter().collect();
        assert!(matches!(
            estimate_logging_marginals(&refs, 2, 1),
            Err(Error::NoImpressions(2))
        ));
    }

    #[test]
    fn stochastic_two_items_balanced() {
        let mut rng = seeded(8);
        let n = 100_000;
        let imps: Vec<Impression> = (0..n).map(|_| imp(sample_ranking(&[0.0, 0.0], 2, &mut rng))).collect();
        let refs: Vec<&Impression> = imps.iter().collect();
        let m = estimate_logging_marginals(&refs, 1, 2).unwrap();
        let se = (0.25 / n as f64).sqrt();
        assert!((m.marginals.get(0, 1) - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn rho_hat_examples() {
        let top5 = BiasParams::top5();
        let at_rank2 = RankMarginals::from_ranking(&[1, 0], 3, 5);
        let rho = rho_hat(&at_rank2, &top5, 0.1).unwrap();
        assert!((rho[0] - 0.53).abs() < 1e-15);
        assert_eq!(rho[2], 0.1);
        let rho = rho_hat(&at_rank2, &top5, 0.9).unwrap();
        assert_eq!(rho[0], 0.9);
        let rho = rho_hat(&at_rank2, &top5, 1.0).unwrap();
        assert!(rho.iter().all(|&r| r == 1.0));
        assert!(rho_hat(&at_rank2, &top5, 0.0).is_err());
        assert!(rho_hat(&at_rank2, &top5, 1.5).is_err());
    }

    #[test]
    fn omega_examples() {
        let top5 = BiasParams::top5();
        let m = RankMarginals::from_ranking(&[0], 2, 5);
        let w = omega(&m, &top5);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        let mut half = RankMarginals::zeros(1, 5, MarginalMethod::Exact);
        half.probs[0][0] = 0.5;
        half.probs[0][1] = 0.5;
        assert!((omega(&half, &top5)[0] - 0.895).abs() < 1e-15);
    }

    #[test]
    fn clip_schedule_examples() {
        assert!((clip_schedule(10_000, ClipSetting::TopK).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(clip_schedule(10_000, ClipSetting::Full).unwrap(), 1.0);
        assert!((clip_schedule(100_000_000, ClipSetting::TopK).unwrap() - 1e-3).abs() < 1e-15);
        assert!(clip_schedule(0, ClipSetting::TopK).is_err());
    }

    #[test]
    fn correct_inputs_recover_true_rho_and_omega() {
        let mut rng = seeded(3);
        let scores = [0.3, -0.4, 0.9, 0.0];
        let params = BiasParams::new(vec![0.6, 0.4, 0.3], vec![0.2, 0.1, 0.05], 3).unwrap();
        let m = rank_marginals(&scores, 3, MarginalMethod::Exact, &mut rng).unwrap();
        let rho = expected_alpha(&m, &params);
        let tau = rho.iter().cloned().fold(f64::INFINITY, f64::min);
        let rho_h = rho_hat(&m, &params, tau).unwrap();
        for (a, b) in rho.iter().zip(&rho_h) {
            assert!((a - b).abs() < 1e-15);
        }
        let _ = simulate_session(&[0, 1], &[0.5, 0.5], &params, &mut rng);
    }
}
