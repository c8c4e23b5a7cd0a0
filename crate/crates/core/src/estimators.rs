//! Ranking-metric estimators from logged clicks.
//!
//! The target is ECP, the expected number of clicks on preferred items:
//! `sum_d omega_d R_d` with `omega_d = E_pi[alpha_k(d) + beta_k(d)]`.
//! Per query, with `N` impressions, clipped propensities `rho_hat`, bias
//! estimates `alpha_hat`/`beta_hat` and regression estimates `r_hat`:
//!
//! - naive: `1/N sum_i sum_d omega_hat_d c_i(d)`
//! - IPS: `1/N sum_i sum_d omega_hat_d / rho_hat_d (c_i(d) - beta_hat_k)`
//! - DM: `sum_d omega_hat_d r_hat_d`
//! - CV: `1/N sum_i sum_d omega_hat_d / rho_hat_d alpha_hat_k r_hat_d`
//! - DR: `DM + 1/N sum_i sum_d omega_hat_d / rho_hat_d (c_i(d) - alpha_hat_k r_hat_d - beta_hat_k)`
//!
//! An item that was not displayed in impression `i` has `c_i(d) = 0` and
//! `alpha_hat = beta_hat = 0` there. Multi-query estimates are the uniform
//! average of the per-query values over queries present in the log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::click_sim::{BiasParams, ClickLog, Impression};
use crate::data::Query;
use crate::error::{domain, Error, Result};
use crate::policy::{MarginalMethod, PlPolicy, RankMarginals};
use crate::propensity::{omega, PropensityTable};
use crate::rng::Rng;

/// Bounds applied to regression estimates before they enter a log.
pub const R_HAT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    Ips,
    Dm,
    Cv,
    Dr,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Ips => "ips",
            EstimatorKind::Dm => "dm",
            EstimatorKind::Cv => "cv",
            EstimatorKind::Dr => "dr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrComponents {
    pub dm: f64,
    pub ips: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub value: f64,
    pub n_used: usize,
    pub n_queries: usize,
    pub components: Option<DrComponents>,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Relevance estimates for one query's items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionEstimates {
    pub r_hat: Vec<f64>,
}

impl RegressionEstimates {
    pub fn new(r_hat: Vec<f64>) -> Result<Self> {
        if r_hat.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return domain("regression estimates must lie in [0, 1]");
        }
        Ok(Self { r_hat })
    }

    pub fn clamped(&self, eps: f64) -> Self {
        Self {
            r_hat: self.r_hat.iter().map(|r| r.clamp(eps, 1.0 - eps)).collect(),
        }
    }
}

fn check_items(prop: &PropensityTable, imps: &[&Impression], n_items: usize) -> Result<()> {
    for imp in imps {
        for &d in &imp.ranking {
            if d >= prop.n_items() || d >= n_items {
                return Err(Error::MissingPropensity {
                    query_id: imp.query_id,
                    item: d,
                });
            }
        }
    }
    Ok(())
}

fn nonempty(imps: &[&Impression]) -> Result<f64> {
    if imps.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(imps.len() as f64)
}

/// IPS value for one query.
pub fn ips_query(imps: &[&Impression], omega_hat: &[f64], prop: &PropensityTable) -> Result<f64> {
    let n = nonempty(imps)?;
    check_items(prop, imps, omega_hat.len())?;
    let mut total = 0.0;
    for imp in imps {
        for (pos, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
            let corrected = f64::from(u8::from(c)) - prop.beta_hat(pos + 1);
            total += omega_hat[d] / prop.rho_hat[d] * corrected;
        }
    }
    Ok(total / n)
}

/// Naive value for one query: IPS with every propensity at 1 and no trust
/// correction.
pub fn naive_query(imps: &[&Impression], omega_hat: &[f64]) -> Result<f64> {
    let n = nonempty(imps)?;
    let mut total = 0.0;
    for imp in imps {
        for (&d, &c) in imp.ranking.iter().zip(&imp.clicks) {
            let w = omega_hat.get(d).ok_or(Error::MissingPropensity {
                query_id: imp.query_id,
                item: d,
            })?;
            if c {
                total += w;
            }
        }
    }
    Ok(total / n)
}

pub fn dm_query(omega_hat: &[f64], r_hat: &[f64]) -> Result<f64> {
    if omega_hat.len() != r_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: omega_hat.len(),
            got: r_hat.len(),
        });
    }
    Ok(omega_hat.iter().zip(r_hat).map(|(w, r)| w * r).sum())
}

pub fn cv_query(
    imps: &[&Impression],
    omega_hat: &[f64],
    prop: &PropensityTable,
    r_hat: &[f64],
) -> Result<f64> {
    let n = nonempty(imps)?;
    check_items(prop, imps, r_hat.len())?;
    let mut total = 0.0;
    for imp in imps {
        for (pos, &d) in imp.ranking.iter().enumerate() {
            total += omega_hat[d] / prop.rho_hat[d] * prop.alpha_hat(pos + 1) * r_hat[d];
        }
    }
    Ok(total / n)
}

/// DR value for one query with its DM/IPS/CV components. The value is
/// accumulated directly from the click residuals, not from the components.
pub fn dr_query(
    imps: &[&Impression],
    omega_hat: &[f64],
    prop: &PropensityTable,
    r_hat: &[f64],
) -> Result<(f64, DrComponents)> {
    let n = nonempty(imps)?;
    check_items(prop, imps, r_hat.len())?;
    let dm = dm_query(omega_hat, r_hat)?;
    let mut correction = 0.0;
    for imp in imps {
        for (pos, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
            let k = pos + 1;
            let residual =
                f64::from(u8::from(c)) - prop.alpha_hat(k) * r_hat[d] - prop.beta_hat(k);
            correction += omega_hat[d] / prop.rho_hat[d] * residual;
        }
    }
    let components = DrComponents {
        dm,
        ips: ips_query(imps, omega_hat, prop)?,
        cv: cv_query(imps, omega_hat, prop, r_hat)?,
    };
    Ok((dm + correction / n, components))
}

/// Per-item sums over one query's impressions of the displayed clicks and of
/// the bias estimates at the displayed ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemClickStats {
    pub n_impressions: usize,
    pub clicks: Vec<f64>,
    pub alpha_sum: Vec<f64>,
    pub beta_sum: Vec<f64>,
}

impl ItemClickStats {
    pub fn collect(imps: &[&Impression], bias_hat: &BiasParams, n_items: usize) -> Result<Self> {
        let mut s = Self {
            n_impressions: imps.len(),
            clicks: vec![0.0; n_items],
            alpha_sum: vec![0.0; n_items],
            beta_sum: vec![0.0; n_items],
        };
        for imp in imps {
            for (pos, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
                if d >= n_items {
                    return Err(Error::MissingPropensity {
                        query_id: imp.query_id,
                        item: d,
                    });
                }
                if c {
                    s.clicks[d] += 1.0;
                }
                s.alpha_sum[d] += bias_hat.alpha(pos + 1);
                s.beta_sum[d] += bias_hat.beta(pos + 1);
            }
        }
        Ok(s)
    }

    pub fn n_items(&self) -> usize {
        self.clicks.len()
    }
}

/// Per-item DR relevance estimates
/// `mu_d = r_hat_d + 1/(N rho_hat_d) sum_i (c_i(d) - alpha_hat_k r_hat_d - beta_hat_k)`,
/// so that `sum_d omega_hat_d mu_d` equals the DR estimate.
pub fn per_item_mu(imps: &[&Impression], prop: &PropensityTable, r_hat: &[f64]) -> Result<Vec<f64>> {
    let n = nonempty(imps)?;
    let stats = ItemClickStats::collect(imps, &prop.bias_hat, r_hat.len())?;
    if prop.n_items() != r_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: prop.n_items(),
            got: r_hat.len(),
        });
    }
    Ok(mu_from_stats(&stats, &prop.rho_hat, r_hat, n))
}

pub(crate) fn mu_from_stats(stats: &ItemClickStats, rho_hat: &[f64], r_hat: &[f64], n: f64) -> Vec<f64> {
    (0..stats.n_items())
        .map(|d| {
            r_hat[d]
                + (stats.clicks[d] - stats.alpha_sum[d] * r_hat[d] - stats.beta_sum[d])
                    / (n * rho_hat[d])
        })
        .collect()
}

/// Per-item relevance targets whose `omega_hat`-weighted sum equals the IPS
/// estimate.
pub fn per_item_ips(imps: &[&Impression], prop: &PropensityTable) -> Result<Vec<f64>> {
    per_item_mu(imps, prop, &vec![0.0; prop.n_items()])
}

/// Per-item click-through rates: the naive estimator's relevance targets.
pub fn per_item_naive(imps: &[&Impression], n_items: usize) -> Result<Vec<f64>> {
    let n = nonempty(imps)?;
    let stats = ItemClickStats::collect(imps, &BiasParams::unbiased(0), n_items)?;
    Ok(stats.clicks.iter().map(|c| c / n).collect())
}

fn check_open_unit(r_hat: &[f64]) -> Result<()> {
    if let Some(r) = r_hat.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return domain(format!(
            "cross-entropy needs regression estimates strictly inside (0, 1), got {r}; clamp first"
        ));
    }
    Ok(())
}

/// Earlier cross-entropy estimator: inverse-propensity-weighted clicks as
/// soft labels over every item of the query.
pub fn ce_loss_prev_query(imps: &[&Impression], prop: &PropensityTable, r_hat: &[f64]) -> Result<f64> {
    let n = nonempty(imps)?;
    check_open_unit(r_hat)?;
    check_items(prop, imps, r_hat.len())?;
    let mut total = 0.0;
    for imp in imps {
        let mut clicked = vec![false; r_hat.len()];
        for (&d, &c) in imp.ranking.iter().zip(&imp.clicks) {
            clicked[d] = c;
        }
        for (d, &r) in r_hat.iter().enumerate() {
            let w = f64::from(u8::from(clicked[d])) / prop.rho_hat[d];
            total += w * r.ln() + (1.0 - w) * (1.0 - r).ln();
        }
    }
    Ok(-total / n)
}

/// Trust-bias corrected cross-entropy estimator. Items not displayed in an
/// impression contribute nothing to it.
pub fn ce_loss_new_query(imps: &[&Impression], prop: &PropensityTable, r_hat: &[f64]) -> Result<f64> {
    let n = nonempty(imps)?;
    check_open_unit(r_hat)?;
    check_items(prop, imps, r_hat.len())?;
    let mut total = 0.0;
    for imp in imps {
        for (pos, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
            let k = pos + 1;
            let c = f64::from(u8::from(c));
            let (a, b) = (prop.alpha_hat(k), prop.beta_hat(k));
            total += ((c - b) * r_hat[d].ln() + (a + b - c) * (1.0 - r_hat[d]).ln()) / prop.rho_hat[d];
        }
    }
    Ok(-total / n)
}

/// Cross-entropy of the estimates against the true preference
/// probabilities.
pub fn true_cross_entropy(relevance: &[f64], r_hat: &[f64]) -> Result<f64> {
    check_open_unit(r_hat)?;
    Ok(-relevance
        .iter()
        .zip(r_hat)
        .map(|(r, q)| r * q.ln() + (1.0 - r) * (1.0 - q).ln())
        .sum::<f64>())
}

/// Per-query estimator inputs: position weights of the evaluated policy,
/// propensities and regression estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInputs {
    pub omega_hat: Vec<f64>,
    pub prop: PropensityTable,
    pub r_hat: Vec<f64>,
}

pub type EstimatorInputs = BTreeMap<u64, QueryInputs>;

fn inputs_for<'a>(inputs: &'a EstimatorInputs, qid: u64) -> Result<&'a QueryInputs> {
    inputs
        .get(&qid)
        .ok_or(Error::MissingPropensity { query_id: qid, item: 0 })
}

/// Evaluates one estimator over a log, averaging per-query values
/// uniformly over the queries present.
pub fn estimate(kind: EstimatorKind, log: &ClickLog, inputs: &EstimatorInputs) -> Result<EstimateReport> {
    let groups = log.by_query(None);
    if groups.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut sum = 0.0;
    let mut comps = DrComponents { dm: 0.0, ips: 0.0, cv: 0.0 };
    for (&qid, imps) in &groups {
        let qi = inputs_for(inputs, qid)?;
        let v = match kind {
            EstimatorKind::Naive => naive_query(imps, &qi.omega_hat)?,
            EstimatorKind::Ips => ips_query(imps, &qi.omega_hat, &qi.prop)?,
            EstimatorKind::Dm => dm_query(&qi.omega_hat, &qi.r_hat)?,
            EstimatorKind::Cv => cv_query(imps, &qi.omega_hat, &qi.prop, &qi.r_hat)?,
            EstimatorKind::Dr => {
                let (v, c) = dr_query(imps, &qi.omega_hat, &qi.prop, &qi.r_hat)?;
                comps.dm += c.dm;
                comps.ips += c.ips;
                comps.cv += c.cv;
                v
            }
        };
        sum += v;
    }
    let q = groups.len() as f64;
    Ok(EstimateReport {
        estimator: kind,
        value: sum / q,
        n_used: log.len(),
        n_queries: groups.len(),
        components: (kind == EstimatorKind::Dr).then(|| DrComponents {
            dm: comps.dm / q,
            ips: comps.ips / q,
            cv: comps.cv / q,
        }),
    })
}

/// ECP of a ranking distribution given its rank marginals.
pub fn ecp_from_marginals(marginals: &RankMarginals, relevance: &[f64], bias: &BiasParams) -> f64 {
    omega(marginals, bias)
        .iter()
        .zip(relevance)
        .map(|(w, r)| w * r)
        .sum()
}

/// True ECP of a policy averaged uniformly over `queries`.
pub fn true_ecp(
    policy: &PlPolicy,
    queries: &[Query],
    bias: &BiasParams,
    method: MarginalMethod,
    rng: &mut Rng,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = bias.effective_cutoff();
    let mut total = 0.0;
    for q in queries {
        let scores = policy.scores(q)?;
        let m = policy.marginals(&scores, k.max(1), method, rng)?;
        total += ecp_from_marginals(&m, &q.relevance(), bias);
    }
    Ok(total / queries.len() as f64)
}

fn dcg_discount(k: usize) -> f64 {
    1.0 / ((k as f64) + 1.0).log2()
}

fn ideal_dcg(relevance: &[f64], k: usize) -> f64 {
    let mut sorted = relevance.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, r)| r * dcg_discount(pos + 1))
        .sum()
}

/// NDCG@k of one ranking; 0 for a query with no relevant item.
pub fn ndcg_at_k(ranking: &[usize], relevance: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return domain("K must be at least 1");
    }
    let ideal = ideal_dcg(relevance, k);
    if ideal <= 0.0 {
        return Ok(0.0);
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &d)| relevance[d] * dcg_discount(pos + 1))
        .sum();
    Ok(dcg / ideal)
}

/// Expected NDCG@k of a ranking distribution from its rank marginals.
pub fn expected_ndcg(marginals: &RankMarginals, relevance: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return domain("K must be at least 1");
    }
    let ideal = ideal_dcg(relevance, k);
    if ideal <= 0.0 {
        return Ok(0.0);
    }
    let mut dcg = 0.0;
    for (d, &r) in relevance.iter().enumerate() {
        for rank in 1..=k {
            dcg += marginals.get(d, rank) * r * dcg_discount(rank);
        }
    }
    Ok(dcg / ideal)
}

/// Policy NDCG@k averaged uniformly over `queries`.
pub fn policy_ndcg(
    policy: &PlPolicy,
    queries: &[Query],
    k: usize,
    method: MarginalMethod,
    rng: &mut Rng,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for q in queries {
        let scores = policy.scores(q)?;
        let m = policy.marginals(&scores, k, method, rng)?;
        total += expected_ndcg(&m, &q.relevance(), k)?;
    }
    Ok(total / queries.len() as f64)
}
