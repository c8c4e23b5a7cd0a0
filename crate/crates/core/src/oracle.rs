//! Exact expectations and variances on enumerable single-query instances,
//! and the closed-form bias/variance expressions they are checked against.
//!
//! An instance fixes everything except the logged impression: the logging
//! distribution is an explicit table of rankings, and each estimator is a
//! mean of iid per-impression terms. Expectations are therefore exact at
//! `N = 1` and variances scale as `1/N`.
//!
//! The closed-form variances are sums of per-item variances. Under a
//! stochastic logging policy the per-item terms of one impression are
//! correlated (items compete for ranks), so the closed forms equal
//! [`exact_itemwise_variance`], which drops the cross-item covariances.
//! [`exact_variance`] keeps them; the two coincide for deterministic
//! logging.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::click_sim::{BiasParams, Impression};
use crate::data::Partition;
use crate::error::{domain, Error, Result};
use crate::estimators::{
    ce_loss_new_query, ce_loss_prev_query, cv_query, dm_query, dr_query, ips_query, naive_query,
    R_HAT_CLAMP,
};
use crate::policy::{enumerate_rankings, MarginalMethod, RankMarginals};
use crate::propensity::{expected_alpha, omega, PropensityTable};
use crate::rng::Rng;

pub const MAX_ITEMS: usize = 6;
pub const MAX_RANKS: usize = 3;
const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleEstimator {
    Naive,
    Ips,
    Dm,
    Cv,
    Dr,
    CePrev,
    CeNew,
}

/// One query with everything the estimators need except the log.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallInstance {
    /// True preference probabilities `R_d`.
    pub relevance: Vec<f64>,
    /// True click-model parameters, at most [`MAX_RANKS`] ranks.
    pub bias: BiasParams,
    /// Logging policy as `(ranking, probability)` pairs.
    pub logging: Vec<(Vec<usize>, f64)>,
    pub bias_hat: BiasParams,
    /// Estimated logging marginals used for the propensities.
    pub logging_hat: RankMarginals,
    pub tau: f64,
    pub r_hat: Vec<f64>,
    /// Rank marginals of the evaluated policy.
    pub eval_marginals: RankMarginals,
}

impl SmallInstance {
    pub fn n_items(&self) -> usize {
        self.relevance.len()
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_items();
        let k = self.k();
        if n == 0 {
            return domain("instance has no items");
        }
        if n > MAX_ITEMS || k > MAX_RANKS {
            return Err(Error::TooLarge(format!(
                "{n} items, {k} ranks; enumeration limited to {MAX_ITEMS} items and {MAX_RANKS} ranks"
            )));
        }
        if self.bias_hat.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: self.bias_hat.len(),
            });
        }
        for (name, len) in [
            ("r_hat", self.r_hat.len()),
            ("logging_hat", self.logging_hat.n_items()),
            ("eval_marginals", self.eval_marginals.n_items()),
        ] {
            if len != n {
                return domain(format!("{name} covers {len} items, instance has {n}"));
            }
        }
        if self.relevance.iter().chain(&self.r_hat).any(|r| !(0.0..=1.0).contains(r)) {
            return domain("relevance and estimates must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return domain(format!("tau={} outside (0, 1]", self.tau));
        }
        let mut total = 0.0;
        for (ranking, p) in &self.logging {
            if *p < 0.0 || ranking.len() > k {
                return domain(format!("invalid logging entry {ranking:?} with probability {p}"));
            }
            let mut seen = vec![false; n];
            for &d in ranking {
                if d >= n || seen[d] {
                    return domain(format!("ranking {ranking:?} is not a valid prefix"));
                }
                seen[d] = true;
            }
            total += p;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return domain(format!("logging probabilities sum to {total}"));
        }
        Ok(())
    }

    /// Exact logging marginals from the table.
    pub fn logging_marginals(&self) -> RankMarginals {
        RankMarginals::from_weighted_rankings(
            self.logging.iter().map(|(r, p)| (r.as_slice(), *p)),
            self.n_items(),
            self.k(),
            MarginalMethod::Exact,
        )
    }

    /// `rho_d = E_pi0[alpha_k(d)]` under the true parameters.
    pub fn rho(&self) -> Vec<f64> {
        expected_alpha(&self.logging_marginals(), &self.bias)
    }

    pub fn propensities(&self) -> Result<PropensityTable> {
        PropensityTable::new(&self.logging_hat, &self.bias_hat, self.tau)
    }

    pub fn omega(&self) -> Vec<f64> {
        omega(&self.eval_marginals, &self.bias)
    }

    pub fn omega_hat(&self) -> Vec<f64> {
        omega(&self.eval_marginals, &self.bias_hat)
    }

    pub fn true_ecp(&self) -> f64 {
        self.omega().iter().zip(&self.relevance).map(|(w, r)| w * r).sum()
    }

    pub fn dm(&self) -> f64 {
        self.omega_hat().iter().zip(&self.r_hat).map(|(w, r)| w * r).sum()
    }

    /// Estimates clamped into the open interval the log-losses need.
    pub fn r_hat_clamped(&self) -> Vec<f64> {
        self.r_hat
            .iter()
            .map(|r| r.clamp(R_HAT_CLAMP, 1.0 - R_HAT_CLAMP))
            .collect()
    }

    /// Cross-entropy of the clamped estimates against `R`.
    pub fn true_cross_entropy(&self) -> f64 {
        self.relevance
            .iter()
            .zip(self.r_hat_clamped())
            .map(|(r, q)| -(r * q.ln() + (1.0 - r) * (1.0 - q).ln()))
            .sum()
    }

    /// Every possible single impression with its probability.
    pub fn outcomes(&self) -> Result<Vec<(Impression, f64)>> {
        self.validate()?;
        let mut out = Vec::new();
        for (ranking, p_rank) in &self.logging {
            if *p_rank == 0.0 {
                continue;
            }
            let len = ranking.len();
            for pattern in 0u32..(1 << len) {
                let mut p = *p_rank;
                let mut clicks = Vec::with_capacity(len);
                for (pos, &d) in ranking.iter().enumerate() {
                    let q = self.bias.alpha(pos + 1) * self.relevance[d] + self.bias.beta(pos + 1);
                    let c = pattern >> pos & 1 == 1;
                    p *= if c { q } else { 1.0 - q };
                    clicks.push(c);
                }
                if p > 0.0 {
                    out.push((
                        Impression {
                            query_id: 0,
                            partition: Partition::Train,
                            ranking: ranking.clone(),
                            clicks,
                        },
                        p,
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// Value of an estimator on a one-impression log, through the production
/// estimator code.
pub fn evaluate_single(est: OracleEstimator, inst: &SmallInstance, imp: &Impression) -> Result<f64> {
    let prop = inst.propensities()?;
    let w = inst.omega_hat();
    let log = [imp];
    match est {
        OracleEstimator::Naive => naive_query(&log, &w),
        OracleEstimator::Ips => ips_query(&log, &w, &prop),
        OracleEstimator::Dm => dm_query(&w, &inst.r_hat),
        OracleEstimator::Cv => cv_query(&log, &w, &prop, &inst.r_hat),
        OracleEstimator::Dr => dr_query(&log, &w, &prop, &inst.r_hat).map(|(v, _)| v),
        OracleEstimator::CePrev => ce_loss_prev_query(&log, &prop, &inst.r_hat_clamped()),
        OracleEstimator::CeNew => ce_loss_new_query(&log, &prop, &inst.r_hat_clamped()),
    }
}

/// Per-item contributions of one impression, written out independently of
/// the estimator module. They sum to [`evaluate_single`].
pub fn item_terms(est: OracleEstimator, inst: &SmallInstance, imp: &Impression) -> Result<Vec<f64>> {
    let n = inst.n_items();
    let rho_hat = inst.propensities()?.rho_hat;
    let w = inst.omega_hat();
    let r_hat = match est {
        OracleEstimator::CePrev | OracleEstimator::CeNew => inst.r_hat_clamped(),
        _ => inst.r_hat.clone(),
    };
    let mut c = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for (pos, (&d, &click)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
        c[d] = if click { 1.0 } else { 0.0 };
        a[d] = inst.bias_hat.alpha(pos + 1);
        b[d] = inst.bias_hat.beta(pos + 1);
    }
    Ok((0..n)
        .map(|d| {
            let ratio = w[d] / rho_hat[d];
            match est {
                OracleEstimator::Naive => w[d] * c[d],
                OracleEstimator::Ips => ratio * (c[d] - b[d]),
                OracleEstimator::Dm => w[d] * r_hat[d],
                OracleEstimator::Cv => ratio * a[d] * r_hat[d],
                OracleEstimator::Dr => w[d] * r_hat[d] + ratio * (c[d] - a[d] * r_hat[d] - b[d]),
                OracleEstimator::CePrev => {
                    let s = c[d] / rho_hat[d];
                    -(s * r_hat[d].ln() + (1.0 - s) * (1.0 - r_hat[d]).ln())
                }
                OracleEstimator::CeNew => {
                    -((c[d] - b[d]) * r_hat[d].ln() + (a[d] + b[d] - c[d]) * (1.0 - r_hat[d]).ln())
                        / rho_hat[d]
                }
            }
        })
        .collect())
}

/// Exact expectation of the estimator over the logging distribution and
/// click noise. Independent of `N`.
pub fn exact_expectation(est: OracleEstimator, inst: &SmallInstance) -> Result<f64> {
    let mut e = 0.0;
    for (imp, p) in inst.outcomes()? {
        e += p * evaluate_single(est, inst, &imp)?;
    }
    Ok(e)
}

fn check_n(n: usize) -> Result<f64> {
    if n == 0 {
        return domain("N must be at least 1");
    }
    Ok(n as f64)
}

/// Exact variance of the estimator computed from `n` iid impressions.
pub fn exact_variance(est: OracleEstimator, inst: &SmallInstance, n: usize) -> Result<f64> {
    let n = check_n(n)?;
    let outcomes = inst.outcomes()?;
    let values = outcomes
        .iter()
        .map(|(imp, p)| Ok((evaluate_single(est, inst, imp)?, *p)))
        .collect::<Result<Vec<_>>>()?;
    let mean: f64 = values.iter().map(|(v, p)| v * p).sum();
    let var: f64 = values.iter().map(|(v, p)| p * (v - mean).powi(2)).sum();
    Ok(var / n)
}

/// Sum over items of the exact variance of each item's term, ignoring
/// covariance between items of the same impression.
pub fn exact_itemwise_variance(est: OracleEstimator, inst: &SmallInstance, n: usize) -> Result<f64> {
    let n = check_n(n)?;
    let outcomes = inst.outcomes()?;
    let terms = outcomes
        .iter()
        .map(|(imp, p)| Ok((item_terms(est, inst, imp)?, *p)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for d in 0..inst.n_items() {
        let mean: f64 = terms.iter().map(|(t, p)| p * t[d]).sum();
        total += terms.iter().map(|(t, p)| p * (t[d] - mean).powi(2)).sum::<f64>();
    }
    Ok(total / n)
}

/// First and second moments of one item's click and of the parameters at
/// its logged rank, taken over the logging table (undisplayed: all zero).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemMoments {
    pub e_c: f64,
    pub v_c: f64,
    pub e_alpha: f64,
    pub e_beta: f64,
    pub v_alpha: f64,
    pub cov_alpha_beta: f64,
    pub cov_c_alpha: f64,
    pub e_alpha_hat: f64,
    pub e_beta_hat: f64,
    pub v_alpha_hat: f64,
    pub v_beta_hat: f64,
    pub cov_c_alpha_hat: f64,
    pub cov_c_beta_hat: f64,
    pub cov_alpha_hat_beta_hat: f64,
}

/// Moments per item by enumerating the logging table; clicks enter only
/// through their conditional means given the ranking.
pub fn item_moments(inst: &SmallInstance) -> Result<Vec<ItemMoments>> {
    inst.validate()?;
    let n = inst.n_items();
    // raw sums: E[c], E[a], E[b], E[a^2], E[ab], E[ca], E[ah], E[bh], E[ah^2], E[bh^2], E[c ah], E[c bh], E[ah bh]
    let mut raw = vec![[0.0f64; 13]; n];
    for (ranking, p) in &inst.logging {
        for d in 0..n {
            let (a, b, ah, bh) = match ranking.iter().position(|&x| x == d) {
                Some(pos) => (
                    inst.bias.alpha(pos + 1),
                    inst.bias.beta(pos + 1),
                    inst.bias_hat.alpha(pos + 1),
                    inst.bias_hat.beta(pos + 1),
                ),
                None => (0.0, 0.0, 0.0, 0.0),
            };
            let ec = a * inst.relevance[d] + b;
            let vals = [
                ec,
                a,
                b,
                a * a,
                a * b,
                ec * a,
                ah,
                bh,
                ah * ah,
                bh * bh,
                ec * ah,
                ec * bh,
                ah * bh,
            ];
            for (acc, v) in raw[d].iter_mut().zip(vals) {
                *acc += p * v;
            }
        }
    }
    Ok(raw
        .iter()
        .map(|r| {
            let [ec, ea, eb, ea2, eab, eca, eah, ebh, eah2, ebh2, ecah, ecbh, eahbh] = *r;
            ItemMoments {
                e_c: ec,
                v_c: ec - ec * ec,
                e_alpha: ea,
                e_beta: eb,
                v_alpha: ea2 - ea * ea,
                cov_alpha_beta: eab - ea * eb,
                cov_c_alpha: eca - ec * ea,
                e_alpha_hat: eah,
                e_beta_hat: ebh,
                v_alpha_hat: eah2 - eah * eah,
                v_beta_hat: ebh2 - ebh * ebh,
                cov_c_alpha_hat: ecah - ec * eah,
                cov_c_beta_hat: ecbh - ec * ebh,
                cov_alpha_hat_beta_hat: eahbh - eah * ebh,
            }
        })
        .collect())
}

/// `Cov(c(d), alpha_k(d)) = R_d V[alpha_k(d)] + Cov(alpha_k(d), beta_k(d))`,
/// evaluated from the moments for comparison with `cov_c_alpha`.
pub fn click_alpha_covariance_identity(inst: &SmallInstance) -> Result<Vec<(f64, f64)>> {
    Ok(item_moments(inst)?
        .iter()
        .zip(&inst.relevance)
        .map(|(m, r)| (m.cov_c_alpha, r * m.v_alpha + m.cov_alpha_beta))
        .collect())
}

struct Closed {
    rho: Vec<f64>,
    rho_hat: Vec<f64>,
    w: Vec<f64>,
    w_hat: Vec<f64>,
    m: Vec<ItemMoments>,
}

fn closed(inst: &SmallInstance) -> Result<Closed> {
    Ok(Closed {
        rho: inst.rho(),
        rho_hat: inst.propensities()?.rho_hat,
        w: inst.omega(),
        w_hat: inst.omega_hat(),
        m: item_moments(inst)?,
    })
}

// The bias expressions are written with the factor `w_hat / rho_hat`
// distributed, i.e. `(w_hat rho - rho_hat w) R / rho_hat`, which is the same
// quantity but stays defined when `w_hat = 0`.

/// `sum_d (w_hat/rho_hat) [(rho - rho_hat w/w_hat) R + E[beta - beta_hat]]`.
pub fn closed_form_ips_bias(inst: &SmallInstance) -> Result<f64> {
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            let r = inst.relevance[d];
            ((c.w_hat[d] * c.rho[d] - c.rho_hat[d] * c.w[d]) * r
                + c.w_hat[d] * (c.m[d].e_beta - c.m[d].e_beta_hat))
                / c.rho_hat[d]
        })
        .sum())
}

/// Simplified IPS bias for correct `alpha_hat`, `beta_hat`:
/// `sum_d (w/rho_hat)(rho - rho_hat) R`.
pub fn closed_form_ips_bias_correct_params(inst: &SmallInstance) -> Result<f64> {
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| c.w[d] / c.rho_hat[d] * (c.rho[d] - c.rho_hat[d]) * inst.relevance[d])
        .sum())
}

/// `sum_d (w_hat/rho_hat) [(rho - rho_hat w/w_hat) R + (rho_hat - E[alpha_hat]) R_hat + E[beta - beta_hat]]`.
pub fn closed_form_dr_bias(inst: &SmallInstance) -> Result<f64> {
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            let m = &c.m[d];
            ((c.w_hat[d] * c.rho[d] - c.rho_hat[d] * c.w[d]) * inst.relevance[d]
                + c.w_hat[d] * (c.rho_hat[d] - m.e_alpha_hat) * inst.r_hat[d]
                + c.w_hat[d] * (m.e_beta - m.e_beta_hat))
                / c.rho_hat[d]
        })
        .sum())
}

/// Simplified DR bias for correct `alpha_hat`, `beta_hat`:
/// `sum_d (w/rho_hat)(rho - rho_hat)(R - R_hat)`.
pub fn closed_form_dr_bias_correct_params(inst: &SmallInstance) -> Result<f64> {
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            c.w[d] / c.rho_hat[d] * (c.rho[d] - c.rho_hat[d]) * (inst.relevance[d] - inst.r_hat[d])
        })
        .sum())
}

/// `1/N sum_d (w_hat^2/rho_hat^2)(V[c] + V[beta_hat] - 2 Cov(c, beta_hat))`.
pub fn closed_form_ips_variance(inst: &SmallInstance, n: usize) -> Result<f64> {
    let n = check_n(n)?;
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            let m = &c.m[d];
            (c.w_hat[d] / c.rho_hat[d]).powi(2) * (m.v_c + m.v_beta_hat - 2.0 * m.cov_c_beta_hat)
        })
        .sum::<f64>()
        / n)
}

/// `1/N sum_d (w_hat^2/rho_hat^2)(V[c] + V[beta_hat] + R_hat^2 V[alpha_hat]
///   - 2 (Cov(c, beta_hat) + R_hat (Cov(c, alpha_hat) - Cov(beta_hat, alpha_hat))))`.
pub fn closed_form_dr_variance(inst: &SmallInstance, n: usize) -> Result<f64> {
    let n = check_n(n)?;
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            let m = &c.m[d];
            let rh = inst.r_hat[d];
            (c.w_hat[d] / c.rho_hat[d]).powi(2)
                * (m.v_c + m.v_beta_hat + rh * rh * m.v_alpha_hat
                    - 2.0 * (m.cov_c_beta_hat + rh * (m.cov_c_alpha_hat - m.cov_alpha_hat_beta_hat)))
        })
        .sum::<f64>()
        / n)
}

/// DR variance for correct parameters with the click/alpha covariance
/// replaced through the identity in [`click_alpha_covariance_identity`].
pub fn closed_form_dr_variance_correct_params(inst: &SmallInstance, n: usize) -> Result<f64> {
    let n = check_n(n)?;
    let c = closed(inst)?;
    Ok((0..inst.n_items())
        .map(|d| {
            let m = &c.m[d];
            let (r, rh) = (inst.relevance[d], inst.r_hat[d]);
            (c.w[d] / c.rho_hat[d]).powi(2)
                * (m.v_c + m.v_beta_hat - 2.0 * m.cov_c_beta_hat
                    + (rh * rh - 2.0 * rh * r) * m.v_alpha)
        })
        .sum::<f64>()
        / n)
}

/// Bias of the trust-corrected cross-entropy estimator relative to the
/// true cross-entropy, both at the clamped estimates.
pub fn closed_form_ce_bias(inst: &SmallInstance) -> Result<f64> {
    let c = closed(inst)?;
    let r_hat = inst.r_hat_clamped();
    Ok((0..inst.n_items())
        .map(|d| {
            let m = &c.m[d];
            let (r, q, rho, rho_h) = (inst.relevance[d], r_hat[d], c.rho[d], c.rho_hat[d]);
            (((rho_h - rho) * r + m.e_beta_hat - m.e_beta) * q.ln()
                + (m.e_beta - m.e_beta_hat - m.e_alpha_hat + rho_h + (rho - rho_h) * r)
                    * (1.0 - q).ln())
                / rho_h
        })
        .sum())
}

/// How the random-instance generator draws each input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOptions {
    /// `alpha_hat = alpha`, `beta_hat = beta`.
    pub correct_bias: bool,
    /// `logging_hat` equals the exact logging marginals.
    pub correct_logging: bool,
    /// `tau <= min_d rho_d`, and every item can be displayed.
    pub ideal_tau: bool,
    pub r_hat: RHatMode,
    pub logging: LoggingKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RHatMode {
    Uniform,
    /// Uniform on `[0, min(2 R_d, 1)]`.
    WithinTwiceR,
    Exact,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoggingKind {
    PlackettLuce,
    Table,
    Deterministic,
    Any,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            correct_bias: false,
            correct_logging: false,
            ideal_tau: false,
            r_hat: RHatMode::Uniform,
            logging: LoggingKind::Any,
        }
    }
}

fn random_bias(rng: &mut Rng, k: usize, positive_alpha: bool) -> BiasParams {
    let beta: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.5)).collect();
    let alpha = beta
        .iter()
        .map(|b| {
            let lo = if positive_alpha { 0.05 } else { 0.0 };
            rng.random_range(lo..(1.0 - b).max(lo + 1e-3))
        })
        .collect();
    BiasParams::new(alpha, beta, k).expect("sampled within invariants")
}

fn random_prefix(rng: &mut Rng, n: usize, len: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..n).collect();
    items.shuffle(rng);
    items.truncate(len);
    items
}

fn random_logging(rng: &mut Rng, kind: LoggingKind, n: usize, k: usize, cover_all: bool) -> Result<Vec<(Vec<usize>, f64)>> {
    let len = k.min(n);
    let kind = match kind {
        LoggingKind::Any => match rng.random_range(0..4) {
            0 | 1 => LoggingKind::PlackettLuce,
            2 => LoggingKind::Table,
            _ => LoggingKind::Deterministic,
        },
        other => other,
    };
    // deterministic logging can only display every item when len == n
    let kind = if cover_all && kind == LoggingKind::Deterministic && len < n {
        LoggingKind::PlackettLuce
    } else {
        kind
    };
    Ok(match kind {
        LoggingKind::Deterministic => vec![(random_prefix(rng, n, len), 1.0)],
        LoggingKind::Table => {
            let m = rng.random_range(2..=5);
            let mut rankings: Vec<Vec<usize>> = (0..m).map(|_| random_prefix(rng, n, len)).collect();
            if cover_all {
                // append rankings led by each item so every item is displayed
                rankings.extend((0..n).map(|d| {
                    let mut r = random_prefix(rng, n, len);
                    if let Some(pos) = r.iter().position(|&x| x == d) {
                        r.swap(0, pos);
                    } else {
                        r[0] = d;
                    }
                    r
                }));
            }
            let weights: Vec<f64> = rankings.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            rankings
                .into_iter()
                .zip(weights)
                .map(|(r, w)| (r, w / total))
                .collect()
        }
        _ => {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            enumerate_rankings(&scores, len)?
        }
    })
}

fn random_marginals(rng: &mut Rng, n: usize, k: usize) -> Result<RankMarginals> {
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    crate::policy::rank_marginals(&scores, k, MarginalMethod::Exact, rng)
}

/// Draws a random enumerable instance.
pub fn random_instance(rng: &mut Rng, opts: InstanceOptions) -> Result<SmallInstance> {
    let n = rng.random_range(1..=MAX_ITEMS);
    let k = rng.random_range(1..=MAX_RANKS);
    let relevance: Vec<f64> = (0..n).map(|_| rng.random_range(0..=4) as f64 * 0.25).collect();
    let bias = random_bias(rng, k, opts.ideal_tau);
    let bias_hat = if opts.correct_bias {
        bias.clone()
    } else {
        random_bias(rng, k, false)
    };
    let logging = random_logging(rng, opts.logging, n, k, opts.ideal_tau)?;
    let exact = RankMarginals::from_weighted_rankings(
        logging.iter().map(|(r, p)| (r.as_slice(), *p)),
        n,
        k,
        MarginalMethod::Exact,
    );
    let logging_hat = if opts.correct_logging {
        exact.clone()
    } else {
        // convex mix with an unrelated policy's marginals
        let other = random_marginals(rng, n, k)?;
        let lam: f64 = rng.random_range(0.0..1.0);
        let mut m = exact.clone();
        for (row, orow) in m.probs.iter_mut().zip(&other.probs) {
            for (p, o) in row.iter_mut().zip(orow) {
                *p = lam * *p + (1.0 - lam) * o;
            }
        }
        m
    };
    let tau = if opts.ideal_tau {
        let min_rho = expected_alpha(&exact, &bias).into_iter().fold(f64::INFINITY, f64::min);
        if !(min_rho > 0.0) {
            return domain("ideal clipping needs every item to have positive propensity");
        }
        min_rho * rng.random_range(0.05..=1.0)
    } else {
        rng.random_range(0.01..=1.0)
    };
    let r_hat = relevance
        .iter()
        .map(|&r| match opts.r_hat {
            RHatMode::Uniform => rng.random_range(0.0..=1.0),
            RHatMode::WithinTwiceR => rng.random_range(0.0..=1.0) * (2.0 * r).min(1.0),
            RHatMode::Exact => r,
            RHatMode::Zero => 0.0,
        })
        .collect();
    let eval_marginals = random_marginals(rng, n, k)?;
    let inst = SmallInstance {
        relevance,
        bias,
        logging,
        bias_hat,
        logging_hat,
        tau,
        r_hat,
        eval_marginals,
    };
    inst.validate()?;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn one_item(alpha: f64, beta: f64, r: f64) -> SmallInstance {
        let bias = BiasParams::new(vec![alpha], vec![beta], 1).unwrap();
        let marg = RankMarginals::from_ranking(&[0], 1, 1);
        SmallInstance {
            relevance: vec![r],
            bias: bias.clone(),
            logging: vec![(vec![0], 1.0)],
            bias_hat: bias,
            logging_hat: marg.clone(),
            tau: 1.0,
            r_hat: vec![0.5],
            eval_marginals: marg,
        }
    }

    #[test]
    fn beta_only_clicks_have_bernoulli_variance() {
        let inst = one_item(0.0, 0.3, 0.7);
        // omega_hat = 0.3, rho_hat = tau = 1: the IPS term is 0.3 (c - 0.3)
        // with c ~ Bernoulli(0.3)
        let expect = 0.09 * 0.3 * 0.7;
        let v = exact_variance(OracleEstimator::Ips, &inst, 1).unwrap();
        assert!((v - expect).abs() < 1e-15);
        assert!((exact_variance(OracleEstimator::Ips, &inst, 4).unwrap() - expect / 4.0).abs() < 1e-15);
    }

    #[test]
    fn oversized_instance_refused() {
        let mut inst = one_item(0.5, 0.1, 0.5);
        inst.relevance = vec![0.5; 7];
        assert!(matches!(inst.validate(), Err(Error::TooLarge(_))));
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let mut rng = seeded(2);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, InstanceOptions::default()).unwrap();
            let total: f64 = inst.outcomes().unwrap().iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn item_terms_sum_to_estimator_value() {
        let mut rng = seeded(3);
        let all = [
            OracleEstimator::Naive,
            OracleEstimator::Ips,
            OracleEstimator::Dm,
            OracleEstimator::Cv,
            OracleEstimator::Dr,
            OracleEstimator::CePrev,
            OracleEstimator::CeNew,
        ];
        for _ in 0..30 {
            let inst = random_instance(&mut rng, InstanceOptions::default()).unwrap();
            for (imp, _) in inst.outcomes().unwrap() {
                for est in all {
                    let v = evaluate_single(est, &inst, &imp).unwrap();
                    let s: f64 = item_terms(est, &inst, &imp).unwrap().iter().sum();
                    assert!((v - s).abs() < 1e-10, "{est:?}: {v} vs {s}");
                }
            }
        }
    }

    #[test]
    fn deterministic_logging_variances_coincide() {
        let mut rng = seeded(4);
        let opts = InstanceOptions {
            logging: LoggingKind::Deterministic,
            ..Default::default()
        };
        for _ in 0..30 {
            let inst = random_instance(&mut rng, opts).unwrap();
            for est in [OracleEstimator::Ips, OracleEstimator::Dr] {
                let a = exact_variance(est, &inst, 3).unwrap();
                let b = exact_itemwise_variance(est, &inst, 3).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ideal_generator_satisfies_clipping_condition() {
        let mut rng = seeded(5);
        let opts = InstanceOptions {
            correct_bias: true,
            correct_logging: true,
            ideal_tau: true,
            ..Default::default()
        };
        for _ in 0..50 {
            let inst = random_instance(&mut rng, opts).unwrap();
            let rho = inst.rho();
            let rho_hat = inst.propensities().unwrap().rho_hat;
            for (a, b) in rho.iter().zip(&rho_hat) {
                assert!(*a >= inst.tau);
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn within_twice_r_respects_bound() {
        let mut rng = seeded(6);
        let opts = InstanceOptions {
            r_hat: RHatMode::WithinTwiceR,
            ..Default::default()
        };
        for _ in 0..50 {
            let inst = random_instance(&mut rng, opts).unwrap();
            for (r, q) in inst.relevance.iter().zip(&inst.r_hat) {
                assert!(*q >= 0.0 && *q <= 2.0 * r + 1e-15);
            }
        }
    }
}
