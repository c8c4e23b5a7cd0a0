//! Affine click model `P(C=1 | d, k) = alpha_k * R_d + beta_k`, its
//! derivation from an examination/trust user model, and logged-session
//! simulation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Partition, Query};
use crate::error::{domain, Error, Result};
use crate::policy::PlPolicy;
use crate::rng::{self, Rng};

/// Top-5 position/trust bias from the empirical click study the experiments
/// are calibrated on.
pub const TOP5_ALPHA: [f64; 5] = [0.35, 0.53, 0.55, 0.54, 0.52];
pub const TOP5_BETA: [f64; 5] = [0.65, 0.26, 0.15, 0.11, 0.08];

const TOL: f64 = 1e-12;

/// Per-rank click-model parameters. Ranks are 1-based; every rank past the
/// display cutoff (or past the stored vectors) has `alpha = beta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    display_cutoff: usize,
}

impl BiasParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, display_cutoff: usize) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::DimensionMismatch {
                expected: alpha.len(),
                got: beta.len(),
            });
        }
        for (k, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            let ok = a.is_finite()
                && b.is_finite()
                && (-TOL..=1.0 + TOL).contains(&a)
                && (-TOL..=1.0 + TOL).contains(&b)
                && a + b <= 1.0 + TOL;
            if !ok {
                return domain(format!(
                    "rank {}: alpha={a}, beta={b} violate 0<=alpha,beta and alpha+beta<=1",
                    k + 1
                ));
            }
        }
        let mut alpha = alpha;
        let mut beta = beta;
        for k in display_cutoff..alpha.len() {
            alpha[k] = 0.0;
            beta[k] = 0.0;
        }
        for v in alpha.iter_mut().chain(beta.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            alpha,
            beta,
            display_cutoff,
        })
    }

    pub fn top5() -> Self {
        Self::new(TOP5_ALPHA.to_vec(), TOP5_BETA.to_vec(), 5).expect("constants are valid")
    }

    /// Parameters for rankings that display every item, derived from the
    /// examination/trust model with `P(O=1|k) = (1+(k-1)/5)^-2`,
    /// `eps+ = 1` and `eps- = 0.1 + 0.6/(1+k/20)`.
    pub fn full_ranking(k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return domain("K must be at least 1");
        }
        ExaminationModel::full_ranking(k_max).to_bias_params(k_max)
    }

    /// Ideal user: clicks exactly on preference, everywhere up to `k_max`.
    pub fn unbiased(k_max: usize) -> Self {
        Self::new(vec![1.0; k_max], vec![0.0; k_max], k_max).expect("valid")
    }

    pub fn display_cutoff(&self) -> usize {
        self.display_cutoff
    }

    /// Number of ranks with stored parameters.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha_vec(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta_vec(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self, k: usize) -> f64 {
        if k == 0 || k > self.display_cutoff {
            return 0.0;
        }
        self.alpha.get(k - 1).copied().unwrap_or(0.0)
    }

    pub fn beta(&self, k: usize) -> f64 {
        if k == 0 || k > self.display_cutoff {
            return 0.0;
        }
        self.beta.get(k - 1).copied().unwrap_or(0.0)
    }

    /// `alpha_k + beta_k`, the click-model position weight.
    pub fn weight(&self, k: usize) -> f64 {
        self.alpha(k) + self.beta(k)
    }

    /// Number of ranks that can be displayed and clicked.
    pub fn effective_cutoff(&self) -> usize {
        self.display_cutoff.min(self.alpha.len())
    }

    /// Interpolates toward rank-constant parameters:
    /// `z * alpha_k + (1 - z) * mean(alpha)` over the displayed ranks, and
    /// likewise for beta.
    pub fn interpolate_to_mean(&self, z: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&z) {
            return domain(format!("z={z} outside [0, 1]"));
        }
        let k = self.effective_cutoff();
        if k == 0 {
            return Ok(self.clone());
        }
        let mean_a = self.alpha[..k].iter().sum::<f64>() / k as f64;
        let mean_b = self.beta[..k].iter().sum::<f64>() / k as f64;
        let alpha = (0..self.alpha.len())
            .map(|i| if i < k { z * self.alpha[i] + (1.0 - z) * mean_a } else { 0.0 })
            .collect();
        let beta = (0..self.beta.len())
            .map(|i| if i < k { z * self.beta[i] + (1.0 - z) * mean_b } else { 0.0 })
            .collect();
        Self::new(alpha, beta, self.display_cutoff)
    }
}

/// `alpha_k * R + beta_k`, zero past the display cutoff.
pub fn click_prob(relevance_prob: f64, k: usize, params: &BiasParams) -> f64 {
    params.alpha(k) * relevance_prob + params.beta(k)
}

/// Examination/trust user model: an item is examined with `P(O=1|k)`, then
/// clicked with `eps+_k` if preferred and `eps-_k` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExaminationModel {
    pub exam_prob: Vec<f64>,
    pub eps_plus: Vec<f64>,
    pub eps_minus: Vec<f64>,
}

impl ExaminationModel {
    pub fn full_ranking(k_max: usize) -> Self {
        let ks = 1..=k_max;
        Self {
            exam_prob: ks
                .clone()
                .map(|k| (1.0 + (k as f64 - 1.0) / 5.0).powi(-2))
                .collect(),
            eps_plus: vec![1.0; k_max],
            eps_minus: ks.map(|k| 0.1 + 0.6 / (1.0 + k as f64 / 20.0)).collect(),
        }
    }

    /// `alpha_k = P(O=1|k)(eps+_k - eps-_k)`, `beta_k = P(O=1|k) eps-_k`,
    /// zero beyond `k_max`.
    pub fn to_bias_params(&self, k_max: usize) -> Result<BiasParams> {
        let n = self.exam_prob.len();
        if self.eps_plus.len() != n || self.eps_minus.len() != n {
            return domain("examination model vectors differ in length");
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for k in 0..n {
            let (o, ep, em) = (self.exam_prob[k], self.eps_plus[k], self.eps_minus[k]);
            if !(in_unit(o) && in_unit(ep) && in_unit(em)) {
                return domain(format!("rank {}: probabilities must lie in [0, 1]", k + 1));
            }
            if ep < em {
                return domain(format!(
                    "rank {}: eps+ ({ep}) < eps- ({em}) would make alpha negative",
                    k + 1
                ));
            }
            alpha.push(o * (ep - em));
            beta.push(o * em);
        }
        BiasParams::new(alpha, beta, k_max)
    }
}

/// One independent Bernoulli click per displayed position.
pub fn simulate_session(
    ranking: &[usize],
    relevance_probs: &[f64],
    params: &BiasParams,
    rng: &mut Rng,
) -> Vec<bool> {
    ranking
        .iter()
        .enumerate()
        .map(|(pos, &d)| {
            let p = click_prob(relevance_probs[d], pos + 1, params);
            p > 0.0 && rng.random::<f64>() < p
        })
        .collect()
}

mod click_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(clicks: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(clicks.iter().map(|&c| u8::from(c)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("click must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

/// One displayed ranking and its clicks.
///
/// JSON-lines layout, one object per line:
/// `{"query_id": 3, "partition": "train", "ranking": [4, 0, 2], "clicks": [0, 1, 0]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub query_id: u64,
    pub partition: Partition,
    pub ranking: Vec<usize>,
    #[serde(with = "click_bits")]
    pub clicks: Vec<bool>,
}

impl Impression {
    /// 1-based rank of `item`, if displayed.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.ranking.iter().position(|&d| d == item).map(|p| p + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.ranking.len() != self.clicks.len() {
            return domain(format!(
                "query {}: ranking has {} items but {} click flags",
                self.query_id,
                self.ranking.len(),
                self.clicks.len()
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.ranking.iter().all(|d| seen.insert(*d)) {
            return domain(format!("query {}: ranking repeats an item", self.query_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLog {
    pub impressions: Vec<Impression>,
}

impl ClickLog {
    pub fn new(impressions: Vec<Impression>) -> Self {
        Self { impressions }
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    /// Impressions grouped by query id (ascending), optionally restricted to
    /// one partition.
    pub fn by_query(&self, partition: Option<Partition>) -> BTreeMap<u64, Vec<&Impression>> {
        let mut out: BTreeMap<u64, Vec<&Impression>> = BTreeMap::new();
        for imp in &self.impressions {
            if partition.is_none_or(|p| p == imp.partition) {
                out.entry(imp.query_id).or_default().push(imp);
            }
        }
        out
    }

    pub fn filter_partition(&self, partition: Partition) -> ClickLog {
        ClickLog::new(
            self.impressions
                .iter()
                .filter(|i| i.partition == partition)
                .cloned()
                .collect(),
        )
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for imp in &self.impressions {
            serde_json::to_writer(&mut out, imp)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut impressions = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let imp: Impression = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            imp.validate().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            impressions.push(imp);
        }
        Ok(Self { impressions })
    }
}

/// How many positions a displayed ranking has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayLength {
    TopK(usize),
    Full,
}

impl DisplayLength {
    pub fn for_query(self, n_items: usize) -> usize {
        match self {
            DisplayLength::TopK(k) => k.min(n_items),
            DisplayLength::Full => n_items,
        }
    }
}

/// Queries eligible for logging, with their cached logging-policy scores.
struct LoggingPool<'a> {
    entries: Vec<(Partition, &'a Query, Vec<f64>)>,
}

impl<'a> LoggingPool<'a> {
    fn new(policy: &PlPolicy, partitions: &[(Partition, &'a [Query])]) -> Result<Self> {
        let mut entries = Vec::new();
        for (p, queries) in partitions {
            for q in queries.iter() {
                entries.push((*p, q, policy.scores(q)?));
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { entries })
    }

    fn draw(
        &self,
        policy: &PlPolicy,
        params: &BiasParams,
        display: DisplayLength,
        rng: &mut Rng,
    ) -> Impression {
        let (partition, q, scores) = &self.entries[rng.random_range(0..self.entries.len())];
        let len = display.for_query(q.len());
        let ranking = policy.rank(scores, len, rng);
        let rel: Vec<f64> = q.relevance();
        let clicks = simulate_session(&ranking, &rel, params, rng);
        Impression {
            query_id: q.query_id,
            partition: *partition,
            ranking,
            clicks,
        }
    }
}

/// Logs `n` impressions: each picks a query uniformly from the given
/// partitions, ranks it with the logging policy and simulates clicks.
pub fn collect_log(
    policy: &PlPolicy,
    partitions: &[(Partition, &[Query])],
    n: usize,
    params: &BiasParams,
    display: DisplayLength,
    rng: &mut Rng,
) -> Result<ClickLog> {
    if n == 0 {
        return Err(Error::EmptyLog);
    }
    let pool = LoggingPool::new(policy, partitions)?;
    let impressions = (0..n)
        .map(|_| pool.draw(policy, params, display, rng))
        .collect();
    Ok(ClickLog { impressions })
}

/// Parallel variant of [`collect_log`]: worker `w` draws its share from the
/// stream `derive_seed(seed, [w])` and shards are concatenated in worker
/// order, so the result depends only on `(seed, workers)`.
pub fn collect_log_parallel(
    policy: &PlPolicy,
    partitions: &[(Partition, &[Query])],
    n: usize,
    params: &BiasParams,
    display: DisplayLength,
    seed: u64,
    workers: usize,
) -> Result<ClickLog> {
    if n == 0 {
        return Err(Error::EmptyLog);
    }
    let workers = workers.max(1);
    let pool = LoggingPool::new(policy, partitions)?;
    let shards: Vec<Vec<Impression>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let share = n / workers + usize::from(w < n % workers);
            let mut rng = rng::derived(seed, &[w as u64]);
            (0..share)
                .map(|_| pool.draw(policy, params, display, &mut rng))
                .collect()
        })
        .collect();
    Ok(ClickLog {
        impressions: shards.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Item;
    use crate::mlp::{Activation, Mlp};
    use crate::policy::PolicyMode;
    use crate::rng::seeded;

    #[test]
    fn top5_click_probabilities() {
        let p = BiasParams::top5();
        assert!((click_prob(1.0, 1, &p) - 1.0).abs() < 1e-15);
        assert!((click_prob(0.0, 3, &p) - 0.15).abs() < 1e-15);
        assert_eq!(click_prob(0.7, 6, &p), 0.0);
    }

    #[test]
    fn examination_model_edge_cases() {
        let ideal = ExaminationModel {
            exam_prob: vec![1.0; 3],
            eps_plus: vec![1.0; 3],
            eps_minus: vec![0.0; 3],
        };
        let p = ideal.to_bias_params(3).unwrap();
        assert_eq!(p.alpha_vec(), &[1.0; 3]);
        assert_eq!(p.beta_vec(), &[0.0; 3]);

        let never = ExaminationModel {
            exam_prob: vec![0.0; 3],
            ..ideal.clone()
        };
        let p = never.to_bias_params(3).unwrap();
        assert!(p.alpha_vec().iter().chain(p.beta_vec()).all(|&v| v == 0.0));

        let bad = ExaminationModel {
            eps_plus: vec![0.1; 3],
            eps_minus: vec![0.5; 3],
            ..ideal
        };
        assert!(bad.to_bias_params(3).is_err());
    }

    #[test]
    fn full_ranking_first_rank() {
        let p = BiasParams::full_ranking(10).unwrap();
        let eps = 0.1 + 0.6 / 1.05;
        assert!((p.alpha(1) - (1.0 - eps)).abs() < 1e-14);
        assert!((p.beta(1) - eps).abs() < 1e-14);
        assert!((p.alpha(1) - 0.32857).abs() < 1e-5);
        assert!((p.beta(1) - 0.67143).abs() < 1e-5);
        assert_eq!(p.len(), 10);
        for k in 1..=10 {
            assert!(p.alpha(k) >= 0.0 && p.beta(k) >= 0.0 && p.weight(k) <= 1.0);
            let o = (1.0 + (k as f64 - 1.0) / 5.0).powi(-2);
            let em = 0.1 + 0.6 / (1.0 + k as f64 / 20.0);
            assert!((p.alpha(k) - o * (1.0 - em)).abs() < 1e-14);
            assert!((p.beta(k) - o * em).abs() < 1e-14);
        }
    }

    #[test]
    fn full_ranking_decays() {
        let p = BiasParams::full_ranking(200).unwrap();
        for k in 2..=200 {
            assert!(p.weight(k) < p.weight(k - 1));
        }
        assert!(p.weight(200) < 0.01);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(BiasParams::new(vec![0.7], vec![0.5], 1).is_err());
        assert!(BiasParams::new(vec![-0.1], vec![0.5], 1).is_err());
        assert!(BiasParams::new(vec![0.1, 0.2], vec![0.5], 2).is_err());
    }

    #[test]
    fn cutoff_zeroes_later_ranks() {
        let p = BiasParams::new(vec![0.5, 0.5], vec![0.1, 0.1], 1).unwrap();
        assert_eq!(p.alpha(2), 0.0);
        assert_eq!(p.beta_vec(), &[0.1, 0.0]);
    }

    #[test]
    fn no_bias_means_no_clicks() {
        let p = BiasParams::new(vec![0.0; 3], vec![0.0; 3], 3).unwrap();
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(
                simulate_session(&[0, 1, 2], &[1.0, 1.0, 1.0], &p, &mut rng),
                vec![false; 3]
            );
        }
    }

    #[test]
    fn certain_click_at_top() {
        let p = BiasParams::top5();
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert!(simulate_session(&[0, 1], &[1.0, 0.0], &p, &mut rng)[0]);
        }
    }

    #[test]
    fn empirical_click_rate_rank2() {
        let p = BiasParams::top5();
        let mut rng = seeded(3);
        let n = 1_000_000;
        let clicks = (0..n)
            .filter(|_| simulate_session(&[1, 0], &[0.5, 0.5], &p, &mut rng)[1])
            .count() as f64;
        let expect = 0.53 * 0.5 + 0.26;
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((clicks / n as f64 - expect).abs() < 3.0 * se);
    }

    #[test]
    fn interpolation_extremes() {
        let p = BiasParams::top5();
        assert_eq!(p.interpolate_to_mean(1.0).unwrap().alpha_vec(), p.alpha_vec());
        let flat = p.interpolate_to_mean(0.0).unwrap();
        let mean = TOP5_ALPHA.iter().sum::<f64>() / 5.0;
        assert!(flat.alpha_vec().iter().all(|a| (a - mean).abs() < 1e-15));
        let half = p.interpolate_to_mean(0.5).unwrap();
        assert!((half.alpha(1) - (0.5 * 0.35 + 0.5 * mean)).abs() < 1e-15);
    }

    fn tiny_query(n: usize) -> Query {
        Query {
            query_id: 9,
            items: (0..n)
                .map(|i| Item::new(i, vec![i as f64], (i % 5) as u8).unwrap())
                .collect(),
        }
    }

    fn zero_policy(mode: PolicyMode) -> PlPolicy {
        PlPolicy::new(Mlp::zeros(&[1, 4, 1], Activation::Tanh).unwrap(), mode)
    }

    #[test]
    fn collect_log_edge_cases() {
        let q = vec![tiny_query(6)];
        let params = BiasParams::top5();
        let mut rng = seeded(1);
        let policy = zero_policy(PolicyMode::Stochastic);
        let parts = [(Partition::Train, q.as_slice())];
        assert!(matches!(
            collect_log(&policy, &parts, 0, &params, DisplayLength::TopK(5), &mut rng),
            Err(Error::EmptyLog)
        ));
        let log = collect_log(&policy, &parts, 1000, &params, DisplayLength::TopK(5), &mut rng)
            .unwrap();
        assert_eq!(log.len(), 1000);
        assert!(log.impressions.iter().all(|i| i.query_id == 9 && i.ranking.len() == 5));

        let det = zero_policy(PolicyMode::Deterministic);
        let log = collect_log(&det, &parts, 50, &params, DisplayLength::TopK(5), &mut rng).unwrap();
        assert!(log.impressions.iter().all(|i| i.ranking == log.impressions[0].ranking));
    }

    #[test]
    fn partition_tags_are_kept() {
        let tr = vec![tiny_query(3)];
        let mut va = vec![tiny_query(3)];
        va[0].query_id = 10;
        let parts = [(Partition::Train, tr.as_slice()), (Partition::Validation, va.as_slice())];
        let log = collect_log(
            &zero_policy(PolicyMode::Stochastic),
            &parts,
            400,
            &BiasParams::top5(),
            DisplayLength::Full,
            &mut seeded(5),
        )
        .unwrap();
        for imp in &log.impressions {
            let expect = if imp.query_id == 9 { Partition::Train } else { Partition::Validation };
            assert_eq!(imp.partition, expect);
        }
        let val = log.filter_partition(Partition::Validation);
        assert!(val.len() > 100 && val.len() < 300);
    }

    #[test]
    fn parallel_collection_is_reproducible() {
        let q = vec![tiny_query(6)];
        let parts = [(Partition::Train, q.as_slice())];
        let policy = zero_policy(PolicyMode::Stochastic);
        let run = || {
            collect_log_parallel(&policy, &parts, 1001, &BiasParams::top5(), DisplayLength::TopK(5), 3, 4)
                .unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 1001);
        assert_eq!(a, run());
    }

    #[test]
    fn jsonl_layout() {
        let imp = Impression {
            query_id: 3,
            partition: Partition::Train,
            ranking: vec![4, 0, 2],
            clicks: vec![false, true, false],
        };
        assert_eq!(
            serde_json::to_string(&imp).unwrap(),
            r#"{"query_id":3,"partition":"train","ranking":[4,0,2],"clicks":[0,1,0]}"#
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = ClickLog::new(vec![imp]);
        log.write_jsonl(&path).unwrap();
        assert_eq!(ClickLog::read_jsonl(&path).unwrap(), log);
    }

    #[test]
    fn jsonl_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"query_id\":1,\"partition\":\"train\",\"ranking\":[0,0],\"clicks\":[0,0]}\n",
        )
        .unwrap();
        assert!(matches!(ClickLog::read_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }
}
