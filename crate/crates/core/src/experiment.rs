//! End-to-end experiment pipeline: dataset, logging policy, click log,
//! optional bias estimation, relevance regression, policy training and test
//! evaluation, repeated over a grid of log sizes, estimators and seeds.
//!
//! Result CSV columns, in order:
//! `setting,dataset,estimator,n,seed,repeat,tau_multiplier,z,ecp,ndcg_at_5,wall_time_s,status`.
//! `ecp` and `ndcg_at_5` are empty when the cell failed; `status` is `ok`
//! or `failed: <reason>`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias_em::{em_estimate_bias, EmConfig};
use crate::click_sim::{collect_log_parallel, BiasParams, ClickLog, DisplayLength};
use crate::data::{generate_synthetic_split, load_letor, load_letor_splits, Dataset, Partition, SyntheticConfig};
use crate::error::{Error, Result};
use crate::estimators::{policy_ndcg, true_ecp};
use crate::ltr::{train_policy, LtrConfig, LtrData, LtrEstimator};
use crate::mlp::Mlp;
use crate::policy::{fit_logging_policy, MarginalMethod, PolicyMode, SupervisedConfig};
use crate::propensity::{estimate_logging_marginals, ClipSetting, PropensityTable};
use crate::regression::{train_regression, RegressionConfig};
use crate::rng::{derive_seed, derived};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CLTR_OUTPUT_DIR";

const STREAM_LOGGING: u64 = 1;
const STREAM_LOG: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Top-5 display with the true bias parameters.
    Top5Known,
    /// Top-5 display with parameters estimated by EM.
    Top5Estimated,
    /// Deterministic logging of full rankings with known parameters.
    FullKnown,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Top5Known => "top5_known",
            Setting::Top5Estimated => "top5_estimated",
            Setting::FullKnown => "full_known",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "top5_known" => Setting::Top5Known,
            "top5_estimated" => Setting::Top5Estimated,
            "full_known" => Setting::FullKnown,
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        })
    }

    fn display(self) -> DisplayLength {
        match self {
            Setting::FullKnown => DisplayLength::Full,
            _ => DisplayLength::TopK(5),
        }
    }

    pub fn clip(self) -> ClipSetting {
        match self {
            Setting::FullKnown => ClipSetting::Full,
            _ => ClipSetting::TopK,
        }
    }

    fn logging_mode(self) -> PolicyMode {
        match self {
            Setting::FullKnown => PolicyMode::Deterministic,
            _ => PolicyMode::Stochastic,
        }
    }

    /// True click-model parameters for queries of up to `max_items` items.
    pub fn true_bias(self, max_items: usize) -> Result<BiasParams> {
        match self {
            Setting::FullKnown => BiasParams::full_ranking(max_items),
            _ => Ok(BiasParams::top5()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Letor,
}

/// Where queries come from. The size and generator fields apply to
/// synthetic data; `path` to LETOR data, either a single file split
/// 60/20/20 or a directory holding `train.txt`, `vali.txt` and `test.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub sizes: [usize; 3],
    pub items_per_query: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub generator: SyntheticConfig,
    pub path: Option<PathBuf>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            sizes: [200, 60, 60],
            items_per_query: 20,
            feature_dim: 10,
            seed: 0,
            generator: SyntheticConfig::default(),
            path: None,
        }
    }
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match (self.kind, &self.path) {
            (DatasetKind::Synthetic, _) => format!("synthetic-{}", self.seed),
            (DatasetKind::Letor, Some(p)) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "letor".into()),
            (DatasetKind::Letor, None) => "letor".into(),
        }
    }

    pub fn load(&self, normalize: bool) -> Result<Dataset> {
        let ds = match (self.kind, &self.path) {
            (DatasetKind::Synthetic, _) => generate_synthetic_split(
                self.sizes,
                self.items_per_query,
                self.feature_dim,
                self.seed,
                &self.generator,
            )?,
            (DatasetKind::Letor, Some(p)) if p.is_dir() => {
                load_letor_splits(p.join("train.txt"), p.join("vali.txt"), p.join("test.txt"))?
            }
            (DatasetKind::Letor, Some(p)) => load_letor(p)?,
            (DatasetKind::Letor, None) => return Err(Error::Config("LETOR dataset needs a path".into())),
        };
        Ok(if normalize { ds.min_max_normalized() } else { ds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Min-max feature scaling fit on the training partition.
    pub normalize_features: bool,
    pub setting: Setting,
    pub n: Vec<usize>,
    pub estimators: Vec<LtrEstimator>,
    pub repeats: usize,
    pub seed: u64,
    /// Scales the clipping threshold schedule.
    pub tau_multiplier: f64,
    /// Interpolation of the bias estimates toward their rank average;
    /// 1 keeps them unchanged.
    pub z: f64,
    /// Share of the training queries the logging policy is fit on.
    pub logging_fraction: f64,
    /// Multiplies the logging scorer's outputs before Plackett-Luce
    /// sampling; regression outputs near `[0, 1]` are otherwise almost
    /// uniform.
    pub logging_score_scale: f64,
    pub logging: SupervisedConfig,
    pub regression: RegressionConfig,
    pub ltr: LtrConfig,
    pub em: EmConfig,
    /// Sampled rankings per test query for the final evaluation.
    pub eval_samples: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Record elapsed seconds per cell; off keeps outputs bit-identical.
    pub record_wall_time: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            normalize_features: true,
            setting: Setting::Top5Known,
            n: vec![1_000, 10_000, 100_000, 1_000_000],
            estimators: vec![
                LtrEstimator::Naive,
                LtrEstimator::Ips,
                LtrEstimator::Dm,
                LtrEstimator::Dr,
                LtrEstimator::FullInfo,
            ],
            repeats: 5,
            seed: 0,
            tau_multiplier: 1.0,
            z: 1.0,
            logging_fraction: 0.01,
            logging_score_scale: 30.0,
            logging: SupervisedConfig::default(),
            regression: RegressionConfig::default(),
            ltr: LtrConfig::default(),
            em: EmConfig::default(),
            eval_samples: 1000,
            threads: 0,
            record_wall_time: true,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.z) {
            return Err(Error::Config(format!("z={} outside [0, 1]", self.z)));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::Config("N list must be non-empty and positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        if !(self.tau_multiplier > 0.0 && self.tau_multiplier.is_finite()) {
            return Err(Error::Config("tau multiplier must be positive".into()));
        }
        if !(self.logging_score_scale > 0.0 && self.logging_score_scale.is_finite()) {
            return Err(Error::Config("logging score scale must be positive".into()));
        }
        if !(self.logging_fraction > 0.0 && self.logging_fraction <= 1.0) {
            return Err(Error::Config("logging fraction must lie in (0, 1]".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be at least 1".into()));
        }
        self.regression.validate()?;
        self.ltr.validate()?;
        if self.setting == Setting::Top5Estimated {
            self.em.validate()?;
        }
        Ok(())
    }

    /// Parses TOML text, then applies `key.path=value` overrides. Values
    /// are read as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configured output directory unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Clipping threshold for `n` impressions, scaled by `multiplier`.
pub fn clip_threshold(n: usize, setting: ClipSetting, multiplier: f64) -> Result<f64> {
    if n == 0 || !(multiplier > 0.0) {
        return Err(Error::Config("N and the tau multiplier must be positive".into()));
    }
    let c = match setting {
        ClipSetting::TopK => 10.0,
        ClipSetting::Full => 100.0,
    };
    Ok((multiplier * c / (n as f64).sqrt()).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub dataset: String,
    pub estimator: String,
    pub n: usize,
    pub seed: u64,
    pub repeat: usize,
    pub tau_multiplier: f64,
    pub z: f64,
    pub ecp: Option<f64>,
    pub ndcg_at_5: Option<f64>,
    pub wall_time_s: f64,
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn sort_key(&self) -> (&str, &str, usize, f64, f64, usize) {
        (&self.setting, &self.estimator, self.n, self.tau_multiplier, self.z, self.repeat)
    }
}

fn cmp_rows(a: &ResultRow, b: &ResultRow) -> Ordering {
    let (ka, kb) = (a.sort_key(), b.sort_key());
    ka.0.cmp(kb.0)
        .then(ka.1.cmp(kb.1))
        .then(ka.2.cmp(&kb.2))
        .then(ka.3.total_cmp(&kb.3))
        .then(ka.4.total_cmp(&kb.4))
        .then(ka.5.cmp(&kb.5))
}

pub fn write_rows(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation of the successful rows of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting: String,
    pub estimator: String,
    pub n: usize,
    pub tau_multiplier: f64,
    pub z: f64,
    pub runs: usize,
    pub failed: usize,
    pub ecp_mean: Option<f64>,
    pub ecp_sd: Option<f64>,
    pub ndcg_at_5_mean: Option<f64>,
    pub ndcg_at_5_sd: Option<f64>,
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(m), sd)
}

/// Groups sorted rows into cells that differ only in the repeat.
pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let key = rows[start].sort_key();
        let mut end = start;
        while end < rows.len() {
            let k = rows[end].sort_key();
            if (k.0, k.1, k.2) != (key.0, key.1, key.2) || k.3 != key.3 || k.4 != key.4 {
                break;
            }
            end += 1;
        }
        let cell = &rows[start..end];
        let ok: Vec<&ResultRow> = cell.iter().filter(|r| r.is_ok()).collect();
        let ecp: Vec<f64> = ok.iter().filter_map(|r| r.ecp).collect();
        let ndcg: Vec<f64> = ok.iter().filter_map(|r| r.ndcg_at_5).collect();
        let (ecp_mean, ecp_sd) = mean_sd(&ecp);
        let (ndcg_at_5_mean, ndcg_at_5_sd) = mean_sd(&ndcg);
        out.push(CellSummary {
            setting: key.0.to_string(),
            estimator: key.1.to_string(),
            n: key.2,
            tau_multiplier: key.3,
            z: key.4,
            runs: cell.len(),
            failed: cell.len() - ok.len(),
            ecp_mean,
            ecp_sd,
            ndcg_at_5_mean,
            ndcg_at_5_sd,
        });
        start = end;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasEstimateRecord {
    pub n: usize,
    pub repeat: usize,
    pub seed: u64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Sorted rows.
    pub rows: Vec<ResultRow>,
    pub summary: Vec<CellSummary>,
    pub bias_estimates: Vec<BiasEstimateRecord>,
}

impl RunOutput {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| !r.is_ok())
    }

    /// Writes `<stem>.csv`, `<stem>_summary.json` and, when EM ran,
    /// `<stem>_bias.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        write_rows(&csv_path, &self.rows)?;
        std::fs::write(
            dir.join(format!("{stem}_summary.json")),
            serde_json::to_string_pretty(&self.summary)?,
        )?;
        if !self.bias_estimates.is_empty() {
            std::fs::write(
                dir.join(format!("{stem}_bias.json")),
                serde_json::to_string_pretty(&self.bias_estimates)?,
            )?;
        }
        Ok(csv_path)
    }
}

/// One grid point of the outer loop: a log size, a repeat and the knobs
/// that change how the log is used.
#[derive(Debug, Clone, Copy)]
struct Unit {
    n: usize,
    repeat: usize,
    tau_multiplier: f64,
    z: f64,
}

/// Artifacts shared by every estimator of a unit.
struct Shared {
    log: ClickLog,
    props: BTreeMap<u64, PropensityTable>,
    r_hat: Option<BTreeMap<u64, Vec<f64>>>,
    bias_hat: BiasParams,
}

struct Context<'a> {
    config: &'a RunConfig,
    dataset: &'a Dataset,
    dataset_name: String,
    true_bias: BiasParams,
}

impl Context<'_> {
    fn repeat_seed(&self, repeat: usize) -> u64 {
        derive_seed(self.config.seed, &[repeat as u64])
    }

    fn shared(&self, unit: Unit) -> Result<(Shared, Option<BiasEstimateRecord>)> {
        let cfg = self.config;
        let seed = self.repeat_seed(unit.repeat);
        let setting = cfg.setting;
        let mut rng = derived(seed, &[STREAM_LOGGING]);
        let mut logging =
            fit_logging_policy(self.dataset, cfg.logging_fraction, setting.logging_mode(), &cfg.logging, &mut rng)?;
        logging.model.scale_output(cfg.logging_score_scale);
        let partitions = [
            (Partition::Train, self.dataset.train.as_slice()),
            (Partition::Validation, self.dataset.validation.as_slice()),
        ];
        let workers = rayon::current_num_threads().clamp(1, 8);
        let log = collect_log_parallel(
            &logging,
            &partitions,
            unit.n,
            &self.true_bias,
            setting.display(),
            derive_seed(seed, &[STREAM_LOG, unit.n as u64]),
            workers,
        )?;

        let mut record = None;
        let estimated = match setting {
            Setting::Top5Estimated => {
                let em_cfg = EmConfig {
                    seed: derive_seed(seed, &[STREAM_TRAIN, unit.n as u64]),
                    ..cfg.em.clone()
                };
                let out = em_estimate_bias(&log.filter_partition(Partition::Train), self.dataset, 5, &em_cfg)?;
                record = Some(BiasEstimateRecord {
                    n: unit.n,
                    repeat: unit.repeat,
                    seed,
                    alpha: out.bias_hat.alpha_vec().to_vec(),
                    beta: out.bias_hat.beta_vec().to_vec(),
                });
                out.bias_hat
            }
            _ => self.true_bias.clone(),
        };
        let bias_hat = estimated.interpolate_to_mean(unit.z)?;

        let tau = clip_threshold(unit.n, setting.clip(), unit.tau_multiplier)?;
        let mut props = BTreeMap::new();
        for (qid, imps) in log.by_query(None) {
            let q = self
                .dataset
                .find_query(qid)
                .ok_or_else(|| Error::Domain(format!("logged query {qid} not in dataset")))?;
            let m = estimate_logging_marginals(&imps, qid, q.len())?;
            props.insert(qid, PropensityTable::new(&m.marginals, &bias_hat, tau)?);
        }

        let r_hat = if cfg.estimators.iter().any(|e| e.needs_regression()) {
            let reg_cfg = RegressionConfig {
                seed: derive_seed(seed, &[STREAM_TRAIN, unit.n as u64, 1]),
                ..cfg.regression.clone()
            };
            let out = train_regression(&log.filter_partition(Partition::Train), &props, self.dataset, &reg_cfg)?;
            Some(out.estimates)
        } else {
            None
        };
        Ok((
            Shared {
                log,
                props,
                r_hat,
                bias_hat,
            },
            record,
        ))
    }

    fn cell(&self, unit: Unit, shared: &Shared, est: LtrEstimator) -> Result<(f64, f64)> {
        let cfg = self.config;
        let seed = self.repeat_seed(unit.repeat);
        // full information ignores the log, so its seeds ignore N
        let train_seed = derive_seed(seed, &[STREAM_TRAIN, est as u64]);
        let mut init_rng = derived(train_seed, &[0]);
        let init = Mlp::scorer(self.dataset.feature_dim, &mut init_rng)?;
        let data = LtrData {
            dataset: self.dataset,
            log: &shared.log,
            props: &shared.props,
            r_hat: shared.r_hat.as_ref(),
            bias_hat: &shared.bias_hat,
            true_bias: &self.true_bias,
        };
        let ltr_cfg = LtrConfig {
            estimator: est,
            seed: train_seed,
            ..cfg.ltr.clone()
        };
        let trained = train_policy(init, &data, &ltr_cfg)?;
        log::debug!(
            "n={} repeat={} {}: best step {} of {}, validation {:.4}",
            unit.n,
            unit.repeat,
            est.name(),
            trained.best_step,
            trained.trace.len() - 1,
            trained.best_validation
        );
        let method = MarginalMethod::MonteCarlo(cfg.eval_samples);
        let eval_seed = derive_seed(cfg.seed, &[STREAM_EVAL]);
        let ecp = true_ecp(&trained.policy, &self.dataset.test, &self.true_bias, method, &mut derived(eval_seed, &[0]))?;
        let ndcg = policy_ndcg(&trained.policy, &self.dataset.test, 5, method, &mut derived(eval_seed, &[1]))?;
        Ok((ecp, ndcg))
    }

    fn row(&self, unit: Unit, est: LtrEstimator, outcome: Result<(f64, f64)>, secs: f64) -> ResultRow {
        let (ecp, ndcg, status) = match outcome {
            Ok((e, n)) => (Some(e), Some(n), "ok".to_string()),
            Err(e) => (None, None, format!("failed: {e}")),
        };
        ResultRow {
            setting: self.config.setting.name().to_string(),
            dataset: self.dataset_name.clone(),
            estimator: est.name().to_string(),
            n: unit.n,
            seed: self.repeat_seed(unit.repeat),
            repeat: unit.repeat,
            tau_multiplier: unit.tau_multiplier,
            z: unit.z,
            ecp,
            ndcg_at_5: ndcg,
            wall_time_s: if self.config.record_wall_time { secs } else { 0.0 },
            status,
        }
    }

    fn run_unit(&self, unit: Unit) -> (Vec<ResultRow>, Option<BiasEstimateRecord>) {
        let start = Instant::now();
        let shared = self.shared(unit);
        let shared_secs = start.elapsed().as_secs_f64();
        let (shared, record) = match shared {
            Ok(s) => s,
            Err(e) => {
                log::warn!("n={} repeat={}: {e}", unit.n, unit.repeat);
                let msg = e.to_string();
                let rows = self
                    .config
                    .estimators
                    .iter()
                    .map(|&est| self.row(unit, est, Err(Error::Domain(msg.clone())), shared_secs))
                    .collect();
                return (rows, None);
            }
        };
        let rows = self
            .config
            .estimators
            .par_iter()
            .map(|&est| {
                let t = Instant::now();
                let out = self.cell(unit, &shared, est);
                if let Err(e) = &out {
                    log::warn!("n={} repeat={} {}: {e}", unit.n, unit.repeat, est.name());
                }
                self.row(unit, est, out, shared_secs + t.elapsed().as_secs_f64())
            })
            .collect();
        (rows, record)
    }
}

fn run_units(config: &RunConfig, units: Vec<Unit>) -> Result<RunOutput> {
    config.validate()?;
    let dataset = config.dataset.load(config.normalize_features)?;
    let true_bias = config.setting.true_bias(dataset.max_items_per_query())?;
    let ctx = Context {
        config,
        dataset: &dataset,
        dataset_name: config.dataset.name(),
        true_bias,
    };
    let work = || -> Vec<(Vec<ResultRow>, Option<BiasEstimateRecord>)> {
        units.par_iter().map(|&u| ctx.run_unit(u)).collect()
    };
    let results = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    let mut rows = Vec::new();
    let mut bias_estimates = Vec::new();
    for (r, b) in results {
        rows.extend(r);
        bias_estimates.extend(b);
    }
    rows.sort_by(cmp_rows);
    bias_estimates.sort_by_key(|b| (b.n, b.repeat));
    Ok(RunOutput {
        summary: summarize(&rows),
        rows,
        bias_estimates,
    })
}

fn grid(config: &RunConfig, taus: &[f64], zs: &[f64]) -> Vec<Unit> {
    let mut units = Vec::new();
    for &n in &config.n {
        for &tau_multiplier in taus {
            for &z in zs {
                for repeat in 0..config.repeats {
                    units.push(Unit {
                        n,
                        repeat,
                        tau_multiplier,
                        z,
                    });
                }
            }
        }
    }
    units
}

/// Every (N, estimator, repeat) cell of the configuration.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    run_units(config, grid(config, &[config.tau_multiplier], &[config.z]))
}

/// Rows additionally keyed by the clipping-threshold multiplier.
pub fn sweep_clipping(config: &RunConfig, multipliers: &[f64]) -> Result<RunOutput> {
    if multipliers.is_empty() || multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::Config("tau multipliers must be positive".into()));
    }
    run_units(config, grid(config, multipliers, &[config.z]))
}

/// Rows keyed by the interpolation `z` of the bias estimates toward their
/// rank average.
pub fn sweep_bias_misspecification(config: &RunConfig, zs: &[f64]) -> Result<RunOutput> {
    if zs.is_empty() || zs.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(Error::Config("z values must lie in [0, 1]".into()));
    }
    run_units(config, grid(config, &[config.tau_multiplier], zs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    LearningCurve,
    ClipSweep,
    BiasSweep,
}

impl FigureKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "learning_curve" => FigureKind::LearningCurve,
            "clip_sweep" => FigureKind::ClipSweep,
            "bias_sweep" => FigureKind::BiasSweep,
            other => return Err(Error::Config(format!("unknown figure kind {other:?}"))),
        })
    }

    fn x(self, row: &ResultRow) -> (&'static str, f64) {
        match self {
            FigureKind::LearningCurve => ("n", row.n as f64),
            FigureKind::ClipSweep => ("tau_multiplier", row.tau_multiplier),
            FigureKind::BiasSweep => ("z", row.z),
        }
    }
}

/// Long-format record for the plotting scripts: one value per successful
/// run and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub kind: FigureKind,
    pub setting: String,
    pub dataset: String,
    pub estimator: String,
    pub n: usize,
    pub x_name: String,
    pub x: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn tidy_rows(rows: &[ResultRow], kind: FigureKind) -> Vec<TidyRow> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let (x_name, x) = kind.x(r);
        for (metric, value) in [("ecp", r.ecp), ("ndcg_at_5", r.ndcg_at_5)] {
            if let Some(value) = value {
                out.push(TidyRow {
                    kind,
                    setting: r.setting.clone(),
                    dataset: r.dataset.clone(),
                    estimator: r.estimator.clone(),
                    n: r.n,
                    x_name: x_name.to_string(),
                    x,
                    seed: r.seed,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    out
}

pub fn write_tidy(path: impl AsRef<Path>, rows: &[TidyRow]) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_toml_with_overrides(
            "repeats = 3\n[ltr]\nmax_steps = 10\n",
            &[
                "ltr.max_steps=20".into(),
                "setting=full_known".into(),
                "n=[100, 1000]".into(),
                "dataset.items_per_query=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.repeats, 3);
        assert_eq!(cfg.ltr.max_steps, 20);
        assert_eq!(cfg.setting, Setting::FullKnown);
        assert_eq!(cfg.n, vec![100, 1000]);
        assert_eq!(cfg.dataset.items_per_query, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_with_overrides("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["nope".into()]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_with_overrides(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.repeats = 0));
        assert!(bad(|c| c.z = 1.5));
        assert!(bad(|c| c.n = vec![]));
        assert!(bad(|c| c.tau_multiplier = 0.0));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn clip_threshold_caps_at_one() {
        assert!((clip_threshold(10_000, ClipSetting::TopK, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(clip_threshold(100_000, ClipSetting::TopK, 1000.0).unwrap(), 1.0);
        assert!((clip_threshold(100, ClipSetting::TopK, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((clip_threshold(10_000, ClipSetting::Full, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn summary_mean_and_sd() {
        let row = |rep, ecp: Option<f64>| ResultRow {
            setting: "s".into(),
            dataset: "d".into(),
            estimator: "dr".into(),
            n: 10,
            seed: rep as u64,
            repeat: rep,
            tau_multiplier: 1.0,
            z: 1.0,
            ecp,
            ndcg_at_5: ecp,
            wall_time_s: 0.0,
            status: if ecp.is_some() { "ok".into() } else { "failed: x".into() },
        };
        let rows = vec![row(0, Some(1.0)), row(1, Some(3.0)), row(2, None)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].runs, s[0].failed), (3, 1));
        assert_eq!(s[0].ecp_mean, Some(2.0));
        assert!((s[0].ecp_sd.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }
}
