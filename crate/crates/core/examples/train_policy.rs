//! Trains a Plackett-Luce ranking policy with one estimator on a simulated
//! top-5 log and writes its training trace.
//!
//! cargo run --release --example train_policy -- [dr|dm|ips|naive|full_info] [N] [trace.csv]

use std::collections::BTreeMap;

use cltr::click_sim::{collect_log, BiasParams, DisplayLength};
use cltr::data::{generate_synthetic_split, Partition, SyntheticConfig};
use cltr::estimators::{policy_ndcg, true_ecp};
use cltr::ltr::{train_policy, LtrConfig, LtrData, LtrEstimator};
use cltr::mlp::Mlp;
use cltr::policy::{fit_logging_policy, MarginalMethod, PolicyMode, SupervisedConfig};
use cltr::propensity::{clip_schedule, estimate_logging_marginals, ClipSetting, PropensityTable};
use cltr::regression::{train_regression, RegressionConfig};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let est = LtrEstimator::parse(&args.next().unwrap_or_else(|| "dr".into()))?;
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let trace_path = args.next();

    let dataset = generate_synthetic_split([200, 60, 60], 20, 10, 0, &SyntheticConfig::default())?.min_max_normalized();
    let bias = BiasParams::top5();
    let mut rng = seeded(3);
    let mut logging = fit_logging_policy(&dataset, 0.01, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    logging.model.scale_output(30.0);
    let parts = [
        (Partition::Train, dataset.train.as_slice()),
        (Partition::Validation, dataset.validation.as_slice()),
    ];
    let log = collect_log(&logging, &parts, n, &bias, DisplayLength::TopK(5), &mut rng)?;
    let tau = clip_schedule(n, ClipSetting::TopK)?;
    let mut props = BTreeMap::new();
    for (qid, imps) in log.by_query(None) {
        let q = dataset.find_query(qid).unwrap();
        let m = estimate_logging_marginals(&imps, qid, q.len())?;
        props.insert(qid, PropensityTable::new(&m.marginals, &bias, tau)?);
    }
    let r_hat = if est.needs_regression() {
        Some(train_regression(&log.filter_partition(Partition::Train), &props, &dataset, &RegressionConfig::default())?.estimates)
    } else {
        None
    };
    let data = LtrData {
        dataset: &dataset,
        log: &log,
        props: &props,
        r_hat: r_hat.as_ref(),
        bias_hat: &bias,
        true_bias: &bias,
    };
    let config = LtrConfig {
        estimator: est,
        ..Default::default()
    };
    let trained = train_policy(Mlp::scorer(dataset.feature_dim, &mut rng)?, &data, &config)?;
    let method = MarginalMethod::MonteCarlo(1000);
    println!(
        "{}: best validation estimate {:.4} at step {} of {}",
        est.name(),
        trained.best_validation,
        trained.best_step,
        trained.trace.len() - 1
    );
    println!(
        "test ECP {:.4}, NDCG@5 {:.4}; logging policy ECP {:.4}",
        true_ecp(&trained.policy, &dataset.test, &bias, method, &mut seeded(9))?,
        policy_ndcg(&trained.policy, &dataset.test, 5, method, &mut seeded(9))?,
        true_ecp(&logging, &dataset.test, &bias, method, &mut seeded(9))?,
    );
    if let Some(path) = trace_path {
        trained.write_trace_csv(&path)?;
        println!("trace written to {path}");
    }
    Ok(())
}
