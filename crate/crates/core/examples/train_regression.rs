//! Fits the relevance regression on a simulated top-5 log with the
//! trust-bias-aware and the previous cross-entropy loss, and reports how
//! well each recovers the true preferences.
//!
//! cargo run --release --example train_regression -- [N] [seed]

use std::collections::BTreeMap;

use cltr::click_sim::{collect_log, BiasParams, DisplayLength};
use cltr::data::{generate_synthetic_split, Partition, SyntheticConfig};
use cltr::policy::{fit_logging_policy, PolicyMode, SupervisedConfig};
use cltr::propensity::{clip_schedule, estimate_logging_marginals, ClipSetting, PropensityTable};
use cltr::regression::{train_regression, CeLoss, RegressionConfig};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dataset = generate_synthetic_split([200, 60, 60], 20, 10, 0, &SyntheticConfig::default())?.min_max_normalized();
    let bias = BiasParams::top5();
    let mut rng = seeded(seed);
    let logging = fit_logging_policy(&dataset, 0.01, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    let parts = [
        (Partition::Train, dataset.train.as_slice()),
        (Partition::Validation, dataset.validation.as_slice()),
    ];
    let log = collect_log(&logging, &parts, n, &bias, DisplayLength::TopK(5), &mut rng)?;
    let tau = clip_schedule(n, ClipSetting::TopK)?;
    let mut props = BTreeMap::new();
    for (qid, imps) in log.by_query(None) {
        let q = dataset.find_query(qid).expect("logged query");
        let m = estimate_logging_marginals(&imps, qid, q.len())?;
        props.insert(qid, PropensityTable::new(&m.marginals, &bias, tau)?);
    }
    let train_log = log.filter_partition(Partition::Train);
    for loss in [CeLoss::New, CeLoss::Prev] {
        let config = RegressionConfig {
            loss,
            seed,
            ..Default::default()
        };
        let out = train_regression(&train_log, &props, &dataset, &config)?;
        let (mut se, mut count) = (0.0, 0usize);
        for q in &dataset.test {
            for (r_hat, r) in out.estimates[&q.query_id].iter().zip(q.relevance()) {
                se += (r_hat - r).powi(2);
                count += 1;
            }
        }
        println!(
            "{loss:?}: loss {:.4} -> {:.4}, test RMSE of R_hat {:.4}",
            out.loss_trace[0],
            out.loss_trace.last().unwrap(),
            (se / count as f64).sqrt()
        );
    }
    Ok(())
}
