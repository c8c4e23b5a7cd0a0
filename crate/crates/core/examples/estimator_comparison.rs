//! Off-policy evaluation of one target policy with naive, IPS, DM, CV and
//! DR on logs of growing size, against the policy's true ECP.
//!
//! cargo run --release --example estimator_comparison

use std::collections::BTreeMap;

use cltr::click_sim::{collect_log, BiasParams, DisplayLength};
use cltr::data::{generate_synthetic, Partition};
use cltr::estimators::{estimate, true_ecp, EstimatorKind, QueryInputs};
use cltr::policy::{fit_logging_policy, MarginalMethod, PolicyMode, SupervisedConfig};
use cltr::propensity::{clip_schedule, estimate_logging_marginals, omega, ClipSetting, PropensityTable};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let dataset = generate_synthetic(100, 10, 5, 3)?;
    let bias = BiasParams::top5();
    let mut rng = seeded(1);
    let mut logging = fit_logging_policy(&dataset, 0.02, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    logging.model.scale_output(3.0);
    let target = fit_logging_policy(&dataset, 1.0, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    let parts = [(Partition::Train, dataset.train.as_slice())];
    let truth = true_ecp(&target, &dataset.train, &bias, MarginalMethod::MonteCarlo(5000), &mut rng)?;
    println!("true ECP of the target policy: {truth:.4}");
    println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "N", "naive", "ips", "dm", "cv", "dr");

    for n in [1_000, 10_000, 100_000] {
        let log = collect_log(&logging, &parts, n, &bias, DisplayLength::TopK(5), &mut rng)?;
        let tau = clip_schedule(n, ClipSetting::TopK)?;
        let mut inputs = BTreeMap::new();
        for (qid, imps) in log.by_query(None) {
            let q = dataset.find_query(qid).unwrap();
            let m = estimate_logging_marginals(&imps, qid, q.len())?;
            let scores = target.scores(q)?;
            let eval = target.marginals(&scores, 5, MarginalMethod::MonteCarlo(2000), &mut rng)?;
            // a deliberately rough regression estimate: the truth, shrunk
            let r_hat = q.relevance().iter().map(|r| 0.5 * r + 0.1).collect();
            inputs.insert(
                qid,
                QueryInputs {
                    omega_hat: omega(&eval, &bias),
                    prop: PropensityTable::new(&m.marginals, &bias, tau)?,
                    r_hat,
                },
            );
        }
        let kinds = [
            EstimatorKind::Naive,
            EstimatorKind::Ips,
            EstimatorKind::Dm,
            EstimatorKind::Cv,
            EstimatorKind::Dr,
        ];
        let values: Vec<f64> = kinds
            .iter()
            .map(|&k| estimate(k, &log, &inputs).map(|r| r.value))
            .collect::<Result<_, _>>()?;
        println!(
            "{n:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            values[0], values[1], values[2], values[3], values[4]
        );
    }
    Ok(())
}
