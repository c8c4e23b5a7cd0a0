//! Exact enumeration of small instances: estimator bias and variance from
//! the oracle next to the closed forms, plus the dominance counterexample.
//!
//! cargo run --release --example theorem_check -- [instances]

use cltr::click_sim::BiasParams;
use cltr::oracle::*;
use cltr::policy::{MarginalMethod, RankMarginals};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let count: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut rng = seeded(0);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let inst = random_instance(&mut rng, InstanceOptions::default())?;
        let ecp = inst.true_ecp();
        let checks = [
            (exact_expectation(OracleEstimator::Ips, &inst)? - ecp, closed_form_ips_bias(&inst)?),
            (exact_expectation(OracleEstimator::Dr, &inst)? - ecp, closed_form_dr_bias(&inst)?),
            (
                exact_expectation(OracleEstimator::CeNew, &inst)? - inst.true_cross_entropy(),
                closed_form_ce_bias(&inst)?,
            ),
            (exact_itemwise_variance(OracleEstimator::Ips, &inst, 1)?, closed_form_ips_variance(&inst, 1)?),
            (exact_itemwise_variance(OracleEstimator::Dr, &inst, 1)?, closed_form_dr_variance(&inst, 1)?),
        ];
        for (a, b) in checks {
            worst = worst.max((a - b).abs());
        }
    }
    println!("{count} random instances: largest gap between enumeration and closed form {worst:.2e}");

    let opts = InstanceOptions {
        correct_bias: true,
        correct_logging: true,
        r_hat: RHatMode::WithinTwiceR,
        ..Default::default()
    };
    let inst = random_instance(&mut rng, opts)?;
    let ecp = inst.true_ecp();
    println!(
        "R_hat within [0, 2R]: |bias| ips {:.5} dr {:.5}, variance ips {:.5} dr {:.5}",
        (exact_expectation(OracleEstimator::Ips, &inst)? - ecp).abs(),
        (exact_expectation(OracleEstimator::Dr, &inst)? - ecp).abs(),
        exact_itemwise_variance(OracleEstimator::Ips, &inst, 1)?,
        exact_itemwise_variance(OracleEstimator::Dr, &inst, 1)?,
    );

    // one irrelevant item shown half the time, R_hat = 0.5 > 2R
    let bias = BiasParams::new(vec![0.6], vec![0.2], 1)?;
    let logging = vec![(vec![0], 0.5), (vec![], 0.5)];
    let marg = RankMarginals::from_weighted_rankings(
        logging.iter().map(|(r, p): &(Vec<usize>, f64)| (r.as_slice(), *p)),
        1,
        1,
        MarginalMethod::Exact,
    );
    let counter = SmallInstance {
        relevance: vec![0.0],
        bias: bias.clone(),
        logging,
        bias_hat: bias,
        logging_hat: marg.clone(),
        tau: 0.5,
        r_hat: vec![0.5],
        eval_marginals: marg,
    };
    println!(
        "counterexample: bias ips {:.4} dr {:.4}, variance ips {:.4} dr {:.4}",
        exact_expectation(OracleEstimator::Ips, &counter)? - counter.true_ecp(),
        exact_expectation(OracleEstimator::Dr, &counter)? - counter.true_ecp(),
        exact_itemwise_variance(OracleEstimator::Ips, &counter, 1)?,
        exact_itemwise_variance(OracleEstimator::Dr, &counter, 1)?,
    );
    Ok(())
}
