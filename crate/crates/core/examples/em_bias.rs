//! Estimates the top-5 click-model parameters from a simulated log with EM
//! and prints them next to the true values.
//!
//! cargo run --release --example em_bias -- [N]

use cltr::bias_em::{em_estimate_bias, EmConfig, EmRelevance};
use cltr::click_sim::{collect_log, BiasParams, DisplayLength};
use cltr::data::{generate_synthetic_split, Partition, SyntheticConfig};
use cltr::policy::{fit_logging_policy, PolicyMode, SupervisedConfig};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let dataset = generate_synthetic_split([200, 60, 60], 20, 10, 0, &SyntheticConfig::default())?.min_max_normalized();
    let truth = BiasParams::top5();
    let mut rng = seeded(2);
    let mut logging = fit_logging_policy(&dataset, 0.01, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    logging.model.scale_output(30.0);
    let parts = [(Partition::Train, dataset.train.as_slice())];
    let log = collect_log(&logging, &parts, n, &truth, DisplayLength::TopK(5), &mut rng)?;

    for relevance in [EmRelevance::PerItem, EmRelevance::Regression] {
        let config = EmConfig {
            relevance,
            ..Default::default()
        };
        let out = em_estimate_bias(&log, &dataset, 5, &config)?;
        println!(
            "{relevance:?}: log-likelihood {:.1} -> {:.1}",
            out.log_likelihood[0],
            out.log_likelihood.last().unwrap()
        );
        println!("rank  alpha (true)     beta (true)");
        for k in 1..=5 {
            println!(
                "{k:>4}  {:.3} ({:.2})     {:.3} ({:.2})",
                out.bias_hat.alpha(k),
                truth.alpha(k),
                out.bias_hat.beta(k),
                truth.beta(k)
            );
        }
    }
    Ok(())
}
