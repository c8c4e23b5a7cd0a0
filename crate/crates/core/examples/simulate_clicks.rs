//! Simulates a top-5 click log from a weak logging policy and prints
//! click-through rates per rank next to the click model's expectation.
//!
//! cargo run --release --example simulate_clicks -- [N] [out.jsonl]

use cltr::click_sim::{collect_log, BiasParams, DisplayLength};
use cltr::data::{generate_synthetic, Partition};
use cltr::policy::{fit_logging_policy, PolicyMode, SupervisedConfig};
use cltr::rng::seeded;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let out = args.next();

    let dataset = generate_synthetic(100, 10, 5, 1)?;
    let bias = BiasParams::top5();
    let mut rng = seeded(0);
    let logging = fit_logging_policy(&dataset, 0.05, PolicyMode::Stochastic, &SupervisedConfig::default(), &mut rng)?;
    let parts = [
        (Partition::Train, dataset.train.as_slice()),
        (Partition::Validation, dataset.validation.as_slice()),
    ];
    let log = collect_log(&logging, &parts, n, &bias, DisplayLength::TopK(5), &mut rng)?;

    let mut clicks = [0.0; 5];
    let mut expected = [0.0; 5];
    for imp in &log.impressions {
        let rel = dataset.find_query(imp.query_id).unwrap().relevance();
        for (k, (&d, &c)) in imp.ranking.iter().zip(&imp.clicks).enumerate() {
            clicks[k] += f64::from(u8::from(c));
            expected[k] += bias.alpha(k + 1) * rel[d] + bias.beta(k + 1);
        }
    }
    println!("rank  observed CTR  model CTR");
    for k in 0..5 {
        println!("{:>4}  {:>12.4}  {:>9.4}", k + 1, clicks[k] / n as f64, expected[k] / n as f64);
    }
    let val = log.filter_partition(Partition::Validation).len();
    println!("{n} impressions, {val} on validation queries");
    if let Some(path) = out {
        log.write_jsonl(&path)?;
        println!("log written to {path}");
    }
    Ok(())
}
