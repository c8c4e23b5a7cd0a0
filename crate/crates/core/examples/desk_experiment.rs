//! Desk-scale learning experiment: 200/60/60 synthetic queries of 20 items,
//! top-5 display with known bias, every estimator at one log size.
//!
//! cargo run --release --example desk_experiment -- [key=value ...]
//!
//! Keys are `RunConfig` fields, e.g. `n=[10000]` or `ltr.max_steps=500`.

use cltr::experiment::{run_experiment, RunConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut overrides = vec!["n=[100000]".to_string(), "record_wall_time=false".to_string()];
    overrides.extend(std::env::args().skip(1));
    let config = RunConfig::from_toml_with_overrides("", &overrides)?;
    let start = std::time::Instant::now();
    let out = run_experiment(&config)?;
    for row in &out.rows {
        println!(
            "{:<10} seed#{} ecp={:.4} ndcg@5={:.4} {}",
            row.estimator,
            row.repeat,
            row.ecp.unwrap_or(f64::NAN),
            row.ndcg_at_5.unwrap_or(f64::NAN),
            row.status
        );
    }
    println!();
    for cell in &out.summary {
        println!(
            "{:<10} N={} ecp {:.4} +- {:.4}",
            cell.estimator,
            cell.n,
            cell.ecp_mean.unwrap_or(f64::NAN),
            cell.ecp_sd.unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
