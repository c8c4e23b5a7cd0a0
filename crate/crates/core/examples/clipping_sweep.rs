//! Clipping sweep at one log size: the threshold schedule scaled by 0.001,
//! 1 and 1000, for IPS and DR.
//!
//! cargo run --release --example clipping_sweep -- [key=value ...]

use cltr::experiment::{sweep_clipping, RunConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut overrides = vec![
        "n=[100000]".to_string(),
        "estimators=[\"ips\", \"dr\"]".to_string(),
        "record_wall_time=false".to_string(),
    ];
    overrides.extend(std::env::args().skip(1));
    let config = RunConfig::from_toml_with_overrides("", &overrides)?;
    let out = sweep_clipping(&config, &[0.001, 1.0, 1000.0])?;
    for cell in &out.summary {
        println!(
            "{:<4} N={} tau x{:<6} ecp {:.4} +- {:.4}",
            cell.estimator,
            cell.n,
            cell.tau_multiplier,
            cell.ecp_mean.unwrap_or(f64::NAN),
            cell.ecp_sd.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
