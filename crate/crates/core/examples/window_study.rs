//! Trains on a synthetic corpus and compares the learned cut against fixed
//! cut-offs and the oracle on held-out queries.
//!
//! Usage: `cargo run --example window_study -- [beta] [epochs] [lr]`

use std::time::Instant;

use jointrank::letor::{generate_synthetic, SyntheticSpec};
use jointrank::pipeline::{run_pipeline, TruncationPolicy};
use jointrank::trainer::{train, TrainConfig};
use jointrank::{DecodeMode, ModelConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> jointrank::Result<()> {
    let beta = arg(1, 4usize);
    let epochs = arg(2, 50usize);
    let lr = arg(3, 1e-4f64);

    let data = generate_synthetic(&SyntheticSpec {
        num_queries: 240,
        docs_per_query: 10,
        feature_dim: 8,
        grade_max: 4,
        noise_sigma: 1.0,
        seed: 7,
    })?;
    let parts = data.split(&[200.0 / 240.0, 20.0 / 240.0, 20.0 / 240.0])?;
    let config = ModelConfig {
        beta,
        lr,
        ..ModelConfig::with_feature_dim(8)
    };

    let start = Instant::now();
    let out = train(&parts[0], Some(&parts[1]), &config, &TrainConfig { epochs, ..Default::default() })?;
    print!("{}", out.history_csv());
    println!("trained in {:.0?}, best epoch {}", start.elapsed(), out.best_epoch);

    let params = &out.best_params;
    for (name, split) in [("valid", &parts[1]), ("test", &parts[2])] {
        println!("[{name}]");
        for (policy, mode) in [
            (TruncationPolicy::Model, DecodeMode::Full),
            (TruncationPolicy::Model, DecodeMode::RerankOnly),
            (TruncationPolicy::Model, DecodeMode::Fast),
            (TruncationPolicy::Oracle, DecodeMode::Full),
        ] {
            let mean = run_pipeline(split, params, policy, mode)?.report.mean;
            println!(
                "{:>7} {:<12} ndcg@5 {:.4}  tdcg {:.4}  length {:.2}",
                policy.to_string(),
                mode.to_string(),
                mean.ndcg5,
                mean.tdcg,
                mean.output_length
            );
        }
        let fixed: Vec<String> = (1..=10)
            .map(|x| {
                run_pipeline(split, params, TruncationPolicy::Fixed(x), DecodeMode::Full)
                    .map(|r| format!("{x}:{:.3}", r.report.mean.tdcg))
            })
            .collect::<jointrank::Result<_>>()?;
        println!("fixed tdcg {}", fixed.join(" "));
    }
    Ok(())
}
