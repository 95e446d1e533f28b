//! Component ablation on the default synthetic config: source-only,
//! self-training only and the full method, target F1 per seed.
//!
//! cargo run --release --example ablation -- [SEEDS]

use std::time::Instant;

use dacca::cli;
use dacca::config::RunConfig;

fn main() -> dacca::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let base = RunConfig::default();
    let t = Instant::now();
    let mut mean = [0.0; 3];
    println!("seed  source-only  self-training  full");
    for seed in 0..seeds {
        let s = cli::ablation_scores(&cli::seeded(&base, seed))?;
        println!("{seed:4}  {:11.3}  {:13.3}  {:4.3}", s.source_only, s.self_training, s.full);
        for (m, v) in mean.iter_mut().zip([s.source_only, s.self_training, s.full]) {
            *m += v / seeds as f64;
        }
    }
    println!("mean  {:11.3}  {:13.3}  {:4.3}   ({:.1} s)", mean[0], mean[1], mean[2], t.elapsed().as_secs_f64());
    Ok(())
}
