//! Raw against EMA accuracy traces: the spread of Acc@1 over the second
//! half of training, and a plot-ready series.
//!
//! ```text
//! cargo run --release --example stability -- [seed] [epochs]
//! ```

use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::evaluation::stability_trace_file;
use sketchkd::trainer::{run_experiment, ExperimentOptions, Split, StudentMode};

fn main() -> sketchkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let hp = Hyperparameters { seed, epochs, ..desk_profile() };
    let metrics = std::env::temp_dir().join(format!("sketchkd-metrics-{seed}.csv"));
    let opts = ExperimentOptions {
        eval_every: 20,
        metrics_path: Some(metrics.clone()),
        ..Default::default()
    };
    run_experiment(&Split::desk(seed)?, &hp, StudentMode::StrongBaseline, &opts)?;

    let report = stability_trace_file(&metrics)?;
    println!("{} evaluations, metrics in {}", report.steps.len(), metrics.display());
    println!("std of acc@1 over the last half: raw {:.4}, ema {:.4}", report.std_raw, report.std_ema);
    print!("{}", report.series_csv());
    Ok(())
}
