//! Run one ablation suite at desk scale and print its table.
//!
//! ```text
//! cargo run --release --example ablation -- token_design [epochs] [seeds]
//! ```
//! Suites: `loss_stripdown`, `augmentation`, `token_design`.

use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::trainer::{run_ablation, AblationSuite, ExperimentOptions, Split};

fn main() -> sketchkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let suite = AblationSuite::parse(&args.next().unwrap_or_else(|| "token_design".into()))?;
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let hp = Hyperparameters { epochs, ..desk_profile() };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let opts = ExperimentOptions {
        eval_every: 20,
        ..Default::default()
    };
    let table = run_ablation(suite, &Split::desk, &hp, &seeds, &opts)?;
    print!("{}", table.to_csv());
    Ok(())
}
