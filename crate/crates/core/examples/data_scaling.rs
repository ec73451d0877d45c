//! Accuracy against the labelled fraction, with and without distillation.
//!
//! ```text
//! cargo run --release --example data_scaling -- [epochs] [seeds]
//! ```

use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::evaluation::data_scaling_study;
use sketchkd::trainer::{ExperimentOptions, Split};

fn main() -> sketchkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let hp = Hyperparameters { epochs, ..desk_profile() };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let opts = ExperimentOptions {
        eval_every: 20,
        ..Default::default()
    };
    let table = data_scaling_study(&Split::desk(0)?, &[0.25, 0.5, 1.0], &hp, &seeds, &opts)?;
    print!("{}", table.to_csv());
    println!("baseline grows with labelled data: {}", table.baseline_monotone);
    Ok(())
}
