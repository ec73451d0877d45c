//! Swap the cross-modal triplet for a supervised contrastive loss and
//! compare with the triplet student.
//!
//! ```text
//! cargo run --release --example contrastive -- [epochs]
//! ```

use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::trainer::{run_experiment, ExperimentOptions, Objective, Split, StudentMode};

fn main() -> sketchkd::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let hp = Hyperparameters { epochs, ..desk_profile() };
    let split = Split::desk(hp.seed)?;
    for objective in [Objective::Triplet, Objective::Contrastive { tau: 0.1 }] {
        let opts = ExperimentOptions {
            eval_every: 20,
            objective,
            ..Default::default()
        };
        let out = run_experiment(&split, &hp, StudentMode::StrongBaseline, &opts)?;
        println!("{objective:?}: acc@1 {:.3} acc@5 {:.3}", out.final_acc[0], out.final_acc[1]);
    }
    Ok(())
}
