//! Strong baseline against full distillation on the desk split.
//!
//! ```text
//! cargo run --release --example train_student -- [seed] [epochs]
//! ```

use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::trainer::{pretrain_teacher, run_experiment_with_teacher, ExperimentOptions, Split, StudentMode};

fn main() -> sketchkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let hp = Hyperparameters { seed, epochs, ..desk_profile() };
    let split = Split::desk(seed)?;
    let opts = ExperimentOptions {
        eval_every: 20,
        ..Default::default()
    };

    let teacher = pretrain_teacher(&split.photo_pool(), &hp, epochs)?;
    for mode in [StudentMode::StrongBaseline, StudentMode::FullKd] {
        let out = run_experiment_with_teacher(&split, &hp, mode, &opts, Some(&teacher))?;
        let [a1, a5, a10] = out.final_acc;
        let last = out.run.metrics.last().expect("at least one step");
        println!(
            "{mode:<16} acc@1 {a1:.3}  acc@5 {a5:.3}  acc@10 {a10:.3}  final loss {:.4}",
            last.losses.total
        );
    }
    Ok(())
}
