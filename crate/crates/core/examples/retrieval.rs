//! Train briefly, save a checkpoint, reload its EMA weights and evaluate
//! retrieval over the held-out gallery and per class.
//!
//! ```text
//! cargo run --release --example retrieval -- [epochs]
//! ```

use sketchkd::backbone::Mode;
use sketchkd::checkpoint::Checkpoint;
use sketchkd::config::{desk_profile, Hyperparameters};
use sketchkd::evaluation::{acc_at_q, evaluate, EvalSet};
use sketchkd::trainer::{train_student, ExperimentOptions, Split, StudentMode, TrainInputs};

fn main() -> sketchkd::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let hp = Hyperparameters { epochs, ..desk_profile() };
    let split = Split::desk(hp.seed)?;
    let run = train_student(
        &TrainInputs::from_split(&split)?,
        None,
        &hp,
        StudentMode::StrongBaseline,
        &ExperimentOptions::default(),
    )?;

    let path = std::env::temp_dir().join("sketchkd-student.ckpt");
    run.checkpoint().save(&path)?;
    let model = Checkpoint::load(&path)?.backbone(true)?;

    let test: Vec<_> = split.test.iter().collect();
    let res = evaluate(&model, &EvalSet::from_instances(&test)?, Mode::Student)?;
    println!("gallery of {}, {} queries", res.gallery_size, res.ranks.len());
    for q in [1, 5, 10] {
        println!("acc@{q:<2} {:.3}", acc_at_q(&res, q)?);
    }
    for (class, set) in EvalSet::per_class(&test)? {
        let r = evaluate(&model, &set, Mode::Student)?;
        println!("{class}: acc@1 {:.3} over {} photos", acc_at_q(&r, 1)?, r.gallery_size);
    }
    Ok(())
}
