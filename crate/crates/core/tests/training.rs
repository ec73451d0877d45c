mod common;

use common::TinySetup;
use sketchkd::backbone::{Backbone, BackboneConfig, Mode, TokenDesign};
use sketchkd::checkpoint::Checkpoint;
use sketchkd::config::{tiny_profile, Hyperparameters};
use sketchkd::data::{generate_synthetic, Instance, SyntheticSpec};
use sketchkd::evaluation::{evaluate, EvalSet};
use sketchkd::trainer::*;

fn tiny_split(seed: u64) -> Split {
    let mut spec = SyntheticSpec::new(12, 2, 2, seed);
    spec.image_size = 8;
    let ds = generate_synthetic(&spec).unwrap();
    let mut it = ds.instances.into_iter();
    Split {
        labelled: it.by_ref().take(4).collect(),
        test: it.by_ref().take(2).collect(),
        unlabelled: it.map(|i| Instance { sketches: vec![], ..i }).collect(),
    }
}

fn tiny_hp() -> Hyperparameters {
    Hyperparameters { epochs: 2, ..tiny_profile() }
}

#[test]
fn zero_distillation_weight_reproduces_the_baseline() {
    let split = tiny_split(1);
    let hp = Hyperparameters { lambda6: 0.0, ..tiny_hp() };
    let teacher = pretrain_teacher(&split.photo_pool(), &hp, 1).unwrap();
    let inputs = TrainInputs::from_split(&split).unwrap();
    let opts = ExperimentOptions { eval_every: 1, ..Default::default() };
    let kd = train_student(&inputs, Some(&teacher), &hp, StudentMode::FullKd, &opts).unwrap();
    let base = train_student(&inputs, None, &hp, StudentMode::StrongBaseline, &opts).unwrap();
    assert_eq!(kd.metrics.len(), base.metrics.len());
    for (a, b) in kd.metrics.iter().zip(&base.metrics) {
        assert_eq!(a.losses.total, b.losses.total, "step {}", a.step);
        assert!(a.losses.kl_pu.is_some() && b.losses.kl_pu.is_none());
    }
    assert_eq!(kd.model.params(), base.model.params());
}

#[test]
fn one_step_changes_only_parameters() {
    let split = tiny_split(2);
    let before = split.clone();
    let hp = Hyperparameters { epochs: 1, batch_size: 4, ..tiny_profile() };
    let hp_before = hp.clone();
    let inputs = TrainInputs::from_split(&split).unwrap();
    let run = train_student(&inputs, None, &hp, StudentMode::StrongBaseline, &ExperimentOptions::default()).unwrap();
    assert_eq!(run.step, 1);
    assert_eq!(run.optimizer.steps(), 1);
    assert_eq!(run.ema.as_ref().unwrap().step(), 1);
    let init = Backbone::new(
        BackboneConfig::from_hyperparameters(&hp, TokenDesign::EveryLevel).unwrap(),
        &mut rng_stream(hp.seed, "student.init"),
    )
    .unwrap();
    assert_eq!(init.params().keys().collect::<Vec<_>>(), run.model.params().keys().collect::<Vec<_>>());
    assert_ne!(init.params(), run.model.params());
    assert_eq!(hp, hp_before);
    assert_eq!(split.labelled, before.labelled);
    assert_eq!(split.unlabelled, before.unlabelled);
    assert_eq!(split.test, before.test);
}

#[test]
fn checkpoint_round_trip_preserves_probe_loss() {
    let setup = TinySetup::new(5);
    let split = tiny_split(5);
    let hp = tiny_hp();
    let inputs = TrainInputs::from_split(&split).unwrap();
    let run = train_student(&inputs, None, &hp, StudentMode::StrongBaseline, &ExperimentOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    run.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.hyperparameters().unwrap(), hp);
    let (model, ema, opt) = student_from_checkpoint(&loaded).unwrap();
    assert_eq!(opt, run.optimizer);
    assert_eq!(ema.as_ref().unwrap().shadow(), run.ema.as_ref().unwrap().shadow());

    let labelled: Vec<_> = setup.labelled.iter().collect();
    let unlabelled: Vec<_> = setup.unlabelled.iter().collect();
    let photos = setup.photos();
    let terms = StudentMode::StrongBaseline.terms();
    let batch = setup.batch(&labelled, &unlabelled, &photos, None, terms);
    let a = student_objective(&run.model, &batch, &hp, terms, Objective::Triplet, false).unwrap().0.total;
    let b = student_objective(&model, &batch, &hp, terms, Objective::Triplet, false).unwrap().0.total;
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");

    let exported = loaded.backbone(true).unwrap();
    assert_eq!(exported.params(), run.exported().params());
}

#[test]
fn training_is_deterministic() {
    let split = tiny_split(6);
    let hp = tiny_hp();
    let t1 = pretrain_teacher(&split.photo_pool(), &hp, 2).unwrap();
    let t2 = pretrain_teacher(&split.photo_pool(), &hp, 2).unwrap();
    assert_eq!(t1.checkpoint(&hp).to_bytes(), t2.checkpoint(&hp).to_bytes());
    let inputs = TrainInputs::from_split(&split).unwrap();
    let opts = ExperimentOptions::default();
    let a = train_student(&inputs, Some(&t1), &hp, StudentMode::FullKd, &opts).unwrap();
    let b = train_student(&inputs, Some(&t2), &hp, StudentMode::FullKd, &opts).unwrap();
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

#[test]
fn teacher_probe_loss_descends() {
    let split = tiny_split(7);
    let hp = Hyperparameters { batch_size: 4, ..tiny_profile() };
    let t = pretrain_teacher(&split.photo_pool(), &hp, 40).unwrap();
    assert!(t.probe_final < t.probe_initial, "{} -> {}", t.probe_initial, t.probe_final);
}

#[test]
fn evaluation_leaves_weights_untouched() {
    let split = tiny_split(8);
    let hp = tiny_hp();
    let inputs = TrainInputs::from_split(&split).unwrap();
    let mut run = train_student(&inputs, None, &hp, StudentMode::StrongBaseline, &ExperimentOptions::default()).unwrap();
    let live = run.model.params().clone();
    let test: Vec<_> = split.test.iter().collect();
    let set = EvalSet::from_instances(&test).unwrap();
    let raw = evaluate(&run.model, &set, Mode::Student).unwrap();
    let ema = run.ema.take().unwrap();
    {
        let guard = ema.swap_for_eval(&mut run.model).unwrap();
        assert_eq!(guard.params(), ema.shadow());
        evaluate(&guard, &set, Mode::Student).unwrap();
    }
    assert_eq!(run.model.params(), &live);
    assert_eq!(evaluate(&run.model, &set, Mode::Student).unwrap(), raw);
}
