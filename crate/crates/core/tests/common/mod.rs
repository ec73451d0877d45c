//! Fixtures shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchkd::backbone::{Backbone, BackboneConfig, Mode, TokenDesign};
use sketchkd::config::{tiny_profile, Hyperparameters};
use sketchkd::data::{
    generate_synthetic, photo_triplets_for, triplet_batch_for, Image, Instance, PhotoAugmentation, SyntheticSpec,
};
use sketchkd::trainer::{build_step_batch, student_objective, Objective, StepBatch, StepInputs, Teacher, Terms};

/// Three labelled 8 px instances and two unlabelled photos: a bank of 5.
pub struct TinySetup {
    pub labelled: Vec<Instance>,
    pub unlabelled: Vec<Instance>,
    pub hp: Hyperparameters,
}

impl TinySetup {
    pub fn new(seed: u64) -> Self {
        let mut spec = SyntheticSpec::new(5, 2, 2, seed);
        spec.image_size = 8;
        let ds = generate_synthetic(&spec).unwrap();
        let mut it = ds.instances.into_iter();
        let labelled: Vec<Instance> = it.by_ref().take(3).collect();
        let unlabelled = it.map(|i| Instance { sketches: vec![], ..i }).collect();
        Self {
            labelled,
            unlabelled,
            hp: Hyperparameters { seed, ..tiny_profile() },
        }
    }

    pub fn pool(&self) -> Vec<(&str, &Image)> {
        self.unlabelled
            .iter()
            .chain(&self.labelled)
            .map(|i| (i.instance_id.as_str(), &i.photo))
            .collect()
    }

    pub fn teacher(&self) -> Teacher {
        let cfg = BackboneConfig::from_hyperparameters(&self.hp, TokenDesign::Shared).unwrap();
        let model = Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(self.hp.seed + 100)).unwrap();
        Teacher::from_model(model, &self.pool(), self.hp.k, 0).unwrap()
    }

    pub fn student(&self) -> Backbone {
        let cfg = BackboneConfig::from_hyperparameters(&self.hp, TokenDesign::EveryLevel).unwrap();
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(self.hp.seed + 200)).unwrap()
    }

    pub fn photos(&self) -> HashMap<&str, &Image> {
        self.pool().into_iter().collect()
    }

    /// One step batch over every labelled and unlabelled instance.
    pub fn batch<'a>(
        &'a self,
        labelled: &'a [&'a Instance],
        unlabelled: &'a [&'a Instance],
        photos: &'a HashMap<&'a str, &'a Image>,
        teacher: Option<&'a Teacher>,
        terms: Terms,
    ) -> StepBatch<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.hp.seed + 300);
        let mut aug = ChaCha8Rng::seed_from_u64(self.hp.seed + 400);
        let anchors: Vec<usize> = (0..labelled.len()).collect();
        let triplets = triplet_batch_for(labelled, &anchors, PhotoAugmentation::Structural, &mut rng, &mut aug).unwrap();
        let ua: Vec<usize> = (0..unlabelled.len()).collect();
        let photo = |i: usize| unlabelled[i].photo.clone();
        let u = photo_triplets_for(unlabelled.len(), photo, &ua, PhotoAugmentation::Structural, &mut rng, &mut aug).unwrap();
        build_step_batch(StepInputs {
            labelled,
            triplets,
            unlabelled,
            unlabelled_triplets: Some(u),
            teacher,
            photos,
            terms,
        })
        .unwrap()
    }
}

/// Hinge arguments `m + d(a, p) - d(a, n)` of every triplet in the batch.
pub fn hinge_args(model: &Backbone, batch: &StepBatch, hp: &Hyperparameters) -> Vec<f64> {
    let f = model.forward(&batch.images(), Mode::Student).unwrap().f;
    let d = |a: usize, b: usize| -> f64 { f.row(a).iter().zip(f.row(b)).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut out = Vec::new();
    for r in 0..batch.sketch.len() {
        out.push(hp.m_cm + d(batch.sketch[r], batch.photo[r]) - d(batch.sketch[r], batch.negative[r]));
        if !batch.photo_aug.is_empty() {
            out.push(hp.m_im_p + d(batch.photo[r], batch.photo_aug[r]) - d(batch.photo[r], batch.negative[r]));
            out.push(hp.m_im_s + d(batch.sketch[r], batch.sketch_pos[r]) - d(batch.sketch[r], batch.sketch_neg[r]));
        }
    }
    for r in 0..batch.u_aug.len() {
        out.push(hp.m_im_p + d(batch.u_anchor[r], batch.u_aug[r]) - d(batch.u_anchor[r], batch.u_neg[r]));
    }
    out
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences of the step total against the analytic gradient for
/// every parameter entry. Entries whose perturbation flips the sign of any
/// hinge argument, or whose hinge arguments sit within `1e-3` of zero, are
/// skipped.
pub fn gradient_check(model: &Backbone, batch: &StepBatch, hp: &Hyperparameters, terms: Terms, h: f64) -> GradCheck {
    let (_, grads) = student_objective(model, batch, hp, terms, Objective::Triplet, true).unwrap();
    let grads = grads.unwrap();
    let base_args = hinge_args(model, batch, hp);
    let near_kink = base_args.iter().any(|a| a.abs() <= 1e-3);
    let mut probe = model.clone();
    let mut res = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let n = model.params()[&name].len();
        let analytic = grads.get(&name);
        for i in 0..n {
            let orig = model.params()[&name].data()[i];
            let mut eval = |x: f64| -> (f64, Vec<f64>) {
                let mut p = probe.params().clone();
                p.get_mut(&name).unwrap().data_mut()[i] = x;
                probe.load_params(p).unwrap();
                let loss = student_objective(&probe, batch, hp, terms, Objective::Triplet, false).unwrap().0.total;
                (loss, hinge_args(&probe, batch, hp))
            };
            let (lp, ap) = eval(orig + h);
            let (lm, am) = eval(orig - h);
            eval(orig);
            let flips = base_args
                .iter()
                .zip(ap.iter().zip(&am))
                .any(|(b, (p, m))| (b > &0.0) != (p > &0.0) || (b > &0.0) != (m > &0.0));
            if flips || near_kink {
                res.skipped_kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.map_or(0.0, |g| g[i]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            res.checked += 1;
            if rel > res.max_rel_err {
                res.max_rel_err = rel;
                res.worst = format!("{name}[{i}] fd {fd:.6e} analytic {an:.6e}");
            }
        }
    }
    res
}
