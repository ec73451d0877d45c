//! Teacher pre-training, student training, metrics logging and ablations.
//!
//! Every random choice comes from a named stream derived from the run seed
//! (`rng_stream`), so variants of an ablation see the same labelled order,
//! unlabelled order and augmentations, and distillation never consumes
//! randomness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, ForwardVars, Mode, ParamMap, TokenDesign};
use crate::checkpoint::{token_design_name, Checkpoint};
use crate::config::Hyperparameters;
use crate::data::{
    generate_synthetic, photo_triplets_for, triplet_batch_for, Dataset, EpochSampler, Image, Instance,
    PhotoAugmentation, PhotoTripletBatch, SyntheticSpec, TripletBatch,
};
use crate::distill::{distillation_loss, FeatureBank, KdBatch, KdBreakdown, KdQuery, KdWeights, NeighbourSet};
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, mean_std, top_k_accuracies, EvalSet};
use crate::losses::{
    batch_triplet_loss, combined_training_loss_with_grad, contrastive_alternative, LossBreakdown,
    PhotoTripletEmbeddings, TripletEmbeddings, TripletWeights,
};
use crate::optim::{cosine_lr, AdamW};
use crate::tensor::{Graph, Tensor};

/// Independent generator for the component `name` of a run.
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Which objective terms a student run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub cm: bool,
    pub im: bool,
    pub ema: bool,
    pub kl_pu: bool,
    pub kl_pl: bool,
    pub kl_sl: bool,
}

impl Terms {
    pub fn distills(&self) -> bool {
        self.kl_pu || self.kl_pl || self.kl_sl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StudentMode {
    StrongBaseline,
    FullKd,
    TypeI,
    TypeII,
    TypeIII,
    TypeIV,
}

impl StudentMode {
    /// Rows of the loss strip-down table, in order.
    pub const STRIPDOWN: [StudentMode; 5] = [
        StudentMode::TypeI,
        StudentMode::TypeII,
        StudentMode::TypeIII,
        StudentMode::TypeIV,
        StudentMode::FullKd,
    ];

    pub fn terms(self) -> Terms {
        let t = |im, ema, kl_pu, kl_pl, kl_sl| Terms {
            cm: true,
            im,
            ema,
            kl_pu,
            kl_pl,
            kl_sl,
        };
        match self {
            StudentMode::StrongBaseline => t(true, true, false, false, false),
            StudentMode::FullKd => t(true, true, true, true, true),
            StudentMode::TypeI => t(false, false, true, true, true),
            StudentMode::TypeII => t(true, false, true, true, true),
            StudentMode::TypeIII => t(true, true, true, false, false),
            StudentMode::TypeIV => t(true, true, true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StudentMode::StrongBaseline => "strong_baseline",
            StudentMode::FullKd => "full_kd",
            StudentMode::TypeI => "type_i",
            StudentMode::TypeII => "type_ii",
            StudentMode::TypeIII => "type_iii",
            StudentMode::TypeIV => "type_iv",
        }
    }

    /// Short label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            StudentMode::StrongBaseline => "strong",
            StudentMode::FullKd => "full",
            StudentMode::TypeI => "I",
            StudentMode::TypeII => "II",
            StudentMode::TypeIII => "III",
            StudentMode::TypeIV => "IV",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            StudentMode::StrongBaseline,
            StudentMode::FullKd,
            StudentMode::TypeI,
            StudentMode::TypeII,
            StudentMode::TypeIII,
            StudentMode::TypeIV,
        ];
        all.into_iter()
            .find(|m| m.name() == s || m.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

impl fmt::Display for StudentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cross-modal objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Triplet,
    /// Normalised-temperature contrastive loss between sketches and photos.
    Contrastive { tau: f64 },
}

/// Knobs of a training run that are not hyperparameters of the method.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    /// Evaluate every this many steps (and at the last step).
    pub eval_every: usize,
    pub augmentation: PhotoAugmentation,
    pub token: TokenDesign,
    pub objective: Objective,
    /// Teacher epochs; `hp.epochs` when `None`.
    pub teacher_epochs: Option<usize>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            eval_every: 100,
            augmentation: PhotoAugmentation::Structural,
            token: TokenDesign::EveryLevel,
            objective: Objective::Triplet,
            teacher_epochs: None,
            metrics_path: None,
        }
    }
}

/// Labelled training instances, unlabelled photos and a held-out test set.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub labelled: Vec<Instance>,
    pub unlabelled: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Sizes of the standard desk experiment.
pub const DESK_LABELLED: usize = 32;
pub const DESK_TEST: usize = 16;
pub const DESK_UNLABELLED: usize = 64;
pub const DESK_CLASSES: usize = 8;

impl Split {
    /// Labelled instances are split into train and test by `holdout_frac`
    /// (test taken from the end); unlabelled instances stay unlabelled.
    pub fn from_dataset(dataset: &Dataset, holdout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_frac) {
            return Err(Error::InvalidArgument(format!("holdout fraction {holdout_frac} outside [0, 1)")));
        }
        let labelled: Vec<Instance> = dataset.labelled().cloned().collect();
        let n_test = (labelled.len() as f64 * holdout_frac).round() as usize;
        let n_train = labelled.len() - n_test;
        Ok(Split {
            test: labelled[n_train..].to_vec(),
            labelled: labelled[..n_train].to_vec(),
            unlabelled: dataset.unlabelled().cloned().collect(),
        })
    }

    /// The desk setup: 32 labelled instances with 2 sketches each, 16
    /// held-out instances (32 query sketches, gallery of 16) and 64 photos
    /// whose sketches are dropped.
    pub fn desk(seed: u64) -> Result<Self> {
        Self::synthetic(DESK_LABELLED, DESK_TEST, DESK_UNLABELLED, seed)
    }

    pub fn synthetic(labelled: usize, test: usize, unlabelled: usize, seed: u64) -> Result<Self> {
        let spec = SyntheticSpec::new(labelled + test + unlabelled, DESK_CLASSES, 2, seed);
        let ds = generate_synthetic(&spec)?;
        let mut it = ds.instances.into_iter();
        let labelled: Vec<Instance> = it.by_ref().take(labelled).collect();
        let test_set: Vec<Instance> = it.by_ref().take(test).collect();
        let unlabelled = it
            .map(|i| Instance {
                sketches: Vec::new(),
                ..i
            })
            .collect();
        Ok(Split {
            labelled,
            unlabelled,
            test: test_set,
        })
    }

    pub fn with_labelled_prefix(&self, k: usize) -> Split {
        Split {
            labelled: self.labelled[..k.min(self.labelled.len())].to_vec(),
            unlabelled: self.unlabelled.clone(),
            test: self.test.clone(),
        }
    }

    /// Teacher pool: unlabelled photos and labelled photos.
    pub fn photo_pool(&self) -> Vec<(&str, &Image)> {
        self.unlabelled
            .iter()
            .chain(&self.labelled)
            .map(|i| (i.instance_id.as_str(), &i.photo))
            .collect()
    }
}

fn backbone_config(hp: &Hyperparameters, token: TokenDesign) -> Result<BackboneConfig> {
    BackboneConfig::from_hyperparameters(hp, token)
}

fn grads_by_name(out: &ForwardVars, grads: &crate::tensor::Gradients) -> BTreeMap<String, Vec<f64>> {
    out.params
        .iter()
        .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

fn select_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let d = m.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("consistent shape")
}

fn scatter_rows(seed: &mut Tensor, idx: &[usize], g: &Tensor) {
    for (r, &i) in idx.iter().enumerate() {
        for (s, v) in seed.row_mut(i).iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
}

fn check_finite(value: f64, what: &str, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            location: format!("step {step}"),
        })
    }
}

// ---------------------------------------------------------------------------
// teacher

/// Frozen teacher with its feature bank and precomputed neighbour sets.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: Backbone,
    pub bank: FeatureBank,
    pub neighbours: HashMap<String, NeighbourSet>,
    pub step: u64,
    /// Photo-triplet loss on a fixed probe batch before and after training.
    pub probe_initial: f64,
    pub probe_final: f64,
}

impl Teacher {
    /// Build the bank over `pool` and the `k` neighbours of every member.
    pub fn from_model(model: Backbone, pool: &[(&str, &Image)], k: usize, step: u64) -> Result<Self> {
        let bank = crate::distill::build_bank(&model, pool)?;
        Self::from_bank(model, bank, k, step)
    }

    pub fn from_bank(model: Backbone, bank: FeatureBank, k: usize, step: u64) -> Result<Self> {
        let neighbours = bank
            .ids()
            .iter()
            .map(|id| Ok((id.clone(), bank.neighbours_of(id, k)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            model,
            bank,
            neighbours,
            step,
            probe_initial: f64::NAN,
            probe_final: f64::NAN,
        })
    }

    pub fn checkpoint(&self, hp: &Hyperparameters) -> Checkpoint {
        let mut c = Checkpoint {
            step: self.step,
            config_hash: hp.config_hash(),
            ..Default::default()
        };
        c.meta.insert("role".into(), "teacher".into());
        c.meta.insert("config".into(), hp.to_config_string());
        c.meta.insert("token".into(), token_design_name(self.model.config().token).into());
        c.tensors = self.model.params().clone();
        c
    }
}

struct PhotoProbe {
    anchors: Vec<usize>,
    batch: PhotoTripletBatch,
}

fn photo_triplet_step(
    model: &Backbone,
    pool: &[(&str, &Image)],
    batch: &PhotoTripletBatch,
    margin: f64,
    want_grad: bool,
) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
    let b = batch.anchors.len();
    let mut images: Vec<&Image> = Vec::with_capacity(3 * b);
    images.extend(batch.anchors.iter().map(|&i| pool[i].1));
    images.extend(batch.augmented.iter());
    images.extend(batch.negatives.iter().map(|&i| pool[i].1));
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &images, Mode::Teacher)?;
    let f = g.value(out.f).clone();
    let a: Vec<usize> = (0..b).collect();
    let p: Vec<usize> = (b..2 * b).collect();
    let n: Vec<usize> = (2 * b..3 * b).collect();
    let (loss, ga, gp, gn) = batch_triplet_loss(&select_rows(&f, &a), &select_rows(&f, &p), &select_rows(&f, &n), margin)?;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut seed = Tensor::zeros(f.shape().to_vec());
    scatter_rows(&mut seed, &a, &ga);
    scatter_rows(&mut seed, &p, &gp);
    scatter_rows(&mut seed, &n, &gn);
    let grads = g.backward(&[(out.f, seed.data())])?;
    Ok((loss, Some(grads_by_name(&out, &grads))))
}

/// Train a teacher (no distillation token) with the photo-form intra-modal
/// triplet over `pool`, then build its bank and neighbour sets.
pub fn pretrain_teacher(pool: &[(&str, &Image)], hp: &Hyperparameters, epochs: usize) -> Result<Teacher> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "teacher pool needs at least 2 photos, got {}",
            pool.len()
        )));
    }
    hp.validate()?;
    let cfg = backbone_config(hp, TokenDesign::Shared)?;
    let mut model = Backbone::new(cfg, &mut rng_stream(hp.seed, "teacher.init"))?;
    let mut opt = AdamW::new(model.params(), hp.weight_decay);
    let mut rng = rng_stream(hp.seed, "teacher.sample");
    let mut aug_rng = rng_stream(hp.seed, "teacher.augment");
    let photo = |i: usize| pool[i].1.clone();

    let probe = {
        let mut r = rng_stream(hp.seed, "teacher.probe");
        let mut ar = rng_stream(hp.seed, "teacher.probe.augment");
        let anchors: Vec<usize> = (0..hp.batch_size.min(pool.len())).collect();
        let batch = photo_triplets_for(pool.len(), photo, &anchors, PhotoAugmentation::Structural, &mut r, &mut ar)?;
        PhotoProbe { anchors, batch }
    };
    debug_assert_eq!(probe.anchors.len(), probe.batch.anchors.len());
    let probe_initial = photo_triplet_step(&model, pool, &probe.batch, hp.m_im_p, false)?.0;

    let steps_per_epoch = pool.len().div_ceil(hp.batch_size);
    let total = epochs * steps_per_epoch;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for anchors in order.chunks(hp.batch_size) {
            let batch = photo_triplets_for(pool.len(), photo, anchors, PhotoAugmentation::Structural, &mut rng, &mut aug_rng)?;
            let (loss, grads) = photo_triplet_step(&model, pool, &batch, hp.m_im_p, true)?;
            step += 1;
            check_finite(loss, "teacher loss", step)?;
            let lr = cosine_lr(hp.lr, step as usize - 1, total);
            opt.step(model.params_mut(), &grads.unwrap_or_default(), lr)?;
        }
    }
    let probe_final = photo_triplet_step(&model, pool, &probe.batch, hp.m_im_p, false)?.0;
    log::info!("teacher: {step} steps, probe loss {probe_initial:.4} -> {probe_final:.4}");
    let mut teacher = Teacher::from_model(model, pool, hp.k, step)?;
    teacher.probe_initial = probe_initial;
    teacher.probe_final = probe_final;
    Ok(teacher)
}

// ---------------------------------------------------------------------------
// student step

#[derive(Debug, Clone, Copy)]
enum Slot<'a> {
    Pool(&'a Image),
    Owned(usize),
}

/// Every image a student step forwards, with the rows each role uses.
/// Pool images are deduplicated, so a photo serving several roles is
/// embedded once and its gradients accumulate.
#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a> {
    slots: Vec<Slot<'a>>,
    owned: Vec<Image>,
    index: HashMap<usize, usize>,
    pub sketch: Vec<usize>,
    pub photo: Vec<usize>,
    pub negative: Vec<usize>,
    pub photo_aug: Vec<usize>,
    pub sketch_pos: Vec<usize>,
    pub sketch_neg: Vec<usize>,
    pub u_anchor: Vec<usize>,
    pub u_aug: Vec<usize>,
    pub u_neg: Vec<usize>,
    pub kd: KdBatch,
    /// Instance index of each labelled row.
    pub labels: Vec<usize>,
}

impl<'a> StepBatch<'a> {
    fn pool(&mut self, img: &'a Image) -> usize {
        let key = img as *const Image as usize;
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.slots.push(Slot::Pool(img));
        self.index.insert(key, self.slots.len() - 1);
        self.slots.len() - 1
    }

    fn owned(&mut self, img: Image) -> usize {
        self.owned.push(img);
        self.slots.push(Slot::Owned(self.owned.len() - 1));
        self.slots.len() - 1
    }

    pub fn images(&self) -> Vec<&Image> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Pool(i) => i,
                Slot::Owned(k) => &self.owned[k],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Inputs for assembling one student step.
pub struct StepInputs<'a, 'b> {
    pub labelled: &'b [&'a Instance],
    pub triplets: TripletBatch,
    pub unlabelled: &'b [&'a Instance],
    pub unlabelled_triplets: Option<PhotoTripletBatch>,
    pub teacher: Option<&'b Teacher>,
    /// Photos of the teacher pool by id.
    pub photos: &'b HashMap<&'a str, &'a Image>,
    pub terms: Terms,
}

fn kd_query<'a>(
    batch: &mut StepBatch<'a>,
    query_row: usize,
    id: &str,
    teacher: &Teacher,
    photos: &HashMap<&'a str, &'a Image>,
) -> Result<KdQuery> {
    let ns = teacher
        .neighbours
        .get(id)
        .ok_or_else(|| Error::Data(format!("photo `{id}` is not in the teacher bank")))?;
    let mut rows = Vec::with_capacity(ns.neighbour_ids.len());
    for nid in &ns.neighbour_ids {
        let img = photos
            .get(nid.as_str())
            .ok_or_else(|| Error::Data(format!("bank neighbour `{nid}` is not among the training photos")))?;
        rows.push(batch.pool(img));
    }
    Ok(KdQuery {
        query_row,
        neighbour_rows: rows,
        teacher_dists: ns.teacher_dists.clone(),
    })
}

pub fn build_step_batch<'a>(inputs: StepInputs<'a, '_>) -> Result<StepBatch<'a>> {
    let StepInputs {
        labelled,
        triplets,
        unlabelled,
        unlabelled_triplets,
        teacher,
        photos,
        terms,
    } = inputs;
    let mut b = StepBatch::default();
    let TripletBatch { rows, augmented_photo } = triplets;
    for (row, aug) in rows.iter().zip(augmented_photo) {
        let a = labelled[row.anchor];
        let n = labelled[row.negative];
        let s = b.pool(&a.sketches[row.anchor_sketch]);
        b.sketch.push(s);
        let p = b.pool(&a.photo);
        b.photo.push(p);
        let neg = b.pool(&n.photo);
        b.negative.push(neg);
        b.labels.push(row.anchor);
        if terms.im {
            let pa = b.owned(aug);
            b.photo_aug.push(pa);
            let sp = b.pool(&a.sketches[row.positive_sketch]);
            b.sketch_pos.push(sp);
            let sn = b.pool(&n.sketches[row.negative_sketch]);
            b.sketch_neg.push(sn);
        }
    }
    if let Some(u) = unlabelled_triplets {
        let need = terms.im || terms.kl_pu;
        for (k, aug) in u.augmented.into_iter().enumerate().filter(|_| need) {
            let a = b.pool(&unlabelled[u.anchors[k]].photo);
            b.u_anchor.push(a);
            if terms.im {
                let t = b.owned(aug);
                b.u_aug.push(t);
                let n = b.pool(&unlabelled[u.negatives[k]].photo);
                b.u_neg.push(n);
            }
        }
        if terms.kl_pu {
            let teacher = teacher.ok_or_else(|| Error::InvalidArgument("distillation needs a teacher".into()))?;
            for (k, &ai) in u.anchors.iter().enumerate() {
                let row = b.u_anchor[k];
                let q = kd_query(&mut b, row, &unlabelled[ai].instance_id, teacher, photos)?;
                b.kd.photos_unlabelled.push(q);
            }
        }
    }
    if terms.kl_pl || terms.kl_sl {
        let teacher = teacher.ok_or_else(|| Error::InvalidArgument("distillation needs a teacher".into()))?;
        for (r, row) in rows.iter().enumerate() {
            let id = &labelled[row.anchor].instance_id;
            if terms.kl_pl {
                let row = b.photo[r];
                let q = kd_query(&mut b, row, id, teacher, photos)?;
                b.kd.photos_labelled.push(q);
            }
            if terms.kl_sl {
                // the sketch borrows its paired photo's teacher neighbours
                let row = b.sketch[r];
                let q = kd_query(&mut b, row, id, teacher, photos)?;
                b.kd.sketches.push(q);
            }
        }
    }
    Ok(b)
}

/// Loss values of one student step. Inactive terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    pub cm: f64,
    pub im_p: Option<f64>,
    pub im_s: Option<f64>,
    pub tri_u: Option<f64>,
    pub kl_pl: Option<f64>,
    pub kl_sl: Option<f64>,
    pub kl_pu: Option<f64>,
}

/// Student objective on a prepared batch: discriminative terms plus
/// `lambda6` times the distillation terms. With `want_grad` also returns
/// the gradient of `total` for every parameter.
pub fn student_objective(
    model: &Backbone,
    batch: &StepBatch,
    hp: &Hyperparameters,
    terms: Terms,
    objective: Objective,
    want_grad: bool,
) -> Result<(StepLosses, Option<BTreeMap<String, Vec<f64>>>)> {
    if batch.sketch.is_empty() {
        return Err(Error::InvalidArgument("empty labelled batch".into()));
    }
    let images = batch.images();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &images, Mode::Student)?;
    let f = g.value(out.f).clone();
    let mut f_seed = Tensor::zeros(f.shape().to_vec());

    let s = select_rows(&f, &batch.sketch);
    let p = select_rows(&f, &batch.photo);
    let n = select_rows(&f, &batch.negative);
    let mut losses = StepLosses::default();
    let (cm_value, cm_weight) = match objective {
        Objective::Triplet => (None, 1.0),
        Objective::Contrastive { tau } => {
            let (l, gs, gp) = contrastive_alternative(&s, &p, &batch.labels, tau)?;
            scatter_rows(&mut f_seed, &batch.sketch, &gs);
            scatter_rows(&mut f_seed, &batch.photo, &gp);
            (Some(l), 0.0)
        }
    };
    let breakdown: LossBreakdown;
    if terms.im {
        let (pa, sp, sn) = (
            select_rows(&f, &batch.photo_aug),
            select_rows(&f, &batch.sketch_pos),
            select_rows(&f, &batch.sketch_neg),
        );
        let emb = TripletEmbeddings {
            sketch: &s,
            photo: &p,
            negative: &n,
            photo_aug: &pa,
            sketch_pos: &sp,
            sketch_neg: &sn,
        };
        let u = (!batch.u_aug.is_empty()).then(|| {
            (
                select_rows(&f, &batch.u_anchor),
                select_rows(&f, &batch.u_aug),
                select_rows(&f, &batch.u_neg),
            )
        });
        let u_emb = u.as_ref().map(|(a, t, n)| PhotoTripletEmbeddings {
            anchor: a,
            augmented: t,
            negative: n,
        });
        let mut w = TripletWeights::from_hp(hp, u_emb.is_some());
        w.cm = cm_weight;
        let (bd, gr) = combined_training_loss_with_grad(&emb, u_emb.as_ref(), hp, w)?;
        scatter_rows(&mut f_seed, &batch.sketch, &gr.sketch);
        scatter_rows(&mut f_seed, &batch.photo, &gr.photo);
        scatter_rows(&mut f_seed, &batch.negative, &gr.negative);
        scatter_rows(&mut f_seed, &batch.photo_aug, &gr.photo_aug);
        scatter_rows(&mut f_seed, &batch.sketch_pos, &gr.sketch_pos);
        scatter_rows(&mut f_seed, &batch.sketch_neg, &gr.sketch_neg);
        if let Some((ga, gt, gn)) = &gr.unlabelled {
            scatter_rows(&mut f_seed, &batch.u_anchor, ga);
            scatter_rows(&mut f_seed, &batch.u_aug, gt);
            scatter_rows(&mut f_seed, &batch.u_neg, gn);
            losses.tri_u = Some(bd.tri_u);
        }
        losses.im_p = Some(bd.im_p);
        losses.im_s = Some(bd.im_s);
        breakdown = bd;
    } else {
        let (l, gs, gp, gn) = batch_triplet_loss(&s, &p, &n, hp.m_cm)?;
        if cm_weight != 0.0 {
            scatter_rows(&mut f_seed, &batch.sketch, &gs);
            scatter_rows(&mut f_seed, &batch.photo, &gp);
            scatter_rows(&mut f_seed, &batch.negative, &gn);
        }
        breakdown = LossBreakdown {
            cm: l,
            total: cm_weight * l,
            ..Default::default()
        };
    }
    losses.cm = cm_value.unwrap_or(breakdown.cm);
    losses.total = breakdown.total + cm_value.unwrap_or(0.0);

    let mut mu_seed = None;
    if terms.distills() {
        let mu_var = out.mu.ok_or_else(|| Error::InvalidArgument("student forward produced no distillation feature".into()))?;
        let mu = g.value(mu_var);
        let w = KdWeights {
            pl: if terms.kl_pl { 1.0 } else { 0.0 },
            sl: if terms.kl_sl { hp.lambda4 } else { 0.0 },
            pu: if terms.kl_pu { hp.lambda5 } else { 0.0 },
        };
        let (kd, mut gmu): (KdBreakdown, Tensor) = distillation_loss(mu, &batch.kd, hp.tau, w)?;
        losses.kl_pl = terms.kl_pl.then_some(kd.kl_pl);
        losses.kl_sl = terms.kl_sl.then_some(kd.kl_sl);
        losses.kl_pu = (terms.kl_pu && !batch.kd.photos_unlabelled.is_empty()).then_some(kd.kl_pu);
        losses.total += hp.lambda6 * kd.total;
        gmu.data_mut().iter_mut().for_each(|v| *v *= hp.lambda6);
        mu_seed = Some((mu_var, gmu));
    }
    if !want_grad {
        return Ok((losses, None));
    }
    let mut seeds: Vec<(crate::tensor::Var, &[f64])> = vec![(out.f, f_seed.data())];
    if let Some((v, t)) = &mu_seed {
        seeds.push((*v, t.data()));
    }
    let grads = g.backward(&seeds)?;
    Ok((losses, Some(grads_by_name(&out, &grads))))
}

// ---------------------------------------------------------------------------
// metrics

pub const METRICS_COLUMNS: [&str; 15] = [
    "step",
    "loss_total",
    "loss_cm",
    "loss_im_p",
    "loss_im_s",
    "loss_tri_u",
    "loss_kl_pl",
    "loss_kl_sl",
    "loss_kl_pu",
    "acc1_raw",
    "acc5_raw",
    "acc10_raw",
    "acc1_ema",
    "acc5_ema",
    "acc10_ema",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub losses: StepLosses,
    pub acc_raw: Option<[f64; 3]>,
    pub acc_ema: Option<[f64; 3]>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let l = &self.losses;
        let mut cells = vec![
            self.step.to_string(),
            format!("{}", l.total),
            format!("{}", l.cm),
            opt(l.im_p),
            opt(l.im_s),
            opt(l.tri_u),
            opt(l.kl_pl),
            opt(l.kl_sl),
            opt(l.kl_pu),
        ];
        for acc in [self.acc_raw, self.acc_ema] {
            for q in 0..3 {
                cells.push(opt(acc.map(|a| a[q])));
            }
        }
        cells.join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = METRICS_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    crate::checkpoint::write_atomic(path, metrics_csv(rows).as_bytes())
}

// ---------------------------------------------------------------------------
// student training

/// Data of a student run.
pub struct TrainInputs<'a> {
    pub labelled: Vec<&'a Instance>,
    pub unlabelled: Vec<&'a Instance>,
    pub eval: Option<EvalSet<'a>>,
}

impl<'a> TrainInputs<'a> {
    pub fn from_split(split: &'a Split) -> Result<Self> {
        let test: Vec<&Instance> = split.test.iter().collect();
        Ok(Self {
            labelled: split.labelled.iter().collect(),
            unlabelled: split.unlabelled.iter().collect(),
            eval: if test.is_empty() { None } else { Some(EvalSet::from_instances(&test)?) },
        })
    }
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub model: Backbone,
    pub ema: Option<EmaState>,
    pub optimizer: AdamW,
    pub step: u64,
    pub mode: StudentMode,
    pub hp: Hyperparameters,
    pub metrics: Vec<MetricsRow>,
    /// Instance ids used as anchors or negatives of labelled triplets.
    pub labelled_ids: BTreeSet<String>,
    /// Unlabelled photo ids consumed by the unlabelled branch.
    pub unlabelled_ids: BTreeSet<String>,
}

impl StudentRun {
    /// Weights used for reporting: EMA when the run keeps one.
    pub fn exported(&self) -> Backbone {
        let mut m = self.model.clone();
        if let Some(e) = &self.ema {
            m.load_params(e.shadow().clone()).expect("shadow layout matches model");
        }
        m
    }

    /// Accuracies of the last evaluation (EMA column when available).
    pub fn final_acc(&self) -> Option<[f64; 3]> {
        let last = self.metrics.iter().rev().find(|r| r.acc_raw.is_some())?;
        last.acc_ema.or(last.acc_raw)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            step: self.step,
            config_hash: self.hp.config_hash(),
            ..Default::default()
        };
        c.meta.insert("role".into(), "student".into());
        c.meta.insert("mode".into(), self.mode.name().into());
        c.meta.insert("config".into(), self.hp.to_config_string());
        c.meta.insert("token".into(), token_design_name(self.model.config().token).into());
        c.meta.insert("opt_steps".into(), self.optimizer.steps().to_string());
        c.tensors = self.model.params().clone();
        if let Some(e) = &self.ema {
            c.meta.insert("ema_beta".into(), e.beta().to_string());
            c.meta.insert("ema_step".into(), e.step().to_string());
            for (k, v) in e.shadow() {
                c.tensors.insert(format!("ema.{k}"), v.clone());
            }
        }
        let (m, v) = self.optimizer.moments();
        for (k, t) in m {
            c.tensors.insert(format!("opt.m.{k}"), t.clone());
        }
        for (k, t) in v {
            c.tensors.insert(format!("opt.v.{k}"), t.clone());
        }
        c
    }
}

fn evaluate_both(model: &mut Backbone, ema: Option<&EmaState>, set: &EvalSet) -> Result<(Option<[f64; 3]>, Option<[f64; 3]>)> {
    let raw = top_k_accuracies(&evaluate(model, set, Mode::Student)?)?;
    let ema_acc = match ema {
        Some(e) => {
            let guard = e.swap_for_eval(model)?;
            Some(top_k_accuracies(&evaluate(&guard, set, Mode::Student)?)?)
        }
        None => None,
    };
    Ok((Some(raw), ema_acc))
}

/// Train a student. Distilling modes need `teacher`.
pub fn train_student(
    inputs: &TrainInputs,
    teacher: Option<&Teacher>,
    hp: &Hyperparameters,
    mode: StudentMode,
    opts: &ExperimentOptions,
) -> Result<StudentRun> {
    hp.validate()?;
    let terms = mode.terms();
    if terms.distills() && teacher.is_none() {
        return Err(Error::InvalidArgument(format!("mode {mode} requires a teacher checkpoint")));
    }
    let labelled = &inputs.labelled;
    let unlabelled = &inputs.unlabelled;
    if labelled.len() < 2 {
        return Err(Error::Data(format!("need at least 2 labelled instances, got {}", labelled.len())));
    }
    if let Some(bad) = labelled.iter().find(|i| i.sketches.len() < 2) {
        return Err(Error::Data(format!("labelled instance {} has fewer than 2 sketches", bad.instance_id)));
    }
    if opts.eval_every == 0 {
        return Err(Error::InvalidArgument("evaluation cadence must be >= 1".into()));
    }
    let photos: HashMap<&str, &Image> = unlabelled
        .iter()
        .chain(labelled.iter())
        .map(|i| (i.instance_id.as_str(), &i.photo))
        .collect();

    let cfg = backbone_config(hp, opts.token)?;
    let mut model = Backbone::new(cfg, &mut rng_stream(hp.seed, "student.init"))?;
    let mut optimizer = AdamW::new(model.params(), hp.weight_decay);
    let mut ema = if terms.ema { Some(EmaState::new(model.params(), hp.beta)?) } else { None };
    let mut rng_lab = rng_stream(hp.seed, "student.labelled");
    let mut rng_unl = rng_stream(hp.seed, "student.unlabelled");
    let mut rng_aug = rng_stream(hp.seed, "student.augment");
    let mut u_sampler = EpochSampler::new(unlabelled.len());

    let steps_per_epoch = labelled.len().div_ceil(hp.batch_size);
    let total = (hp.epochs * steps_per_epoch) as u64;
    let mut run_metrics = Vec::with_capacity(total as usize);
    let mut labelled_ids = BTreeSet::new();
    let mut unlabelled_ids = BTreeSet::new();
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    let mut step = 0u64;
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng_lab);
        for anchors in order.chunks(hp.batch_size) {
            let triplets = triplet_batch_for(labelled, anchors, opts.augmentation, &mut rng_lab, &mut rng_aug)?;
            for r in &triplets.rows {
                labelled_ids.insert(labelled[r.anchor].instance_id.clone());
                labelled_ids.insert(labelled[r.negative].instance_id.clone());
            }
            let u = if unlabelled.len() >= 2 {
                let ua = u_sampler.next_batch(anchors.len(), &mut rng_unl);
                let photo = |i: usize| unlabelled[i].photo.clone();
                Some(photo_triplets_for(unlabelled.len(), photo, &ua, opts.augmentation, &mut rng_unl, &mut rng_aug)?)
            } else {
                None
            };
            if let Some(u) = &u {
                if terms.im || terms.kl_pu {
                    for &i in u.anchors.iter().chain(&u.negatives) {
                        unlabelled_ids.insert(unlabelled[i].instance_id.clone());
                    }
                }
            }
            let batch = build_step_batch(StepInputs {
                labelled,
                triplets,
                unlabelled,
                unlabelled_triplets: u,
                teacher,
                photos: &photos,
                terms,
            })?;
            let (losses, grads) = student_objective(&model, &batch, hp, terms, opts.objective, true)?;
            step += 1;
            check_finite(losses.total, "student loss", step)?;
            let lr = cosine_lr(hp.lr, step as usize - 1, total as usize);
            optimizer.step(model.params_mut(), &grads.unwrap_or_default(), lr)?;
            if let Some(e) = ema.as_mut() {
                e.update(model.params())?;
            }
            let mut row = MetricsRow {
                step,
                losses,
                acc_raw: None,
                acc_ema: None,
            };
            if let Some(set) = &inputs.eval {
                if step % opts.eval_every as u64 == 0 || step == total {
                    let (r, e) = evaluate_both(&mut model, ema.as_ref(), set)?;
                    row.acc_raw = r;
                    row.acc_ema = e;
                    log::debug!("step {step}: loss {:.4} acc1 raw {:?} ema {:?}", losses.total, r.map(|a| a[0]), e.map(|a| a[0]));
                }
            }
            run_metrics.push(row);
        }
    }
    if let Some(path) = &opts.metrics_path {
        write_metrics_csv(path, &run_metrics)?;
    }
    Ok(StudentRun {
        model,
        ema,
        optimizer,
        step,
        mode,
        hp: hp.clone(),
        metrics: run_metrics,
        labelled_ids,
        unlabelled_ids,
    })
}

/// Restore a run's model, EMA and optimizer from a student checkpoint.
pub fn student_from_checkpoint(c: &Checkpoint) -> Result<(Backbone, Option<EmaState>, AdamW)> {
    let model = c.backbone(false)?;
    let shadow = c.section("ema.");
    let ema = if shadow.is_empty() {
        None
    } else {
        let beta: f64 = c.meta.get("ema_beta").and_then(|b| b.parse().ok()).unwrap_or(c.hyperparameters()?.beta);
        let st: u64 = c.meta.get("ema_step").and_then(|s| s.parse().ok()).unwrap_or(0);
        Some(EmaState::from_parts(shadow, beta, st)?)
    };
    let hp = c.hyperparameters()?;
    let mut opt = AdamW::new(model.params(), hp.weight_decay);
    let m: ParamMap = c.section("opt.m.");
    let v: ParamMap = c.section("opt.v.");
    if !m.is_empty() {
        let t = c.meta.get("opt_steps").and_then(|s| s.parse().ok()).unwrap_or(0);
        opt.restore(m, v, t)?;
    }
    Ok((model, ema, opt))
}

// ---------------------------------------------------------------------------
// experiments

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run: StudentRun,
    pub teacher: Option<Teacher>,
    /// Final held-out Acc@1/5/10 (NaN without a test split).
    pub final_acc: [f64; 3],
    pub labelled_ids: BTreeSet<String>,
    exported: Backbone,
}

impl ExperimentOutcome {
    pub fn final_model(&self) -> &Backbone {
        &self.exported
    }
}

/// Pretrain a teacher when the mode needs one, then train the student.
pub fn run_experiment(split: &Split, hp: &Hyperparameters, mode: StudentMode, opts: &ExperimentOptions) -> Result<ExperimentOutcome> {
    let teacher = if mode.terms().distills() {
        let pool = split.photo_pool();
        Some(pretrain_teacher(&pool, hp, opts.teacher_epochs.unwrap_or(hp.epochs))?)
    } else {
        None
    };
    let mut out = run_experiment_with_teacher(split, hp, mode, opts, teacher.as_ref())?;
    out.teacher = teacher;
    Ok(out)
}

pub fn run_experiment_with_teacher(
    split: &Split,
    hp: &Hyperparameters,
    mode: StudentMode,
    opts: &ExperimentOptions,
    teacher: Option<&Teacher>,
) -> Result<ExperimentOutcome> {
    let inputs = TrainInputs::from_split(split)?;
    let run = train_student(&inputs, teacher, hp, mode, opts)?;
    let final_acc = run.final_acc().unwrap_or([f64::NAN; 3]);
    let exported = run.exported();
    Ok(ExperimentOutcome {
        labelled_ids: run.labelled_ids.clone(),
        run,
        teacher: None,
        final_acc,
        exported,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    LossStripdown,
    Augmentation,
    TokenDesign,
}

impl AblationSuite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss_stripdown" => Ok(Self::LossStripdown),
            "augmentation" => Ok(Self::Augmentation),
            "token_design" => Ok(Self::TokenDesign),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation suite `{other}` (expected loss_stripdown, augmentation or token_design)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LossStripdown => "loss_stripdown",
            Self::Augmentation => "augmentation",
            Self::TokenDesign => "token_design",
        }
    }

    /// `(row label, mode, options)` per variant.
    fn variants(self, base: &ExperimentOptions) -> Vec<(String, StudentMode, ExperimentOptions)> {
        match self {
            Self::LossStripdown => StudentMode::STRIPDOWN
                .iter()
                .map(|&m| (m.label().to_string(), m, base.clone()))
                .collect(),
            Self::Augmentation => PhotoAugmentation::ALL
                .iter()
                .map(|&a| {
                    let o = ExperimentOptions {
                        augmentation: a,
                        ..base.clone()
                    };
                    (a.name().to_string(), StudentMode::FullKd, o)
                })
                .collect(),
            Self::TokenDesign => [TokenDesign::Shared, TokenDesign::LastLevel, TokenDesign::EveryLevel]
                .iter()
                .map(|&t| {
                    let o = ExperimentOptions { token: t, ..base.clone() };
                    (token_design_name(t).to_string(), StudentMode::FullKd, o)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mode: StudentMode,
    pub seeds: Vec<u64>,
    pub acc1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `variant,mode,seeds,acc1_mean,acc1_std`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mode,seeds,acc1_mean,acc1_std\n");
        for r in &self.rows {
            let (m, sd) = mean_std(&r.acc1);
            let _ = writeln!(s, "{},{},{},{m:.4},{sd:.4}", r.variant, r.mode.name(), r.seeds.len());
        }
        s
    }
}

/// Run every variant of `suite` for each seed. The teacher of a seed is
/// trained once and shared by all variants.
pub fn run_ablation(
    suite: AblationSuite,
    split_for_seed: &dyn Fn(u64) -> Result<Split>,
    hp: &Hyperparameters,
    seeds: &[u64],
    opts: &ExperimentOptions,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let variants = suite.variants(opts);
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|(label, mode, _)| AblationRow {
            variant: label.clone(),
            mode: *mode,
            seeds: Vec::new(),
            acc1: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let hp_s = Hyperparameters { seed, ..hp.clone() };
        let split = split_for_seed(seed)?;
        let pool = split.photo_pool();
        let teacher = pretrain_teacher(&pool, &hp_s, opts.teacher_epochs.unwrap_or(hp.epochs))?;
        for (row, (label, mode, o)) in rows.iter_mut().zip(&variants) {
            let out = run_experiment_with_teacher(&split, &hp_s, *mode, o, Some(&teacher))?;
            log::info!("{} {label} seed {seed}: acc1 {:.4}", suite.name(), out.final_acc[0]);
            row.seeds.push(seed);
            row.acc1.push(out.final_acc[0]);
        }
    }
    Ok(AblationTable { suite, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tiny_profile;

    fn tiny_split() -> Split {
        let mut hp_spec = SyntheticSpec::new(10, 2, 2, 3);
        hp_spec.image_size = 8;
        let ds = generate_synthetic(&hp_spec).unwrap();
        let mut it = ds.instances.into_iter();
        Split {
            labelled: it.by_ref().take(4).collect(),
            test: it.by_ref().take(2).collect(),
            unlabelled: it.map(|i| Instance { sketches: vec![], ..i }).collect(),
        }
    }

    #[test]
    fn terms_follow_table() {
        let t = StudentMode::TypeI.terms();
        assert!(!t.im && !t.ema && t.kl_pu && t.kl_pl && t.kl_sl);
        let t = StudentMode::TypeIII.terms();
        assert!(t.im && t.ema && t.kl_pu && !t.kl_pl && !t.kl_sl);
        assert!(!StudentMode::StrongBaseline.terms().distills());
        assert_eq!(StudentMode::parse("full_kd").unwrap(), StudentMode::FullKd);
        assert!(StudentMode::parse("nope").is_err());
        assert!(AblationSuite::parse("nope").is_err());
    }

    #[test]
    fn rng_streams_differ_by_name() {
        use rand::Rng;
        let a: u64 = rng_stream(1, "a").gen();
        let b: u64 = rng_stream(1, "b").gen();
        let a2: u64 = rng_stream(1, "a").gen();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn teacher_step_count() {
        let split = tiny_split();
        let pool: Vec<(&str, &Image)> = split.unlabelled.iter().chain(&split.labelled).take(8).map(|i| (i.instance_id.as_str(), &i.photo)).collect();
        let hp = Hyperparameters { batch_size: 4, ..tiny_profile() };
        let t = pretrain_teacher(&pool, &hp, 1).unwrap();
        assert_eq!(t.step, 2);
        assert_eq!(t.bank.len(), 8);
        assert!(pretrain_teacher(&pool[..1], &hp, 1).is_err());
    }

    #[test]
    fn full_kd_without_teacher_fails() {
        let split = tiny_split();
        let inputs = TrainInputs::from_split(&split).unwrap();
        let err = train_student(&inputs, None, &tiny_profile(), StudentMode::FullKd, &ExperimentOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn baseline_logs_empty_distillation_columns() {
        let split = tiny_split();
        let inputs = TrainInputs::from_split(&split).unwrap();
        let opts = ExperimentOptions { eval_every: 1, ..Default::default() };
        let run = train_student(&inputs, None, &tiny_profile(), StudentMode::StrongBaseline, &opts).unwrap();
        assert_eq!(run.step, 2);
        let csv = metrics_csv(&run.metrics);
        let line = csv.lines().nth(1).unwrap();
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 15);
        assert!(cells[6].is_empty() && cells[7].is_empty() && cells[8].is_empty());
        assert!(!cells[9].is_empty() && !cells[12].is_empty());
    }
}
