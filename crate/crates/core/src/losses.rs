//! Triplet objectives, their weighted combination and a supervised
//! contrastive alternative.
//!
//! Batch losses come with analytic gradients with respect to the embedding
//! matrices so the trainer can seed the backbone's backward pass directly.
//! Hinges use the zero subgradient at the kink.

use crate::config::Hyperparameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_margin(name: &str, m: f64) -> Result<()> {
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {m}")));
    }
    Ok(())
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(sq(a, b))
}

/// `max(0, m + δ(a, p) − δ(a, n))`.
pub fn triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    check_len(anchor, positive)?;
    check_len(anchor, negative)?;
    check_margin("margin", margin)?;
    Ok((margin + sq(anchor, positive) - sq(anchor, negative)).max(0.0))
}

pub fn cross_modal_triplet(f_s: &[f64], f_p: &[f64], f_n: &[f64], m_cm: f64) -> Result<f64> {
    triplet(f_s, f_p, f_n, m_cm)
}

/// Photo term (anchor photo, its structural augmentation, another photo)
/// and sketch term (anchor sketch, sibling sketch, other-instance sketch).
#[allow(clippy::too_many_arguments)]
pub fn intra_modal_triplets(
    f_p: &[f64],
    f_pt: &[f64],
    f_n: &[f64],
    f_s: &[f64],
    f_sp: &[f64],
    f_sn: &[f64],
    m_im_p: f64,
    m_im_s: f64,
) -> Result<(f64, f64)> {
    Ok((triplet(f_p, f_pt, f_n, m_im_p)?, triplet(f_s, f_sp, f_sn, m_im_s)?))
}

/// Per-term values of the discriminative objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cm: f64,
    pub im_p: f64,
    pub im_s: f64,
    pub tri_u: f64,
    pub total: f64,
}

/// Term weights. `cm` is 1 in every configuration used by the trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletWeights {
    pub cm: f64,
    pub im_p: f64,
    pub im_s: f64,
    pub tri_u: f64,
}

impl TripletWeights {
    pub fn from_hp(hp: &Hyperparameters, include_unlabelled: bool) -> Self {
        Self {
            cm: 1.0,
            im_p: hp.lambda1,
            im_s: hp.lambda2,
            tri_u: if include_unlabelled { hp.lambda3 } else { 0.0 },
        }
    }
}

/// Embeddings of one labelled triplet batch, each `[B, d]`, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct TripletEmbeddings<'a> {
    pub sketch: &'a Tensor,
    pub photo: &'a Tensor,
    pub negative: &'a Tensor,
    pub photo_aug: &'a Tensor,
    pub sketch_pos: &'a Tensor,
    pub sketch_neg: &'a Tensor,
}

/// Embeddings of an unlabelled photo triplet batch, each `[B, d]`.
#[derive(Debug, Clone, Copy)]
pub struct PhotoTripletEmbeddings<'a> {
    pub anchor: &'a Tensor,
    pub augmented: &'a Tensor,
    pub negative: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradients {
    pub sketch: Tensor,
    pub photo: Tensor,
    pub negative: Tensor,
    pub photo_aug: Tensor,
    pub sketch_pos: Tensor,
    pub sketch_neg: Tensor,
    /// `(anchor, augmented, negative)` when the unlabelled branch is active.
    pub unlabelled: Option<(Tensor, Tensor, Tensor)>,
}

fn same_shape(name: &str, reference: &Tensor, t: &Tensor) -> Result<()> {
    if t.shape() != reference.shape() || t.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{name}: expected {:?}, got {:?}",
            reference.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Mean hinge over rows; accumulates `weight * d(mean)/d(row)` into the
/// three gradient matrices.
fn batch_triplet(
    a: &Tensor,
    p: &Tensor,
    n: &Tensor,
    margin: f64,
    weight: f64,
    grads: Option<(&mut Tensor, &mut Tensor, &mut Tensor)>,
) -> f64 {
    let rows = a.rows();
    let mut total = 0.0;
    let mut active = Vec::with_capacity(rows);
    for i in 0..rows {
        let h = margin + sq(a.row(i), p.row(i)) - sq(a.row(i), n.row(i));
        if h > 0.0 {
            total += h;
            active.push(i);
        }
    }
    if let Some((ga, gp, gn)) = grads {
        let s = 2.0 * weight / rows as f64;
        for i in active {
            let (ar, pr, nr) = (a.row(i), p.row(i), n.row(i));
            let gar = ga.row_mut(i);
            for j in 0..ar.len() {
                gar[j] += s * (nr[j] - pr[j]);
            }
            let gpr = gp.row_mut(i);
            for j in 0..ar.len() {
                gpr[j] -= s * (ar[j] - pr[j]);
            }
            let gnr = gn.row_mut(i);
            for j in 0..ar.len() {
                gnr[j] += s * (ar[j] - nr[j]);
            }
        }
    }
    total / rows as f64
}

/// Mean hinge `max(0, m + δ(a_i, p_i) − δ(a_i, n_i))` over rows of `[B, d]`
/// matrices, with gradients for `a`, `p` and `n`.
pub fn batch_triplet_loss(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> Result<(f64, Tensor, Tensor, Tensor)> {
    if a.shape().len() != 2 || a.rows() == 0 {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    same_shape("positive", a, p)?;
    same_shape("negative", a, n)?;
    check_margin("margin", margin)?;
    let z = || Tensor::zeros(a.shape().to_vec());
    let (mut ga, mut gp, mut gn) = (z(), z(), z());
    let loss = batch_triplet(a, p, n, margin, 1.0, Some((&mut ga, &mut gp, &mut gn)));
    Ok((loss, ga, gp, gn))
}

fn validate_batch(batch: &TripletEmbeddings, unlabelled: Option<&PhotoTripletEmbeddings>) -> Result<()> {
    if batch.sketch.shape().len() != 2 || batch.sketch.rows() == 0 {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    for (name, t) in [
        ("photo", batch.photo),
        ("negative", batch.negative),
        ("photo_aug", batch.photo_aug),
        ("sketch_pos", batch.sketch_pos),
        ("sketch_neg", batch.sketch_neg),
    ] {
        same_shape(name, batch.sketch, t)?;
    }
    if let Some(u) = unlabelled {
        if u.anchor.shape().len() != 2 || u.anchor.rows() == 0 {
            return Err(Error::InvalidArgument("empty unlabelled batch".into()));
        }
        if u.anchor.cols() != batch.sketch.cols() {
            return Err(Error::Shape("unlabelled embedding width differs".into()));
        }
        same_shape("augmented", u.anchor, u.augmented)?;
        same_shape("negative", u.anchor, u.negative)?;
    }
    Ok(())
}

fn combined(
    batch: &TripletEmbeddings,
    unlabelled: Option<&PhotoTripletEmbeddings>,
    hp: &Hyperparameters,
    w: TripletWeights,
    mut grads: Option<&mut TripletGradients>,
) -> Result<LossBreakdown> {
    validate_batch(batch, unlabelled)?;
    check_margin("m_cm", hp.m_cm)?;
    check_margin("m_im_p", hp.m_im_p)?;
    check_margin("m_im_s", hp.m_im_s)?;
    let cm = {
        let g = grads.as_deref_mut().map(|g| (&mut g.sketch, &mut g.photo, &mut g.negative));
        batch_triplet(batch.sketch, batch.photo, batch.negative, hp.m_cm, w.cm, g)
    };
    let im_p = {
        let g = grads.as_deref_mut().map(|g| (&mut g.photo, &mut g.photo_aug, &mut g.negative));
        batch_triplet(batch.photo, batch.photo_aug, batch.negative, hp.m_im_p, w.im_p, g)
    };
    let im_s = {
        let g = grads.as_deref_mut().map(|g| (&mut g.sketch, &mut g.sketch_pos, &mut g.sketch_neg));
        batch_triplet(batch.sketch, batch.sketch_pos, batch.sketch_neg, hp.m_im_s, w.im_s, g)
    };
    let tri_u = match unlabelled {
        Some(u) => {
            let g = grads
                .as_deref_mut()
                .and_then(|g| g.unlabelled.as_mut())
                .map(|(a, b, c)| (a, b, c));
            batch_triplet(u.anchor, u.augmented, u.negative, hp.m_im_p, w.tri_u, g)
        }
        None => 0.0,
    };
    let total = w.cm * cm + w.im_p * im_p + w.im_s * im_s + w.tri_u * tri_u;
    Ok(LossBreakdown {
        cm,
        im_p,
        im_s,
        tri_u,
        total,
    })
}

/// Discriminative objective of one step. With `unlabelled` present the
/// photo-form triplet on unlabelled photos enters with weight `lambda3`.
pub fn combined_training_loss(
    batch: &TripletEmbeddings,
    unlabelled: Option<&PhotoTripletEmbeddings>,
    hp: &Hyperparameters,
) -> Result<LossBreakdown> {
    let w = TripletWeights::from_hp(hp, unlabelled.is_some());
    combined(batch, unlabelled, hp, w, None)
}

/// Same as [`combined_training_loss`] with explicit weights, plus gradients
/// of `total` with respect to every embedding matrix.
pub fn combined_training_loss_with_grad(
    batch: &TripletEmbeddings,
    unlabelled: Option<&PhotoTripletEmbeddings>,
    hp: &Hyperparameters,
    weights: TripletWeights,
) -> Result<(LossBreakdown, TripletGradients)> {
    let z = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
    let mut grads = TripletGradients {
        sketch: z(batch.sketch),
        photo: z(batch.photo),
        negative: z(batch.negative),
        photo_aug: z(batch.photo_aug),
        sketch_pos: z(batch.sketch_pos),
        sketch_neg: z(batch.sketch_neg),
        unlabelled: unlabelled.map(|u| (z(u.anchor), z(u.augmented), z(u.negative))),
    };
    let breakdown = combined(batch, unlabelled, hp, weights, Some(&mut grads))?;
    Ok((breakdown, grads))
}

/// Supervised normalised-temperature contrastive loss over the `2N` views
/// `[f_a; f_b]`, using cosine similarity. Views sharing a label are
/// positives of each other. Returns the loss and its gradients with respect
/// to `f_a` and `f_b`.
pub fn contrastive_alternative(
    f_a: &Tensor,
    f_b: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Tensor, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    same_shape("f_b", f_a, f_b)?;
    let n = f_a.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("contrastive loss needs batch >= 2, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    let d = f_a.cols();
    let views = 2 * n;
    let raw: Vec<&[f64]> = (0..n).map(|i| f_a.row(i)).chain((0..n).map(|i| f_b.row(i))).collect();
    let label = |i: usize| labels[i % n];
    let norms: Vec<f64> = raw.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)).collect();
    let z: Vec<Vec<f64>> = raw.iter().zip(&norms).map(|(r, nm)| r.iter().map(|x| x / nm).collect()).collect();
    let dot = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>();

    let mut loss = 0.0;
    let mut gz = vec![vec![0.0; d]; views];
    for i in 0..views {
        let logits: Vec<(usize, f64)> = (0..views).filter(|&a| a != i).map(|a| (a, dot(i, a) / tau)).collect();
        let mx = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l.1 - mx).exp()).sum();
        let log_z = mx + denom.ln();
        let positives: Vec<usize> = logits.iter().filter(|l| label(l.0) == label(i)).map(|l| l.0).collect();
        let np = positives.len() as f64;
        for &(a, s) in &logits {
            if label(a) == label(i) {
                loss += (log_z - s) / np / views as f64;
            }
        }
        for &(a, s) in &logits {
            let pos = if label(a) == label(i) { 1.0 / np } else { 0.0 };
            let g = ((s - log_z).exp() - pos) / views as f64 / tau;
            for k in 0..d {
                gz[i][k] += g * z[a][k];
                gz[a][k] += g * z[i][k];
            }
        }
    }
    let mut ga = Tensor::zeros(vec![n, d]);
    let mut gb = Tensor::zeros(vec![n, d]);
    for v in 0..views {
        let proj: f64 = z[v].iter().zip(&gz[v]).map(|(a, b)| a * b).sum();
        let row = if v < n { ga.row_mut(v) } else { gb.row_mut(v - n) };
        for k in 0..d {
            row[k] = (gz[v][k] - z[v][k] * proj) / norms[v];
        }
    }
    Ok((loss, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(squared_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(squared_distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(squared_distance(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 25.0);
        assert!(squared_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(cross_modal_triplet(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 0.5).unwrap(), 0.0);
        assert_eq!(cross_modal_triplet(&[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.0], 0.5).unwrap(), 3.5);
        assert_eq!(cross_modal_triplet(&[0.3, 1.0], &[5.0, 2.0], &[5.0, 2.0], 0.5).unwrap(), 0.5);
        assert!(cross_modal_triplet(&[0.0], &[0.0], &[0.0], -0.1).is_err());
        let (p, s) = intra_modal_triplets(&[0.0], &[0.1], &[2.0], &[1.0], &[1.0], &[1.0], 0.3, 0.2).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(s, 0.2);
        assert_eq!(
            intra_modal_triplets(&[1.0], &[1.0], &[1.0], &[1.0], &[1.0], &[1.0], 0.0, 0.0).unwrap(),
            (0.0, 0.0)
        );
    }

    fn filled(rows: usize, d: usize, v: f64) -> Tensor {
        Tensor::new(vec![rows, d], vec![v; rows * d]).unwrap()
    }

    #[test]
    fn collapsed_and_zeroed_weights() {
        let hp = crate::config::desk_profile();
        let t = filled(3, 4, 0.7);
        let batch = TripletEmbeddings {
            sketch: &t,
            photo: &t,
            negative: &t,
            photo_aug: &t,
            sketch_pos: &t,
            sketch_neg: &t,
        };
        let l = combined_training_loss(&batch, None, &hp).unwrap();
        assert_relative_eq!(l.total, hp.m_cm + hp.lambda1 * hp.m_im_p + hp.lambda2 * hp.m_im_s, max_relative = 1e-12);
        let hp0 = Hyperparameters {
            lambda1: 0.0,
            lambda2: 0.0,
            ..hp.clone()
        };
        let l0 = combined_training_loss(&batch, None, &hp0).unwrap();
        assert_eq!(l0.total, l0.cm);
        let u = PhotoTripletEmbeddings {
            anchor: &t,
            augmented: &t,
            negative: &t,
        };
        let lu = combined_training_loss(&batch, Some(&u), &hp).unwrap();
        assert_relative_eq!(lu.total, l.total + hp.lambda3 * hp.m_im_p, max_relative = 1e-12);
        let empty = Tensor::zeros(vec![0, 4]);
        let e = TripletEmbeddings {
            sketch: &empty,
            photo: &empty,
            negative: &empty,
            photo_aug: &empty,
            sketch_pos: &empty,
            sketch_neg: &empty,
        };
        assert!(combined_training_loss(&e, None, &hp).is_err());
    }

    #[test]
    fn contrastive_limits_and_errors() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let (l, _, _) = contrastive_alternative(&a, &a, &[0, 1], 1e8).unwrap();
        assert_relative_eq!(l, 3f64.ln(), max_relative = 1e-6);
        assert!(contrastive_alternative(&a, &a, &[0, 1], 0.0).is_err());
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(contrastive_alternative(&one, &one, &[0], 0.1).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        let a = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.0, 0.2, -0.4], vec![-0.6, 0.9, 0.1]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1, -0.8, 0.7], vec![0.9, 0.5, -0.2], vec![-0.3, 1.1, 0.4]]).unwrap();
        let labels = [0, 1, 0];
        let (_, ga, gb) = contrastive_alternative(&a, &b, &labels, 0.5).unwrap();
        let h = 1e-6;
        for (which, g) in [(0, &ga), (1, &gb)] {
            for idx in 0..9 {
                let mut plus = [a.clone(), b.clone()];
                plus[which].data_mut()[idx] += h;
                let mut minus = [a.clone(), b.clone()];
                minus[which].data_mut()[idx] -= h;
                let lp = contrastive_alternative(&plus[0], &plus[1], &labels, 0.5).unwrap().0;
                let lm = contrastive_alternative(&minus[0], &minus[1], &labels, 0.5).unwrap().0;
                assert_relative_eq!((lp - lm) / (2.0 * h), g.data()[idx], epsilon = 1e-7, max_relative = 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn shift_invariance_and_non_negativity(
            v in prop::collection::vec(-3.0f64..3.0, 9),
            shift in prop::collection::vec(-5.0f64..5.0, 3),
            m in 0.0f64..1.0,
        ) {
            let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
            let l = triplet(a, p, n, m).unwrap();
            prop_assert!(l >= 0.0);
            let s = |x: &[f64]| x.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>();
            let ls = triplet(&s(a), &s(p), &s(n), m).unwrap();
            prop_assert!((l - ls).abs() <= 1e-9 * (1.0 + l.abs()));
        }

        #[test]
        fn pushing_negative_away_never_increases_loss(
            v in prop::collection::vec(-3.0f64..3.0, 9),
            push in 0.0f64..3.0,
            m in 0.0f64..1.0,
        ) {
            let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
            let dir: Vec<f64> = n.iter().zip(a).map(|(x, y)| x - y).collect();
            let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(len > 1e-6);
            let farther: Vec<f64> = n.iter().zip(&dir).map(|(x, d)| x + push * d / len).collect();
            prop_assert!(triplet(a, p, &farther, m).unwrap() <= triplet(a, p, n, m).unwrap() + 1e-12);
        }

        #[test]
        fn batch_gradient_matches_differences(
            v in prop::collection::vec(-1.0f64..1.0, 6 * 2 * 3 + 3 * 2 * 3),
        ) {
            let hp = crate::config::desk_profile();
            let mats: Vec<Tensor> = v.chunks(6).map(|c| Tensor::new(vec![2, 3], c.to_vec()).unwrap()).collect();
            let loss = |m: &[Tensor]| {
                let b = TripletEmbeddings { sketch: &m[0], photo: &m[1], negative: &m[2], photo_aug: &m[3], sketch_pos: &m[4], sketch_neg: &m[5] };
                let u = PhotoTripletEmbeddings { anchor: &m[6], augmented: &m[7], negative: &m[8] };
                combined_training_loss(&b, Some(&u), &hp).unwrap().total
            };
            // skip samples where some hinge sits near its kink
            let hinge_args = |m: &[Tensor]| {
                let mut out = Vec::new();
                for i in 0..2 {
                    for (a, p, n, mg) in [(0, 1, 2, hp.m_cm), (1, 3, 2, hp.m_im_p), (0, 4, 5, hp.m_im_s), (6, 7, 8, hp.m_im_p)] {
                        out.push(mg + sq(m[a].row(i), m[p].row(i)) - sq(m[a].row(i), m[n].row(i)));
                    }
                }
                out
            };
            prop_assume!(hinge_args(&mats).iter().all(|h| h.abs() > 1e-3));
            let b = TripletEmbeddings { sketch: &mats[0], photo: &mats[1], negative: &mats[2], photo_aug: &mats[3], sketch_pos: &mats[4], sketch_neg: &mats[5] };
            let u = PhotoTripletEmbeddings { anchor: &mats[6], augmented: &mats[7], negative: &mats[8] };
            let (_, g) = combined_training_loss_with_grad(&b, Some(&u), &hp, TripletWeights::from_hp(&hp, true)).unwrap();
            let (ua, ub, uc) = g.unlabelled.clone().unwrap();
            let gs = [g.sketch, g.photo, g.negative, g.photo_aug, g.sketch_pos, g.sketch_neg, ua, ub, uc];
            let h = 1e-5;
            for k in 0..mats.len() {
                for idx in 0..6 {
                    let mut p = mats.clone();
                    p[k].data_mut()[idx] += h;
                    let mut m = mats.clone();
                    m[k].data_mut()[idx] -= h;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let an = gs[k].data()[idx];
                    prop_assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "{k} {idx}: {fd} vs {an}");
                }
            }
        }
    }
}
