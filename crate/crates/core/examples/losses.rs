//! The loss functions on hand-made embeddings: triplet hinges, the
//! similarity distributions and the distillation KL with its gradient.

use sketchkd::distill::{distillation_loss, kl_consistency, similarity_distribution, KdBatch, KdQuery, KdWeights};
use sketchkd::losses::{cross_modal_triplet, intra_modal_triplets};
use sketchkd::tensor::Tensor;

fn main() -> sketchkd::Result<()> {
    let (s, p, n) = ([0.0, 0.0], [0.3, 0.0], [1.0, 0.0]);
    println!("cross-modal triplet: {:.3}", cross_modal_triplet(&s, &p, &n, 0.5)?);
    let (im_p, im_s) = intra_modal_triplets(&p, &[0.35, 0.0], &n, &s, &[0.0, 0.1], &[0.0, 0.4], 0.3, 0.2)?;
    println!("intra-modal: photo {im_p:.3}, sketch {im_s:.3}");

    let teacher = similarity_distribution(&[0.2, 0.5, 0.9], 0.1)?;
    let student = similarity_distribution(&[0.4, 0.4, 0.6], 0.1)?;
    println!("teacher p {teacher:.3?}");
    println!("student p {student:.3?}");
    println!("KL {:.4}", kl_consistency(&teacher, &student)?);

    // one query (row 0) against three neighbours
    let mu = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.6, 0.2], vec![0.1, 0.6], vec![0.7, 0.5]])?;
    let batch = KdBatch {
        photos_unlabelled: vec![KdQuery {
            query_row: 0,
            neighbour_rows: vec![1, 2, 3],
            teacher_dists: vec![0.2, 0.5, 0.9],
        }],
        ..Default::default()
    };
    let weights = KdWeights { pl: 1.0, sl: 0.4, pu: 0.7 };
    let (kd, grad) = distillation_loss(&mu, &batch, 0.1, weights)?;
    println!("distillation total {:.4} (unlabelled KL {:.4})", kd.total, kd.kl_pu);
    for r in 0..grad.rows() {
        println!("  d/d mu[{r}] = {:.4?}", grad.row(r));
    }
    Ok(())
}
