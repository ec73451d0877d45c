//! Contextual-similarity distillation: a frozen teacher feature bank, exact
//! K-nearest-neighbour search, softmaxed neighbour distances and the KL
//! consistency between teacher and student.
//!
//! Bank file layout (little endian):
//!
//! ```text
//! magic  b"SKDBANK1"
//! u64    N (rows)
//! u64    d (columns)
//! N x    { u32 byte length, utf-8 id }
//! N*d    f32, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{Backbone, Mode};
use crate::config::Hyperparameters;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BANK_MAGIC: &[u8; 8] = b"SKDBANK1";

/// Frozen teacher embeddings, one row per photo id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    ids: Vec<String>,
    features: Tensor,
    index: HashMap<String, usize>,
}

/// The `K` nearest bank rows of one query, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourSet {
    pub query_id: Option<String>,
    pub neighbour_ids: Vec<String>,
    pub neighbour_rows: Vec<usize>,
    pub teacher_dists: Vec<f64>,
}

impl FeatureBank {
    pub fn new(ids: Vec<String>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids for feature matrix {:?}",
                ids.len(),
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                what: "bank feature".into(),
                location: "feature bank".into(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate bank id `{id}`")));
            }
        }
        Ok(Self { ids, features, index })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Neighbours of a bank member, excluding itself.
    pub fn neighbours_of(&self, id: &str, k: usize) -> Result<NeighbourSet> {
        let row = self
            .row_of(id)
            .ok_or_else(|| Error::Data(format!("id `{id}` not in bank")))?;
        knn(self, self.features.row(row), k, Some(id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(BANK_MAGIC)?;
        write(&(self.len() as u64).to_le_bytes())?;
        write(&(self.dim() as u64).to_le_bytes())?;
        for id in &self.ids {
            write(&(id.len() as u32).to_le_bytes())?;
            write(id.as_bytes())?;
        }
        for &v in self.features.data() {
            write(&(v as f32).to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != BANK_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a bank file", path.display())));
        }
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("bank id is not utf-8".into()))?;
            ids.push(id.to_string());
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after bank matrix".into()));
        }
        FeatureBank::new(ids, Tensor::new(vec![n, d], data)?)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Teacher features of every photo, in input order.
pub fn build_bank(teacher: &Backbone, photos: &[(&str, &Image)]) -> Result<FeatureBank> {
    if photos.is_empty() {
        return Err(Error::InvalidArgument("cannot build a bank from an empty pool".into()));
    }
    let images: Vec<&Image> = photos.iter().map(|p| p.1).collect();
    let out = teacher.forward(&images, Mode::Teacher)?;
    FeatureBank::new(photos.iter().map(|p| p.0.to_string()).collect(), out.f)
}

/// Exact nearest neighbours by squared distance; ties go to the smaller id.
pub fn knn(bank: &FeatureBank, query: &[f64], k: usize, exclude_id: Option<&str>) -> Result<NeighbourSet> {
    if query.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "query has {} dims, bank has {}",
            query.len(),
            bank.dim()
        )));
    }
    let excluded = exclude_id.and_then(|id| bank.row_of(id));
    let available = bank.len() - usize::from(excluded.is_some());
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!(
            "K = {k} but only {available} candidate neighbours"
        )));
    }
    let mut cand: Vec<(f64, usize)> = (0..bank.len())
        .filter(|&i| Some(i) != excluded)
        .map(|i| {
            let d = bank
                .features
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (d, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| bank.ids[a.1].cmp(&bank.ids[b.1]))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    Ok(NeighbourSet {
        query_id: exclude_id.map(str::to_string),
        neighbour_ids: cand.iter().map(|c| bank.ids[c.1].clone()).collect(),
        neighbour_rows: cand.iter().map(|c| c.1).collect(),
        teacher_dists: cand.iter().map(|c| c.0).collect(),
    })
}

/// `softmax(-dists / tau)`, computed with max subtraction.
pub fn similarity_distribution(dists: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if dists.is_empty() {
        return Err(Error::InvalidArgument("empty distance vector".into()));
    }
    if let Some(d) = dists.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidArgument(format!("distance {d} is not finite and >= 0")));
    }
    let logits: Vec<f64> = dists.iter().map(|d| -d / tau).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Log of [`similarity_distribution`].
pub fn log_similarity(dists: &[f64], tau: f64) -> Result<Vec<f64>> {
    similarity_distribution(dists, tau)?;
    let logits: Vec<f64> = dists.iter().map(|d| -d / tau).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(logits.into_iter().map(|l| l - lse).collect())
}

/// `KL(p_teacher || p_student)` with `0 ln 0 = 0`.
pub fn kl_consistency(p_teacher: &[f64], p_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != p_student.len() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            p_teacher.len(),
            p_student.len()
        )));
    }
    for (name, p) in [("teacher", p_teacher), ("student", p_student)] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} distribution is not normalised (sum {s})"
            )));
        }
    }
    let mut kl = 0.0;
    for (&t, &s) in p_teacher.iter().zip(p_student) {
        if t > 0.0 {
            kl += t * (t / s).ln();
        }
    }
    // rounding can leave a tiny negative sum for near-identical inputs
    Ok(kl.max(0.0))
}

/// One distillation query against rows of a student feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KdQuery {
    pub query_row: usize,
    pub neighbour_rows: Vec<usize>,
    /// Teacher distances, index-aligned with `neighbour_rows`.
    pub teacher_dists: Vec<f64>,
}

/// Queries of the three distillation branches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KdBatch {
    pub photos_labelled: Vec<KdQuery>,
    pub sketches: Vec<KdQuery>,
    pub photos_unlabelled: Vec<KdQuery>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KdBreakdown {
    pub kl_pl: f64,
    pub kl_sl: f64,
    pub kl_pu: f64,
    pub total: f64,
}

/// Branch weights; `(1, lambda4, lambda5)` for the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdWeights {
    pub pl: f64,
    pub sl: f64,
    pub pu: f64,
}

impl KdWeights {
    pub fn from_hp(hp: &Hyperparameters) -> Self {
        Self {
            pl: 1.0,
            sl: hp.lambda4,
            pu: hp.lambda5,
        }
    }
}

fn branch(mu: &Tensor, queries: &[KdQuery], tau: f64, weight: f64, grad: &mut Tensor) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let scale = weight / queries.len() as f64;
    let mut sum = 0.0;
    for q in queries {
        if q.neighbour_rows.len() != q.teacher_dists.len() || q.neighbour_rows.is_empty() {
            return Err(Error::Shape("neighbour rows and teacher distances differ".into()));
        }
        let rows = mu.rows();
        if q.query_row >= rows || q.neighbour_rows.iter().any(|&r| r >= rows) {
            return Err(Error::Shape(format!("query references a row outside [0, {rows})")));
        }
        let a = mu.row(q.query_row);
        let student: Vec<f64> = q
            .neighbour_rows
            .iter()
            .map(|&r| mu.row(r).iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let lpt = log_similarity(&q.teacher_dists, tau)?;
        let lps = log_similarity(&student, tau)?;
        let pt: Vec<f64> = lpt.iter().map(|l| l.exp()).collect();
        let ps: Vec<f64> = lps.iter().map(|l| l.exp()).collect();
        // in log space: a student probability that underflows to 0 keeps a finite log
        sum += pt
            .iter()
            .zip(lpt.iter().zip(&lps))
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, (a, b))| t * (a - b))
            .sum::<f64>();
        if scale != 0.0 {
            for (j, &r) in q.neighbour_rows.iter().enumerate() {
                let gd = scale * (pt[j] - ps[j]) / tau;
                if gd == 0.0 {
                    continue;
                }
                let diff: Vec<f64> = mu.row(q.query_row).iter().zip(mu.row(r)).map(|(x, y)| 2.0 * gd * (x - y)).collect();
                for (g, d) in grad.row_mut(q.query_row).iter_mut().zip(&diff) {
                    *g += d;
                }
                for (g, d) in grad.row_mut(r).iter_mut().zip(&diff) {
                    *g -= d;
                }
            }
        }
    }
    Ok(sum / queries.len() as f64)
}

/// Distillation objective over student features `mu` (`[M, d]`), with the
/// gradient of `total` with respect to `mu`.
pub fn distillation_loss(
    mu: &Tensor,
    batch: &KdBatch,
    tau: f64,
    weights: KdWeights,
) -> Result<(KdBreakdown, Tensor)> {
    if mu.shape().len() != 2 {
        return Err(Error::Shape(format!("student features must be 2-d, got {:?}", mu.shape())));
    }
    if batch.photos_labelled.is_empty() && batch.sketches.is_empty() && batch.photos_unlabelled.is_empty() {
        return Err(Error::InvalidArgument("empty distillation batch".into()));
    }
    let mut grad = Tensor::zeros(mu.shape().to_vec());
    let kl_pl = branch(mu, &batch.photos_labelled, tau, weights.pl, &mut grad)?;
    let kl_sl = branch(mu, &batch.sketches, tau, weights.sl, &mut grad)?;
    let kl_pu = branch(mu, &batch.photos_unlabelled, tau, weights.pu, &mut grad)?;
    let total = weights.pl * kl_pl + weights.sl * kl_sl + weights.pu * kl_pu;
    Ok((
        KdBreakdown {
            kl_pl,
            kl_sl,
            kl_pu,
            total,
        },
        grad,
    ))
}
