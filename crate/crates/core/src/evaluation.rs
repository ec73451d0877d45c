//! Retrieval metrics, stability traces, the data-scaling study and the
//! cross-category harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{Backbone, Mode};
use crate::config::Hyperparameters;
use crate::data::{Image, Instance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{run_experiment, ExperimentOptions, Split, StudentMode};

/// Ranks of the true photo for each query sketch (1 = best).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranks: Vec<usize>,
    pub gallery_size: usize,
    /// Class of each query.
    pub groups: Vec<String>,
}

/// Queries and gallery for one retrieval evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    pub gallery: Vec<(&'a str, &'a Image)>,
    /// Sketch and the gallery index of its true photo.
    pub queries: Vec<(&'a Image, usize)>,
    pub groups: Vec<&'a str>,
}

impl<'a> EvalSet<'a> {
    /// Gallery = every photo; queries = every sketch.
    pub fn from_instances(instances: &[&'a Instance]) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        let mut set = EvalSet {
            gallery: Vec::with_capacity(instances.len()),
            queries: Vec::new(),
            groups: Vec::new(),
        };
        for (i, inst) in instances.iter().enumerate() {
            set.gallery.push((inst.instance_id.as_str(), &inst.photo));
            for s in &inst.sketches {
                set.queries.push((s, i));
                set.groups.push(inst.class_id.as_str());
            }
        }
        if set.queries.is_empty() {
            return Err(Error::InvalidArgument("evaluation set has no sketches".into()));
        }
        Ok(set)
    }

    /// One set per class, each searching only that class's photos.
    pub fn per_class(instances: &[&'a Instance]) -> Result<Vec<(String, EvalSet<'a>)>> {
        let mut by_class: BTreeMap<&str, Vec<&'a Instance>> = BTreeMap::new();
        for inst in instances {
            by_class.entry(inst.class_id.as_str()).or_default().push(inst);
        }
        by_class
            .into_iter()
            .map(|(c, v)| Ok((c.to_string(), EvalSet::from_instances(&v)?)))
            .collect()
    }
}

/// Rank of `truth` among gallery rows: one plus the number of rows strictly
/// closer, or equally close with a smaller id.
pub fn rank_of(query: &[f64], gallery: &Tensor, ids: &[&str], truth: usize) -> usize {
    let dist = |j: usize| -> f64 {
        gallery.row(j).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let dt = dist(truth);
    1 + (0..gallery.rows())
        .filter(|&j| j != truth)
        .filter(|&j| {
            let dj = dist(j);
            dj < dt || (dj == dt && ids[j] < ids[truth])
        })
        .count()
}

/// Ranks from precomputed features.
pub fn retrieval_ranks(
    query_f: &Tensor,
    gallery_f: &Tensor,
    gallery_ids: &[&str],
    truth: &[usize],
) -> Result<RetrievalResult> {
    if query_f.rows() != truth.len() || gallery_f.rows() != gallery_ids.len() {
        return Err(Error::Shape("query/gallery counts do not match their labels".into()));
    }
    if query_f.cols() != gallery_f.cols() {
        return Err(Error::Shape("query and gallery widths differ".into()));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= gallery_f.rows()) {
        return Err(Error::Shape(format!("true index {t} outside gallery")));
    }
    let ranks = (0..query_f.rows())
        .into_par_iter()
        .map(|i| rank_of(query_f.row(i), gallery_f, gallery_ids, truth[i]))
        .collect();
    Ok(RetrievalResult {
        ranks,
        gallery_size: gallery_f.rows(),
        groups: Vec::new(),
    })
}

/// Embed the set with `model` and rank every query.
pub fn evaluate(model: &Backbone, set: &EvalSet, mode: Mode) -> Result<RetrievalResult> {
    let photos: Vec<&Image> = set.gallery.iter().map(|g| g.1).collect();
    let sketches: Vec<&Image> = set.queries.iter().map(|q| q.0).collect();
    let gf = model.forward(&photos, mode)?.f;
    let qf = model.forward(&sketches, mode)?.f;
    let ids: Vec<&str> = set.gallery.iter().map(|g| g.0).collect();
    let truth: Vec<usize> = set.queries.iter().map(|q| q.1).collect();
    let mut res = retrieval_ranks(&qf, &gf, &ids, &truth)?;
    res.groups = set.groups.iter().map(|s| s.to_string()).collect();
    Ok(res)
}

pub fn acc_at_q(results: &RetrievalResult, q: usize) -> Result<f64> {
    if q == 0 {
        return Err(Error::InvalidArgument("q must be >= 1".into()));
    }
    if results.ranks.is_empty() {
        return Err(Error::InvalidArgument("no retrieval results".into()));
    }
    let hits = results.ranks.iter().filter(|&&r| r <= q).count();
    Ok(hits as f64 / results.ranks.len() as f64)
}

/// Acc@1, Acc@5, Acc@10.
pub fn top_k_accuracies(results: &RetrievalResult) -> Result<[f64; 3]> {
    Ok([acc_at_q(results, 1)?, acc_at_q(results, 5)?, acc_at_q(results, 10)?])
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (values.iter().sum::<f64>() / values.len() as f64, population_std(values))
}

/// Acc@1 traces from a metrics CSV and their spread over the last half.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub std_raw: f64,
    pub std_ema: f64,
    pub steps: Vec<u64>,
    pub raw: Vec<f64>,
    pub ema: Vec<f64>,
}

impl StabilityReport {
    /// Plot-ready series: `step,acc1_raw,acc1_ema`.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("step,acc1_raw,acc1_ema\n");
        for i in 0..self.steps.len() {
            let _ = writeln!(s, "{},{},{}", self.steps[i], self.raw[i], self.ema[i]);
        }
        s
    }
}

/// Minimum evaluation rows for a meaningful trace.
pub const MIN_TRACE_ROWS: usize = 20;

pub fn stability_trace(csv: &str) -> Result<StabilityReport> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Metrics("empty metrics file".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Metrics(format!("missing column `{name}`")))
    };
    let (c_step, c_raw, c_ema) = (col("step")?, col("acc1_raw")?, col("acc1_ema")?);
    let mut rep = StabilityReport {
        std_raw: 0.0,
        std_ema: 0.0,
        steps: Vec::new(),
        raw: Vec::new(),
        ema: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Metrics(format!(
                "row {}: {} cells, header has {}",
                i + 1,
                cells.len(),
                header.len()
            )));
        }
        let parse = |c: usize| -> Result<f64> {
            cells[c]
                .parse::<f64>()
                .map_err(|_| Error::Metrics(format!("row {}: bad number `{}` in `{}`", i + 1, cells[c], header[c])))
        };
        if cells[c_raw].is_empty() || cells[c_ema].is_empty() {
            continue;
        }
        rep.steps.push(parse(c_step)? as u64);
        rep.raw.push(parse(c_raw)?);
        rep.ema.push(parse(c_ema)?);
    }
    if rep.steps.len() < MIN_TRACE_ROWS {
        return Err(Error::Metrics(format!(
            "{} evaluation rows, need at least {MIN_TRACE_ROWS}",
            rep.steps.len()
        )));
    }
    let half = rep.steps.len() - rep.steps.len() / 2;
    rep.std_raw = population_std(&rep.raw[half..]);
    rep.std_ema = population_std(&rep.ema[half..]);
    Ok(rep)
}

pub fn stability_trace_file(path: &Path) -> Result<StabilityReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    stability_trace(&text)
}

/// One cell of the data-scaling table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCell {
    pub fraction: f64,
    pub mode: StudentMode,
    pub labelled: usize,
    pub acc1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub cells: Vec<ScalingCell>,
    /// Baseline Acc@1 grows with the labelled fraction between every
    /// consecutive pair of fractions.
    pub baseline_monotone: bool,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,mode,labelled,seeds,acc1_mean,acc1_std\n");
        for c in &self.cells {
            let (m, sd) = mean_std(&c.acc1);
            let _ = writeln!(s, "{},{},{},{},{m:.4},{sd:.4}", c.fraction, c.mode.name(), c.labelled, c.acc1.len());
        }
        s
    }

    pub fn mean(&self, fraction: f64, mode: StudentMode) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.fraction == fraction && c.mode == mode)
            .map(|c| mean_std(&c.acc1).0)
    }
}

/// Labelled prefix kept at a given fraction.
pub fn labelled_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {n} labelled instances leaves {k} (< 2)"
        )));
    }
    Ok(k)
}

/// Train both modes at each labelled fraction (the unlabelled pool stays
/// fixed) and report held-out Acc@1 per seed.
pub fn data_scaling_study(
    split: &Split,
    fractions: &[f64],
    hp: &Hyperparameters,
    seeds: &[u64],
    opts: &ExperimentOptions,
) -> Result<ScalingTable> {
    let mut cells = Vec::new();
    for &f in fractions {
        let k = labelled_count(split.labelled.len(), f)?;
        let sub = split.with_labelled_prefix(k);
        for mode in [StudentMode::StrongBaseline, StudentMode::FullKd] {
            let mut acc1 = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let out = run_experiment(&sub, &Hyperparameters { seed, ..hp.clone() }, mode, opts)?;
                acc1.push(out.final_acc[0]);
            }
            cells.push(ScalingCell {
                fraction: f,
                mode,
                labelled: k,
                acc1,
            });
        }
    }
    let mut base: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.mode == StudentMode::StrongBaseline)
        .map(|c| (c.fraction, mean_std(&c.acc1).0))
        .collect();
    base.sort_by(|a, b| a.0.total_cmp(&b.0));
    let baseline_monotone = base.windows(2).all(|w| w[0].1 < w[1].1);
    Ok(ScalingTable {
        cells,
        baseline_monotone,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCategoryReport {
    /// `(class, Acc@1, gallery size)` per unseen class.
    pub per_class: Vec<(String, f64, usize)>,
    pub mean_unseen_acc1: f64,
    /// Acc@1 on the held-out seen-class split.
    pub seen_acc1: f64,
    /// Ids that appeared in labelled triplets during training.
    pub labelled_ids: BTreeSet<String>,
    /// Photo ids consumed by the unlabelled branches.
    pub unlabelled_ids: BTreeSet<String>,
    /// Unseen-class ids found among `labelled_ids`; empty when clean.
    pub leaked_ids: Vec<String>,
}

/// Classes and instances of the standard cross-category setup.
pub const CROSS_CATEGORY_CLASSES: usize = 6;
pub const CROSS_CATEGORY_PER_CLASS: usize = 12;

/// Synthetic dataset for the cross-category harness: 6 classes `c00..c05`
/// with 12 instances each.
pub fn cross_category_dataset(seed: u64) -> Result<Vec<Instance>> {
    let spec = crate::data::SyntheticSpec::new(
        CROSS_CATEGORY_CLASSES * CROSS_CATEGORY_PER_CLASS,
        CROSS_CATEGORY_CLASSES,
        2,
        seed,
    );
    Ok(crate::data::generate_synthetic(&spec)?.instances)
}

/// Seen classes provide labelled pairs (and a held-out test split);
/// unseen classes contribute their photos to the unlabelled pool only and
/// are evaluated with one gallery per class.
pub fn cross_category_harness(
    dataset: &[Instance],
    seen: &[&str],
    unseen: &[&str],
    holdout_per_class: usize,
    hp: &Hyperparameters,
    opts: &ExperimentOptions,
) -> Result<CrossCategoryReport> {
    if let Some(c) = seen.iter().find(|c| unseen.contains(c)) {
        return Err(Error::InvalidArgument(format!("class `{c}` is both seen and unseen")));
    }
    let mut split = Split::default();
    let mut unseen_instances: Vec<Instance> = Vec::new();
    let mut seen_count: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in dataset {
        let c = inst.class_id.as_str();
        if unseen.contains(&c) {
            unseen_instances.push(inst.clone());
            split.unlabelled.push(Instance {
                sketches: Vec::new(),
                ..inst.clone()
            });
        } else if seen.contains(&c) {
            let n = seen_count.entry(c).or_default();
            if *n < holdout_per_class {
                split.test.push(inst.clone());
            } else if inst.is_labelled() {
                split.labelled.push(inst.clone());
            } else {
                split.unlabelled.push(inst.clone());
            }
            *n += 1;
        }
    }
    let out = run_experiment(&split, hp, StudentMode::FullKd, opts)?;
    let model = out.final_model();
    let unseen_refs: Vec<&Instance> = unseen_instances.iter().collect();
    let mut per_class = Vec::new();
    if !unseen_refs.is_empty() {
        for (class, set) in EvalSet::per_class(&unseen_refs)? {
            let res = evaluate(model, &set, Mode::Student)?;
            per_class.push((class, acc_at_q(&res, 1)?, res.gallery_size));
        }
    }
    let seen_acc1 = out.final_acc[0];
    let mean_unseen_acc1 = if per_class.is_empty() {
        seen_acc1
    } else {
        per_class.iter().map(|c| c.1).sum::<f64>() / per_class.len() as f64
    };
    let unseen_ids: BTreeSet<&str> = unseen_instances.iter().map(|i| i.instance_id.as_str()).collect();
    let leaked_ids = out
        .labelled_ids
        .iter()
        .filter(|id| unseen_ids.contains(id.as_str()))
        .cloned()
        .collect();
    Ok(CrossCategoryReport {
        per_class,
        mean_unseen_acc1,
        seen_acc1,
        labelled_ids: out.labelled_ids.clone(),
        unlabelled_ids: out.run.unlabelled_ids.clone(),
        leaked_ids,
    })
}
