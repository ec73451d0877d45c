//! Command-line front end.
//!
//! Every command writes its artifacts under `--out`:
//!
//! | file            | written by                          |
//! |-----------------|-------------------------------------|
//! | `teacher.ckpt`  | `pretrain-teacher`                  |
//! | `bank.bin`      | `pretrain-teacher`                  |
//! | `student.ckpt`  | `train-student`                     |
//! | `metrics.csv`   | `train-student`                     |
//! | `eval.csv`      | `evaluate`                          |
//! | `ablation.csv`  | `ablate`                            |
//! | `study.csv`     | `study`                             |
//! | `config.txt`    | every training command              |
//! | `manifest.txt`  | every command, last                 |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{Backbone, BackboneConfig, Mode, TokenDesign};
use crate::checkpoint::{parse_token_design, write_atomic, Checkpoint};
use crate::config::{desk_profile, load_config, Hyperparameters};
use crate::data::{generate_synthetic, load_directory, write_directory, SyntheticSpec};
use crate::distill::FeatureBank;
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_category_harness, data_scaling_study, evaluate, stability_trace_file, top_k_accuracies, EvalSet,
};
use crate::trainer::{
    pretrain_teacher, rng_stream, run_ablation, train_student, AblationSuite, ExperimentOptions, Split, StudentMode,
    Teacher, TrainInputs,
};

#[derive(Debug, Parser)]
#[command(name = "sketchkd", version, about = "Sketch-based photo retrieval with unlabelled-photo distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a synthetic sketch/photo dataset in directory format.
    GenData(GenDataArgs),
    /// Train the photo-only teacher and its feature bank.
    PretrainTeacher(TrainArgs),
    /// Train a student in one of the named modes.
    TrainStudent(TrainArgs),
    /// Retrieval accuracy of a checkpoint (or a fresh model) on the held-out split.
    Evaluate(EvalArgs),
    /// Run an ablation suite over several seeds.
    Ablate(AblateArgs),
    /// Data scaling, stability or cross-category study.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 112)]
    pub instances: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub sketches_per: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Keep sketches only for the first this-many instances.
    #[arg(long)]
    pub labelled: Option<usize>,
}

/// Options shared by commands that read a config and a dataset.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Config file (`key = value` lines); desk settings when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; the synthetic desk split when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of labelled instances held out for testing (directory data only).
    #[arg(long, default_value_t = 0.2)]
    pub holdout_frac: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "full_kd")]
    pub mode: String,
    /// Teacher checkpoint, or a directory holding `teacher.ckpt`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Overrides the config epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub eval_every: usize,
    /// Token design: A, B or ours.
    #[arg(long, default_value = "ours")]
    pub token: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Student checkpoint; a randomly initialised model when omitted.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Evaluate the live weights even if the checkpoint has EMA weights.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// loss_stripdown, augmentation or token_design.
    #[arg(long)]
    pub suite: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    Scaling,
    Stability,
    CrossCategory,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: StudyKind,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
    pub fractions: Vec<f64>,
    /// Metrics file for the stability study.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Classes whose photos are only seen unlabelled (cross-category).
    #[arg(long, value_delimiter = ',', default_value = "c04,c05")]
    pub unseen: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "c00,c01,c02,c03")]
    pub seen: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub start: u64,
    pub end: u64,
    pub git: String,
}

impl RunManifest {
    fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            start: unix_now(),
            git: git_describe(),
            ..Default::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        if let Some(p) = &self.config_path {
            let _ = writeln!(s, "config = {}", p.display());
        }
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config_hash = {h}");
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        let _ = writeln!(s, "start = {}", self.start);
        let _ = writeln!(s, "end = {}", self.end);
        let _ = writeln!(s, "git = {}", self.git);
        s
    }

    /// Stamp the end time and write `manifest.txt` into `dir`.
    fn finish(mut self, dir: &Path) -> Result<()> {
        self.end = unix_now();
        write_atomic(&dir.join("manifest.txt"), self.to_text().as_bytes())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} `{}` does not exist", path.display())))
    }
}

fn hyperparameters(common: &Common, epochs: Option<usize>) -> Result<Hyperparameters> {
    let mut hp = match &common.config {
        Some(p) => {
            require(p, "config")?;
            load_config(p)?
        }
        None => desk_profile(),
    };
    if let Some(s) = common.seed {
        hp.seed = s;
    }
    if let Some(e) = epochs {
        hp.epochs = e;
    }
    hp.validate()?;
    Ok(hp)
}

fn load_split(common: &Common, hp: &Hyperparameters) -> Result<Split> {
    match &common.data {
        Some(dir) => {
            require(dir, "data directory")?;
            let (ds, report) = load_directory(dir, hp.image_size)?;
            log::info!("loaded {}: {report}", dir.display());
            Split::from_dataset(&ds, common.holdout_frac)
        }
        None => {
            if hp.image_size != 32 {
                return Err(Error::InvalidArgument(format!(
                    "the built-in desk split is 32 px; config asks for {} (pass --data)",
                    hp.image_size
                )));
            }
            Split::desk(hp.seed)
        }
    }
}

fn record_config(m: &mut RunManifest, common: &Common, hp: &Hyperparameters) -> Result<()> {
    let path = common.out.join("config.txt");
    write_atomic(&path, hp.to_config_string().as_bytes())?;
    m.config_path = common.config.clone();
    m.config_hash = Some(hp.config_hash());
    m.seed = Some(hp.seed);
    m.inputs.extend(common.data.iter().cloned());
    m.outputs.push(path);
    Ok(())
}

pub fn load_teacher(path: &Path, split: &Split) -> Result<Teacher> {
    let ckpt_path = if path.is_dir() { path.join("teacher.ckpt") } else { path.to_path_buf() };
    require(&ckpt_path, "teacher checkpoint")?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let hp = ckpt.hyperparameters()?;
    let model = ckpt.backbone(false)?;
    let bank_path = ckpt_path.with_file_name("bank.bin");
    if bank_path.exists() {
        Teacher::from_bank(model, FeatureBank::load(&bank_path)?, hp.k, ckpt.step)
    } else {
        Teacher::from_model(model, &split.photo_pool(), hp.k, ckpt.step)
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut m = RunManifest::start("gen-data");
    let mut spec = SyntheticSpec::new(a.instances, a.classes, a.sketches_per, a.seed);
    spec.image_size = a.image_size;
    let mut ds = generate_synthetic(&spec)?;
    if let Some(k) = a.labelled {
        for inst in ds.instances.iter_mut().skip(k) {
            inst.sketches.clear();
        }
    }
    create_out(&a.out)?;
    write_directory(&ds, &a.out)?;
    m.seed = Some(a.seed);
    m.outputs.push(a.out.clone());
    println!("wrote {} photos and {} sketches to {}", ds.len(), ds.sketch_count(), a.out.display());
    m.finish(&a.out)
}

fn cmd_pretrain_teacher(a: &TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("pretrain-teacher");
    let hp = hyperparameters(&a.common, a.epochs)?;
    let split = load_split(&a.common, &hp)?;
    create_out(&a.common.out)?;
    record_config(&mut m, &a.common, &hp)?;
    let teacher = pretrain_teacher(&split.photo_pool(), &hp, hp.epochs)?;
    let ckpt = a.common.out.join("teacher.ckpt");
    let bank = a.common.out.join("bank.bin");
    teacher.checkpoint(&hp).save(&ckpt)?;
    teacher.bank.save(&bank)?;
    println!(
        "teacher: {} steps, probe loss {:.4} -> {:.4}, bank of {}",
        teacher.step,
        teacher.probe_initial,
        teacher.probe_final,
        teacher.bank.len()
    );
    m.outputs.extend([ckpt, bank]);
    m.finish(&a.common.out)
}

fn cmd_train_student(a: &TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("train-student");
    let mode = StudentMode::parse(&a.mode)?;
    let token = parse_token_design(&a.token)?;
    let hp = hyperparameters(&a.common, a.epochs)?;
    if mode.terms().distills() && a.teacher.is_none() {
        return Err(Error::InvalidArgument(format!("mode {mode} needs --teacher")));
    }
    let split = load_split(&a.common, &hp)?;
    let teacher = a.teacher.as_deref().map(|p| load_teacher(p, &split)).transpose()?;
    create_out(&a.common.out)?;
    record_config(&mut m, &a.common, &hp)?;
    let metrics = a.common.out.join("metrics.csv");
    let opts = ExperimentOptions {
        eval_every: a.eval_every,
        token,
        metrics_path: Some(metrics.clone()),
        ..Default::default()
    };
    let run = train_student(&TrainInputs::from_split(&split)?, teacher.as_ref(), &hp, mode, &opts)?;
    let ckpt = a.common.out.join("student.ckpt");
    run.checkpoint().save(&ckpt)?;
    match run.final_acc() {
        Some([a1, a5, a10]) => println!("{mode}: {} steps, acc@1 {a1:.4} acc@5 {a5:.4} acc@10 {a10:.4}", run.step),
        None => println!("{mode}: {} steps (no held-out split)", run.step),
    }
    m.inputs.extend(a.teacher.iter().cloned());
    m.outputs.extend([ckpt, metrics]);
    m.finish(&a.common.out)
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::start("evaluate");
    let (model, hp) = match &a.student {
        Some(p) => {
            require(p, "student checkpoint")?;
            let ckpt = Checkpoint::load(p)?;
            let use_ema = !a.raw && !ckpt.section("ema.").is_empty();
            m.inputs.push(p.clone());
            (ckpt.backbone(use_ema)?, ckpt.hyperparameters()?)
        }
        None => {
            let hp = hyperparameters(&a.common, None)?;
            let cfg = BackboneConfig::from_hyperparameters(&hp, TokenDesign::EveryLevel)?;
            (Backbone::new(cfg, &mut rng_stream(hp.seed, "student.init"))?, hp)
        }
    };
    let split = load_split(&a.common, &hp)?;
    let test: Vec<_> = split.test.iter().collect();
    let set = EvalSet::from_instances(&test)?;
    let res = evaluate(&model, &set, Mode::Student)?;
    let acc = top_k_accuracies(&res)?;
    create_out(&a.common.out)?;
    let path = a.common.out.join("eval.csv");
    let text = format!(
        "queries,gallery,acc1,acc5,acc10\n{},{},{:.6},{:.6},{:.6}\n",
        res.ranks.len(),
        res.gallery_size,
        acc[0],
        acc[1],
        acc[2]
    );
    write_atomic(&path, text.as_bytes())?;
    println!(
        "acc@1 {:.4} acc@5 {:.4} acc@10 {:.4} ({} queries, gallery {})",
        acc[0],
        acc[1],
        acc[2],
        res.ranks.len(),
        res.gallery_size
    );
    m.config_hash = Some(hp.config_hash());
    m.seed = Some(hp.seed);
    m.inputs.extend(a.common.data.iter().cloned());
    m.outputs.push(path);
    m.finish(&a.common.out)
}

fn split_source(common: &Common, hp: &Hyperparameters) -> Result<Box<dyn Fn(u64) -> Result<Split>>> {
    match &common.data {
        Some(_) => {
            let split = load_split(common, hp)?;
            Ok(Box::new(move |_| Ok(split.clone())))
        }
        None => Ok(Box::new(Split::desk)),
    }
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut m = RunManifest::start("ablate");
    let suite = AblationSuite::parse(&a.suite)?;
    let hp = hyperparameters(&a.common, a.epochs)?;
    let source = split_source(&a.common, &hp)?;
    create_out(&a.common.out)?;
    record_config(&mut m, &a.common, &hp)?;
    let opts = ExperimentOptions {
        eval_every: 20,
        ..Default::default()
    };
    let table = run_ablation(suite, source.as_ref(), &hp, &a.seeds, &opts)?;
    let path = a.common.out.join("ablation.csv");
    let csv = table.to_csv();
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    m.outputs.push(path);
    m.finish(&a.common.out)
}

fn cmd_study(a: &StudyArgs) -> Result<()> {
    let mut m = RunManifest::start("study");
    create_out(&a.common.out)?;
    let path = a.common.out.join("study.csv");
    let csv = match a.kind {
        StudyKind::Stability => {
            let metrics = a
                .metrics
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("stability study needs --metrics".into()))?;
            require(metrics, "metrics file")?;
            let r = stability_trace_file(metrics)?;
            println!("std raw {:.4}, std ema {:.4}", r.std_raw, r.std_ema);
            m.inputs.push(metrics.to_path_buf());
            r.series_csv()
        }
        StudyKind::Scaling => {
            let hp = hyperparameters(&a.common, a.epochs)?;
            record_config(&mut m, &a.common, &hp)?;
            let split = load_split(&a.common, &hp)?;
            let opts = ExperimentOptions {
                eval_every: 20,
                ..Default::default()
            };
            let t = data_scaling_study(&split, &a.fractions, &hp, &a.seeds, &opts)?;
            println!("baseline monotone in labelled fraction: {}", t.baseline_monotone);
            t.to_csv()
        }
        StudyKind::CrossCategory => {
            let hp = hyperparameters(&a.common, a.epochs)?;
            record_config(&mut m, &a.common, &hp)?;
            let seen: Vec<&str> = a.seen.iter().map(String::as_str).collect();
            let unseen: Vec<&str> = a.unseen.iter().map(String::as_str).collect();
            let opts = ExperimentOptions {
                eval_every: 20,
                ..Default::default()
            };
            let mut s = String::from("seed,class,acc1,gallery\n");
            for &seed in &a.seeds {
                let hp_s = Hyperparameters { seed, ..hp.clone() };
                let instances = match &a.common.data {
                    Some(dir) => load_directory(dir, hp.image_size)?.0.instances,
                    None => crate::evaluation::cross_category_dataset(seed)?,
                };
                let r = cross_category_harness(&instances, &seen, &unseen, 2, &hp_s, &opts)?;
                if !r.leaked_ids.is_empty() {
                    return Err(Error::Data(format!("unseen instances used as labelled: {:?}", r.leaked_ids)));
                }
                for (class, acc, n) in &r.per_class {
                    let _ = writeln!(s, "{seed},{class},{acc:.4},{n}");
                }
                println!("seed {seed}: unseen acc@1 {:.4}, seen acc@1 {:.4}", r.mean_unseen_acc1, r.seen_acc1);
            }
            s
        }
    };
    write_atomic(&path, csv.as_bytes())?;
    m.outputs.push(path);
    m.finish(&a.common.out)
}

/// Size the worker pool from `SKETCHKD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SKETCHKD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("SKETCHKD_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::InvalidArgument("SKETCHKD_THREADS must be at least 1".into()));
        }
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::PretrainTeacher(a) => cmd_pretrain_teacher(a),
        Cmd::TrainStudent(a) => cmd_train_student(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Study(a) => cmd_study(a),
    }
}
