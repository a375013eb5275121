//! The Noisy Student iteration driver, experiment configs and ablations.
//!
//! A run writes everything under one output directory:
//!
//! ```text
//! out/
//!   config.toml            the experiment config, echoed
//!   report.toml            one entry per trained model
//!   timings.toml           wall-clock seconds per stage
//!   iter_0/model.nsc       teacher
//!   iter_1/scored/         teacher probability maps and frame scores
//!   iter_1/pseudo/         trinarized label maps
//!   iter_1/model.nsc       student
//! ```
//!
//! Everything except `timings.toml` is a pure function of the config and the
//! input datasets.

pub mod benchmark;
mod lock;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::ContrastPolicy;
use crate::error::{Error, Result};
use crate::frame;
use crate::metrics::{evaluate_model, MetricsReport};
use crate::model::{
    checkpoint_id, save_checkpoint, train, train_frame_oracle, Architecture, TinyFcn, TrainConfig,
};
use crate::phantom::DatasetManifest;
use crate::pseudolabel::{
    build_pseudo_labels, infer_corpus, PseudoLabelSet, RankerConfig, ScoredCorpus,
};
use crate::rng::{mix_seed, stream_seed, Stream};

pub use lock::OutputLock;

pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const TIMINGS_FILE: &str = "timings.toml";
pub const ABLATION_FILE: &str = "ablation.toml";
pub const CHECKPOINT_FILE: &str = "model.nsc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher only, trained on the labeled set.
    Baseline,
    NoisyStudent,
    /// Labeled set plus the corpus supervised by frame-level labels.
    FrameOracle,
    /// Noisy Student with every frame trinarized and no frame partition.
    NoRankerAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Teacher-to-student replacement cycles.
    pub iterations: usize,
    #[serde(with = "crate::rng::seed_serde")]
    pub master_seed: u64,
    /// Independent baseline teachers to train in `baseline` mode.
    #[serde(default = "one")]
    pub baseline_repeats: usize,
    pub data: DataPaths,
    #[serde(default)]
    pub model: Architecture,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    #[serde(default)]
    pub ranker: RankerConfig,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Parse a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.labeled,
            &mut cfg.data.unlabeled,
            &mut cfg.data.validation,
            &mut cfg.data.test,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Param(msg) => Error::config(path, msg),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(path, e.to_string()))?;
        frame::write_file(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.ranker.validate()?;
        if self.baseline_repeats == 0 {
            return Err(Error::param("baseline_repeats must be >= 1"));
        }
        for (name, p) in [
            ("labeled", &self.data.labeled),
            ("unlabeled", &self.data.unlabeled),
            ("validation", &self.data.validation),
            ("test", &self.data.test),
        ] {
            if !p.is_file() {
                return Err(Error::param(format!(
                    "{name} manifest {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Seed of training stage `stage` (0 = teacher, `i` = iteration `i`).
pub fn stage_seed(master_seed: u64, stage: u64) -> u64 {
    mix_seed(master_seed, stage)
}

fn init_model(cfg: &ExperimentConfig, stage_seed: u64) -> Result<TinyFcn> {
    TinyFcn::init(&cfg.model, stream_seed(stage_seed, Stream::Init))
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..train.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub iteration: usize,
    /// `teacher`, `student`, `frame_oracle` or `baseline_repeat`.
    pub role: String,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_positive_frames: Option<usize>,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub pixel_ap: f64,
    pub frame_ap: f64,
    pub stack_ap: f64,
    pub stack_roc_auc: f64,
}

impl MeanMetrics {
    fn of(reports: &[&MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            pixel_ap: mean(|r| r.pixel_ap),
            frame_ap: mean(|r| r.frame_ap),
            stack_ap: mean(|r| r.stack_ap),
            stack_roc_auc: mean(|r| r.stack_roc_auc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Pseudo-labels are recomputed from the current teacher on the whole
    /// corpus at every iteration.
    pub pseudo_labels_regenerated_each_iteration: bool,
    pub models: Vec<ModelEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline_repeats: Vec<ModelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mean_validation: Option<MeanMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mean_test: Option<MeanMetrics>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(path, e.to_string()))?;
        frame::write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))
    }

    pub fn teacher(&self) -> &ModelEntry {
        &self.models[0]
    }

    pub fn last(&self) -> &ModelEntry {
        self.models.last().expect("report has a teacher")
    }
}

/// Wall-clock bookkeeping, kept apart from the reproducible outputs.
#[derive(Debug, Default, Serialize)]
struct Timings {
    stages: Vec<StageTime>,
}

#[derive(Debug, Serialize)]
struct StageTime {
    stage: String,
    seconds: f64,
}

struct Datasets {
    labeled: DatasetManifest,
    unlabeled: DatasetManifest,
    validation: DatasetManifest,
    test: DatasetManifest,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    data: Datasets,
    out: PathBuf,
    timings: Timings,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
        let load = |p: &Path| DatasetManifest::load(p);
        let data = (|| {
            Ok(Datasets {
                labeled: load(&cfg.data.labeled)?,
                unlabeled: load(&cfg.data.unlabeled)?,
                validation: load(&cfg.data.validation)?,
                test: load(&cfg.data.test)?,
            })
        })()
        .map_err(|e: Error| e.in_stage("load data"))?;
        if data.labeled.stacks.is_empty() {
            return Err(Error::param("labeled manifest lists no stacks").in_stage("load data"));
        }
        Ok(Self {
            cfg,
            data,
            out: out.to_path_buf(),
            timings: Timings::default(),
        })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        log::info!("stage: {name}");
        let start = Instant::now();
        let r = f(self).map_err(|e| e.in_stage(name));
        self.timings.stages.push(StageTime {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        r
    }

    fn save_timings(&self) -> Result<()> {
        let path = self.out.join(TIMINGS_FILE);
        let text =
            toml::to_string(&self.timings).map_err(|e| Error::config(&path, e.to_string()))?;
        frame::write_file(&path, text.as_bytes())
    }

    /// Save, evaluate and describe one trained model.
    fn record(
        &mut self,
        model: &TinyFcn,
        dir: &str,
        iteration: usize,
        role: &str,
    ) -> Result<ModelEntry> {
        let rel = format!("{dir}/{CHECKPOINT_FILE}");
        let id = checkpoint_id(model);
        self.stage(&format!("{dir}: evaluate {role}"), |r| {
            save_checkpoint(model, &r.out.join(&rel))?;
            Ok(ModelEntry {
                iteration,
                role: role.to_string(),
                checkpoint: rel.clone(),
                checkpoint_id: id.clone(),
                pseudo_label_set: None,
                pseudo_positive_frames: None,
                validation: evaluate_model(model, &id, &r.data.validation)?,
                test: evaluate_model(model, &id, &r.data.test)?,
            })
        })
    }

    fn train_teacher(&mut self, contrast: Option<ContrastPolicy>, stage: u64) -> Result<TinyFcn> {
        let seed = stage_seed(self.cfg.master_seed, stage);
        let mut tcfg = seeded(&self.cfg.teacher, seed);
        if let Some(c) = contrast {
            tcfg.contrast = c;
        }
        self.stage("iter_0: train teacher", |r| {
            train(init_model(r.cfg, seed)?, &r.data.labeled, None, &tcfg)
        })
    }

    /// Steps 2-4 for `iteration`: score the corpus with `teacher`, build the
    /// pseudo-labels, and train a freshly initialized student.
    fn student_iteration(
        &mut self,
        teacher: &TinyFcn,
        iteration: usize,
        use_ranker: bool,
        prefix: &str,
    ) -> Result<(TinyFcn, ModelEntry)> {
        let dir = format!("{prefix}iter_{iteration}");
        let teacher_id = checkpoint_id(teacher);
        let pseudo = self.stage(&format!("{dir}: pseudo-label"), |r| {
            pseudo_label_stage(
                teacher,
                &teacher_id,
                &r.data.unlabeled,
                &r.cfg.ranker,
                use_ranker,
                &r.out.join(&dir),
            )
        })?;
        let seed = stage_seed(self.cfg.master_seed, iteration as u64);
        let scfg = seeded(&self.cfg.student, seed);
        let student = self.stage(&format!("{dir}: train student"), |r| {
            train(
                init_model(r.cfg, seed)?,
                &r.data.labeled,
                Some(&pseudo),
                &scfg,
            )
        })?;
        let mut entry = self.record(&student, &dir, iteration, "student")?;
        entry.pseudo_label_set = Some(pseudo.id()?);
        entry.pseudo_positive_frames = Some(pseudo.positive_frames);
        Ok((student, entry))
    }
}

/// Teacher inference and ranking into `dir/scored` and `dir/pseudo`.
pub fn pseudo_label_stage(
    teacher: &TinyFcn,
    teacher_id: &str,
    corpus: &DatasetManifest,
    ranker: &RankerConfig,
    use_ranker: bool,
    dir: &Path,
) -> Result<PseudoLabelSet> {
    let scored = infer_corpus(teacher, teacher_id, corpus, &dir.join("scored"))?;
    build_pseudo_labels(&scored, ranker, use_ranker, &dir.join("pseudo"))
}

/// Rebuild the pseudo-labels of a finished iteration from its saved scores.
pub fn rebuild_pseudo_labels(
    dir: &Path,
    ranker: &RankerConfig,
    use_ranker: bool,
) -> Result<PseudoLabelSet> {
    let scored = ScoredCorpus::load(&dir.join("scored"))?;
    build_pseudo_labels(&scored, ranker, use_ranker, &dir.join("pseudo"))
}

/// Run the configured experiment into `out_dir` and write its report.
pub fn run_noisy_student(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let mut runner = Runner::new(cfg, out_dir)?;
    cfg.save(&out_dir.join(CONFIG_ECHO_FILE))?;

    let teacher = runner.train_teacher(None, 0)?;
    let mut models = vec![runner.record(&teacher, "iter_0", 0, "teacher")?];
    let mut report = RunReport {
        pseudo_labels_regenerated_each_iteration: true,
        models: Vec::new(),
        baseline_repeats: Vec::new(),
        baseline_mean_validation: None,
        baseline_mean_test: None,
    };

    match cfg.mode {
        Mode::Baseline => {
            for r in 1..cfg.baseline_repeats {
                // Stage ids past any iteration count keep repeats disjoint.
                let stage = u64::MAX - r as u64;
                let seed = stage_seed(cfg.master_seed, stage);
                let tcfg = seeded(&cfg.teacher, seed);
                let dir = format!("baseline_{r}");
                let m = runner.stage(&format!("{dir}: train teacher"), |run| {
                    train(init_model(run.cfg, seed)?, &run.data.labeled, None, &tcfg)
                })?;
                report
                    .baseline_repeats
                    .push(runner.record(&m, &dir, 0, "baseline_repeat")?);
            }
            if cfg.baseline_repeats > 1 {
                let all: Vec<&ModelEntry> = models.iter().chain(&report.baseline_repeats).collect();
                report.baseline_mean_validation = Some(MeanMetrics::of(
                    &all.iter().map(|e| &e.validation).collect::<Vec<_>>(),
                ));
                report.baseline_mean_test = Some(MeanMetrics::of(
                    &all.iter().map(|e| &e.test).collect::<Vec<_>>(),
                ));
            }
        }
        Mode::NoisyStudent | Mode::NoRankerAblation => {
            let use_ranker = cfg.mode == Mode::NoisyStudent;
            let mut current = teacher;
            for it in 1..=cfg.iterations {
                let (student, entry) = runner.student_iteration(&current, it, use_ranker, "")?;
                models.push(entry);
                current = student;
            }
        }
        Mode::FrameOracle => {
            let seed = stage_seed(cfg.master_seed, 1);
            let scfg = seeded(&cfg.student, seed);
            let oracle = runner.stage("iter_1: train frame oracle", |r| {
                train_frame_oracle(
                    init_model(r.cfg, seed)?,
                    &r.data.labeled,
                    &r.data.unlabeled,
                    &scfg,
                )
            })?;
            models.push(runner.record(&oracle, "iter_1", 1, "frame_oracle")?);
        }
    }

    report.models = models;
    report.save(&out_dir.join(REPORT_FILE))?;
    runner.save_timings()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Ranker,
    Contrast,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranker" => Ok(AblationAxis::Ranker),
            "contrast" => Ok(AblationAxis::Contrast),
            other => Err(Error::param(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub checkpoint_id: String,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    /// The shared teacher of the ranker axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<AblationRow>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(path, e.to_string()))?;
        frame::write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))
    }
}

fn row(name: &str, e: ModelEntry) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        checkpoint_id: e.checkpoint_id,
        validation: e.validation,
        test: e.test,
    }
}

/// `ranker`: Noisy Student with and without the ranker, sharing one teacher
/// and all seeds (at least one iteration). `contrast`: the baseline teacher
/// under each contrast policy.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    out_dir: &Path,
) -> Result<AblationTable> {
    let mut runner = Runner::new(cfg, out_dir)?;
    cfg.save(&out_dir.join(CONFIG_ECHO_FILE))?;
    let mut teacher_row = None;
    let rows = match axis {
        AblationAxis::Ranker => {
            let teacher = runner.train_teacher(None, 0)?;
            teacher_row = Some(row(
                "teacher",
                runner.record(&teacher, "iter_0", 0, "teacher")?,
            ));
            let iterations = cfg.iterations.max(1);
            let mut rows = Vec::new();
            for (name, use_ranker) in [("no_ranker", false), ("ranker", true)] {
                let mut current = teacher.clone();
                let mut last = None;
                for it in 1..=iterations {
                    let (student, entry) =
                        runner.student_iteration(&current, it, use_ranker, &format!("{name}/"))?;
                    current = student;
                    last = Some(entry);
                }
                rows.push(row(name, last.expect("at least one iteration")));
            }
            rows
        }
        AblationAxis::Contrast => {
            let mut rows = Vec::new();
            for (name, policy) in [
                ("baseline", ContrastPolicy::NoneOnly),
                ("power_law", ContrastPolicy::PowerLawOnly),
                ("log", ContrastPolicy::LogOnly),
                ("all", ContrastPolicy::All),
            ] {
                let m = runner.train_teacher(Some(policy), 0)?;
                rows.push(row(name, runner.record(&m, name, 0, "teacher")?));
            }
            rows
        }
    };
    let table = AblationTable {
        axis,
        teacher: teacher_row,
        rows,
    };
    table.save(&out_dir.join(ABLATION_FILE))?;
    runner.save_timings()?;
    Ok(table)
}
