use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use nsseg::error::{Error, Result};
use nsseg::metrics::evaluate_model;
use nsseg::model::{checkpoint_id, load_checkpoint, save_checkpoint, train, TinyFcn};
use nsseg::phantom::{generate_corpus, DatasetManifest, DomainProfile};
use nsseg::pipeline::{
    benchmark, run_ablation, run_noisy_student, stage_seed, AblationAxis, ExperimentConfig,
    OutputLock, CHECKPOINT_FILE,
};
use nsseg::pseudolabel::{
    build_pseudo_labels, infer_corpus, render_gallery, PseudoLabelSet, RankerConfig, ScoredCorpus,
    SCORED_FILE,
};
use nsseg::rng::{stream_seed, Stream};

/// Noisy Student self-training for binary segmentation.
///
/// Every command also accepts `--params FILE`, a TOML table whose keys are
/// the long flag names with dashes replaced by underscores. Flags given on
/// the command line win.
#[derive(Parser)]
#[command(name = "nsseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Generate the bundled benchmark and its experiment config.
    Benchmark(BenchmarkArgs),
    /// Train a teacher (or, with --pseudo, a student) from an experiment config.
    Train(TrainArgs),
    /// Score a corpus with a teacher and write pseudo-labels.
    PseudoLabel(PseudoLabelArgs),
    /// Render calibration galleries around percentile cutoffs.
    Gallery(GalleryArgs),
    /// Run the full teacher/student loop.
    NsRun(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the ranker or contrast ablation.
    Ablate(AblateArgs),
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    stacks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchmarkArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Experiment config; its `teacher` or `student` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pseudo-label set directory; trains a student when given.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Iteration index used for seeding (0 for the teacher).
    #[arg(long)]
    iteration: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PseudoLabelArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    ranker_c: Option<f64>,
    #[arg(long)]
    k_pos: Option<f64>,
    #[arg(long)]
    k_neg: Option<f64>,
    /// Trinarize every frame without the percentile partition.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_ranker: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GalleryArgs {
    /// Scored directory (or a pseudo-label output directory containing one).
    #[arg(long)]
    scored: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k_pos: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    params: Option<PathBuf>,
}

fn params_file<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::storage(p, e))?;
            toml::from_str(&text).map_err(|e| Error::config(p, e.to_string()))
        }
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::param(format!("missing --{flag}")))
}

/// Fill unset flags from the params file, field by field.
macro_rules! merged {
    ($args:ident: $ty:ty { $($field:ident),* }) => {{
        let file: $ty = params_file(&$args.params)?;
        $( let $field = $args.$field.or(file.$field); )*
        ($($field,)*)
    }};
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (profile, stacks, seed, out) = merged!(args: GenDataArgs { profile, stacks, seed, out });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let profile = DomainProfile::load(&required(profile, "profile")?)?;
    let m = generate_corpus(
        &profile,
        required(stacks, "stacks")?,
        required(seed, "seed")?,
        &out,
    )?;
    println!(
        "wrote {} stacks ({} frames) to {}",
        m.stacks.len(),
        m.frame_count(),
        out.display()
    );
    Ok(())
}

fn gen_benchmark(args: BenchmarkArgs) -> Result<()> {
    let (out,) = merged!(args: BenchmarkArgs { out });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let cfg = benchmark::generate_benchmark(&out)?;
    println!("wrote benchmark; experiment config at {}", cfg.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let (config, out, pseudo, iteration) =
        merged!(args: TrainArgs { config, out, pseudo, iteration });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let cfg = ExperimentConfig::load(&required(config, "config")?)?;
    let labeled = DatasetManifest::load(&cfg.data.labeled)?;
    let pseudo = pseudo.map(|p| PseudoLabelSet::load(&p)).transpose()?;
    let iteration = iteration.unwrap_or(if pseudo.is_some() { 1 } else { 0 });
    let seed = stage_seed(cfg.master_seed, iteration);
    let mut tcfg = if pseudo.is_some() {
        cfg.student.clone()
    } else {
        cfg.teacher.clone()
    };
    tcfg.seed = seed;
    let model = TinyFcn::init(&cfg.model, stream_seed(seed, Stream::Init))?;
    let model = train(model, &labeled, pseudo.as_ref(), &tcfg)?;
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &path)?;
    println!("{} {}", checkpoint_id(&model), path.display());
    Ok(())
}

fn pseudo_label(args: PseudoLabelArgs) -> Result<()> {
    let (teacher, corpus, ranker_c, k_pos, k_neg, no_ranker, out) =
        merged!(args: PseudoLabelArgs { teacher, corpus, ranker_c, k_pos, k_neg, no_ranker, out });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let defaults = RankerConfig::default();
    let ranker = RankerConfig {
        percentile_c: ranker_c.unwrap_or(defaults.percentile_c),
        k_pos: k_pos.unwrap_or(defaults.k_pos),
        k_neg: k_neg.unwrap_or(defaults.k_neg),
    };
    ranker.validate()?;
    let teacher = load_checkpoint(&required(teacher, "teacher")?)?;
    let corpus = DatasetManifest::load(&required(corpus, "corpus")?)?;
    let scored = infer_corpus(
        &teacher,
        &checkpoint_id(&teacher),
        &corpus,
        &out.join("scored"),
    )?;
    let set = build_pseudo_labels(
        &scored,
        &ranker,
        !no_ranker.unwrap_or(false),
        &out.join("pseudo"),
    )?;
    println!(
        "{} frames scored, {} positive; labels in {}",
        set.entries.len(),
        set.positive_frames,
        out.join("pseudo").display()
    );
    Ok(())
}

fn scored_location(path: &Path) -> PathBuf {
    if !path.join(SCORED_FILE).is_file() && path.join("scored").join(SCORED_FILE).is_file() {
        path.join("scored")
    } else {
        path.to_path_buf()
    }
}

fn gallery(args: GalleryArgs) -> Result<()> {
    let (scored, thresholds, n, k_pos, out) =
        merged!(args: GalleryArgs { scored, thresholds, n, k_pos, out });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let scored = ScoredCorpus::load(&scored_location(&required(scored, "scored")?))?;
    let corpus = scored.corpus_manifest()?;
    let thresholds = thresholds.unwrap_or_else(|| vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0]);
    let k_pos = k_pos.unwrap_or(RankerConfig::default().k_pos);
    let g = render_gallery(&scored, &corpus, &thresholds, n.unwrap_or(25), k_pos, &out)?;
    for w in &g.warnings {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }
    for f in &g.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn ns_run(args: RunArgs) -> Result<()> {
    let (config, out) = merged!(args: RunArgs { config, out });
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let cfg = ExperimentConfig::load(&required(config, "config")?)?;
    let report = run_noisy_student(&cfg, &out)?;
    for m in &report.models {
        println!(
            "iter {} {:<13} {}  test stack_ap {:.4}  stack_auc {:.4}  frame_ap {:.4}  pixel_ap {:.4}",
            m.iteration, m.role, m.checkpoint_id, m.test.stack_ap, m.test.stack_roc_auc, m.test.frame_ap, m.test.pixel_ap
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (model, dataset, out) = merged!(args: EvalArgs { model, dataset, out });
    let model = load_checkpoint(&required(model, "model")?)?;
    let dataset = DatasetManifest::load(&required(dataset, "dataset")?)?;
    let report = evaluate_model(&model, &checkpoint_id(&model), &dataset)?;
    report.save(&required(out, "out")?)?;
    println!(
        "pixel_ap {:.4}  frame_ap {:.4}  stack_ap {:.4}  stack_roc_auc {:.4}",
        report.pixel_ap, report.frame_ap, report.stack_ap, report.stack_roc_auc
    );
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let (config, axis, out) = merged!(args: AblateArgs { config, axis, out });
    let axis: AblationAxis = required(axis, "axis")?.parse()?;
    let out = required(out, "out")?;
    let _lock = OutputLock::acquire(&out)?;
    let cfg = ExperimentConfig::load(&required(config, "config")?)?;
    let table = run_ablation(&cfg, axis, &out)?;
    for r in &table.rows {
        println!(
            "{:<10} test stack_ap {:.4}  stack_auc {:.4}  frame_ap {:.4}  pixel_ap {:.4}",
            r.name, r.test.stack_ap, r.test.stack_roc_auc, r.test.frame_ap, r.test.pixel_ap
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::GenData(a) => ("gen-data", gen_data(a)),
        Command::Benchmark(a) => ("benchmark", gen_benchmark(a)),
        Command::Train(a) => ("train", train_cmd(a)),
        Command::PseudoLabel(a) => ("pseudo-label", pseudo_label(a)),
        Command::Gallery(a) => ("gallery", gallery(a)),
        Command::NsRun(a) => ("ns-run", ns_run(a)),
        Command::Eval(a) => ("eval", eval(a)),
        Command::Ablate(a) => ("ablate", ablate(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.in_stage(stage));
            ExitCode::FAILURE
        }
    }
}
