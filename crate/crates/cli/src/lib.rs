//! Argument parsing and command dispatch for the `heatgait` executable.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation (malformed
//! records, bad configuration), 2 on runtime errors and usage errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use heatgait::config::GlobalConfig;
use heatgait::data::{self, PoseSequence};
use heatgait::eval::{self, AblationVariant, EvalData, TableFormat};
use heatgait::graph::{self, SkeletonGraph};
use heatgait::train::{self, TrainedModel};
use heatgait::{synth, Error};
use serde::Serialize;

pub const SEED_ENV: &str = "HEATGAIT_SEED";

#[derive(Debug, Parser)]
#[command(name = "heatgait", version, about = "Hop-extracted graph convolution for skeleton gait recognition")]
pub struct Cli {
    /// JSON configuration file (sections: data, augment, model, train, eval).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic keypoint corpus.
    Synth(SynthArgs),
    /// Check keypoint files and list malformed records.
    Validate(ValidateArgs),
    /// Drop low-confidence frames and normalise coordinates.
    Preprocess(PreprocessArgs),
    /// Train a model with the supervised contrastive objective.
    Train(TrainArgs),
    /// Rank-1 gallery/probe evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Compare preprocessing and aggregation variants under one budget.
    Ablation(AblationArgs),
    /// Compare polynomial and hop-extracted operator weights per joint.
    DiagnoseBias(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    /// Split 60/20/20 between NM, BG and CL.
    #[arg(long, default_value_t = 10)]
    pub seqs_per_subject: usize,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to HEATGAIT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// A .jsonl file or a directory of them.
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames with mean confidence strictly below this are removed [default: 0.6].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Skip confidence filtering.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to HEATGAIT_SEED, then the config value.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch budget; by default training runs until one cycle at min_lr has finished.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Train on the gallery sequences of every subject instead of a subject split.
    #[arg(long)]
    pub closed_set: bool,
    /// Continue from <out>/last.ckpt.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long, default_value = "markdown", value_parser = ["csv", "markdown", "json"])]
    pub format: String,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip gallery entries at the probe's view angle.
    #[arg(long)]
    pub exclude_same_view: bool,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Corpus split into gallery (NM up to the gallery index) and probes.
    #[arg(long)]
    pub data: PathBuf,
    /// Separate training corpus; defaults to the gallery.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value = "markdown", value_parser = ["csv", "markdown", "json"])]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Largest hop scale K (at least 2).
    #[arg(long, default_value_t = 3)]
    pub max_scale: usize,
    /// `coco` or `path:N`.
    #[arg(long, default_value = "coco")]
    pub graph: String,
    #[arg(long, default_value = "table", value_parser = ["table", "json"])]
    pub format: String,
}

/// Parses `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::ConfigNotFound(_) | Error::Parse { .. } | Error::Schema { .. } => 1,
            _ => 2,
        };
        Self {
            code,
            message: format!("error: {e}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

/// Seed precedence: flag, then `HEATGAIT_SEED`, then the fallback.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure {
            code: 1,
            message: format!("error: {SEED_ENV}={v:?} is not an unsigned integer"),
        }),
        Err(_) => Ok(fallback),
    }
}

fn load_config(path: Option<&Path>) -> Result<GlobalConfig, Failure> {
    Ok(match path {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::default(),
    })
}

fn load_dir(path: &Path) -> Result<Vec<PoseSequence>, Failure> {
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist", path.display())).into());
    }
    let seqs = data::load_keypoint_dir(path)?;
    if seqs.is_empty() {
        return Err(Error::Config(format!("no sequences under {}", path.display())).into());
    }
    Ok(seqs)
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Outcome {
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, text)?;
    }
    stdout.write_all(text.as_bytes())?;
    Ok(())
}

/// Runs a parsed command, writing data to `stdout`. Returns the exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "{}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Outcome {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::Validate(a) => cmd_validate(a, stdout),
        Command::Preprocess(a) => cmd_preprocess(a, &config, stdout),
        Command::Train(a) => cmd_train(a, config, stdout),
        Command::Eval(a) => cmd_eval(a, &config, stdout),
        Command::Ablation(a) => cmd_ablation(a, config, stdout),
        Command::DiagnoseBias(a) => cmd_diagnose(a, stdout),
    }
}

fn cmd_synth(a: &SynthArgs, stdout: &mut dyn Write) -> Outcome {
    if a.frames == 0 || a.subjects == 0 || a.seqs_per_subject == 0 {
        return Err(Error::Config("--subjects, --seqs-per-subject and --frames must be positive".into()).into());
    }
    let seed = resolve_seed(a.seed, 0)?;
    let seqs = synth::generate_dataset(a.subjects, a.seqs_per_subject, a.frames, seed);
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for chunk in seqs.chunks(a.seqs_per_subject) {
        let path = a.out.join(format!("{}.jsonl", chunk[0].subject_id));
        data::save_keypoint_file(chunk, &path)?;
        written += chunk.len();
    }
    writeln!(stdout, "wrote {written} sequences for {} subjects to {}", a.subjects, a.out.display())?;
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, stdout: &mut dyn Write) -> Outcome {
    if !a.path.exists() {
        return Err(Error::Config(format!("{} does not exist", a.path.display())).into());
    }
    let mut bad = 0;
    let mut good = 0;
    for f in data::keypoint_files(&a.path)? {
        let v = data::validate_keypoint_file(&f)?;
        good += v.sequences.len();
        for e in &v.errors {
            writeln!(stdout, "{}: {e}", f.display())?;
        }
        bad += v.errors.len();
    }
    writeln!(stdout, "{good} valid, {bad} invalid records")?;
    if bad > 0 {
        return Err(Failure {
            code: 1,
            message: format!("error: {bad} invalid records"),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct RemovalSummary {
    condition: String,
    frames: usize,
    removed: usize,
    removed_percent: f64,
    dropped_sequences: usize,
}

fn cmd_preprocess(a: &PreprocessArgs, config: &GlobalConfig, stdout: &mut dyn Write) -> Outcome {
    let mut cfg = config.data.clone();
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config("--threshold must be in [0, 1]".into()).into());
        }
        cfg.confidence_threshold = t;
    }
    if a.no_filter {
        cfg.filter_low_confidence = false;
    }
    fs::create_dir_all(&a.out)?;
    let mut stats: std::collections::BTreeMap<data::Condition, (usize, usize, usize)> = Default::default();
    for f in data::keypoint_files(&a.input)? {
        let mut kept = Vec::new();
        for s in data::load_keypoint_file(&f)? {
            let entry = stats.entry(s.condition).or_default();
            entry.0 += s.len();
            match train::preprocess(&s, &cfg, false) {
                Ok(p) => {
                    entry.1 += s.len() - p.len();
                    kept.push(p);
                }
                Err(e @ (Error::EmptySequence(_) | Error::DegenerateSequence(_))) => {
                    log::warn!("dropping {}: {e}", s.label());
                    entry.1 += s.len();
                    entry.2 += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        data::save_keypoint_file(&kept, &a.out.join(f.file_name().expect("file name")))?;
    }
    let summary: Vec<RemovalSummary> = stats
        .into_iter()
        .map(|(c, (frames, removed, dropped))| RemovalSummary {
            condition: c.to_string(),
            frames,
            removed,
            removed_percent: if frames == 0 { 0.0 } else { 100.0 * removed as f64 / frames as f64 },
            dropped_sequences: dropped,
        })
        .collect();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, mut config: GlobalConfig, stdout: &mut dyn Write) -> Outcome {
    config.train.seed = resolve_seed(a.seed, config.train.seed)?;
    if let Some(e) = a.max_epochs {
        config.train.max_epochs = Some(e);
    }
    config.validate()?;
    let seqs = load_dir(&a.data)?;
    let (train_set, validation) = if a.closed_set {
        (eval::split_gallery_probe(&seqs, &config.eval).0, Vec::new())
    } else {
        let split = data::split_by_subject(&seqs, config.data.split_ratios, config.data.split_seed)?;
        (split.train, split.validation)
    };
    let trainer = if a.resume {
        let ckpt = heatgait::nnkernel::load_checkpoint(&a.out.join("last.ckpt"))?;
        let mut t = train::Trainer::resume(&ckpt, &train_set, &validation, Some(&a.out))?;
        if a.max_epochs.is_some() {
            t.set_max_epochs(a.max_epochs);
        }
        t
    } else {
        train::Trainer::new(config.setup(), &train_set, &validation, Some(&a.out))?
    };
    let (report, _) = trainer.run()?;
    writeln!(stdout, "{}", serde_json::to_string_pretty(&report).expect("report serialises"))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, config: &GlobalConfig, stdout: &mut dyn Write) -> Outcome {
    let trained = TrainedModel::load(&a.checkpoint)?;
    let gallery = load_dir(&a.gallery)?;
    let probe = load_dir(&a.probe)?;
    let data_cfg = &trained.meta.setup.data;
    let g = eval::embed_all(&gallery, &trained.model, &trained.params, data_cfg)?;
    let p = eval::embed_all(&probe, &trained.model, &trained.params, data_cfg)?;
    let mut eval_cfg = config.eval.clone();
    eval_cfg.exclude_same_view |= a.exclude_same_view;
    let outcome = eval::rank1(&p, &g, &eval_cfg)?;
    let format: TableFormat = a.format.parse()?;
    emit(&eval::emit_table(&outcome.table, format), a.out.as_deref(), stdout)
}

fn cmd_ablation(a: &AblationArgs, mut config: GlobalConfig, stdout: &mut dyn Write) -> Outcome {
    config.train.seed = resolve_seed(a.seed, config.train.seed)?;
    if let Some(e) = a.max_epochs {
        config.train.max_epochs = Some(e);
    }
    config.validate()?;
    let seqs = load_dir(&a.data)?;
    let mut data = EvalData::closed_set(&seqs, &config.eval);
    if let Some(t) = &a.train {
        data.train = load_dir(t)?;
    }
    let rows = eval::ablation_run(&config.setup(), &data, &AblationVariant::standard(), &config.eval)?;
    let format: TableFormat = a.format.parse()?;
    emit(&eval::emit_ablation(&rows, format), a.out.as_deref(), stdout)
}

fn parse_graph(spec: &str) -> Result<SkeletonGraph, Failure> {
    if spec == "coco" {
        return Ok(SkeletonGraph::coco());
    }
    if let Some(n) = spec.strip_prefix("path:").and_then(|n| n.parse::<usize>().ok()) {
        if n >= 2 {
            return Ok(SkeletonGraph::path(n));
        }
    }
    Err(Error::Config(format!("unknown graph {spec:?}; use coco or path:N with N >= 2")).into())
}

fn cmd_diagnose(a: &DiagnoseArgs, stdout: &mut dyn Write) -> Outcome {
    let g = parse_graph(&a.graph)?;
    let report = graph::bias_report(&g, a.max_scale)?;
    let text = if a.format == "json" {
        report.to_json() + "\n"
    } else {
        report.to_string()
    };
    stdout.write_all(text.as_bytes())?;
    Ok(())
}
