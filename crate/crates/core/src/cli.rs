//! The `gotta` command line: `sample`, `augment`, `eval` and `stats`.
//!
//! Every subcommand accepts `--config FILE`, a plain-text `key=value` file
//! whose keys are long flag names (`mask_token` or `mask-token`). Flags given
//! on the command line win over the file. `GOTTA_THREADS` caps the worker
//! pool. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::augment::{
    augment_dataset, read_prompt_pairs, summarize_pairs, AugmentOptions, PromptStyle,
    TargetContext, TemplateKind, DEFAULT_MASK_TOKEN,
};
use crate::dataset::{load_mrqa, sample_few_shot, QAExample, SplitManifest};
use crate::eval::{aggregate, evaluate, load_predictions};
use crate::gazetteer::{load_gazetteer, NormalizationOptions};
use crate::matcher::build_automaton;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gotta", version, about = "Entity-aware cloze augmentation for few-shot QA")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a seeded few-shot split and write its manifest.
    Sample(SampleArgs),
    /// Build the QA + cloze prompt file for a training set.
    Augment(AugmentArgs),
    /// Score predictions with bag-of-words F1.
    Eval(EvalArgs),
    /// Summarize a prompt file produced by `augment`.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// key=value defaults for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// MRQA JSON-lines file (optionally gzip-compressed)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset name for the manifest; defaults to the file header
    #[arg(long)]
    pub dataset: Option<String>,
    /// Manifest path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// MRQA training file
    #[arg(long)]
    pub train: PathBuf,
    /// Gazetteer file (`entity_id<TAB>surface` per line)
    #[arg(long)]
    pub gazetteer: PathBuf,
    /// Output prompt file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Split manifest selecting the training examples
    #[arg(long, conflicts_with = "k")]
    pub split: Option<PathBuf>,
    /// Sample a split of this size in place (with --seed)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TemplateKind::Gotta)]
    pub template: TemplateKind,
    #[arg(long, default_value = DEFAULT_MASK_TOKEN)]
    pub mask_token: String,
    /// Separator between the Question/Answer/Context segments
    #[arg(long, default_value = " ")]
    pub separator: String,
    /// Drop entity spans that overlap a gold answer
    #[arg(long)]
    pub exclude_answer_overlap: bool,
    /// Mask every occurrence of the selected surface, not just one
    #[arg(long)]
    pub mask_all_occurrences: bool,
    /// Context carried by cloze targets
    #[arg(long, value_enum, default_value_t = TargetContext::Masked)]
    pub target_context: TargetContext,
    /// Case-insensitive matching
    #[arg(long)]
    pub case_fold: bool,
    /// Match whitespace literally instead of collapsing runs
    #[arg(long)]
    pub no_collapse_whitespace: bool,
    #[arg(long, default_value_t = 2)]
    pub min_surface_chars: usize,
    #[arg(long, default_value_t = 1)]
    pub random_min_tokens: usize,
    #[arg(long, default_value_t = 3)]
    pub random_max_tokens: usize,
    /// Random spans per example (default: as many as entity spans)
    #[arg(long)]
    pub random_count: Option<usize>,
    /// Cloze loss weight, recorded for the trainer
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// MRQA file holding the gold answers
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions JSON (qid -> answer); repeat once per run
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    /// Include per-question scores in the report
    #[arg(long)]
    pub per_example: bool,
    /// Report path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt file written by `augment`
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match apply_config_file(args) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match worker_pool() {
        Ok(Some(pool)) => pool.install(|| dispatch(cli.command)),
        Ok(None) => dispatch(cli.command),
        Err(msg) => Err(Failure::Usage(msg)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn worker_pool() -> Result<Option<rayon::ThreadPool>, String> {
    let Ok(v) = std::env::var("GOTTA_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GOTTA_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| e.to_string())
}

/// Reads `--config FILE` and splices its entries in as flags directly after
/// the subcommand, so that explicit flags (which come later) override them.
fn apply_config_file(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let Some(sub_pos) = strs.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&strs[sub_pos]) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&config)
        .map_err(|e| format!("cannot read config file {config}: {e}"))?;

    let mut injected: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{config}:{}: expected key=value", n + 1))?;
        let flag = key.trim().replace('_', "-");
        let value = value.trim();
        if flag == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| format!("{config}:{}: unknown key {key:?}", n + 1))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{flag}").into());
            injected.push(value.into());
        } else {
            match value {
                "true" | "1" | "yes" => injected.push(format!("--{flag}").into()),
                "false" | "0" | "no" => {}
                _ => return Err(format!("{config}:{}: {key} expects true or false", n + 1)),
            }
        }
    }
    let mut out = args[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub_pos + 1..]);
    Ok(out)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Sample(a) => cmd_sample(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

#[derive(Serialize)]
struct InputHash {
    role: &'static str,
    path: String,
    sha256: String,
}

fn hash_file(role: &'static str, path: &Path) -> anyhow::Result<InputHash> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(InputHash {
        role,
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
    })
}

/// The resolved configuration written beside every output.
#[derive(Serialize)]
struct RunRecord<C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: C,
    inputs: Vec<InputHash>,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, value)?;
            lock.write_all(b"\n")?;
            Ok(())
        }
    }
}

fn write_run_record<C: Serialize>(
    out: &Path,
    command: &'static str,
    config: C,
    inputs: Vec<InputHash>,
) -> anyhow::Result<()> {
    let record = RunRecord {
        tool: "gotta",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs,
    };
    write_json(&sidecar(out, ".run.json"), &record)
}

fn cmd_sample(a: SampleArgs) -> Result<(), Failure> {
    require_file(&a.input, "input file")?;
    let ds = load_mrqa(&a.input)?;
    let split = sample_few_shot(&ds.examples, a.k as usize, a.seed)?;
    let name = a
        .dataset
        .clone()
        .or_else(|| ds.name().map(str::to_string))
        .unwrap_or_else(|| stem(&a.input));
    let manifest = split.manifest(&name);
    emit_json(a.out.as_deref(), &manifest)?;
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Config<'a> {
            input: &'a Path,
            k: u64,
            seed: u64,
            dataset: &'a str,
            source_size: usize,
        }
        let config = Config {
            input: &a.input,
            k: a.k,
            seed: a.seed,
            dataset: &name,
            source_size: split.source_size,
        };
        write_run_record(out, "sample", config, vec![hash_file("input", &a.input)?])?;
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|s| s.to_string_lossy()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn select_by_manifest(examples: &[QAExample], manifest: &SplitManifest) -> anyhow::Result<Vec<QAExample>> {
    let index: std::collections::HashMap<&str, &QAExample> =
        examples.iter().map(|e| (e.qid.as_str(), e)).collect();
    manifest
        .qids
        .iter()
        .map(|q| {
            index
                .get(q.as_str())
                .map(|e| (*e).clone())
                .ok_or_else(|| anyhow!("split qid {q:?} not found in training file"))
        })
        .collect()
}

#[derive(Serialize)]
struct AugmentConfig<'a> {
    train: &'a Path,
    gazetteer: &'a Path,
    out: &'a Path,
    split: Option<&'a Path>,
    k: Option<u64>,
    seed: u64,
    lambda: f64,
    normalization: NormalizationOptions,
    augment: &'a AugmentOptions,
}

fn cmd_augment(a: AugmentArgs) -> Result<(), Failure> {
    require_file(&a.train, "training file")?;
    require_file(&a.gazetteer, "gazetteer")?;
    if let Some(split) = &a.split {
        require_file(split, "split manifest")?;
    }
    if a.mask_token.is_empty() {
        return Err(Failure::Usage("--mask-token must not be empty".into()));
    }
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(Failure::Usage("--lambda must be a positive number".into()));
    }
    if a.random_min_tokens == 0 || a.random_min_tokens > a.random_max_tokens {
        return Err(Failure::Usage(
            "random span lengths need 1 <= --random-min-tokens <= --random-max-tokens".into(),
        ));
    }

    let normalization = NormalizationOptions {
        case_fold: a.case_fold,
        collapse_internal_whitespace: !a.no_collapse_whitespace,
        min_surface_chars: a.min_surface_chars,
    };
    let opts = AugmentOptions {
        style: PromptStyle {
            mask_token: a.mask_token.clone(),
            separator: a.separator.clone(),
        },
        template: a.template,
        seed: a.seed,
        exclude_answer_overlap: a.exclude_answer_overlap,
        mask_all_occurrences: a.mask_all_occurrences,
        target_context: a.target_context,
        random_span_tokens: (a.random_min_tokens, a.random_max_tokens),
        random_span_count: a.random_count,
    };

    let gazetteer = load_gazetteer(&a.gazetteer, normalization)?;
    let automaton = build_automaton(&gazetteer)
        .with_context(|| format!("compiling {}", a.gazetteer.display()))?;
    let ds = load_mrqa(&a.train)?;
    let examples = match (&a.split, a.k) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let manifest: SplitManifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing split manifest {}", path.display()))?;
            select_by_manifest(&ds.examples, &manifest)?
        }
        (None, Some(k)) => sample_few_shot(&ds.examples, k as usize, a.seed)?
            .select(&ds.examples)
            .into_iter()
            .cloned()
            .collect(),
        (None, None) => ds.examples.clone(),
    };

    let set = augment_dataset(&examples, &automaton, &opts)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    set.write_jsonl(BufWriter::new(file))
        .with_context(|| format!("writing {}", a.out.display()))?;

    #[derive(Serialize)]
    struct StatsSidecar<'a> {
        dataset: Option<&'a str>,
        stats: &'a crate::augment::AugmentStats,
        provenance: &'a crate::augment::Provenance,
        gazetteer: &'a crate::gazetteer::LoadStats,
        gazetteer_surfaces: usize,
        load_warnings: &'a crate::dataset::LoadWarnings,
    }
    write_json(
        &sidecar(&a.out, ".stats.json"),
        &StatsSidecar {
            dataset: ds.name(),
            stats: &set.stats,
            provenance: &set.provenance,
            gazetteer: gazetteer.stats(),
            gazetteer_surfaces: gazetteer.surface_count(),
            load_warnings: &ds.warnings,
        },
    )?;

    let mut inputs = vec![
        hash_file("train", &a.train)?,
        hash_file("gazetteer", &a.gazetteer)?,
    ];
    if let Some(split) = &a.split {
        inputs.push(hash_file("split", split)?);
    }
    let config = AugmentConfig {
        train: &a.train,
        gazetteer: &a.gazetteer,
        out: &a.out,
        split: a.split.as_deref(),
        k: a.k,
        seed: a.seed,
        lambda: a.lambda,
        normalization,
        augment: &opts,
    };
    write_run_record(&a.out, "augment", config, inputs)?;
    log::info!(
        "{} ori + {} aug pairs -> {}",
        set.stats.ori_pairs,
        set.stats.aug_pairs,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.gold, "gold file")?;
    for p in &a.predictions {
        require_file(p, "predictions file")?;
    }
    let gold = load_mrqa(&a.gold)?;
    let mut runs = Vec::with_capacity(a.predictions.len());
    for p in &a.predictions {
        let preds = load_predictions(p)?;
        runs.push(evaluate(&preds, &gold.examples)?);
    }
    let mut report = if runs.len() == 1 {
        runs.pop().expect("one run")
    } else {
        aggregate(&runs)?
    };
    if !a.per_example {
        report.per_example.clear();
    }
    emit_json(a.out.as_deref(), &report)?;
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Config<'a> {
            gold: &'a Path,
            predictions: &'a [PathBuf],
            per_example: bool,
        }
        let mut inputs = vec![hash_file("gold", &a.gold)?];
        for p in &a.predictions {
            inputs.push(hash_file("predictions", p)?);
        }
        let config = Config {
            gold: &a.gold,
            predictions: &a.predictions,
            per_example: a.per_example,
        };
        write_run_record(out, "eval", config, inputs)?;
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<(), Failure> {
    require_file(&a.input, "prompt file")?;
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let pairs = read_prompt_pairs(std::io::BufReader::new(file), &a.input)?;
    let summary = summarize_pairs(&pairs);
    emit_json(a.out.as_deref(), &summary)?;
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Config<'a> {
            input: &'a Path,
        }
        let config = Config { input: &a.input };
        write_run_record(out, "stats", config, vec![hash_file("input", &a.input)?])?;
    }
    Ok(())
}
