//! The `sca` command line: ingest, toy-corpus, train, gradcheck, eval and
//! report subcommands. Exit codes: 0 success, 1 runtime failure, 2 bad flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coherence::{run_gradcheck, GradcheckConfig};
use crate::corpus::{write_toy_corpus, Corpus, ToyCorpusConfig, Vocabulary};
use crate::embedding::{EmbeddingTable, ModelFile};
use crate::field::SpectralMode;
use crate::kernel::{KernelFamily, KernelSpec};
use crate::lm::{evaluate, BigramModel, COHERENCE_EVAL_BATCHES};
use crate::pipeline::{
    self, heldout, load_corpus, resolve_kernel, split_corpus, Bandwidth, Settings,
};
use crate::report::{
    emit_reports, metric_notes, pca_rows, rare_word_report, read_csv, write_csv, write_json,
    Checkpoint, RunArtifacts, Summary,
};
use crate::trainer::EpochLog;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const INIT_MODEL_FILE: &str = "model_init.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SCORES_FILE: &str = "coherence_scores.csv";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Parser)]
#[command(
    name = "sca",
    version,
    about = "Kernel-weighted coherence alignment for token embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize a corpus manifest and write its vocabulary.
    Ingest(IngestArgs),
    /// Write the seeded synthetic corpus and its manifest.
    ToyCorpus(ToyArgs),
    /// Train embeddings and write the model, logs, manifest and reports.
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate one model, or a before/after pair.
    Eval(EvalArgs),
    /// Re-emit the report files of a finished training run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub docs_per_category: Option<usize>,
}

/// Flags shared by `train` and `eval`. Every field is optional so that
/// unset flags fall through to the config file and then the defaults.
#[derive(Debug, Args, Default)]
pub struct SettingsArgs {
    /// Corpus manifest; the built-in toy corpus when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    /// Positive bandwidth or `median`.
    #[arg(long)]
    pub bandwidth: Option<Bandwidth>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON settings file, or the manifest.json of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: SettingsArgs,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub spectral_mode: Option<SpectralMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Enables joint language-model training with this coherence weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Convergence window in epochs.
    #[arg(long)]
    pub window: Option<usize>,
    /// Relative windowed improvement below which training stops; 0 disables.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest embedding dimension drawn.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Largest batch drawn.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Adds this offset to every analytic gradient (negative control).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb_gradient: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: SettingsArgs,
    #[arg(long, conflicts_with_all = ["before", "after"], required_unless_present = "after")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "after")]
    pub before: Option<PathBuf>,
    #[arg(long, requires = "before")]
    pub after: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: Settings,
    pub kernel: KernelSpec,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    coherence: f64,
    lr: f64,
    seconds: f64,
    clipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    checkpoint: String,
    batch: usize,
    score: f64,
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or("SCA_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            1
        }
    }
}

/// Joins an error with its causes, skipping causes whose text the previous
/// message already includes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

pub fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::ToyCorpus(a) => cmd_toy_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_vocab(path: &Path, vocab: &Vocabulary) -> anyhow::Result<()> {
    fs::write(path, vocab.to_json() + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_ingest(args: &IngestArgs) -> anyhow::Result<i32> {
    let (categories, raw) = crate::corpus::load_manifest(&args.corpus)?;
    let corpus = Corpus::from_raw(categories, &raw, args.min_count)?;
    create_dir(&args.out)?;
    write_vocab(&args.out.join(VOCAB_FILE), &corpus.vocab)?;
    println!(
        "{} documents, {} tokens, {} vocabulary entries",
        corpus.documents.len(),
        corpus.token_count(),
        corpus.vocab.len()
    );
    Ok(0)
}

fn cmd_toy_corpus(args: &ToyArgs) -> anyhow::Result<i32> {
    let mut cfg = ToyCorpusConfig::default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.docs_per_category {
        cfg.docs_per_category = n;
    }
    let manifest = write_toy_corpus(&cfg, &args.out)?;
    println!("{}", manifest.display());
    Ok(0)
}

/// Reads a settings object from `path`. A run manifest contributes its
/// `config` member. Keys missing from the file keep their defaults.
pub fn load_config_file(path: &Path) -> anyhow::Result<Settings> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    if let Some(config) = value
        .get("config")
        .filter(|_| value.get("version").is_some())
    {
        value = config.clone();
    }
    let Value::Object(overrides) = value else {
        bail!("config {} must hold a JSON object", path.display());
    };
    let mut merged = serde_json::to_value(Settings::default()).expect("settings serialize");
    let base = merged.as_object_mut().expect("settings is an object");
    for (key, v) in overrides {
        if !base.contains_key(&key) {
            bail!("config {}: unknown key `{key}`", path.display());
        }
        base.insert(key, v);
    }
    serde_json::from_value(merged)
        .with_context(|| format!("config {} has invalid values", path.display()))
}

fn base_settings(common: &SettingsArgs) -> anyhow::Result<Settings> {
    let mut s = match &common.config {
        Some(path) => load_config_file(path)?,
        None => Settings::default(),
    };
    if let Some(p) = &common.corpus {
        s.corpus = Some(p.clone());
    }
    if let Some(k) = common.kernel {
        s.kernel = k;
    }
    if let Some(b) = common.bandwidth {
        s.bandwidth = b;
    }
    if let Some(b) = common.batch {
        s.batch = b;
    }
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(t) = common.threads {
        s.threads = Some(t);
    }
    Ok(s)
}

/// Merges flags over the config file over the defaults.
pub fn train_settings(args: &TrainArgs) -> anyhow::Result<Settings> {
    let mut s = base_settings(&args.common)?;
    if let Some(d) = args.dim {
        s.dim = d;
    }
    if let Some(r) = args.rho {
        s.rho = r;
    }
    if let Some(m) = args.spectral_mode {
        s.spectral_mode = m;
    }
    if let Some(lr) = args.lr {
        s.lr = lr;
    }
    if let Some(e) = args.epochs {
        s.epochs = e;
    }
    if let Some(l) = args.lambda {
        s.lambda = Some(l);
    }
    if let Some(c) = args.checkpoint_every {
        s.checkpoint_every = Some(c);
    }
    if let Some(w) = args.window {
        s.window = w;
    }
    if let Some(t) = args.tolerance {
        s.tolerance = t;
    }
    Ok(s)
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // A second global pool in the same process is refused; the first wins.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
    }
    Ok(())
}

fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("cannot resolve {}", path.display()))
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<i32> {
    let mut settings = train_settings(args)?;
    if let Some(p) = &settings.corpus {
        settings.corpus = Some(absolute(p)?);
    }
    settings.train_config().validate()?;
    init_threads(settings.threads)?;
    let corpus = load_corpus(&settings)?;

    let out = &args.out;
    create_dir(out)?;
    let every = settings.checkpoint_every.filter(|&e| e > 0);
    let mut checkpoint_models = Vec::new();
    let result = pipeline::run(&settings, corpus, |log, table, bias| {
        if every.is_some_and(|e| log.epoch.is_multiple_of(e)) {
            let dir = out.join(CHECKPOINT_DIR);
            fs::create_dir_all(&dir).map_err(|e| crate::ScaError::io(&dir, e))?;
            let name = format!("{CHECKPOINT_DIR}/model_epoch_{}.json", log.epoch);
            table.to_model(bias).save(&out.join(&name))?;
            checkpoint_models.push(name);
        }
        log::info!(
            "epoch {} loss {:.6e} coherence {:.4}",
            log.epoch,
            log.loss,
            log.coherence
        );
        Ok(())
    })?;

    let bias = settings.lambda.map(|_| &result.model.bias);
    result
        .model
        .table
        .to_model(bias)
        .save(&out.join(MODEL_FILE))?;
    result
        .table_init
        .to_model(None)
        .save(&out.join(INIT_MODEL_FILE))?;
    write_csv(&out.join(EPOCHS_FILE), &epoch_rows(&result.logs))?;
    write_csv(&out.join(SCORES_FILE), &score_rows(&result.checkpoints))?;
    write_vocab(&out.join(VOCAB_FILE), &result.corpus.vocab)?;
    let reports = emit_reports(&result.artifacts(), out)?;

    let mut artifacts: Vec<String> = [
        MODEL_FILE,
        INIT_MODEL_FILE,
        EPOCHS_FILE,
        SCORES_FILE,
        VOCAB_FILE,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    artifacts.extend(
        reports
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned()),
    );
    artifacts.extend(checkpoint_models);
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: settings,
        kernel: result.kernel,
        artifacts,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let last = result.logs.last();
    println!(
        "epochs {} loss {:.6e} coherence {:.4} -> {:.4}",
        result.summary.epochs,
        last.map_or(f64::NAN, |l| l.loss),
        result.initial_coherence(),
        result.final_coherence()
    );
    Ok(0)
}

fn epoch_rows(logs: &[EpochLog]) -> Vec<EpochRow> {
    logs.iter()
        .map(|l| EpochRow {
            epoch: l.epoch,
            loss: l.loss,
            coherence: l.coherence,
            lr: l.lr,
            seconds: l.seconds,
            clipped: l.clipped,
        })
        .collect()
}

fn score_rows(checkpoints: &[Checkpoint]) -> Vec<ScoreRow> {
    checkpoints
        .iter()
        .flat_map(|c| {
            c.scores.iter().enumerate().map(|(b, &score)| ScoreRow {
                checkpoint: c.label.clone(),
                batch: b,
                score,
            })
        })
        .collect()
}

fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<i32> {
    let config = GradcheckConfig {
        seed: args.seed,
        max_dim: args.dim,
        max_batch: args.batch,
        epsilon: args.epsilon,
        instances: args.instances,
        perturb: args.perturb_gradient,
    };
    let report = run_gradcheck(&config)?;
    println!("instances {}", report.instances);
    println!(
        "max_rel_error_detached {:.3e}",
        report.max_rel_error_detached
    );
    println!("max_rel_gap_full {:.3e}", report.max_rel_gap_full);
    println!("mean_rel_gap_full {:.3e}", report.mean_rel_gap_full);
    if report.passed() {
        println!("gradcheck passed");
        Ok(0)
    } else {
        eprintln!("gradcheck failed");
        Ok(1)
    }
}

fn load_model(path: &Path) -> anyhow::Result<BigramModel> {
    let (table, bias) = ModelFile::load(path)?.into_parts()?;
    Ok(match bias {
        Some(b) => BigramModel::with_bias(table, b)?,
        None => BigramModel::new(table),
    })
}

fn check_vocab(table: &EmbeddingTable, vocab: &Vocabulary, path: &Path) -> anyhow::Result<()> {
    if table.tokens() != vocab.tokens() {
        return Err(crate::ScaError::VocabMismatch(format!(
            "{} has {} tokens that do not match the corpus vocabulary of {}",
            path.display(),
            table.len(),
            vocab.len()
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<i32> {
    let settings = base_settings(&args.common)?;
    init_threads(settings.threads)?;
    let corpus = load_corpus(&settings)?;
    let split = split_corpus(&corpus, &settings)?;
    let pair = match (&args.model, &args.before, &args.after) {
        (Some(m), _, _) => {
            let model = load_model(m)?;
            check_vocab(&model.table, &corpus.vocab, m)?;
            (None, model)
        }
        (None, Some(b), Some(a)) => {
            let before = load_model(b)?;
            let after = load_model(a)?;
            check_vocab(&before.table, &corpus.vocab, b)?;
            check_vocab(&after.table, &corpus.vocab, a)?;
            (Some(before), after)
        }
        _ => bail!("give --model, or both --before and --after"),
    };
    let (before, after) = pair;
    // Both models are scored under the kernel resolved on the reference one,
    // as during training.
    let reference = before.as_ref().unwrap_or(&after);
    let (kernel, _) = resolve_kernel(&settings, &reference.table)?;
    let eval = |m: &BigramModel| {
        evaluate(
            m,
            &split.train,
            heldout(&split),
            &kernel,
            settings.batch,
            settings.lambda,
            settings.seed,
        )
    };
    let summary = Summary {
        after: eval(&after)?,
        before: before.as_ref().map(eval).transpose()?,
        epochs: 0,
        notes: metric_notes(),
    };
    create_dir(&args.out)?;
    write_json(&args.out.join("summary.json"), &summary)?;
    if let Some(b) = &before {
        let rare = rare_word_report(
            &b.table,
            &after.table,
            &corpus.vocab,
            settings.rare_quantile,
        )?;
        write_csv(&args.out.join("rare_words.csv"), &rare.rows)?;
        write_csv(&args.out.join("pca.csv"), &pca_rows(&after.table)?)?;
        println!("rare-word mean delta {:.6}", rare.mean_delta());
    }
    println!(
        "perplexity {:.4} (heldout {:.4}), coherence {:.4}, {} coherence batches",
        summary.after.perplexity_train,
        summary.after.perplexity_heldout,
        summary.after.coherence_score,
        COHERENCE_EVAL_BATCHES
    );
    Ok(0)
}

fn read_run_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
}

/// Rebuilds the report inputs from the files a `train` run leaves behind.
pub fn load_run_artifacts(dir: &Path) -> anyhow::Result<RunArtifacts> {
    let manifest = read_run_manifest(dir)?;
    let rows: Vec<EpochRow> = read_csv(&dir.join(EPOCHS_FILE))?;
    let logs = rows
        .into_iter()
        .map(|r| EpochLog {
            epoch: r.epoch,
            loss: r.loss,
            coherence: r.coherence,
            lr: r.lr,
            seconds: r.seconds,
            clipped: r.clipped,
        })
        .collect();
    let scores: Vec<ScoreRow> = read_csv(&dir.join(SCORES_FILE))?;
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    for row in scores {
        match checkpoints.last_mut() {
            Some(c) if c.label == row.checkpoint => c.scores.push(row.score),
            _ => checkpoints.push(Checkpoint {
                label: row.checkpoint,
                scores: vec![row.score],
            }),
        }
    }
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_text = fs::read_to_string(&vocab_path)
        .with_context(|| format!("cannot read {}", vocab_path.display()))?;
    let vocab = Vocabulary::from_json(&vocab_text)
        .with_context(|| format!("{} is invalid", vocab_path.display()))?;
    let (table_before, _) = ModelFile::load(&dir.join(INIT_MODEL_FILE))?.into_parts()?;
    let (table_after, _) = ModelFile::load(&dir.join(MODEL_FILE))?.into_parts()?;
    let summary_path = dir.join("summary.json");
    let summary_text = fs::read_to_string(&summary_path)
        .with_context(|| format!("cannot read {}", summary_path.display()))?;
    let summary: Summary = serde_json::from_str(&summary_text)
        .with_context(|| format!("{} is invalid", summary_path.display()))?;
    Ok(RunArtifacts {
        logs,
        checkpoints,
        table_before,
        table_after,
        vocab,
        summary,
        rare_quantile: manifest.config.rare_quantile,
    })
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<i32> {
    let artifacts = load_run_artifacts(&args.run)?;
    let files = emit_reports(&artifacts, &args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(0)
}
