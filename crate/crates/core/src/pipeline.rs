//! End-to-end runs: corpus, initialization, bandwidth selection, training,
//! evaluation and report artifacts.

use std::path::PathBuf;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_manifest, stratified_split, toy_corpus, Corpus, Document, SplitCorpus, SplitRatios,
    ToyCorpusConfig,
};
use crate::embedding::{init_embeddings, EmbeddingTable, DEFAULT_INIT_SCALE};
use crate::error::{Result, ScaError};
use crate::field::SpectralMode;
use crate::kernel::{median_bandwidth, KernelFamily, KernelSpec};
use crate::lm::{evaluate, train_joint_with, BigramModel, EvalReport, COHERENCE_EVAL_BATCHES};
use crate::report::{metric_notes, Checkpoint, RunArtifacts, Summary, DEFAULT_RARE_QUANTILE};
use crate::trainer::{evaluate_coherence, train_sca_with, EpochLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

impl std::str::FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "median" {
            return Ok(Bandwidth::Median);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
            _ => Err(format!(
                "bandwidth must be `median` or a positive number, got `{s}`"
            )),
        }
    }
}

/// Fully merged run configuration, frozen into every run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub dim: usize,
    pub kernel: KernelFamily,
    pub bandwidth: Bandwidth,
    pub bandwidth_sample: usize,
    pub rho: f64,
    pub spectral_mode: SpectralMode,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Joint language-model training when set.
    pub lambda: Option<f64>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub min_count: u64,
    pub split: SplitRatios,
    pub init_scale: f64,
    pub window: usize,
    pub tolerance: f64,
    pub rare_quantile: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Settings {
            corpus: None,
            dim: 16,
            kernel: KernelFamily::Rbf,
            bandwidth: Bandwidth::Median,
            bandwidth_sample: 5000,
            rho: t.rho,
            spectral_mode: t.spectral_mode,
            lr: t.learning_rate,
            batch: t.batch_size,
            epochs: t.max_epochs,
            lambda: None,
            seed: t.seed,
            threads: None,
            checkpoint_every: None,
            min_count: 1,
            split: SplitRatios::default(),
            init_scale: DEFAULT_INIT_SCALE,
            window: t.window,
            tolerance: t.tolerance,
            rare_quantile: DEFAULT_RARE_QUANTILE,
        }
    }
}

impl Settings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            rho: self.rho,
            lambda: self.lambda.unwrap_or(0.0),
            max_epochs: self.epochs,
            window: self.window,
            tolerance: self.tolerance,
            seed: self.seed,
            spectral_mode: self.spectral_mode,
        }
    }
}

/// Loads the manifest named in `settings`, or the default toy corpus when
/// none is given.
pub fn load_corpus(settings: &Settings) -> Result<Corpus> {
    let (categories, raw) = match &settings.corpus {
        Some(path) => load_manifest(path)?,
        None => {
            let cfg = ToyCorpusConfig::default();
            (cfg.categories.clone(), toy_corpus(&cfg)?)
        }
    };
    Corpus::from_raw(categories, &raw, settings.min_count)
}

pub fn split_corpus(corpus: &Corpus, settings: &Settings) -> Result<SplitCorpus> {
    stratified_split(
        &corpus.documents,
        &corpus.categories,
        settings.split,
        settings.seed,
    )
}

pub fn resolve_kernel(settings: &Settings, table: &EmbeddingTable) -> Result<(KernelSpec, bool)> {
    Ok(match settings.kernel {
        KernelFamily::Rbf => match settings.bandwidth {
            Bandwidth::Fixed(h) => (KernelSpec::rbf(h)?, false),
            Bandwidth::Median => {
                let est = median_bandwidth(table, settings.bandwidth_sample, settings.seed)?;
                (KernelSpec::rbf(est.bandwidth)?, est.degenerate)
            }
        },
        KernelFamily::Dot => (KernelSpec::dot(), false),
        KernelFamily::Cosine => (KernelSpec::cosine(), false),
    })
}

pub fn heldout(split: &SplitCorpus) -> &[Document] {
    if split.test.is_empty() {
        &split.validation
    } else {
        &split.test
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub settings: Settings,
    pub kernel: KernelSpec,
    pub bandwidth_degenerate: bool,
    pub corpus: Corpus,
    pub split: SplitCorpus,
    pub table_init: EmbeddingTable,
    pub model: BigramModel,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub summary: Summary,
}

impl RunResult {
    pub fn artifacts(&self) -> RunArtifacts {
        RunArtifacts {
            logs: self.logs.clone(),
            checkpoints: self.checkpoints.clone(),
            table_before: self.table_init.clone(),
            table_after: self.model.table.clone(),
            vocab: self.corpus.vocab.clone(),
            summary: self.summary.clone(),
            rare_quantile: self.settings.rare_quantile,
        }
    }

    pub fn final_coherence(&self) -> f64 {
        self.summary.after.coherence_score
    }

    pub fn initial_coherence(&self) -> f64 {
        self.summary
            .before
            .as_ref()
            .map_or(f64::NAN, |b| b.coherence_score)
    }
}

fn checkpoint(
    label: String,
    table: &EmbeddingTable,
    split: &[Document],
    spec: &KernelSpec,
    s: &Settings,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        label,
        scores: evaluate_coherence(table, split, spec, s.batch, s.seed, COHERENCE_EVAL_BATCHES)?,
    })
}

/// Runs alignment-only training, or joint language-model training when
/// `settings.lambda` is set. `on_epoch` sees every epoch log with the
/// current table and bias.
pub fn run(
    settings: &Settings,
    corpus: Corpus,
    mut on_epoch: impl FnMut(&EpochLog, &EmbeddingTable, Option<&Array1<f64>>) -> Result<()>,
) -> Result<RunResult> {
    let split = split_corpus(&corpus, settings)?;
    if split.train.is_empty() {
        return Err(ScaError::precondition("training split is empty"));
    }
    let table_init = init_embeddings(
        corpus.vocab.tokens().to_vec(),
        settings.dim,
        settings.seed,
        settings.init_scale,
    )?;
    let (kernel, bandwidth_degenerate) = resolve_kernel(settings, &table_init)?;
    let config = settings.train_config();

    let mut checkpoints = vec![checkpoint(
        "init".into(),
        &table_init,
        &split.train,
        &kernel,
        settings,
    )?];
    let every = settings.checkpoint_every.filter(|&e| e > 0);
    let mut record = |log: &EpochLog, table: &EmbeddingTable| -> Result<()> {
        if every.is_some_and(|e| log.epoch.is_multiple_of(e)) {
            checkpoints.push(checkpoint(
                format!("epoch_{}", log.epoch),
                table,
                &split.train,
                &kernel,
                settings,
            )?);
        }
        Ok(())
    };

    let (model, logs) = match settings.lambda {
        Some(_) => train_joint_with(
            BigramModel::new(table_init.clone()),
            &split.train,
            &kernel,
            &config,
            |log, model| {
                record(log, &model.table)?;
                on_epoch(log, &model.table, Some(&model.bias))
            },
        )?,
        None => {
            let outcome = train_sca_with(
                table_init.clone(),
                &split.train,
                &kernel,
                &config,
                |log, table| {
                    record(log, table)?;
                    on_epoch(log, table, None)
                },
            )?;
            (BigramModel::new(outcome.table), outcome.logs)
        }
    };
    let last_epoch = logs.last().map_or(0, |l| l.epoch);
    if !every.is_some_and(|e| last_epoch.is_multiple_of(e)) {
        checkpoints.push(checkpoint(
            format!("epoch_{last_epoch}"),
            &model.table,
            &split.train,
            &kernel,
            settings,
        )?);
    }

    let eval = |m: &BigramModel| -> Result<EvalReport> {
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
    let before = eval(&BigramModel::new(table_init.clone()))?;
    let after = eval(&model)?;
    let summary = Summary {
        after,
        before: Some(before),
        epochs: last_epoch,
        notes: metric_notes(),
    };
    Ok(RunResult {
        settings: settings.clone(),
        kernel,
        bandwidth_degenerate,
        corpus,
        split,
        table_init,
        model,
        logs,
        checkpoints,
        summary,
    })
}
