//! Mini-batch coherence-alignment training: tensor updates, loss,
//! semi-gradient, spectral constraint and embedding update per batch, with
//! halve-on-uptick learning rate adaptation and windowed stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coherence::BatchState;
use crate::corpus::{BatchSampler, Document};
use crate::embedding::EmbeddingTable;
use crate::error::{Result, ScaError};
use crate::field::{spectral_norm, spectral_project, SpectralMode};
use crate::kernel::KernelSpec;

pub const MIN_LEARNING_RATE: f64 = 1e-8;

/// Step offset for evaluation batches so they never coincide with the
/// training stream of the same seed.
const EVAL_STEP_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rho: f64,
    /// Weight of the coherence loss in joint training; unused by `train_sca`.
    pub lambda: f64,
    pub max_epochs: usize,
    pub window: usize,
    /// Relative windowed improvement below which training stops. Zero
    /// disables early stopping.
    pub tolerance: f64,
    pub seed: u64,
    pub spectral_mode: SpectralMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            rho: 1.0,
            lambda: 0.0,
            max_epochs: 150,
            window: 10,
            tolerance: 1e-3,
            seed: 7,
            spectral_mode: SpectralMode::Clip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ScaError::precondition(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be > 0");
        }
        if self.batch_size < 1 {
            return fail("batch size must be >= 1");
        }
        if !(self.rho > 0.0) {
            return fail("rho must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be >= 0");
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be >= 1");
        }
        if !(self.tolerance >= 0.0) {
            return fail("convergence tolerance must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub coherence: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Fields whose spectral norm exceeded rho before projection.
    pub clipped: usize,
}

impl EpochLog {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.loss.to_bits() == other.loss.to_bits()
            && self.coherence.to_bits() == other.coherence.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.clipped == other.clipped
    }
}

/// Halves the rate when the latest epoch loss rose, floored at
/// [`MIN_LEARNING_RATE`].
pub fn adapt_learning_rate(history: &[EpochLog], lr: f64) -> f64 {
    match history {
        [.., prev, last] if last.loss > prev.loss => (lr / 2.0).max(MIN_LEARNING_RATE),
        _ => lr,
    }
}

/// True once `losses` holds at least `2 * window` epochs and the mean of the
/// latest `window` losses improves on the mean of the window ending one
/// epoch earlier by a relative amount below `tolerance`.
pub fn check_convergence(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let latest = mean(&losses[n - window..]);
    let previous = mean(&losses[n - window - 1..n - 1]);
    (previous - latest) / previous.max(1e-12) < tolerance
}

/// One explicit Euler step of the gradient flow, `e <- e - dt * g`, applied
/// to each distinct batch token.
pub fn gradient_flow_step(table: &mut EmbeddingTable, state: &BatchState, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(ScaError::precondition("dt must be > 0"));
    }
    let matrix = table.matrix_mut();
    for (token, g) in state.token_gradients() {
        matrix.row_mut(token).scaled_add(-dt, &g);
    }
    Ok(())
}

pub(crate) fn steps_per_epoch(units: usize, batch_size: usize) -> usize {
    units.div_ceil(batch_size).max(1)
}

/// Counts fields above rho and projects them. The projected fields do not
/// feed back into the embedding update.
pub(crate) fn project_fields(
    state: &mut BatchState,
    rho: f64,
    mode: SpectralMode,
) -> Result<usize> {
    let mut clipped = 0;
    for f in state.fields.iter_mut() {
        if spectral_norm(f) > rho {
            clipped += 1;
        }
        *f = spectral_project(f, rho, mode)?;
    }
    Ok(clipped)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub table: EmbeddingTable,
    pub logs: Vec<EpochLog>,
    pub converged: bool,
}

pub fn train_sca(
    table: EmbeddingTable,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_sca_with(table, split, spec, config, |_, _| Ok(()))
}

/// [`train_sca`] with a hook called after every epoch.
pub fn train_sca_with(
    mut table: EmbeddingTable,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &EmbeddingTable) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(&bad) = split
        .iter()
        .flat_map(|d| d.tokens.iter())
        .find(|&&t| t >= table.len())
    {
        return Err(ScaError::OutOfVocabulary(bad));
    }
    let sampler = BatchSampler::new(split)?;
    let steps = steps_per_epoch(sampler.total_tokens(), config.batch_size);
    let mut lr = config.learning_rate;
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut losses = Vec::new();
    let mut converged = false;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut coherence_sum = 0.0;
        let mut clipped = 0;
        for s in 0..steps {
            // Same batch schedule every epoch, so epoch losses are comparable.
            let step = s as u64;
            let batch = sampler.sample(config.batch_size, config.seed, step)?;
            let mut state = BatchState::compute(spec, &table, &batch)?;
            if !state.loss.is_finite() {
                return Err(ScaError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: s,
                });
            }
            if state
                .gradients
                .iter()
                .any(|g| g.iter().any(|x| !x.is_finite()))
            {
                return Err(ScaError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: s,
                });
            }
            loss_sum += state.loss;
            coherence_sum += state.coherence_score();
            clipped += project_fields(&mut state, config.rho, config.spectral_mode)?;
            gradient_flow_step(&mut table, &state, lr)?;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / steps as f64,
            coherence: coherence_sum / steps as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            clipped,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6e} coherence {:.4} lr {lr:.3e} clipped {clipped}",
            log.loss,
            log.coherence
        );
        losses.push(log.loss);
        logs.push(log);
        on_epoch(logs.last().expect("just pushed"), &table)?;
        lr = adapt_learning_rate(&logs, lr);
        if config.tolerance > 0.0 && check_convergence(&losses, config.window, config.tolerance) {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        table,
        logs,
        converged,
    })
}

/// Coherence score of `batches` fixed evaluation batches drawn from `split`.
/// The same `(seed, batches)` always yields the same batches, so tables
/// can be compared before and after training.
pub fn evaluate_coherence(
    table: &EmbeddingTable,
    split: &[Document],
    spec: &KernelSpec,
    batch_size: usize,
    seed: u64,
    batches: usize,
) -> Result<Vec<f64>> {
    let sampler = BatchSampler::new(split)?;
    let b = batch_size.min(sampler.total_tokens());
    (0..batches)
        .map(|k| {
            let batch = sampler.sample(b, seed, EVAL_STEP_BASE + k as u64)?;
            Ok(BatchState::compute(spec, table, &batch)?.coherence_score())
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
