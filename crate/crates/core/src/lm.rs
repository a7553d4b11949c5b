//! Tied-embedding bigram language model, trained on cross-entropy alone or
//! jointly with the coherence loss.
//!
//! `logits(w) = E e_w + b`; the same table serves as input and output
//! embeddings.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::coherence::BatchState;
use crate::corpus::{bigrams, BigramSampler, Document, TokenId};
use crate::embedding::EmbeddingTable;
use crate::error::{Result, ScaError};
use crate::kernel::KernelSpec;
use crate::trainer::{
    adapt_learning_rate, check_convergence, evaluate_coherence, mean, project_fields,
    steps_per_epoch, EpochLog, TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    pub table: EmbeddingTable,
    pub bias: Array1<f64>,
}

impl BigramModel {
    pub fn new(table: EmbeddingTable) -> Self {
        let n = table.len();
        BigramModel {
            table,
            bias: Array1::zeros(n),
        }
    }

    pub fn with_bias(table: EmbeddingTable, bias: Array1<f64>) -> Result<Self> {
        if bias.len() != table.len() {
            return Err(ScaError::DimensionMismatch {
                expected: table.len(),
                got: bias.len(),
            });
        }
        Ok(BigramModel { table, bias })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    pub fn logits(&self, w: TokenId) -> Result<Array1<f64>> {
        self.check(w)?;
        Ok(self.table.matrix().dot(&self.table.row(w)) + &self.bias)
    }

    pub fn probabilities(&self, w: TokenId) -> Result<Array1<f64>> {
        Ok(softmax(&self.logits(w)?))
    }

    fn check(&self, w: TokenId) -> Result<()> {
        if w < self.vocab_size() {
            Ok(())
        } else {
            Err(ScaError::OutOfVocabulary(w))
        }
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let z = exp.sum();
    exp / z
}

fn log_sum_exp(logits: &Array1<f64>) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-ln softmax(logits(w_t))[w_{t+1}]`.
pub fn nll(model: &BigramModel, pair: (TokenId, TokenId)) -> Result<f64> {
    model.check(pair.1)?;
    let z = model.logits(pair.0)?;
    Ok((log_sum_exp(&z) - z[pair.1]).max(0.0))
}

pub fn perplexity_pairs(model: &BigramModel, pairs: &[(TokenId, TokenId)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ScaError::precondition("perplexity needs at least one pair"));
    }
    let total = pairs.iter().map(|&p| nll(model, p)).sum::<Result<f64>>()?;
    Ok((total / pairs.len() as f64).exp())
}

/// `exp` of the mean negative log-likelihood over adjacent pairs.
pub fn perplexity(model: &BigramModel, sequence: &[TokenId]) -> Result<f64> {
    if sequence.len() < 2 {
        return Err(ScaError::precondition(
            "perplexity needs a sequence of length >= 2",
        ));
    }
    let pairs: Vec<_> = sequence.windows(2).map(|w| (w[0], w[1])).collect();
    perplexity_pairs(model, &pairs)
}

/// Top-1 next-token accuracy; argmax ties go to the smallest id.
pub fn classification_accuracy(model: &BigramModel, pairs: &[(TokenId, TokenId)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ScaError::precondition("accuracy needs a non-empty set"));
    }
    let mut hits = 0usize;
    for &(w, target) in pairs {
        let z = model.logits(w)?;
        let mut best = 0;
        for (v, &x) in z.iter().enumerate() {
            if x > z[best] {
                best = v;
            }
        }
        if best == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean cross-entropy over `pairs` and its gradients with respect to the
/// table and the bias.
pub fn cross_entropy_gradients(
    model: &BigramModel,
    pairs: &[(TokenId, TokenId)],
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let n = model.vocab_size();
    let d = model.table.dim();
    let mut grad_e = Array2::zeros((n, d));
    let mut grad_b = Array1::zeros(n);
    let mut loss = 0.0;
    let e = model.table.matrix();
    for &(w, target) in pairs {
        model.check(target)?;
        let z = model.logits(w)?;
        loss += (log_sum_exp(&z) - z[target]).max(0.0);
        let mut r = softmax(&z);
        r[target] -= 1.0;
        // input side: E^T r; output side: r_v e_w for every v
        let input = e.t().dot(&r);
        let ew = e.row(w).to_owned();
        for (v, &rv) in r.iter().enumerate() {
            grad_e.row_mut(v).scaled_add(rv, &ew);
        }
        grad_e.row_mut(w).scaled_add(1.0, &input);
        grad_b += &r;
    }
    let scale = 1.0 / pairs.len() as f64;
    Ok((loss * scale, grad_e * scale, grad_b * scale))
}

/// Distinct tokens of `pairs` in first-appearance order of the source side.
fn distinct_sources(pairs: &[(TokenId, TokenId)]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    for &(w, _) in pairs {
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Joint objective `CE + lambda * L_SCA` with the coherence term evaluated
/// over the distinct source tokens of each batch.
pub fn train_joint(
    model: BigramModel,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
) -> Result<(BigramModel, Vec<EpochLog>)> {
    let weight = (config.lambda > 0.0).then_some(config.lambda);
    run_lm(model, split, spec, config, weight, |_, _| Ok(()))
}

/// Pure cross-entropy baseline sharing the joint loop and its batches.
pub fn train_ce(
    model: BigramModel,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
) -> Result<(BigramModel, Vec<EpochLog>)> {
    run_lm(model, split, spec, config, None, |_, _| Ok(()))
}

/// [`train_joint`] with a hook called after every epoch.
pub fn train_joint_with(
    model: BigramModel,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &BigramModel) -> Result<()>,
) -> Result<(BigramModel, Vec<EpochLog>)> {
    let weight = (config.lambda > 0.0).then_some(config.lambda);
    run_lm(model, split, spec, config, weight, on_epoch)
}

fn run_lm(
    mut model: BigramModel,
    split: &[Document],
    spec: &KernelSpec,
    config: &TrainConfig,
    sca_weight: Option<f64>,
    mut on_epoch: impl FnMut(&EpochLog, &BigramModel) -> Result<()>,
) -> Result<(BigramModel, Vec<EpochLog>)> {
    config.validate()?;
    let sampler = BigramSampler::new(split)?;
    let batch_size = config.batch_size.min(sampler.total_pairs());
    let steps = steps_per_epoch(sampler.total_pairs(), batch_size);
    let mut lr = config.learning_rate;
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut losses = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut coherence_sum = 0.0;
        let mut clipped = 0;
        for s in 0..steps {
            // Same batch schedule every epoch, so epoch losses are comparable.
            let step = s as u64;
            let pairs = sampler.sample(batch_size, config.seed, step)?;
            let (ce, mut grad_e, grad_b) = cross_entropy_gradients(&model, &pairs)?;
            let mut state = BatchState::compute(spec, &model.table, &distinct_sources(&pairs))?;
            let mut loss = ce;
            if let Some(lambda) = sca_weight {
                loss += lambda * state.loss;
                for (token, g) in state.token_gradients() {
                    grad_e.row_mut(token).scaled_add(lambda, &g);
                }
            }
            if !loss.is_finite() {
                return Err(ScaError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: s,
                });
            }
            if grad_e.iter().chain(grad_b.iter()).any(|x| !x.is_finite()) {
                return Err(ScaError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: s,
                });
            }
            loss_sum += loss;
            coherence_sum += state.coherence_score();
            clipped += project_fields(&mut state, config.rho, config.spectral_mode)?;
            model.table.matrix_mut().scaled_add(-lr, &grad_e);
            model.bias.scaled_add(-lr, &grad_b);
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / steps as f64,
            coherence: coherence_sum / steps as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            clipped,
        };
        losses.push(log.loss);
        logs.push(log);
        on_epoch(logs.last().expect("just pushed"), &model)?;
        lr = adapt_learning_rate(&logs, lr);
        if config.tolerance > 0.0 && check_convergence(&losses, config.window, config.tolerance) {
            break;
        }
    }
    Ok((model, logs))
}

/// Headline metrics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity_train: f64,
    pub perplexity_heldout: f64,
    /// Next-token top-1 accuracy on held-out pairs.
    pub accuracy: f64,
    /// Library-defined mean Frobenius cosine to the batch mean field.
    pub coherence_score: f64,
    /// Coherence weight of joint training; `None` for alignment-only runs.
    pub lambda: Option<f64>,
    pub seed: u64,
}

pub const COHERENCE_EVAL_BATCHES: usize = 20;

pub fn evaluate(
    model: &BigramModel,
    train: &[Document],
    heldout: &[Document],
    spec: &KernelSpec,
    batch_size: usize,
    lambda: Option<f64>,
    seed: u64,
) -> Result<EvalReport> {
    let train_pairs = bigrams(train);
    let heldout_pairs = bigrams(heldout);
    let scores = evaluate_coherence(
        &model.table,
        train,
        spec,
        batch_size,
        seed,
        COHERENCE_EVAL_BATCHES,
    )?;
    Ok(EvalReport {
        perplexity_train: perplexity_pairs(model, &train_pairs)?,
        perplexity_heldout: perplexity_pairs(model, &heldout_pairs)?,
        accuracy: classification_accuracy(model, &heldout_pairs)?,
        coherence_score: mean(&scores),
        lambda,
        seed,
    })
}
