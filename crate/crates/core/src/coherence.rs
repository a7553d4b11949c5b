//! Coherence loss, its published semi-gradient, finite-difference oracles
//! and the coherence score.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::TokenId;
use crate::embedding::{norm, EmbeddingTable};
use crate::error::{Result, ScaError};
use crate::field::{mean_field, weighted_context, MeanField, TensorField};
use crate::kernel::{kernel_eval, median_bandwidth, KernelSpec};

/// Batches at least this large compute kernel rows on the rayon pool.
const PAR_MIN_BATCH: usize = 64;

const SCORE_GUARD: f64 = 1e-12;

/// Everything derived from one mini-batch of an embedding snapshot.
/// Batch entries are positions; a token drawn twice contributes twice.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub batch: Vec<TokenId>,
    /// `kernel[[a, b]] = K(e_batch[a], e_batch[b])`.
    pub kernel: Array2<f64>,
    pub fields: Vec<TensorField>,
    pub mean: MeanField,
    pub loss: f64,
    pub gradients: Vec<Array1<f64>>,
}

impl BatchState {
    pub fn compute(spec: &KernelSpec, table: &EmbeddingTable, batch: &[TokenId]) -> Result<Self> {
        let m = batch.len();
        if m == 0 {
            return Err(ScaError::precondition("batch must be non-empty"));
        }
        if let Some(&bad) = batch.iter().find(|&&t| t >= table.len()) {
            return Err(ScaError::OutOfVocabulary(bad));
        }
        let d = table.dim();
        let per_position = |&i: &TokenId| -> Result<(Vec<f64>, Array1<f64>)> {
            let ei = table.row(i);
            let row = batch
                .iter()
                .map(|&j| kernel_eval(spec, ei, table.row(j)))
                .collect::<Result<Vec<f64>>>()?;
            let c = weighted_context(&row, batch.iter().map(|&j| table.row(j)), d);
            Ok((row, c))
        };
        let rows: Vec<(Vec<f64>, Array1<f64>)> = if m >= PAR_MIN_BATCH {
            batch.par_iter().map(per_position).collect::<Result<_>>()?
        } else {
            batch.iter().map(per_position).collect::<Result<_>>()?
        };

        let mut kernel = Array2::zeros((m, m));
        let mut fields = Vec::with_capacity(m);
        for (a, (row, c)) in rows.into_iter().enumerate() {
            for (b, k) in row.into_iter().enumerate() {
                kernel[[a, b]] = k;
            }
            fields.push(TensorField::new(table.row(batch[a]).to_owned(), c));
        }
        let mean = mean_field(&fields)?;
        let loss = sca_loss(&fields, &mean);
        let gradients = sca_gradient(&fields, &mean);
        Ok(BatchState {
            batch: batch.to_vec(),
            kernel,
            fields,
            mean,
            loss,
            gradients,
        })
    }

    pub fn coherence_score(&self) -> f64 {
        coherence_score(&self.fields, &self.mean)
    }

    /// Gradient per distinct token: positions sharing a token id are summed.
    pub fn token_gradients(&self) -> Vec<(TokenId, Array1<f64>)> {
        let mut out: Vec<(TokenId, Array1<f64>)> = Vec::new();
        for (&t, g) in self.batch.iter().zip(&self.gradients) {
            match out.iter_mut().find(|(id, _)| *id == t) {
                Some((_, acc)) => *acc += g,
                None => out.push((t, g.clone())),
            }
        }
        out
    }
}

fn frobenius_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `L = sum_i ||T_i - M||_F^2`.
pub fn sca_loss(fields: &[TensorField], mean: &MeanField) -> f64 {
    fields
        .iter()
        .map(|f| frobenius_sq(&(f.dense() - &mean.matrix)))
        .sum()
}

/// `g_i = 2 (T_i - M) c_i`, which equals `(2/m) sum_j K_ij (T_i - M) e_j`
/// with kernel weights, contexts and `M` held fixed.
pub fn sca_gradient(fields: &[TensorField], mean: &MeanField) -> Vec<Array1<f64>> {
    fields
        .iter()
        .map(|f| (f.dense() - &mean.matrix).dot(&f.right) * 2.0)
        .collect()
}

/// Central differences of `f(e) = ||e c^T - M||_F^2` with `c` and `M` frozen.
pub fn fd_gradient_detached(
    embedding: ArrayView1<'_, f64>,
    context: ArrayView1<'_, f64>,
    mean: &MeanField,
    epsilon: f64,
) -> Result<Array1<f64>> {
    check_epsilon(epsilon)?;
    let f = |e: &Array1<f64>| {
        let field = TensorField::new(e.clone(), context.to_owned());
        frobenius_sq(&(field.dense() - &mean.matrix))
    };
    Ok(central_differences(embedding.to_owned(), epsilon, f))
}

/// Central differences of the full batch loss with respect to the row of
/// `token`; kernel weights, contexts and the mean field are recomputed at
/// every perturbation. Every batch position holding `token` moves together.
pub fn fd_gradient_full(
    spec: &KernelSpec,
    table: &EmbeddingTable,
    batch: &[TokenId],
    token: TokenId,
    epsilon: f64,
) -> Result<Array1<f64>> {
    check_epsilon(epsilon)?;
    if token >= table.len() {
        return Err(ScaError::OutOfVocabulary(token));
    }
    let d = table.dim();
    let mut work = table.clone();
    let base = table.row(token).to_owned();
    let mut grad = Array1::zeros(d);
    for k in 0..d {
        let mut plus = base.clone();
        plus[k] += epsilon;
        let mut minus = base.clone();
        minus[k] -= epsilon;
        let step = plus[k] - minus[k];
        work.matrix_mut().row_mut(token).assign(&plus);
        let lp = BatchState::compute(spec, &work, batch)?.loss;
        work.matrix_mut().row_mut(token).assign(&minus);
        let lm = BatchState::compute(spec, &work, batch)?.loss;
        grad[k] = (lp - lm) / step;
    }
    Ok(grad)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(ScaError::precondition(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )))
    }
}

fn central_differences(
    x: Array1<f64>,
    epsilon: f64,
    f: impl Fn(&Array1<f64>) -> f64,
) -> Array1<f64> {
    let mut grad = Array1::zeros(x.len());
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus[k] += epsilon;
        let mut minus = x.clone();
        minus[k] -= epsilon;
        // divide by the representable step, not the nominal one
        let step = plus[k] - minus[k];
        grad[k] = (f(&plus) - f(&minus)) / step;
    }
    grad
}

/// Mean Frobenius cosine between each field and the mean field. This is a
/// library-defined metric; a zero mean field scores 0.
pub fn coherence_score(fields: &[TensorField], mean: &MeanField) -> f64 {
    if fields.is_empty() {
        return 0.0;
    }
    let mnorm = frobenius_sq(&mean.matrix).sqrt();
    let total: f64 = fields
        .iter()
        .map(|f| {
            let t = f.dense();
            let inner: f64 = t.iter().zip(mean.matrix.iter()).map(|(a, b)| a * b).sum();
            inner / (frobenius_sq(&t).sqrt() * mnorm + SCORE_GUARD)
        })
        .sum();
    total / fields.len() as f64
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    const FLOOR: f64 = 1e-8;
    let diff: Array1<f64> = &a - &b;
    norm(diff.view()) / norm(a).max(norm(b)).max(FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Largest embedding dim drawn; each instance uses `2..=max_dim`.
    pub max_dim: usize,
    /// Largest batch drawn; each instance uses `1..=max_batch`.
    pub max_batch: usize,
    pub epsilon: f64,
    pub instances: usize,
    /// Added to the first coordinate of every analytic gradient. Negative
    /// control only.
    pub perturb: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            max_dim: 8,
            max_batch: 16,
            epsilon: 1e-5,
            instances: 100,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Analytic semi-gradient against detached central differences.
    pub max_rel_error_detached: f64,
    /// Analytic semi-gradient against the full recomputed-loss gradient.
    pub max_rel_gap_full: f64,
    pub mean_rel_gap_full: f64,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error_detached < GRADCHECK_TOLERANCE
    }
}

/// Random instance `k` of a gradient check: `m` distinct tokens with
/// standard normal embeddings and an rbf kernel at the exact median
/// bandwidth.
pub fn gradcheck_instance(
    config: &GradcheckConfig,
    k: usize,
) -> Result<(EmbeddingTable, KernelSpec, Vec<TokenId>)> {
    if config.max_dim < 2 || config.max_batch < 1 {
        return Err(ScaError::precondition(
            "gradcheck needs dim >= 2 and batch >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(k as u64);
    let d = rng.random_range(2..=config.max_dim);
    let m = rng.random_range(1..=config.max_batch);
    let n = m.max(2);
    let matrix = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
    let table = EmbeddingTable::from_rows(matrix)?;
    let h = median_bandwidth(&table, usize::MAX, 0)?.bandwidth;
    Ok((table, KernelSpec::rbf(h)?, (0..m).collect()))
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut max_detached = 0.0f64;
    let mut max_full = 0.0f64;
    let mut sum_full = 0.0;
    let mut count_full = 0usize;
    for k in 0..config.instances {
        let (table, spec, batch) = gradcheck_instance(config, k)?;
        let state = BatchState::compute(&spec, &table, &batch)?;
        for (pos, &token) in batch.iter().enumerate() {
            let mut analytic = state.gradients[pos].clone();
            analytic[0] += config.perturb;
            let fd = fd_gradient_detached(
                table.row(token),
                state.fields[pos].right.view(),
                &state.mean,
                config.epsilon,
            )?;
            max_detached = max_detached.max(relative_error(analytic.view(), fd.view()));
            let full = fd_gradient_full(&spec, &table, &batch, token, config.epsilon)?;
            let gap = relative_error(analytic.view(), full.view());
            max_full = max_full.max(gap);
            sum_full += gap;
            count_full += 1;
        }
    }
    Ok(GradcheckReport {
        instances: config.instances,
        max_rel_error_detached: max_detached,
        max_rel_gap_full: max_full,
        mean_rel_gap_full: if count_full > 0 {
            sum_full / count_full as f64
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hand_table() -> EmbeddingTable {
        EmbeddingTable::from_rows(array![[1.0, 0.5], [-0.3, 0.8], [0.6, -1.2]]).unwrap()
    }

    /// Direct double sum over matrix entries.
    fn loss_oracle(fields: &[TensorField]) -> f64 {
        let d = fields[0].dim();
        let m = fields.len() as f64;
        let mut total = 0.0;
        for f in fields {
            for r in 0..d {
                for c in 0..d {
                    let mean: f64 = fields
                        .iter()
                        .map(|g| g.scale * g.left[r] * g.right[c])
                        .sum::<f64>()
                        / m;
                    let v = f.scale * f.left[r] * f.right[c] - mean;
                    total += v * v;
                }
            }
        }
        total
    }

    #[test]
    fn loss_single_token_is_zero() {
        let spec = KernelSpec::rbf(1.0).unwrap();
        let s = BatchState::compute(&spec, &hand_table(), &[1]).unwrap();
        assert_eq!(s.loss, 0.0);
        assert!(s.gradients[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_embeddings_are_stationary() {
        let table = EmbeddingTable::from_rows(Array2::from_elem((4, 3), 0.3)).unwrap();
        let spec = KernelSpec::rbf(0.5).unwrap();
        let s = BatchState::compute(&spec, &table, &[0, 1, 2, 3, 2]).unwrap();
        assert_eq!(s.loss, 0.0);
        for g in &s.gradients {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn loss_matches_double_sum_oracle() {
        let spec = KernelSpec::rbf(1.3).unwrap();
        let s = BatchState::compute(&spec, &hand_table(), &[0, 1, 2]).unwrap();
        let oracle = loss_oracle(&s.fields);
        assert!((s.loss - oracle).abs() < 1e-13 * oracle.max(1.0));
        assert!(s.loss > 0.0);
    }

    #[test]
    fn gradient_closed_form_matches_kernel_sum_form() {
        let spec = KernelSpec::rbf(1.3).unwrap();
        let table = hand_table();
        let batch = [0, 1, 2];
        let s = BatchState::compute(&spec, &table, &batch).unwrap();
        let m = batch.len() as f64;
        for (a, f) in s.fields.iter().enumerate() {
            let diff = f.dense() - &s.mean.matrix;
            let mut sum = Array1::zeros(2);
            for (b, &j) in batch.iter().enumerate() {
                sum += &(diff.dot(&table.row(j)) * s.kernel[[a, b]]);
            }
            let literal = sum * (2.0 / m);
            assert!(relative_error(literal.view(), s.gradients[a].view()) < 1e-13);
        }
    }

    #[test]
    fn gradient_matches_detached_fd_hand_case() {
        let spec = KernelSpec::rbf(1.3).unwrap();
        let table = hand_table();
        let s = BatchState::compute(&spec, &table, &[0, 1, 2]).unwrap();
        for (a, &t) in s.batch.iter().enumerate() {
            let fd = fd_gradient_detached(table.row(t), s.fields[a].right.view(), &s.mean, 1e-5)
                .unwrap();
            assert!(relative_error(fd.view(), s.gradients[a].view()) < 1e-5);
        }
    }

    #[test]
    fn detached_fd_examples() {
        let mean = MeanField {
            matrix: array![
                [0.5, -1.0, 0.0, 2.0],
                [0.1, 0.2, 0.3, 0.4],
                [1.0, 0.0, 0.0, 1.0],
                [0.0, -0.5, 0.5, 0.0]
            ],
        };
        let e = array![0.3, -0.7, 1.1, 0.2];
        let zero = Array1::zeros(4);
        // with c = 0, f(e) = ||M||^2 is constant in e
        let g = fd_gradient_detached(e.view(), zero.view(), &mean, 1e-5).unwrap();
        assert!(g.iter().all(|&x| x.abs() < 1e-9));

        let c = array![0.4, 0.9, -0.2, 0.5];
        let field = TensorField::new(e.clone(), c.clone());
        let analytic = (field.dense() - &mean.matrix).dot(&c) * 2.0;
        let fd = fd_gradient_detached(e.view(), c.view(), &mean, 1e-5).unwrap();
        assert!(relative_error(fd.view(), analytic.view()) < 1e-6);

        assert!(fd_gradient_detached(e.view(), c.view(), &mean, 1e-2).is_err());
        assert!(fd_gradient_detached(e.view(), c.view(), &mean, 1e-9).is_err());
    }

    #[test]
    fn detached_fd_error_shrinks_quadratically() {
        // A non-quadratic function isolates the truncation term: apply the
        // same central-difference routine to f(x) = sum sin(x_k).
        let x = array![0.3, -1.1, 0.7];
        let exact = x.mapv(f64::cos);
        let err = |h: f64| {
            let g = central_differences(x.clone(), h, |v| v.iter().map(|t| t.sin()).sum());
            norm((&g - &exact).view())
        };
        let ratio = err(1e-3) / err(5e-4);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn full_fd_examples() {
        let spec = KernelSpec::rbf(0.5).unwrap();
        let same = EmbeddingTable::from_rows(Array2::from_elem((3, 2), 0.7)).unwrap();
        let g = fd_gradient_full(&spec, &same, &[0, 1, 2], 1, 1e-5).unwrap();
        assert!(g.iter().all(|&x| x.abs() < 1e-8), "{g}");

        let g = fd_gradient_full(&spec, &hand_table(), &[2], 2, 1e-5).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));

        let table = hand_table();
        let s = BatchState::compute(&spec, &table, &[0, 1, 2]).unwrap();
        let full = fd_gradient_full(&spec, &table, &[0, 1, 2], 0, 1e-5).unwrap();
        let gap = relative_error(full.view(), s.gradients[0].view());
        assert!(gap > 1e-6, "full and semi-gradient unexpectedly agree");
    }

    #[test]
    fn coherence_score_examples() {
        let f = TensorField::new(array![1.0, 2.0], array![0.5, -1.0]);
        let same = vec![f.clone(), f.clone(), f.clone()];
        let m = mean_field(&same).unwrap();
        assert!((coherence_score(&same, &m) - 1.0).abs() < 1e-12);

        let neg = TensorField::new(array![-1.0, -2.0], array![0.5, -1.0]);
        let pair = vec![f.clone(), neg];
        let m = mean_field(&pair).unwrap();
        assert_eq!(coherence_score(&pair, &m), 0.0);

        // hand case: T1 = [[1,0],[0,0]], T2 = [[0,1],[0,0]], T3 = [[1,1],[0,0]]
        let fs = vec![
            TensorField::new(array![1.0, 0.0], array![1.0, 0.0]),
            TensorField::new(array![1.0, 0.0], array![0.0, 1.0]),
            TensorField::new(array![1.0, 0.0], array![1.0, 1.0]),
        ];
        let m = mean_field(&fs).unwrap();
        // M = [[2/3, 2/3],[0,0]], ||M|| = 2*sqrt(2)/3
        // cosines: 1/sqrt2, 1/sqrt2, 1
        let expected = (2.0 / 2f64.sqrt() + 1.0) / 3.0;
        assert!((coherence_score(&fs, &m) - expected).abs() < 1e-10);
    }

    #[test]
    fn token_gradients_sum_repeats() {
        let spec = KernelSpec::rbf(1.0).unwrap();
        let s = BatchState::compute(&spec, &hand_table(), &[0, 1, 0]).unwrap();
        let tg = s.token_gradients();
        assert_eq!(tg.len(), 2);
        assert_eq!(tg[0].0, 0);
        assert_eq!(tg[0].1, &s.gradients[0] + &s.gradients[2]);
    }

    #[test]
    fn gradcheck_small_run_passes_and_negative_control_fails() {
        let cfg = GradcheckConfig {
            instances: 10,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        let bad = GradcheckConfig {
            perturb: 1e-3,
            ..cfg
        };
        assert!(!run_gradcheck(&bad).unwrap().passed());
    }
}
