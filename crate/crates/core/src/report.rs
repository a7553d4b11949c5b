//! Report artifacts: loss curve, coherence histograms, rare-word
//! similarities, 2-D PCA coordinates and the metric summary.
//!
//! Every CSV has a header row, UTF-8 text and `\n` line endings. Floats are
//! written in shortest round-trip form, so re-emitting parsed files is
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, UNK_ID};
use crate::embedding::{nearest_neighbor_similarity, norm, EmbeddingTable};
use crate::error::{Result, ScaError};
use crate::lm::EvalReport;
use crate::trainer::EpochLog;

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;
pub const DEFAULT_RARE_QUANTILE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Unit eigenvectors of the covariance, by decreasing eigenvalue.
    pub components: Vec<Array1<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `n x k` projections of the centered rows.
    pub coordinates: Array2<f64>,
    pub iterations: Vec<usize>,
}

pub fn pca_project(table: &EmbeddingTable, k: usize) -> Result<PcaResult> {
    pca(table.matrix(), k)
}

/// Top-`k` principal components by power iteration with deflation on the
/// `d x d` sample covariance.
pub fn pca(data: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let (n, d) = data.dim();
    if n <= k {
        return Err(ScaError::precondition(format!(
            "pca needs n > k (n={n}, k={k})"
        )));
    }
    if k > d {
        return Err(ScaError::precondition(format!(
            "pca needs k <= d (k={k}, d={d})"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("n > 0");
    let centered = data - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance: f64 = cov.diag().sum();
    let negligible = 1e-12 * total_variance.max(f64::MIN_POSITIVE);

    let mut deflated = cov.clone();
    let mut components: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut iterations = Vec::with_capacity(k);
    for component in 0..k {
        let orthogonalize = |v: &mut Array1<f64>, basis: &[Array1<f64>]| {
            for b in basis {
                let p = v.dot(b);
                v.scaled_add(-p, b);
            }
        };
        let mut v = Array1::from_shape_fn(d, |j| 1.0 / (j + 1) as f64 + 0.01 * j as f64);
        orthogonalize(&mut v, &components);
        if norm(v.view()) == 0.0 {
            v = Array1::from_shape_fn(d, |j| if j == component { 1.0 } else { 0.0 });
            orthogonalize(&mut v, &components);
        }
        v /= norm(v.view());

        let mut converged = false;
        let mut iters = 0;
        while iters < PCA_MAX_ITERATIONS {
            iters += 1;
            let mut w = deflated.dot(&v);
            orthogonalize(&mut w, &components);
            let wn = norm(w.view());
            if wn <= negligible {
                // remaining spectrum is numerically zero
                converged = true;
                break;
            }
            w /= wn;
            if w.dot(&v) < 0.0 {
                w.mapv_inplace(|x| -x);
            }
            let delta = norm((&w - &v).view());
            v = w;
            if delta < PCA_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(ScaError::NoConvergence {
                component,
                iterations: iters,
            });
        }
        let (argmax, _) = v.iter().enumerate().fold((0, 0.0f64), |(bi, bv), (i, &x)| {
            if x.abs() > bv {
                (i, x.abs())
            } else {
                (bi, bv)
            }
        });
        if v[argmax] < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let lambda = v.dot(&cov.dot(&v)).max(0.0);
        for r in 0..d {
            for c in 0..d {
                deflated[[r, c]] -= lambda * v[r] * v[c];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
        iterations.push(iters);
    }
    let mut basis = Array2::zeros((d, k));
    for (j, c) in components.iter().enumerate() {
        basis.column_mut(j).assign(c);
    }
    Ok(PcaResult {
        coordinates: centered.dot(&basis),
        components,
        eigenvalues,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceHistogram {
    pub label: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `0.0, 0.05, ..., 1.0`.
pub fn default_edges() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

impl CoherenceHistogram {
    /// Bins are half-open `[lo, hi)` except the last, which is closed.
    /// Out-of-range scores fall into the nearest end bin so counts always
    /// equal the number of scores.
    pub fn from_scores(label: impl Into<String>, scores: &[f64], edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ScaError::precondition(
                "histogram edges must be strictly increasing",
            ));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0; bins];
        for &s in scores {
            let idx = edges
                .partition_point(|&e| e <= s)
                .saturating_sub(1)
                .min(bins - 1);
            counts[idx] += 1;
        }
        Ok(CoherenceHistogram {
            label: label.into(),
            edges,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Merges every `factor` adjacent bins; a short tail forms its own bin.
    pub fn rebin(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let bins = self.counts.len();
        let mut edges = vec![self.edges[0]];
        let mut counts = Vec::new();
        let mut start = 0;
        while start < bins {
            let end = (start + factor).min(bins);
            counts.push(self.counts[start..end].iter().sum());
            edges.push(self.edges[end]);
            start = end;
        }
        CoherenceHistogram {
            label: self.label.clone(),
            edges,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareWordRow {
    pub token: String,
    pub frequency: u64,
    pub similarity_before: f64,
    pub similarity_after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RareWordReport {
    pub rows: Vec<RareWordRow>,
}

impl RareWordReport {
    pub fn mean_delta(&self) -> f64 {
        self.rows.iter().map(|r| r.delta).sum::<f64>() / self.rows.len() as f64
    }
}

/// Rare set: tokens (excluding the unknown token) whose frequency is at or
/// below the nearest-rank `quantile` of the frequency distribution. Rows
/// are ordered by frequency, then id.
pub fn rare_word_report(
    before: &EmbeddingTable,
    after: &EmbeddingTable,
    vocab: &Vocabulary,
    quantile: f64,
) -> Result<RareWordReport> {
    if before.len() != vocab.len() || after.len() != vocab.len() {
        return Err(ScaError::VocabMismatch(format!(
            "tables have {} and {} rows, vocabulary has {}",
            before.len(),
            after.len(),
            vocab.len()
        )));
    }
    if before.dim() != after.dim() {
        return Err(ScaError::DimensionMismatch {
            expected: before.dim(),
            got: after.dim(),
        });
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(ScaError::precondition("rare quantile must lie in [0, 1]"));
    }
    let mut candidates: Vec<usize> = (0..vocab.len()).filter(|&i| i != UNK_ID).collect();
    if candidates.is_empty() {
        return Err(ScaError::EmptyRareSet);
    }
    let mut freqs: Vec<u64> = candidates.iter().map(|&i| vocab.frequency(i)).collect();
    freqs.sort_unstable();
    let rank = ((quantile * freqs.len() as f64).ceil() as usize).max(1) - 1;
    let threshold = freqs[rank.min(freqs.len() - 1)];
    candidates.retain(|&i| vocab.frequency(i) <= threshold);
    if quantile == 0.0 || candidates.is_empty() {
        return Err(ScaError::EmptyRareSet);
    }
    candidates.sort_by_key(|&i| (vocab.frequency(i), i));
    let rows = candidates
        .into_iter()
        .map(|i| {
            let (_, sb) = nearest_neighbor_similarity(before, i)?;
            let (_, sa) = nearest_neighbor_similarity(after, i)?;
            Ok(RareWordRow {
                token: vocab.token(i).to_owned(),
                frequency: vocab.frequency(i),
                similarity_before: sb,
                similarity_after: sa,
                delta: sa - sb,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RareWordReport { rows })
}

/// Final metrics, optionally with the pre-training ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(flatten)]
    pub after: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<EvalReport>,
    pub epochs: usize,
    pub notes: Vec<String>,
}

pub fn metric_notes() -> Vec<String> {
    vec![
        "coherence_score is library-defined: mean Frobenius cosine between each tensor field and the batch mean field".into(),
        "accuracy is a proxy: next-token top-1 accuracy of the tied bigram model on held-out pairs".into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub checkpoint: String,
    pub bin_start: f64,
    pub bin_end: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub token: String,
    pub x: f64,
    pub y: f64,
}

/// Per-batch coherence scores recorded at one training checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub table_before: EmbeddingTable,
    pub table_after: EmbeddingTable,
    pub vocab: Vocabulary,
    pub summary: Summary,
    pub rare_quantile: f64,
}

pub const REPORT_FILES: [&str; 5] = [
    "loss_curve.csv",
    "coherence_hist.csv",
    "rare_words.csv",
    "pca.csv",
    "summary.json",
];

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| ScaError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| ScaError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| ScaError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| ScaError::io(path, e))
}

pub fn histogram_rows(hists: &[CoherenceHistogram]) -> Vec<HistogramRow> {
    hists
        .iter()
        .flat_map(|h| {
            h.counts
                .iter()
                .enumerate()
                .map(move |(b, &count)| HistogramRow {
                    checkpoint: h.label.clone(),
                    bin_start: h.edges[b],
                    bin_end: h.edges[b + 1],
                    count,
                })
        })
        .collect()
}

pub fn pca_rows(table: &EmbeddingTable) -> Result<Vec<PcaRow>> {
    let result = pca_project(table, 2)?;
    Ok(table
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, token)| PcaRow {
            token: token.clone(),
            x: result.coordinates[[i, 0]],
            y: result.coordinates[[i, 1]],
        })
        .collect())
}

/// Writes the five report files into `dir`, creating it if needed.
pub fn emit_reports(artifacts: &RunArtifacts, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| ScaError::io(dir, e))?;
    let paths: Vec<PathBuf> = REPORT_FILES.iter().map(|f| dir.join(f)).collect();

    let loss: Vec<LossRow> = artifacts
        .logs
        .iter()
        .map(|l| LossRow {
            epoch: l.epoch,
            loss: l.loss,
        })
        .collect();
    write_csv(&paths[0], &loss)?;

    let hists = artifacts
        .checkpoints
        .iter()
        .map(|c| CoherenceHistogram::from_scores(c.label.clone(), &c.scores, default_edges()))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&paths[1], &histogram_rows(&hists))?;

    let rare = rare_word_report(
        &artifacts.table_before,
        &artifacts.table_after,
        &artifacts.vocab,
        artifacts.rare_quantile,
    )?;
    write_csv(&paths[2], &rare.rows)?;

    write_csv(&paths[3], &pca_rows(&artifacts.table_after)?)?;
    write_json(&paths[4], &artifacts.summary)?;
    Ok(paths)
}
