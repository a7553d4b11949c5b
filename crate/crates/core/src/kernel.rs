//! Contextual-influence kernels and bandwidth selection.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{step_rng, TokenId};
use crate::embedding::{dot, norm, EmbeddingTable};
use crate::error::{Result, ScaError};

pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Dot,
    Cosine,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Dot => "dot",
            KernelFamily::Cosine => "cosine",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "dot" => Ok(KernelFamily::Dot),
            "cosine" => Ok(KernelFamily::Cosine),
            other => Err(format!(
                "unknown kernel `{other}` (expected rbf|dot|cosine)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Only read by the rbf family.
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ScaError::precondition("rbf bandwidth must be > 0"));
        }
        Ok(KernelSpec {
            family: KernelFamily::Rbf,
            bandwidth,
        })
    }

    pub fn dot() -> Self {
        KernelSpec {
            family: KernelFamily::Dot,
            bandwidth: 1.0,
        }
    }

    pub fn cosine() -> Self {
        KernelSpec {
            family: KernelFamily::Cosine,
            bandwidth: 1.0,
        }
    }
}

pub fn kernel_eval(
    spec: &KernelSpec,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ScaError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(match spec.family {
        KernelFamily::Rbf => {
            if !(spec.bandwidth > 0.0) {
                return Err(ScaError::precondition("rbf bandwidth must be > 0"));
            }
            let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (-sq / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
        }
        KernelFamily::Dot => dot(x, y),
        KernelFamily::Cosine => {
            let denom = norm(x) * norm(y);
            if denom == 0.0 {
                0.0
            } else {
                (dot(x, y) / denom).clamp(-1.0, 1.0)
            }
        }
    })
}

/// `K(e_i, e_j)` for each `j` in `batch`, in batch order.
pub fn kernel_row(
    spec: &KernelSpec,
    table: &EmbeddingTable,
    i: TokenId,
    batch: &[TokenId],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(ScaError::precondition("kernel row needs a non-empty batch"));
    }
    let ei = table.row(i);
    batch
        .iter()
        .map(|&j| kernel_eval(spec, ei, table.row(j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthEstimate {
    pub bandwidth: f64,
    /// Set when every sampled distance was zero and the floor was returned.
    pub degenerate: bool,
}

/// Median pairwise Euclidean distance, floored at [`BANDWIDTH_FLOOR`].
/// When `sample_size` covers all `n(n-1)/2` pairs the median is exact;
/// otherwise `sample_size` distinct-index pairs are drawn with replacement.
pub fn median_bandwidth(
    table: &EmbeddingTable,
    sample_size: usize,
    seed: u64,
) -> Result<BandwidthEstimate> {
    let n = table.len();
    if n < 2 {
        return Err(ScaError::precondition("median bandwidth needs n >= 2"));
    }
    let dist = |i: usize, j: usize| -> f64 {
        table
            .row(i)
            .iter()
            .zip(table.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let all_pairs = n * (n - 1) / 2;
    let mut distances: Vec<f64> = if sample_size >= all_pairs {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| dist(i, j))
            .collect()
    } else {
        let mut rng = step_rng(seed, 0);
        (0..sample_size.max(1))
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                dist(i, j)
            })
            .collect()
    };
    distances.sort_by(f64::total_cmp);
    let mid = distances.len() / 2;
    let median = if distances.len() % 2 == 1 {
        distances[mid]
    } else {
        0.5 * (distances[mid - 1] + distances[mid])
    };
    if median <= 0.0 {
        log::warn!("all sampled pairwise distances are zero; using bandwidth floor");
    }
    Ok(BandwidthEstimate {
        bandwidth: median.max(BANDWIDTH_FLOOR),
        degenerate: distances.iter().all(|&d| d == 0.0),
    })
}
