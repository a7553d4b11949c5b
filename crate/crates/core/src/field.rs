//! Per-token tensor fields, their batch mean, and the spectral constraint.
//!
//! A field is stored factored as `scale * left * right^T`, where `left` is
//! the token embedding and `right` its kernel-weighted context vector. The
//! largest singular value of a rank-1 matrix is the product of the factor
//! norms, so spectral operations never touch the dense `d x d` form.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::embedding::{norm, EmbeddingTable};
use crate::error::{Result, ScaError};
use crate::kernel::{kernel_eval, KernelSpec};

/// Relative slack on the clip test; keeps projection idempotent under
/// rounding while still guaranteeing `sigma <= rho * (1 + 1e-12)`.
pub const SPECTRAL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub left: Array1<f64>,
    pub right: Array1<f64>,
    pub scale: f64,
}

impl TensorField {
    pub fn new(left: Array1<f64>, right: Array1<f64>) -> Self {
        TensorField {
            left,
            right,
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.left.len()
    }

    pub fn dense(&self) -> Array2<f64> {
        let d = self.left.len();
        Array2::from_shape_fn((d, d), |(r, c)| self.scale * self.left[r] * self.right[c])
    }

    /// `dense(self) * v` without forming the matrix.
    pub fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        let rv: f64 = self.right.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        &self.left * (self.scale * rv)
    }

    pub fn transpose(&self) -> TensorField {
        TensorField {
            left: self.right.clone(),
            right: self.left.clone(),
            scale: self.scale,
        }
    }
}

/// Batch average of the dense fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralMode {
    /// Scale by `min(1, rho / sigma)` so that `sigma <= rho`.
    #[default]
    Clip,
    /// Always divide by `max(sigma, rho)`, even below the threshold.
    Alg1,
}

impl fmt::Display for SpectralMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectralMode::Clip => "clip",
            SpectralMode::Alg1 => "alg1",
        })
    }
}

impl FromStr for SpectralMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "clip" => Ok(SpectralMode::Clip),
            "alg1" => Ok(SpectralMode::Alg1),
            other => Err(format!(
                "unknown spectral mode `{other}` (expected clip|alg1)"
            )),
        }
    }
}

/// `c = (1/m) * sum_j k[j] * rows[j]`.
pub fn weighted_context<'a>(
    weights: &[f64],
    rows: impl IntoIterator<Item = ArrayView1<'a, f64>>,
    dim: usize,
) -> Array1<f64> {
    let mut acc = Array1::zeros(dim);
    for (k, row) in weights.iter().zip(rows) {
        acc.scaled_add(*k, &row);
    }
    acc / weights.len() as f64
}

/// Discretized kernel integral over the batch under the uniform empirical
/// measure.
pub fn context_vector(
    spec: &KernelSpec,
    table: &EmbeddingTable,
    i: TokenId,
    batch: &[TokenId],
) -> Result<Array1<f64>> {
    if batch.is_empty() {
        return Err(ScaError::precondition(
            "context vector needs a non-empty batch",
        ));
    }
    let ei = table.row(i);
    let weights = batch
        .iter()
        .map(|&j| kernel_eval(spec, ei, table.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(weighted_context(
        &weights,
        batch.iter().map(|&j| table.row(j)),
        table.dim(),
    ))
}

pub fn tensor_field(table: &EmbeddingTable, i: TokenId, context: Array1<f64>) -> TensorField {
    TensorField::new(table.row(i).to_owned(), context)
}

/// Computed as `T_1 + (1/m) sum (T_i - T_1)` so that a batch of identical
/// fields yields exactly that field.
pub fn mean_field(fields: &[TensorField]) -> Result<MeanField> {
    let first = fields
        .first()
        .ok_or_else(|| ScaError::precondition("mean field needs at least one field"))?;
    let d = first.dim();
    let base = first.dense();
    let mut dev = Array2::<f64>::zeros((d, d));
    for f in &fields[1..] {
        if f.dim() != d {
            return Err(ScaError::DimensionMismatch {
                expected: d,
                got: f.dim(),
            });
        }
        dev += &(f.dense() - &base);
    }
    Ok(MeanField {
        matrix: base + dev / fields.len() as f64,
    })
}

pub fn spectral_norm(field: &TensorField) -> f64 {
    field.scale.abs() * norm(field.left.view()) * norm(field.right.view())
}

pub fn spectral_project(field: &TensorField, rho: f64, mode: SpectralMode) -> Result<TensorField> {
    if !(rho > 0.0) {
        return Err(ScaError::precondition("rho must be > 0"));
    }
    let sigma = spectral_norm(field);
    let factor = match mode {
        SpectralMode::Clip if sigma > rho * (1.0 + SPECTRAL_SLACK) => rho / sigma,
        SpectralMode::Clip => 1.0,
        SpectralMode::Alg1 => 1.0 / sigma.max(rho),
    };
    Ok(TensorField {
        left: field.left.clone(),
        right: field.right.clone(),
        scale: field.scale * factor,
    })
}
