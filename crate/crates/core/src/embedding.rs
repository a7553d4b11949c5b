//! Token embedding table and vector queries over it.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Result, ScaError};

pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// `n x d` embedding matrix; row `i` is the vector of token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
    tokens: Vec<String>,
    seed: u64,
}

impl EmbeddingTable {
    pub fn from_matrix(matrix: Array2<f64>, tokens: Vec<String>, seed: u64) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 {
            return Err(ScaError::precondition("embedding table needs n >= 1"));
        }
        if d < 2 {
            return Err(ScaError::precondition("embedding dim must be >= 2"));
        }
        if tokens.len() != n {
            return Err(ScaError::DimensionMismatch {
                expected: n,
                got: tokens.len(),
            });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(ScaError::precondition("embedding entries must be finite"));
        }
        Ok(EmbeddingTable {
            matrix,
            tokens,
            seed,
        })
    }

    /// Table with anonymous token names `t0..t{n-1}`.
    pub fn from_rows(matrix: Array2<f64>) -> Result<Self> {
        let tokens = (0..matrix.nrows()).map(|i| format!("t{i}")).collect();
        Self::from_matrix(matrix, tokens, 0)
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row(&self, i: TokenId) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.matrix
    }

    pub fn to_model(&self, bias: Option<&Array1<f64>>) -> ModelFile {
        ModelFile {
            dim: self.dim(),
            seed: self.seed,
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .map(|(id, token)| ModelToken {
                    token: token.clone(),
                    id,
                    vector: self.matrix.row(id).to_vec(),
                })
                .collect(),
            bias: bias.map(|b| b.to_vec()),
        }
    }
}

/// Draws every entry i.i.d. from `N(0, scale^2)` with a seeded ChaCha stream.
pub fn init_embeddings(
    tokens: Vec<String>,
    dim: usize,
    seed: u64,
    scale: f64,
) -> Result<EmbeddingTable> {
    let n = tokens.len();
    if n == 0 {
        return Err(ScaError::precondition("n must be >= 1"));
    }
    if dim < 2 {
        return Err(ScaError::precondition("dim must be >= 2"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ScaError::precondition("init scale must be > 0"));
    }
    let normal = Normal::new(0.0, scale).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = Array2::from_shape_simple_fn((n, dim), || normal.sample(&mut rng));
    EmbeddingTable::from_matrix(matrix, tokens, seed)
}

pub fn dot(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

pub fn norm(u: ArrayView1<'_, f64>) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ScaError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(ScaError::ZeroVector { row: None });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Most similar other token by cosine; ties go to the smallest id.
pub fn nearest_neighbor_similarity(
    table: &EmbeddingTable,
    token: TokenId,
) -> Result<(TokenId, f64)> {
    let n = table.len();
    if n < 2 {
        return Err(ScaError::precondition("nearest neighbor needs n >= 2"));
    }
    if token >= n {
        return Err(ScaError::OutOfVocabulary(token));
    }
    let query = table.row(token);
    let qn = norm(query);
    if qn == 0.0 {
        return Err(ScaError::ZeroVector { row: Some(token) });
    }
    let mut best: Option<(TokenId, f64)> = None;
    for v in (0..n).filter(|&v| v != token) {
        let row = table.row(v);
        let vn = norm(row);
        if vn == 0.0 {
            return Err(ScaError::ZeroVector { row: Some(v) });
        }
        let sim = (dot(query, row) / (qn * vn)).clamp(-1.0, 1.0);
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((v, sim));
        }
    }
    Ok(best.expect("n >= 2"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelToken {
    pub token: String,
    pub id: TokenId,
    pub vector: Vec<f64>,
}

/// On-disk model: `{dim, seed, tokens: [{token, id, vector}]}` with an
/// optional per-token output `bias` written by joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub dim: usize,
    pub seed: u64,
    pub tokens: Vec<ModelToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn into_parts(mut self) -> Result<(EmbeddingTable, Option<Array1<f64>>)> {
        self.tokens.sort_by_key(|t| t.id);
        let n = self.tokens.len();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.id != i {
                return Err(ScaError::precondition(format!(
                    "model token ids are not dense: missing id {i}"
                )));
            }
            if t.vector.len() != self.dim {
                return Err(ScaError::DimensionMismatch {
                    expected: self.dim,
                    got: t.vector.len(),
                });
            }
        }
        let flat: Vec<f64> = self.tokens.iter().flat_map(|t| t.vector.clone()).collect();
        let matrix = Array2::from_shape_vec((n, self.dim), flat)
            .map_err(|e| ScaError::precondition(e.to_string()))?;
        let names = self.tokens.into_iter().map(|t| t.token).collect();
        let table = EmbeddingTable::from_matrix(matrix, names, self.seed)?;
        let bias = match self.bias {
            Some(b) if b.len() != n => {
                return Err(ScaError::DimensionMismatch {
                    expected: n,
                    got: b.len(),
                })
            }
            Some(b) => Some(Array1::from_vec(b)),
            None => None,
        };
        Ok((table, bias))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, text + "\n").map_err(|e| ScaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ScaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| ScaError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
