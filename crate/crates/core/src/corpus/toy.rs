//! Seeded synthetic corpora with category structure, Zipfian word
//! frequencies and first-order successor preferences.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawDocument;
use crate::error::{Result, ScaError};

const SYLLABLES: [&str; 50] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku", "la",
    "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu", "ra", "re",
    "ri", "ro", "ru", "sa", "se", "si", "so", "su", "ta", "te", "ti", "to", "tu", "va", "ve", "vi",
    "vo", "vu",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    /// Distinct word types; the vocabulary adds one unknown token on top.
    pub words: usize,
    pub categories: Vec<String>,
    pub docs_per_category: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub zipf_exponent: f64,
    /// Probability of following the current word's preferred successors.
    pub successor_prob: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            words: 99,
            categories: vec![
                "literary".into(),
                "conversational".into(),
                "technical".into(),
            ],
            docs_per_category: 40,
            min_doc_len: 40,
            max_doc_len: 80,
            zipf_exponent: 1.0,
            successor_prob: 0.5,
            seed: 7,
        }
    }
}

/// Word `k` as a two-syllable string; unique for `k < 2500`.
fn word(k: usize) -> String {
    let a = k % 50;
    let q = k / 50;
    let b = (q + 17 * a) % 50;
    format!("{}{}", SYLLABLES[a], SYLLABLES[b])
}

fn draw(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Generates the corpus in memory. Every word type appears at least once.
pub fn toy_corpus(config: &ToyCorpusConfig) -> Result<Vec<RawDocument>> {
    if config.words == 0 || config.words > 2500 {
        return Err(ScaError::precondition("toy corpus needs 1..=2500 words"));
    }
    if config.categories.is_empty() || config.docs_per_category == 0 {
        return Err(ScaError::precondition(
            "toy corpus needs categories and documents",
        ));
    }
    if config.min_doc_len < 2 || config.max_doc_len < config.min_doc_len {
        return Err(ScaError::precondition("invalid toy document length range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.words;
    let words: Vec<String> = (0..n).map(word).collect();

    // Each category ranks the shared word list differently.
    let cdfs: Vec<Vec<f64>> = config
        .categories
        .iter()
        .map(|_| {
            let mut rank: Vec<usize> = (0..n).collect();
            // partial shuffle keeps a shared head of frequent words
            for i in (1..n).rev() {
                if rng.random::<f64>() < 0.5 {
                    let j = rng.random_range(0..=i);
                    rank.swap(i, j);
                }
            }
            let mut weights = vec![0.0; n];
            for (r, &w) in rank.iter().enumerate() {
                weights[w] = 1.0 / ((r + 1) as f64).powf(config.zipf_exponent);
            }
            weights
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let successors: Vec<[usize; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(0..n),
            ]
        })
        .collect();

    let mut docs = Vec::new();
    for (c, category) in config.categories.iter().enumerate() {
        for k in 0..config.docs_per_category {
            let len = rng.random_range(config.min_doc_len..=config.max_doc_len);
            let mut ids = Vec::with_capacity(len);
            let mut cur = draw(&mut rng, &cdfs[c]);
            ids.push(cur);
            while ids.len() < len {
                cur = if rng.random::<f64>() < config.successor_prob {
                    successors[cur][rng.random_range(0..3)]
                } else {
                    draw(&mut rng, &cdfs[c])
                };
                ids.push(cur);
            }
            docs.push((format!("{category}_{k:03}.txt"), category.clone(), ids));
        }
    }

    let mut seen = vec![false; n];
    for (_, _, ids) in &docs {
        for &w in ids {
            seen[w] = true;
        }
    }
    for w in (0..n).filter(|&w| !seen[w]) {
        let d = rng.random_range(0..docs.len());
        let len = docs[d].2.len();
        let p = rng.random_range(0..len);
        docs[d].2[p] = w;
    }

    Ok(docs
        .into_iter()
        .map(|(id, category, ids)| RawDocument {
            id,
            category,
            tokens: ids.into_iter().map(|w| words[w].clone()).collect(),
        })
        .collect())
}

/// Writes the corpus as one text file per document plus `toy.manifest`.
/// Returns the manifest path.
pub fn write_toy_corpus(config: &ToyCorpusConfig, dir: &Path) -> Result<PathBuf> {
    let docs = toy_corpus(config)?;
    fs::create_dir_all(dir).map_err(|e| ScaError::io(dir, e))?;
    let mut manifest = String::new();
    for doc in &docs {
        let path = dir.join(&doc.id);
        let mut text = String::new();
        for (i, tok) in doc.tokens.iter().enumerate() {
            if i > 0 {
                text.push(if i % 12 == 0 { '\n' } else { ' ' });
            }
            text.push_str(tok);
        }
        text.push('\n');
        fs::write(&path, text).map_err(|e| ScaError::io(&path, e))?;
        manifest.push_str(&format!("{}\t{}\n", doc.category, doc.id));
    }
    let manifest_path = dir.join("toy.manifest");
    fs::write(&manifest_path, manifest).map_err(|e| ScaError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
