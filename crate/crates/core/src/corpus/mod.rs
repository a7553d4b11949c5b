//! Corpus ingestion: tokenization, vocabulary, stratified splits and
//! stratified mini-batch sampling.
//!
//! Documents carry a category label drawn from a closed set fixed at
//! ingestion. Splits stratify by document; mini-batches stratify by token
//! mass.

mod toy;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};

pub use toy::{toy_corpus, write_toy_corpus, ToyCorpusConfig};

pub type TokenId = usize;

/// Reserved id for every token below the vocabulary's `min_count`.
pub const UNK_ID: TokenId = 0;
pub const UNK_TOKEN: &str = "<unk>";

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"));

/// Lowercases and splits on whitespace and punctuation. Each punctuation
/// character becomes a standalone token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    TOKEN_RE
        .find_iter(&lowered)
        .map(|m| m.as_str().to_owned())
        .collect()
}

/// Like [`tokenize`] but validates the encoding first.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| ScaError::Encoding {
        offset: e.valid_up_to(),
    })?;
    Ok(tokenize(text))
}

/// A tokenized document before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub id: String,
    pub category: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub category: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: TokenId,
    frequency: u64,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for `token`, or [`UNK_ID`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: TokenId) -> u64 {
        self.frequencies[id]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn encode(&self, doc: &RawDocument) -> Document {
        Document {
            id: doc.id.clone(),
            category: doc.category.clone(),
            tokens: doc.tokens.iter().map(|t| self.id(t)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<VocabEntry> = self
            .tokens
            .iter()
            .zip(&self.frequencies)
            .enumerate()
            .map(|(id, (token, &frequency))| VocabEntry {
                token: token.clone(),
                id,
                frequency,
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut entries: Vec<VocabEntry> = serde_json::from_str(text)?;
        entries.sort_by_key(|e| e.id);
        let tokens: Vec<String> = entries.iter().map(|e| e.token.clone()).collect();
        let frequencies = entries.iter().map(|e| e.frequency).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            frequencies,
            index,
        })
    }
}

/// Builds a vocabulary holding every token seen at least `min_count` times,
/// plus the reserved unknown token at id 0. Remaining ids follow descending
/// frequency, ties broken lexicographically. The unknown token's frequency
/// is the number of corpus tokens that fall below `min_count`.
pub fn build_vocabulary(documents: &[RawDocument], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(ScaError::precondition("min_count must be >= 1"));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in documents {
        for tok in &doc.tokens {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(ScaError::EmptyCorpus);
    }

    let mut kept: Vec<(&str, u64)> = Vec::new();
    let mut unk_count = 0;
    for (tok, count) in counts {
        if count >= min_count && tok != UNK_TOKEN {
            kept.push((tok, count));
        } else {
            unk_count += count;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens = Vec::with_capacity(kept.len() + 1);
    let mut frequencies = Vec::with_capacity(kept.len() + 1);
    tokens.push(UNK_TOKEN.to_owned());
    frequencies.push(unk_count);
    for (tok, count) in kept {
        tokens.push(tok.to_owned());
        frequencies.push(count);
    }
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        tokens,
        frequencies,
        index,
    })
}

/// Encoded documents over a closed set of categories.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub categories: Vec<String>,
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Builds the vocabulary and encodes every document. Documents whose
    /// category is not declared are rejected; empty documents are dropped.
    pub fn from_raw(categories: Vec<String>, raw: &[RawDocument], min_count: u64) -> Result<Self> {
        for doc in raw {
            if !categories.contains(&doc.category) {
                return Err(ScaError::UnknownCategory(doc.category.clone()));
            }
        }
        let vocab = build_vocabulary(raw, min_count)?;
        let documents = raw
            .iter()
            .filter(|d| {
                if d.tokens.is_empty() {
                    log::warn!("dropping empty document {}", d.id);
                }
                !d.tokens.is_empty()
            })
            .map(|d| vocab.encode(d))
            .collect();
        Ok(Corpus {
            categories,
            documents,
            vocab,
        })
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }
}

/// Reads a manifest of `<category>\t<path>` lines. Relative paths resolve
/// against the manifest's directory. Categories are declared in order of
/// first appearance.
pub fn load_manifest(path: &Path) -> Result<(Vec<String>, Vec<RawDocument>)> {
    let text = fs::read_to_string(path).map_err(|e| ScaError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut categories: Vec<String> = Vec::new();
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (category, doc_path) = line.split_once('\t').ok_or_else(|| ScaError::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: "expected `<category>\\t<path>`".into(),
        })?;
        let category = category.trim().to_owned();
        if category.is_empty() {
            return Err(ScaError::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "empty category".into(),
            });
        }
        let doc_path = PathBuf::from(doc_path.trim());
        let full = if doc_path.is_absolute() {
            doc_path.clone()
        } else {
            base.join(&doc_path)
        };
        let bytes = fs::read(&full).map_err(|e| ScaError::io(&full, e))?;
        let tokens = tokenize_bytes(&bytes).map_err(|e| match e {
            ScaError::Encoding { offset } => ScaError::Manifest {
                path: full.clone(),
                line: lineno + 1,
                reason: format!("invalid UTF-8 at byte offset {offset}"),
            },
            other => other,
        })?;
        if !categories.contains(&category) {
            categories.push(category.clone());
        }
        docs.push(RawDocument {
            id: doc_path.to_string_lossy().into_owned(),
            category,
            tokens,
        });
    }
    if docs.is_empty() {
        return Err(ScaError::EmptyCorpus);
    }
    Ok((categories, docs))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    fn validate(&self) -> Result<()> {
        let r = self.as_array();
        let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(ScaError::InvalidRatios(r))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitCorpus {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
    pub ratios: SplitRatios,
}

/// Apportions `total` units across `weights` by largest remainder. Ties in
/// the fractional part go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Integer variant of [`largest_remainder`], exact for integer masses.
pub fn integer_quotas(masses: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = masses.iter().sum();
    if sum == 0 {
        return vec![0; masses.len()];
    }
    let mut counts: Vec<usize> = masses.iter().map(|&m| total * m / sum).collect();
    let rems: Vec<usize> = masses.iter().map(|&m| total * m % sum).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &k in order.iter().take(total - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Splits documents per category by largest-remainder allocation after a
/// seeded shuffle.
pub fn stratified_split(
    documents: &[Document],
    categories: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitCorpus> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitCorpus {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        ratios,
    };
    for cat in categories {
        let mut members: Vec<&Document> = documents.iter().filter(|d| &d.category == cat).collect();
        if members.is_empty() {
            return Err(ScaError::EmptyCategory(cat.clone()));
        }
        members.shuffle(&mut rng);
        let counts = largest_remainder(&ratios.as_array(), members.len());
        let mut it = members.into_iter().cloned();
        out.train.extend(it.by_ref().take(counts[0]));
        out.validation.extend(it.by_ref().take(counts[1]));
        out.test.extend(it.take(counts[2]));
    }
    for doc in documents {
        if !categories.contains(&doc.category) {
            return Err(ScaError::UnknownCategory(doc.category.clone()));
        }
    }
    Ok(out)
}

/// Deterministic rng for step `step` of a run seeded with `seed`.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn category_order(docs: &[Document]) -> Vec<String> {
    let mut cats: Vec<String> = Vec::new();
    for d in docs {
        if !cats.contains(&d.category) {
            cats.push(d.category.clone());
        }
    }
    cats
}

/// Stratified token sampler over one split. Each category receives a quota
/// proportional to its token mass; positions are drawn without replacement
/// within a category.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    categories: Vec<String>,
    positions: Vec<Vec<TokenId>>,
}

impl BatchSampler {
    pub fn new(split: &[Document]) -> Result<Self> {
        if split.is_empty() {
            return Err(ScaError::precondition("split is empty"));
        }
        let categories = category_order(split);
        let positions = categories
            .iter()
            .map(|c| {
                split
                    .iter()
                    .filter(|d| &d.category == c)
                    .flat_map(|d| d.tokens.iter().copied())
                    .collect()
            })
            .collect();
        Ok(BatchSampler {
            categories,
            positions,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn total_tokens(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }

    pub fn quotas(&self, batch_size: usize) -> Vec<usize> {
        let masses: Vec<usize> = self.positions.iter().map(Vec::len).collect();
        integer_quotas(&masses, batch_size)
    }

    pub fn sample(&self, batch_size: usize, seed: u64, step: u64) -> Result<Vec<TokenId>> {
        sample_stratified(&self.positions, batch_size, seed, step)
    }
}

fn sample_stratified<T: Copy>(
    groups: &[Vec<T>],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<T>> {
    if batch_size == 0 {
        return Err(ScaError::precondition("batch size must be >= 1"));
    }
    let masses: Vec<usize> = groups.iter().map(Vec::len).collect();
    let available: usize = masses.iter().sum();
    if batch_size > available {
        return Err(ScaError::BatchTooLarge {
            batch: batch_size,
            available,
        });
    }
    let quotas = integer_quotas(&masses, batch_size);
    let mut rng = step_rng(seed, step);
    let mut batch = Vec::with_capacity(batch_size);
    for (group, &quota) in groups.iter().zip(&quotas) {
        for pos in index::sample(&mut rng, group.len(), quota) {
            batch.push(group[pos]);
        }
    }
    Ok(batch)
}

/// Draws a stratified token batch from `split`. See [`BatchSampler`].
pub fn sample_batch(
    split: &[Document],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<TokenId>> {
    BatchSampler::new(split)?.sample(batch_size, seed, step)
}

/// Adjacent token pairs `(w_t, w_{t+1})` within a document.
pub fn bigrams(docs: &[Document]) -> Vec<(TokenId, TokenId)> {
    docs.iter()
        .flat_map(|d| d.tokens.windows(2).map(|w| (w[0], w[1])))
        .collect()
}

/// Stratified sampler over within-document bigram pairs.
#[derive(Debug, Clone)]
pub struct BigramSampler {
    pairs: Vec<Vec<(TokenId, TokenId)>>,
}

impl BigramSampler {
    pub fn new(split: &[Document]) -> Result<Self> {
        let pairs: Vec<Vec<(TokenId, TokenId)>> = category_order(split)
            .iter()
            .map(|c| {
                let docs: Vec<Document> =
                    split.iter().filter(|d| &d.category == c).cloned().collect();
                bigrams(&docs)
            })
            .collect();
        if pairs.iter().all(Vec::is_empty) {
            return Err(ScaError::precondition("split has no bigram pairs"));
        }
        Ok(BigramSampler { pairs })
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn sample(
        &self,
        batch_size: usize,
        seed: u64,
        step: u64,
    ) -> Result<Vec<(TokenId, TokenId)>> {
        sample_stratified(&self.pairs, batch_size, seed, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, cat: &str, text: &str) -> RawDocument {
        RawDocument {
            id: id.into(),
            category: cat.into(),
            tokens: tokenize(text),
        }
    }

    fn docs_with(cat: &str, n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                id: format!("{cat}{i}"),
                category: cat.into(),
                tokens: vec![i + 1],
            })
            .collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n ").is_empty());
        assert_eq!(tokenize("Hello, world"), vec!["hello", ",", "world"]);
        assert_eq!(tokenize("A A a"), vec!["a", "a", "a"]);
        assert_eq!(tokenize("end.!"), vec!["end", ".", "!"]);
    }

    #[test]
    fn tokenize_bytes_reports_offset() {
        let err = tokenize_bytes(b"ok \xff bad").unwrap_err();
        assert!(matches!(err, ScaError::Encoding { offset: 3 }));
        assert!(err.to_string().contains("byte offset 3"));
    }

    #[test]
    fn vocabulary_min_count() {
        let docs = vec![raw("d", "c", "a a a b")];
        let v = build_vocabulary(&docs, 2).unwrap();
        assert_eq!(v.tokens(), &["<unk>".to_string(), "a".to_string()]);
        assert_eq!(v.frequencies(), &[1, 3]);
        assert_eq!(v.id("b"), UNK_ID);

        let v = build_vocabulary(&[raw("d", "c", "a")], 1).unwrap();
        assert_eq!(v.tokens(), &["<unk>".to_string(), "a".to_string()]);
    }

    #[test]
    fn vocabulary_tie_break_is_lexicographic() {
        let v = build_vocabulary(&[raw("d", "c", "b a b a")], 1).unwrap();
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("b"), 2);
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(
            build_vocabulary(&[], 1),
            Err(ScaError::EmptyCorpus)
        ));
        assert!(build_vocabulary(&[raw("d", "c", "a")], 0).is_err());
    }

    #[test]
    fn vocabulary_json_roundtrip() {
        let v = build_vocabulary(&[raw("d", "c", "x y y z z z")], 1).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn split_exact_allocation() {
        let docs = docs_with("a", 10);
        let s = stratified_split(&docs, &["a".into()], SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_all_train() {
        let docs = docs_with("a", 7);
        let ratios = SplitRatios {
            train: 1.0,
            validation: 0.0,
            test: 0.0,
        };
        let s = stratified_split(&docs, &["a".into()], ratios, 1).unwrap();
        assert_eq!(s.train.len(), 7);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let mut docs = docs_with("a", 13);
        docs.extend(docs_with("b", 9));
        let cats = vec!["a".to_string(), "b".to_string()];
        let s1 = stratified_split(&docs, &cats, SplitRatios::default(), 42).unwrap();
        let s2 = stratified_split(&docs, &cats, SplitRatios::default(), 42).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.test, s2.test);
    }

    #[test]
    fn split_errors() {
        let docs = docs_with("a", 3);
        let cats = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            stratified_split(&docs, &cats, SplitRatios::default(), 0),
            Err(ScaError::EmptyCategory(c)) if c == "b"
        ));
        let bad = SplitRatios {
            train: 0.5,
            validation: 0.1,
            test: 0.1,
        };
        assert!(matches!(
            stratified_split(&docs, &cats[..1], bad, 0),
            Err(ScaError::InvalidRatios(_))
        ));
    }

    #[test]
    fn batch_quota_largest_remainder() {
        let mut split = vec![Document {
            id: "x".into(),
            category: "a".into(),
            tokens: vec![1; 75],
        }];
        split.push(Document {
            id: "y".into(),
            category: "b".into(),
            tokens: vec![2; 25],
        });
        let sampler = BatchSampler::new(&split).unwrap();
        assert_eq!(sampler.quotas(4), vec![3, 1]);
        let batch = sampler.sample(4, 9, 0).unwrap();
        assert_eq!(batch, vec![1, 1, 1, 2]);
    }

    #[test]
    fn batch_determinism_and_errors() {
        let split = vec![Document {
            id: "x".into(),
            category: "a".into(),
            tokens: (0..50).collect(),
        }];
        let a = sample_batch(&split, 10, 3, 7).unwrap();
        let b = sample_batch(&split, 10, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_batch(&split, 10, 3, 8).unwrap());
        // without replacement within a category
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(matches!(
            sample_batch(&split, 51, 3, 7),
            Err(ScaError::BatchTooLarge {
                batch: 51,
                available: 50
            })
        ));
        assert!(sample_batch(&split, 0, 3, 7).is_err());
        assert!(sample_batch(&[], 1, 3, 7).is_err());
    }

    #[test]
    fn bigrams_stay_within_documents() {
        let docs = vec![
            Document {
                id: "a".into(),
                category: "c".into(),
                tokens: vec![1, 2, 3],
            },
            Document {
                id: "b".into(),
                category: "c".into(),
                tokens: vec![4, 5],
            },
        ];
        assert_eq!(bigrams(&docs), vec![(1, 2), (2, 3), (4, 5)]);
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z0-9 ,.;!?'éÜß\t\n-]{0,60}") {
            let once = tokenize(&text);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }

        #[test]
        fn quotas_sum_to_batch(masses in prop::collection::vec(0usize..200, 1..6), b in 1usize..100) {
            let total: usize = masses.iter().sum();
            prop_assume!(total > 0);
            let q = integer_quotas(&masses, b);
            prop_assert_eq!(q.iter().sum::<usize>(), b);
            for (qi, &m) in q.iter().zip(&masses) {
                let exact = b as f64 * m as f64 / total as f64;
                prop_assert!((*qi as f64 - exact).abs() < 1.0);
            }
        }

        #[test]
        fn split_partitions_and_stays_proportional(
            sizes in prop::collection::vec(1usize..40, 1..4),
            r0 in 0.05f64..0.9,
            frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let r1 = (1.0 - r0) * frac;
            let ratios = SplitRatios { train: r0, validation: r1, test: 1.0 - r0 - r1 };
            let cats: Vec<String> = (0..sizes.len()).map(|i| format!("c{i}")).collect();
            let docs: Vec<Document> = cats.iter().zip(&sizes)
                .flat_map(|(c, &n)| docs_with(c, n))
                .collect();
            let s = stratified_split(&docs, &cats, ratios, seed).unwrap();
            let mut ids: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.test)
                .map(|d| d.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
            for (c, &n) in cats.iter().zip(&sizes) {
                for (part, r) in [(&s.train, r0), (&s.validation, r1), (&s.test, ratios.test)] {
                    let count = part.iter().filter(|d| &d.category == c).count();
                    prop_assert!((count as f64 - r * n as f64).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
