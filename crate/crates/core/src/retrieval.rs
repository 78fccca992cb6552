//! Okapi BM25 over tokenized documents, used to activate episodic memory.
//!
//! Standard parameters (k1 = 1.2, b = 0.75) with the Robertson IDF
//! `ln(1 + (N - df + 0.5)/(df + 0.5))`, which is nonnegative for every term.
//! No stemming and no stopword removal: issue texts are full of identifiers
//! whose exact spelling is the signal.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc id: {0}")]
    DuplicateDocId(String),
    #[error("unknown doc id: {0}")]
    UnknownDocId(String),
}

/// Lowercases and splits on every non-alphanumeric character, dropping empty
/// fragments and keeping duplicates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Immutable BM25 index. Insertion order is retained for the top-k tie rule.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    docs: HashMap<String, TokenizedDoc>,
    /// doc_id → position in build order (higher = more recent).
    insertion: HashMap<String, usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }
}

/// Builds an index from `(doc_id, text)` pairs. Rebuilding from the same
/// input yields an identical index.
pub fn index_build(
    docs: &[(String, String)],
    params: Bm25Params,
) -> Result<Bm25Index, RetrievalError> {
    let mut map = HashMap::new();
    let mut insertion = HashMap::new();
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    let mut len_sum = 0usize;

    for (pos, (doc_id, text)) in docs.iter().enumerate() {
        if map.contains_key(doc_id) {
            return Err(RetrievalError::DuplicateDocId(doc_id.clone()));
        }
        let tokens = tokenize(text);
        len_sum += tokens.len();
        let mut seen: Vec<&String> = tokens.iter().collect();
        seen.sort();
        seen.dedup();
        for term in seen {
            *doc_freq.entry(term.clone()).or_insert(0) += 1;
        }
        insertion.insert(doc_id.clone(), pos);
        map.insert(
            doc_id.clone(),
            TokenizedDoc {
                doc_id: doc_id.clone(),
                length: tokens.len(),
                tokens,
            },
        );
    }

    let avg_len = if map.is_empty() {
        0.0
    } else {
        len_sum as f64 / map.len() as f64
    };

    Ok(Bm25Index {
        docs: map,
        insertion,
        doc_freq,
        avg_len,
        params,
    })
}

/// BM25 score of one document against query terms. Terms with zero frequency
/// in the document contribute nothing, so the score is always ≥ 0.
pub fn bm25_score(
    index: &Bm25Index,
    query_terms: &[String],
    doc_id: &str,
) -> Result<f64, RetrievalError> {
    let doc = index
        .docs
        .get(doc_id)
        .ok_or_else(|| RetrievalError::UnknownDocId(doc_id.to_string()))?;
    let n = index.docs.len() as f64;
    let Bm25Params { k1, b } = index.params;

    let mut score = 0.0;
    for term in query_terms {
        let f = doc.tokens.iter().filter(|t| *t == term).count() as f64;
        if f == 0.0 {
            continue;
        }
        let df = index.doc_freq(term) as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let norm = k1 * (1.0 - b + b * doc.length as f64 / index.avg_len);
        score += idf * f * (k1 + 1.0) / (f + norm);
    }
    Ok(score)
}

/// Top-k documents for a raw query string. Zero-score documents are excluded;
/// ties break toward the most recently inserted document, then ascending
/// doc id.
pub fn top_k(index: &Bm25Index, query: &str, k: usize) -> Vec<(String, f64)> {
    let terms = tokenize(query);
    let mut scored: Vec<(String, f64, usize)> = index
        .docs
        .keys()
        .map(|id| {
            let score = bm25_score(index, &terms, id).expect("doc id from own key set");
            (id.clone(), score, index.insertion[id])
        })
        .filter(|(_, score, _)| *score > 0.0)
        .collect();

    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| b.2.cmp(&a.2))
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored.into_iter().map(|(id, score, _)| (id, score)).collect()
}
