//! Lexical snippet retrieval (Okapi BM25).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const K1: f64 = 1.2;
const B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub text: String,
}

/// Lowercased alphanumeric runs; `_` joins.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SnippetStore {
    snippets: Vec<Snippet>,
    term_freqs: Vec<BTreeMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: BTreeMap<String, usize>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("importation.nimm", include_str!("../../snippets/importation.nimm")),
    ("saturating_incidence.nimm", include_str!("../../snippets/saturating_incidence.nimm")),
    ("seiar_asymptomatic.nimm", include_str!("../../snippets/seiar_asymptomatic.nimm")),
    ("seir_latent.nimm", include_str!("../../snippets/seir_latent.nimm")),
    ("seirm_mortality.nimm", include_str!("../../snippets/seirm_mortality.nimm")),
    ("seirs_waning.nimm", include_str!("../../snippets/seirs_waning.nimm")),
    ("sir_basic.nimm", include_str!("../../snippets/sir_basic.nimm")),
    ("underreporting.nimm", include_str!("../../snippets/underreporting.nimm")),
];

impl SnippetStore {
    /// Snippets are kept in identifier order.
    pub fn new(mut snippets: Vec<Snippet>) -> Self {
        snippets.sort_by(|a, b| a.id.cmp(&b.id));
        let mut store = SnippetStore::default();
        for s in &snippets {
            let tokens = tokenize(&s.text);
            let mut tf = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *store.doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
            store.doc_lens.push(tokens.len());
            store.term_freqs.push(tf);
        }
        store.snippets = snippets;
        store
    }

    /// The corpus shipped with the crate.
    pub fn bundled() -> Self {
        Self::new(
            BUNDLED
                .iter()
                .map(|(id, text)| Snippet {
                    id: id.to_string(),
                    text: text.to_string(),
                })
                .collect(),
        )
    }

    /// Every regular file in `dir` is one snippet, identified by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut snippets = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            snippets.push(Snippet { id, text });
        }
        Ok(Self::new(snippets))
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    fn score(&self, doc: usize, query: &BTreeSet<String>) -> f64 {
        let n = self.snippets.len() as f64;
        let avg = self.doc_lens.iter().sum::<usize>() as f64 / n;
        let len = self.doc_lens[doc] as f64;
        query
            .iter()
            .filter_map(|t| {
                let tf = *self.term_freqs[doc].get(t)? as f64;
                let df = self.doc_freq[t] as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                Some(idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * len / avg.max(1.0))))
            })
            .sum()
    }

    /// The `top_n` best-scoring snippets; ties go to the smaller identifier.
    pub fn retrieve(&self, query: &str, top_n: usize) -> Vec<Snippet> {
        if self.is_empty() {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut ranked: Vec<(f64, usize)> = (0..self.snippets.len())
            .map(|i| (self.score(i, &terms), i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked
            .into_iter()
            .take(top_n)
            .map(|(_, i)| self.snippets[i].clone())
            .collect()
    }
}
