//! Document corpus and query sets: ingestion, sampling, and keyword search.
//!
//! Corpus files are line-delimited JSON records `{id, text, source, batch}`;
//! query files are line-delimited `{id, prompt, completion, group, task}`.
//! Both are UTF-8. Documents are tokenized against a vocabulary built from
//! the corpus itself and truncated (never split) to the token cap.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_MAX_DOC_TOKENS: usize = 512;
pub const DEFAULT_MAX_VOCAB: usize = 8192;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub source_label: String,
    /// Position of the document's batch in the simulated training order.
    pub batch_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryGroup {
    Factual,
    Reasoning,
    ControlFactual,
    ControlReasoning,
}

impl QueryGroup {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "factual" => Some(Self::Factual),
            "reasoning" => Some(Self::Reasoning),
            "control-factual" => Some(Self::ControlFactual),
            "control-reasoning" => Some(Self::ControlReasoning),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Factual => "factual",
            Self::Reasoning => "reasoning",
            Self::ControlFactual => "control-factual",
            Self::ControlReasoning => "control-reasoning",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    pub completion_tokens: Vec<u32>,
    pub group: QueryGroup,
    pub task_tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab_size: usize,
    tokenizer: Tokenizer,
}

/// Raw corpus record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    pub source: String,
    pub batch: u32,
}

/// Raw query record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub prompt: String,
    pub completion: String,
    pub group: String,
    pub task: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusLimits {
    pub max_doc_tokens: usize,
    pub max_vocab: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        Self {
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            max_vocab: DEFAULT_MAX_VOCAB,
        }
    }
}

impl Corpus {
    /// Build a corpus from parsed records: the vocabulary comes from the
    /// record texts, documents keep their order, and overlong documents are
    /// truncated to `limits.max_doc_tokens`.
    pub fn from_records(records: Vec<DocumentRecord>, limits: CorpusLimits) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId { id: r.id.clone() });
            }
        }
        let tokenizer = Tokenizer::build(records.iter().map(|r| r.text.as_str()), limits.max_vocab);
        let documents = records
            .into_iter()
            .map(|r| {
                let mut tokens = tokenizer.encode(&r.text);
                tokens.truncate(limits.max_doc_tokens);
                Document {
                    id: r.id,
                    text: r.text,
                    tokens,
                    source_label: r.source,
                    batch_index: r.batch,
                }
            })
            .collect();
        Ok(Self {
            documents,
            vocab_size: tokenizer.vocab_size(),
            tokenizer,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Tokenize a query record against this corpus's vocabulary.
    pub fn tokenize_query(&self, record: &QueryRecord) -> Result<Query> {
        let group = QueryGroup::parse(&record.group)
            .ok_or_else(|| Error::Invalid(format!("query {}: unknown group {:?}", record.id, record.group)))?;
        let completion_tokens = self.tokenizer.encode(&record.completion);
        if completion_tokens.is_empty() {
            return Err(Error::Invalid(format!("query {}: empty completion", record.id)));
        }
        Ok(Query {
            id: record.id.clone(),
            prompt_tokens: self.tokenizer.encode(&record.prompt),
            completion_tokens,
            group,
            task_tag: record.task.clone(),
        })
    }

    /// Restore the tokenizer index after serde deserialization.
    pub fn reindex(&mut self) {
        self.tokenizer.reindex();
    }

    /// Same vocabulary, different document set.
    pub fn with_documents(&self, documents: Vec<Document>) -> Corpus {
        Corpus {
            documents,
            vocab_size: self.vocab_size,
            tokenizer: self.tokenizer.clone(),
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Load and tokenize a corpus file. An empty file yields an empty corpus and
/// a warning; malformed records and duplicate ids are errors.
pub fn load_corpus(path: impl AsRef<Path>, limits: CorpusLimits) -> Result<Corpus> {
    let path = path.as_ref();
    let records: Vec<DocumentRecord> = read_jsonl(path)?;
    if records.is_empty() {
        log::warn!("corpus file {} contains no documents", path.display());
    }
    Corpus::from_records(records, limits)
}

/// Load a query file and tokenize it against the given corpus vocabulary.
pub fn load_queries(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let records: Vec<QueryRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut queries = Vec::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::DuplicateId { id: r.id.clone() });
        }
        queries.push(corpus.tokenize_query(r)?);
    }
    Ok(queries)
}

/// Draw `min(per_batch, batch size)` documents from every batch group,
/// without replacement, deterministically in `seed`. Survivors keep their
/// original corpus order.
pub fn sample_documents(corpus: &Corpus, per_batch: usize, seed: u64) -> Corpus {
    let mut by_batch: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        by_batch.entry(doc.batch_index).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::new();
    for indices in by_batch.values() {
        let take = per_batch.min(indices.len());
        // Partial Fisher-Yates over a copy of the batch's indices.
        let mut pool = indices.clone();
        for i in 0..take {
            let j = i + rng.random_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        keep.extend_from_slice(&pool[..take]);
    }
    keep.sort_unstable();
    Corpus {
        documents: keep.iter().map(|&i| corpus.documents[i].clone()).collect(),
        vocab_size: corpus.vocab_size,
        tokenizer: corpus.tokenizer.clone(),
    }
}

/// Case-folded substring search. Returns every (document id, keyword) pair
/// where the folded keyword occurs in the folded text, ordered by document
/// id and then by keyword index.
pub fn keyword_search(corpus: &Corpus, keywords: &[String]) -> Vec<(String, String)> {
    let folded: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    let mut doc_order: Vec<&Document> = corpus.documents.iter().collect();
    doc_order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut hits = Vec::new();
    for doc in doc_order {
        let text = doc.text.to_lowercase();
        for (ki, folded_kw) in folded.iter().enumerate() {
            if !folded_kw.is_empty() && text.contains(folded_kw) {
                hits.push((doc.id.clone(), keywords[ki].clone()));
            }
        }
    }
    hits
}
