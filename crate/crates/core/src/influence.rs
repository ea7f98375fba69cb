//! Influence scoring: every document against every query in one pass over
//! the corpus, plus per-nat normalization, the TracIn baseline, and
//! gradient-norm re-ranking.
//!
//! Scores are reported as the effect on the completion log-probability, so
//! a positive score means upweighting the document helps the completion and
//! self-influence is nonnegative.

use rayon::prelude::*;

use crate::analytics::Ranking;
use crate::corpus::{Corpus, Query};
use crate::curvature::{ihvp, EkfacState};
use crate::error::{Error, Result};
use crate::lowrank::{compress_query_gradient, compress_query_gradient_exact, LowRankGradient};
use crate::model::{completion_information, per_example_gradient, query_gradient, training_positions, GradientBundle, Model};

/// Threshold below which a query's information content cannot normalize
/// its row.
pub const MIN_INFO_NATS: f64 = 1e-6;

/// A query gradient that has been preconditioned (inverse-HVP applied) and
/// compressed, ready for the scoring pass.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub id: String,
    pub grad: LowRankGradient,
    pub info_nats: f64,
}

/// A raw (unpreconditioned, uncompressed) query gradient, as used by the
/// TracIn baseline.
#[derive(Debug, Clone)]
pub struct RawQuery {
    pub id: String,
    pub grad: GradientBundle,
    pub info_nats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub query_ids: Vec<String>,
    pub doc_ids: Vec<String>,
    /// Row-major queries x documents.
    pub scores: Vec<f64>,
    pub info_nats: Vec<f64>,
    /// Per-document gradient norms recorded during the pass.
    pub doc_grad_norms: Vec<f64>,
    pub normalized: bool,
    /// Rows left unnormalized because info_nats fell below threshold.
    pub unnormalized_rows: Vec<u32>,
    /// (query, document) entries that came out non-finite.
    pub non_finite: Vec<(u32, u32)>,
    /// Number of document-gradient computations performed.
    pub doc_gradient_evals: u64,
}

impl InfluenceMatrix {
    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.n_docs();
        &self.scores[q * n..(q + 1) * n]
    }

    pub fn get(&self, q: usize, d: usize) -> f64 {
        self.scores[q * self.n_docs() + d]
    }

    pub fn ranking(&self, q: usize) -> Ranking {
        Ranking::from_scores(self.query_ids[q].clone(), &self.doc_ids, self.row(q))
    }
}

fn query_info(model: &Model, query: &Query) -> Result<(GradientBundle, f64)> {
    let grad = query_gradient(model, query)?;
    let info = completion_information(model, query)?;
    Ok((grad, info))
}

/// Precondition a query gradient through the damped inverse curvature and
/// compress it at the given rank (randomized unless `exact_svd`).
pub fn prepare_query(
    model: &Model,
    state: &EkfacState,
    query: &Query,
    rank: usize,
    seed: u64,
    exact_svd: bool,
) -> Result<PreparedQuery> {
    let (grad, info_nats) = query_info(model, query)?;
    let preconditioned = ihvp(state, &grad)?;
    let grad = if exact_svd {
        compress_query_gradient_exact(&preconditioned, rank)?
    } else {
        compress_query_gradient(&preconditioned, rank, seed)?
    };
    Ok(PreparedQuery {
        id: query.id.clone(),
        grad,
        info_nats,
    })
}

/// Raw query gradient for the TracIn baseline.
pub fn prepare_raw_query(model: &Model, query: &Query) -> Result<RawQuery> {
    let (grad, info_nats) = query_info(model, query)?;
    Ok(RawQuery {
        id: query.id.clone(),
        grad,
        info_nats,
    })
}

/// Plain inner product of query and document gradients over all layers
/// (final-checkpoint TracIn; the learning-rate constant is omitted).
pub fn tracin_score(query_gradient: &GradientBundle, document_gradient: &GradientBundle) -> Result<f64> {
    query_gradient.dot(document_gradient)
}

struct DocResult {
    norm: f64,
    influence: Vec<f64>,
    tracin: Vec<f64>,
}

/// One pass over the corpus scoring both the preconditioned queries and,
/// optionally, the TracIn baseline against the same document gradients.
/// Documents are scored independently and written to pre-assigned slots, so
/// the result does not depend on scheduling.
pub fn score_pass(
    model: &Model,
    corpus: &Corpus,
    queries: &[PreparedQuery],
    tracin_queries: Option<&[RawQuery]>,
) -> Result<(InfluenceMatrix, Option<InfluenceMatrix>)> {
    let n_docs = corpus.len();
    let results: Vec<Result<DocResult>> = corpus
        .documents
        .par_iter()
        .map(|doc| {
            let scored = training_positions(&doc.tokens);
            let (norm, influence, tracin) = if scored.is_empty() {
                (
                    0.0,
                    vec![0.0; queries.len()],
                    vec![0.0; tracin_queries.map_or(0, |t| t.len())],
                )
            } else {
                let g = per_example_gradient(model, &doc.tokens, &scored)?;
                let influence = queries
                    .iter()
                    .map(|q| q.grad.dot(&g))
                    .collect::<Result<Vec<f64>>>()?;
                let tracin = tracin_queries
                    .map(|ts| ts.iter().map(|q| tracin_score(&q.grad, &g)).collect::<Result<Vec<f64>>>())
                    .transpose()?
                    .unwrap_or_default();
                (g.norm(), influence, tracin)
            };
            Ok(DocResult {
                norm,
                influence,
                tracin,
            })
        })
        .collect();

    let mut doc_grad_norms = vec![0.0; n_docs];
    let mut scores = vec![0.0; queries.len() * n_docs];
    let mut tracin_scores = vec![0.0; tracin_queries.map_or(0, |t| t.len()) * n_docs];
    for (di, res) in results.into_iter().enumerate() {
        let res = res?;
        doc_grad_norms[di] = res.norm;
        for (qi, v) in res.influence.into_iter().enumerate() {
            scores[qi * n_docs + di] = v;
        }
        for (qi, v) in res.tracin.into_iter().enumerate() {
            tracin_scores[qi * n_docs + di] = v;
        }
    }

    let doc_ids: Vec<String> = corpus.documents.iter().map(|d| d.id.clone()).collect();
    let flag_non_finite = |scores: &[f64], n_docs: usize| -> Vec<(u32, u32)> {
        scores
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| ((i / n_docs) as u32, (i % n_docs) as u32))
            .collect()
    };
    for (q, d) in flag_non_finite(&scores, n_docs) {
        log::warn!("non-finite influence score at query {q}, document {d}");
    }

    let influence = InfluenceMatrix {
        query_ids: queries.iter().map(|q| q.id.clone()).collect(),
        doc_ids: doc_ids.clone(),
        non_finite: flag_non_finite(&scores, n_docs),
        scores,
        info_nats: queries.iter().map(|q| q.info_nats).collect(),
        doc_grad_norms: doc_grad_norms.clone(),
        normalized: false,
        unnormalized_rows: Vec::new(),
        doc_gradient_evals: n_docs as u64,
    };
    let tracin = tracin_queries.map(|ts| InfluenceMatrix {
        query_ids: ts.iter().map(|q| q.id.clone()).collect(),
        doc_ids,
        non_finite: flag_non_finite(&tracin_scores, n_docs),
        scores: tracin_scores,
        info_nats: ts.iter().map(|q| q.info_nats).collect(),
        doc_grad_norms,
        normalized: false,
        unnormalized_rows: Vec::new(),
        doc_gradient_evals: n_docs as u64,
    });
    Ok((influence, tracin))
}

/// Score every document against the prepared queries (inverse-HVP already
/// applied) in a single pass.
pub fn score_documents(model: &Model, corpus: &Corpus, queries: &[PreparedQuery]) -> Result<InfluenceMatrix> {
    score_pass(model, corpus, queries, None).map(|(m, _)| m)
}

/// Divide each row by its query's information content. Rows whose
/// info_nats fall below `MIN_INFO_NATS` are left unnormalized and flagged.
pub fn normalize_per_nat(mut matrix: InfluenceMatrix) -> InfluenceMatrix {
    if matrix.normalized {
        return matrix;
    }
    let n_docs = matrix.n_docs();
    let mut unnormalized = Vec::new();
    for q in 0..matrix.n_queries() {
        let info = matrix.info_nats[q];
        if info < MIN_INFO_NATS {
            log::warn!("query {} info_nats {info} below threshold; row left unnormalized", matrix.query_ids[q]);
            unnormalized.push(q as u32);
            continue;
        }
        for d in 0..n_docs {
            matrix.scores[q * n_docs + d] /= info;
        }
    }
    matrix.normalized = true;
    matrix.unnormalized_rows = unnormalized;
    matrix
}

/// Divide a row's scores by the document gradient norms and re-rank.
/// Zero-norm documents are excluded and returned separately.
pub fn rerank_by_gradnorm(matrix: &InfluenceMatrix, q: usize) -> (Ranking, Vec<String>) {
    let row = matrix.row(q);
    let mut ids = Vec::with_capacity(row.len());
    let mut scores = Vec::with_capacity(row.len());
    let mut excluded = Vec::new();
    for (d, (&score, norm)) in row.iter().zip(&matrix.doc_grad_norms).enumerate() {
        if *norm == 0.0 {
            excluded.push(matrix.doc_ids[d].clone());
        } else {
            ids.push(matrix.doc_ids[d].clone());
            scores.push(score / norm);
        }
    }
    if !excluded.is_empty() {
        log::warn!("query {}: {} zero-norm documents excluded from re-ranking", matrix.query_ids[q], excluded.len());
    }
    (Ranking::from_scores(matrix.query_ids[q].clone(), &ids, &scores), excluded)
}

/// Mean per-query score per document, the aggregate used to pick documents
/// for ablation when several queries drive one ranking.
pub fn mean_score_ranking(matrix: &InfluenceMatrix) -> Ranking {
    let n_docs = matrix.n_docs();
    let n_q = matrix.n_queries().max(1);
    let mut mean = vec![0.0; n_docs];
    for q in 0..matrix.n_queries() {
        for d in 0..n_docs {
            mean[d] += matrix.get(q, d);
        }
    }
    for v in &mut mean {
        *v /= n_q as f64;
    }
    Ranking::from_scores("<mean>", &matrix.doc_ids, &mean)
}
