//! Counterfactual validation: dataset ablation, retraining across seeds and
//! methods, and the leave-one-out oracle.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{welch_t_test, Ranking, Sided, WelchTest};
use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::model::{completion_information, completion_positions, greedy_correct, init_model, Model, ModelConfig};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMethod {
    Influence,
    Tracin,
    Random,
}

impl AblationMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Influence => "influence",
            Self::Tracin => "tracin",
            Self::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "influence" => Some(Self::Influence),
            "tracin" => Some(Self::Tracin),
            "random" => Some(Self::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Remove the most positively influential documents.
    Top,
    /// Remove the most negative instead.
    Bottom,
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Top => "top",
            Self::Bottom => "bottom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Mean completion cross-entropy per token, in nats (log-perplexity).
    NatsPerToken,
    /// Fraction of queries whose completion is greedy-decoded exactly.
    Accuracy,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NatsPerToken => "nats-per-token",
            Self::Accuracy => "accuracy",
        }
    }
}

/// Remove `k` documents according to the method and mode; survivors keep
/// their corpus order. Ranked methods take the given ranking's extreme `k`;
/// random removal is uniform without replacement, seeded.
pub fn ablate_dataset(
    corpus: &Corpus,
    ranking: &Ranking,
    k: usize,
    method: AblationMethod,
    mode: AblationMode,
    seed: u64,
) -> Result<Corpus> {
    if k > corpus.len() {
        return Err(Error::Invalid(format!(
            "cannot remove {k} documents from a corpus of {}",
            corpus.len()
        )));
    }
    let removed: std::collections::HashSet<String> = match method {
        AblationMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<usize> = (0..corpus.len()).collect();
            for i in 0..k {
                let j = i + rng.random_range(0..pool.len() - i);
                pool.swap(i, j);
            }
            pool[..k].iter().map(|&i| corpus.documents[i].id.clone()).collect()
        }
        AblationMethod::Influence | AblationMethod::Tracin => match mode {
            AblationMode::Top => ranking.entries.iter().take(k).map(|(id, _)| id.clone()).collect(),
            AblationMode::Bottom => {
                let n = ranking.entries.len();
                ranking.entries[n.saturating_sub(k)..]
                    .iter()
                    .map(|(id, _)| id.clone())
                    .collect()
            }
        },
    };
    let documents: Vec<_> = corpus
        .documents
        .iter()
        .filter(|d| !removed.contains(&d.id))
        .cloned()
        .collect();
    Ok(corpus.with_documents(documents))
}

/// Evaluate the fixed validation query set against a trained model.
pub fn evaluate(model: &Model, queries: &[Query], metric: Metric) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptySample);
    }
    match metric {
        Metric::NatsPerToken => {
            let mut nats = 0.0;
            let mut tokens = 0usize;
            for q in queries {
                nats += completion_information(model, q)?;
                tokens += completion_positions(q).1.len();
            }
            Ok(nats / tokens.max(1) as f64)
        }
        Metric::Accuracy => {
            let mut correct = 0usize;
            for q in queries {
                if greedy_correct(model, q)? {
                    correct += 1;
                }
            }
            Ok(correct as f64 / queries.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainCell {
    pub method: AblationMethod,
    pub mode: AblationMode,
    pub k: usize,
    pub seed_index: usize,
    pub metric: f64,
    /// Non-finite runs are flagged and excluded from aggregates.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub method: AblationMethod,
    pub mode: AblationMode,
    pub k: usize,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    /// One-sided Welch p-value against random removal, in the direction
    /// where the method should beat it.
    pub p_vs_random: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainReport {
    pub metric: Metric,
    pub cells: Vec<RetrainCell>,
    pub summaries: Vec<RetrainSummary>,
    pub baseline_metric: f64,
}

pub struct ExperimentSpec<'a> {
    pub model_config: &'a ModelConfig,
    pub train_config: &'a TrainConfig,
    pub corpus: &'a Corpus,
    pub queries: &'a [Query],
    /// Ranked methods and the ranking each one removes from, computed on
    /// the unablated trained model.
    pub rankings: &'a BTreeMap<AblationMethod, Ranking>,
    pub k_list: &'a [usize],
    pub n_seeds: usize,
    pub modes: &'a [AblationMode],
    pub metric: Metric,
    pub root_seed: u64,
}

fn shuffle_seed(root: u64, seed_index: usize) -> u64 {
    crate::artifact::derive_seed(root, &format!("retrain-shuffle-{seed_index}"))
}

fn random_removal_seed(root: u64, mode: AblationMode, k: usize, seed_index: usize) -> u64 {
    crate::artifact::derive_seed(root, &format!("random-ablate-{}-{k}-{seed_index}", mode.as_str()))
}

/// Retrain from the same initialization on each ablated corpus, for every
/// method x mode x k x seed cell. Per seed index, initialization and data
/// order are shared across methods, so the removal set is the only varying
/// factor. Reports one-sided Welch tests of each ranked method against
/// random removal.
pub fn counterfactual_experiment(spec: &ExperimentSpec) -> Result<RetrainReport> {
    let mut methods: Vec<AblationMethod> = spec.rankings.keys().copied().collect();
    if !methods.contains(&AblationMethod::Random) {
        methods.push(AblationMethod::Random);
    }
    let empty_ranking = Ranking::from_scores("<none>", &[], &[]);

    // Baseline: train once per seed on the full corpus and average.
    let base_model = init_model(spec.model_config)?;
    let mut baseline = 0.0;
    for seed_index in 0..spec.n_seeds.max(1) {
        let mut m = base_model.clone();
        train(&mut m, spec.corpus, spec.train_config, shuffle_seed(spec.root_seed, seed_index))?;
        baseline += evaluate(&m, spec.queries, spec.metric)?;
    }
    baseline /= spec.n_seeds.max(1) as f64;

    let grid: Vec<(AblationMethod, AblationMode, usize, usize)> = methods
        .iter()
        .flat_map(|&m| {
            spec.modes.iter().flat_map(move |&mode| {
                spec.k_list
                    .iter()
                    .flat_map(move |&k| (0..spec.n_seeds).map(move |s| (m, mode, k, s)))
            })
        })
        .collect();

    let cells: Vec<Result<RetrainCell>> = grid
        .par_iter()
        .map(|&(method, mode, k, seed_index)| {
            let ranking = spec.rankings.get(&method).unwrap_or(&empty_ranking);
            let ablated = ablate_dataset(
                spec.corpus,
                ranking,
                k,
                method,
                mode,
                random_removal_seed(spec.root_seed, mode, k, seed_index),
            )?;
            let mut model = base_model.clone();
            let trained = train(&mut model, &ablated, spec.train_config, shuffle_seed(spec.root_seed, seed_index));
            let (metric, flagged) = match trained {
                Ok(_) => {
                    let v = evaluate(&model, spec.queries, spec.metric)?;
                    (v, !v.is_finite())
                }
                Err(Error::NonFiniteLoss { .. }) => (f64::NAN, true),
                Err(e) => return Err(e),
            };
            if flagged {
                log::warn!(
                    "retrain cell {}/{}/k={k}/seed={seed_index} flagged (non-finite)",
                    method.as_str(),
                    mode.as_str()
                );
            }
            Ok(RetrainCell {
                method,
                mode,
                k,
                seed_index,
                metric,
                flagged,
            })
        })
        .collect();
    let cells: Vec<RetrainCell> = cells.into_iter().collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    for &mode in spec.modes {
        for &k in spec.k_list {
            let values = |m: AblationMethod| -> Vec<f64> {
                cells
                    .iter()
                    .filter(|c| c.method == m && c.mode == mode && c.k == k && !c.flagged)
                    .map(|c| c.metric)
                    .collect()
            };
            let random_vals = values(AblationMethod::Random);
            for &method in &methods {
                let vals = values(method);
                let n = vals.len();
                let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
                let sd = if n > 1 {
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let p_vs_random = if method != AblationMethod::Random && vals.len() >= 2 && random_vals.len() >= 2 {
                    Some(directional_test(&vals, &random_vals, mode, spec.metric)?.p)
                } else {
                    None
                };
                summaries.push(RetrainSummary {
                    method,
                    mode,
                    k,
                    mean,
                    sd,
                    n,
                    p_vs_random,
                });
            }
        }
    }

    Ok(RetrainReport {
        metric: spec.metric,
        cells,
        summaries,
        baseline_metric: baseline,
    })
}

/// One-sided test that the method's effect exceeds random removal in the
/// expected direction: removing top documents should raise nats-per-token
/// (or lower accuracy); removing bottom documents the reverse.
pub fn directional_test(method_vals: &[f64], random_vals: &[f64], mode: AblationMode, metric: Metric) -> Result<WelchTest> {
    let method_should_be_higher = match (mode, metric) {
        (AblationMode::Top, Metric::NatsPerToken) => true,
        (AblationMode::Bottom, Metric::NatsPerToken) => false,
        (AblationMode::Top, Metric::Accuracy) => false,
        (AblationMode::Bottom, Metric::Accuracy) => true,
    };
    if method_should_be_higher {
        welch_t_test(method_vals, random_vals, Sided::OneGreater)
    } else {
        welch_t_test(random_vals, method_vals, Sided::OneGreater)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooDelta {
    pub doc_id: String,
    /// Change in total query completion loss (nats) caused by removing the
    /// document: positive means the document was helping.
    pub delta: f64,
    pub flagged: bool,
}

/// Leave-one-out oracle: retrain once per document from identical
/// initialization and measure the change in total completion loss over the
/// queries. Quadratic in corpus size; capped at 300 documents.
pub fn loo_oracle(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &Corpus,
    queries: &[Query],
    root_seed: u64,
) -> Result<Vec<LooDelta>> {
    const LOO_DOC_LIMIT: usize = 300;
    if corpus.len() > LOO_DOC_LIMIT {
        return Err(Error::Invalid(format!(
            "leave-one-out oracle limited to {LOO_DOC_LIMIT} documents, got {}",
            corpus.len()
        )));
    }
    let base_model = init_model(model_config)?;
    let seed = crate::artifact::derive_seed(root_seed, "loo-shuffle");

    let total_loss = |model: &Model| -> Result<f64> {
        let mut acc = 0.0;
        for q in queries {
            acc += completion_information(model, q)?;
        }
        Ok(acc)
    };

    let mut base = base_model.clone();
    train(&mut base, corpus, train_config, seed)?;
    let base_loss = total_loss(&base)?;

    let deltas: Vec<Result<LooDelta>> = (0..corpus.len())
        .into_par_iter()
        .map(|skip| {
            let documents: Vec<_> = corpus
                .documents
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, d)| d.clone())
                .collect();
            let reduced = corpus.with_documents(documents);
            let mut model = base_model.clone();
            let outcome = train(&mut model, &reduced, train_config, seed);
            let (delta, flagged) = match outcome {
                Ok(_) => {
                    let l = total_loss(&model)?;
                    (l - base_loss, !l.is_finite())
                }
                Err(Error::NonFiniteLoss { .. }) => (f64::NAN, true),
                Err(e) => return Err(e),
            };
            Ok(LooDelta {
                doc_id: corpus.documents[skip].id.clone(),
                delta,
                flagged,
            })
        })
        .collect();
    deltas.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusLimits, DocumentRecord};

    fn corpus(n: usize) -> Corpus {
        let records = (0..n)
            .map(|i| DocumentRecord {
                id: format!("d{i:03}"),
                text: format!("w{} w{} w{}", i % 5, (i + 1) % 5, (i + 2) % 5),
                source: "synth".into(),
                batch: (i / 10) as u32,
            })
            .collect();
        Corpus::from_records(records, CorpusLimits::default()).unwrap()
    }

    fn ranking_for(corpus: &Corpus) -> Ranking {
        let ids: Vec<String> = corpus.documents.iter().map(|d| d.id.clone()).collect();
        let scores: Vec<f64> = (0..ids.len()).map(|i| ids.len() as f64 - i as f64 - 10.0).collect();
        Ranking::from_scores("q", &ids, &scores)
    }

    #[test]
    fn ablate_zero_is_identity() {
        let c = corpus(20);
        let r = ranking_for(&c);
        let out = ablate_dataset(&c, &r, 0, AblationMethod::Influence, AblationMode::Top, 1).unwrap();
        assert_eq!(out.len(), 20);
        let ids: Vec<&String> = out.documents.iter().map(|d| &d.id).collect();
        let orig: Vec<&String> = c.documents.iter().map(|d| &d.id).collect();
        assert_eq!(ids, orig);
    }

    #[test]
    fn ablate_top_removes_positive_partition() {
        let c = corpus(20);
        let r = ranking_for(&c);
        let k = r.positive_len;
        let out = ablate_dataset(&c, &r, k, AblationMethod::Influence, AblationMode::Top, 1).unwrap();
        assert_eq!(out.len(), 20 - k);
        let removed: Vec<&str> = r.entries[..k].iter().map(|(id, _)| id.as_str()).collect();
        for d in &out.documents {
            assert!(!removed.contains(&d.id.as_str()));
        }
    }

    #[test]
    fn ablate_bottom_removes_most_negative() {
        let c = corpus(20);
        let r = ranking_for(&c);
        let out = ablate_dataset(&c, &r, 3, AblationMethod::Influence, AblationMode::Bottom, 1).unwrap();
        let n = r.entries.len();
        let removed: Vec<&str> = r.entries[n - 3..].iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(out.len(), 17);
        for d in &out.documents {
            assert!(!removed.contains(&d.id.as_str()));
        }
    }

    #[test]
    fn random_ablation_deterministic_in_seed() {
        let c = corpus(30);
        let r = ranking_for(&c);
        let a = ablate_dataset(&c, &r, 7, AblationMethod::Random, AblationMode::Top, 5).unwrap();
        let b = ablate_dataset(&c, &r, 7, AblationMethod::Random, AblationMode::Top, 5).unwrap();
        let ids_a: Vec<&String> = a.documents.iter().map(|d| &d.id).collect();
        let ids_b: Vec<&String> = b.documents.iter().map(|d| &d.id).collect();
        assert_eq!(ids_a, ids_b);
        assert_eq!(a.len(), 23);
    }

    #[test]
    fn ablation_preserves_survivor_order() {
        let c = corpus(25);
        let r = ranking_for(&c);
        let out = ablate_dataset(&c, &r, 5, AblationMethod::Random, AblationMode::Top, 2).unwrap();
        let mut last_seen = None;
        for d in &out.documents {
            let idx = c.documents.iter().position(|o| o.id == d.id).unwrap();
            if let Some(prev) = last_seen {
                assert!(idx > prev);
            }
            last_seen = Some(idx);
        }
    }

    #[test]
    fn oversized_k_rejected() {
        let c = corpus(5);
        let r = ranking_for(&c);
        assert!(ablate_dataset(&c, &r, 6, AblationMethod::Random, AblationMode::Top, 1).is_err());
    }
}
