//! Ranking analytics: correlation matrices, influence coverage curves,
//! power-law fits, source-dataset multipliers, and Welch's t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Documents ordered by descending score; ties break by ascending id.
/// Non-finite scores are excluded and counted.
#[derive(Debug, Clone)]
pub struct Ranking {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    /// entries[..positive_len] have score > 0.
    pub positive_len: usize,
    /// entries[negative_start..] have score < 0.
    pub negative_start: usize,
    pub excluded_non_finite: usize,
}

impl Ranking {
    pub fn from_scores(query_id: impl Into<String>, doc_ids: &[String], scores: &[f64]) -> Self {
        let mut entries: Vec<(String, f64)> = doc_ids
            .iter()
            .zip(scores)
            .filter(|(_, s)| s.is_finite())
            .map(|(id, &s)| (id.clone(), s))
            .collect();
        let excluded_non_finite = scores.len() - entries.len();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let positive_len = entries.iter().take_while(|(_, s)| *s > 0.0).count();
        let negative_start = entries.len() - entries.iter().rev().take_while(|(_, s)| *s < 0.0).count();
        Self {
            query_id: query_id.into(),
            entries,
            positive_len,
            negative_start,
            excluded_non_finite,
        }
    }

    pub fn positive(&self) -> &[(String, f64)] {
        &self.entries[..self.positive_len]
    }

    pub fn negative(&self) -> &[(String, f64)] {
        &self.entries[self.negative_start..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub query_ids: Vec<String>,
    /// Row-major n x n Pearson R; NaN where flagged.
    pub r: Vec<f64>,
    /// Two-sided p-values; NaN where flagged.
    pub p: Vec<f64>,
    /// (i, j) pairs whose correlation is undefined (zero variance).
    pub flagged: Vec<(usize, usize)>,
    pub n_docs: usize,
}

impl CorrelationMatrix {
    pub fn r_at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.query_ids.len() + j]
    }

    pub fn p_at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.query_ids.len() + j]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (ddof = 1).
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Pearson correlation; None when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Two-sided p-value of a Pearson correlation under the t distribution with
/// n - 2 degrees of freedom.
fn pearson_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r.abs() * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t))
}

/// Pearson R over document-score vectors for every query pair, with
/// two-sided p-values. Zero-variance rows flag their entries.
pub fn correlation_matrix(query_ids: &[String], rows: &[&[f64]]) -> Result<CorrelationMatrix> {
    let n_q = rows.len();
    if n_q != query_ids.len() {
        return Err(Error::Shape("query id count does not match row count".into()));
    }
    let n_docs = rows.first().map(|r| r.len()).unwrap_or(0);
    if n_docs < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n_docs });
    }
    if rows.iter().any(|r| r.len() != n_docs) {
        return Err(Error::Shape("rows have differing lengths".into()));
    }
    let mut r = vec![f64::NAN; n_q * n_q];
    let mut p = vec![f64::NAN; n_q * n_q];
    let mut flagged = Vec::new();
    for i in 0..n_q {
        for j in i..n_q {
            if i == j {
                // Unit diagonal even for constant rows.
                r[i * n_q + j] = 1.0;
                p[i * n_q + j] = 0.0;
                continue;
            }
            match pearson(rows[i], rows[j]) {
                Some(rv) => {
                    let pv = pearson_p_value(rv, n_docs);
                    r[i * n_q + j] = rv;
                    r[j * n_q + i] = rv;
                    p[i * n_q + j] = pv;
                    p[j * n_q + i] = pv;
                }
                None => {
                    flagged.push((i, j));
                    flagged.push((j, i));
                }
            }
        }
    }
    Ok(CorrelationMatrix {
        query_ids: query_ids.to_vec(),
        r,
        p,
        flagged,
        n_docs,
    })
}

#[derive(Debug, Clone)]
pub struct CoverageCurve {
    pub query_id: String,
    pub sign: Sign,
    /// (percentile, cumulative |score| over the top ceil(p% of partition)).
    pub points: Vec<(f64, f64)>,
    pub partition_size: usize,
}

/// Cumulative absolute influence over the top-k percentile of the chosen
/// sign partition. An empty partition yields a zero curve.
pub fn coverage_curve(ranking: &Ranking, percentiles: &[f64], sign: Sign) -> CoverageCurve {
    let magnitudes: Vec<f64> = match sign {
        Sign::Positive => ranking.positive().iter().map(|(_, s)| *s).collect(),
        // Most negative first, flipped to positive magnitude.
        Sign::Negative => {
            let mut m: Vec<f64> = ranking.negative().iter().map(|(_, s)| s.abs()).collect();
            m.reverse();
            m
        }
    };
    let n = magnitudes.len();
    let prefix: Vec<f64> = magnitudes
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let points = percentiles
        .iter()
        .map(|&pct| {
            let k = ((pct / 100.0) * n as f64).ceil() as usize;
            let k = k.min(n);
            let value = if k == 0 { 0.0 } else { prefix[k - 1] };
            (pct, value)
        })
        .collect();
    CoverageCurve {
        query_id: ranking.query_id.clone(),
        sign,
        points,
        partition_size: n,
    }
}

#[derive(Debug, Clone)]
pub struct PowerLawFit {
    pub query_id: String,
    pub slope: f64,
    /// Intercept of the natural-log fit.
    pub intercept: f64,
    /// None when the fit is degenerate (constant scores).
    pub r_squared: Option<f64>,
    pub window: usize,
}

pub const DEFAULT_POWER_LAW_TOP_N: usize = 500;

/// Least-squares fit of ln(score) against ln(rank) over the top positive
/// scores. The window shrinks to the positive partition when it is smaller
/// than `top_n` and is recorded in the fit.
pub fn fit_power_law(ranking: &Ranking, top_n: usize) -> Result<PowerLawFit> {
    let positive = ranking.positive();
    let window = top_n.min(positive.len());
    if window < 2 {
        return Err(Error::TooFewSamples { need: 2, got: window });
    }
    let xs: Vec<f64> = (1..=window).map(|i| (i as f64).ln()).collect();
    let ys: Vec<f64> = positive[..window].iter().map(|(_, s)| s.ln()).collect();
    let mx = mean(&xs);
    let my = mean(&ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { Some((sxy * sxy) / (sxx * syy)) } else { None };
    Ok(PowerLawFit {
        query_id: ranking.query_id.clone(),
        slope,
        intercept,
        r_squared,
        window,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankSide {
    Top,
    Bottom,
}

#[derive(Debug, Clone)]
pub struct SourceMultiplier {
    pub k: usize,
    pub source: String,
    pub side: RankSide,
    /// None when the source never occurs in the corpus (flagged).
    pub multiplier: Option<f64>,
    pub share_in_window: f64,
    pub share_in_corpus: f64,
}

/// Ratio of each source's share among the top-k (and bottom-k) documents to
/// its share in the full corpus.
pub fn source_multipliers(ranking: &Ranking, corpus: &Corpus, k_list: &[usize]) -> Vec<SourceMultiplier> {
    use std::collections::BTreeMap;
    let mut corpus_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &corpus.documents {
        *corpus_counts.entry(d.source_label.as_str()).or_default() += 1;
    }
    let corpus_total = corpus.len().max(1);
    let source_of: std::collections::HashMap<&str, &str> = corpus
        .documents
        .iter()
        .map(|d| (d.id.as_str(), d.source_label.as_str()))
        .collect();

    let mut out = Vec::new();
    for &k in k_list {
        let k_eff = k.min(ranking.entries.len());
        for side in [RankSide::Top, RankSide::Bottom] {
            let window: Vec<&str> = match side {
                RankSide::Top => ranking.entries[..k_eff]
                    .iter()
                    .map(|(id, _)| source_of.get(id.as_str()).copied().unwrap_or("<unknown>"))
                    .collect(),
                RankSide::Bottom => ranking.entries[ranking.entries.len() - k_eff..]
                    .iter()
                    .map(|(id, _)| source_of.get(id.as_str()).copied().unwrap_or("<unknown>"))
                    .collect(),
            };
            let mut window_counts: BTreeMap<&str, usize> = BTreeMap::new();
            for s in &window {
                *window_counts.entry(s).or_default() += 1;
            }
            let mut sources: Vec<&str> = corpus_counts.keys().copied().collect();
            for s in window_counts.keys() {
                if !corpus_counts.contains_key(s) {
                    sources.push(s);
                }
            }
            for source in sources {
                let share_in_window = *window_counts.get(source).unwrap_or(&0) as f64 / k_eff.max(1) as f64;
                let corpus_count = *corpus_counts.get(source).unwrap_or(&0);
                let share_in_corpus = corpus_count as f64 / corpus_total as f64;
                let multiplier = if corpus_count > 0 {
                    Some(share_in_window / share_in_corpus)
                } else {
                    None
                };
                out.push(SourceMultiplier {
                    k,
                    source: source.to_string(),
                    side,
                    multiplier,
                    share_in_window,
                    share_in_corpus,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    /// H1: mean(a) > mean(b).
    OneGreater,
    Two,
}

#[derive(Debug, Clone)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
/// freedom. With zero variance in both groups and equal means, p = 1.
pub fn welch_t_test(group_a: &[f64], group_b: &[f64], sided: Sided) -> Result<WelchTest> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: group_a.len().min(group_b.len()),
        });
    }
    let na = group_a.len() as f64;
    let nb = group_b.len() as f64;
    let ma = mean(group_a);
    let mb = mean(group_b);
    let va = variance(group_a);
    let vb = variance(group_b);
    let se2 = va / na + vb / nb;

    if se2 == 0.0 {
        // Degenerate: no variance anywhere.
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
            let p = match sided {
                Sided::Two => 0.0,
                Sided::OneGreater => {
                    if ma > mb {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
            (t, p)
        };
        return Ok(WelchTest { t, df: f64::NAN, p });
    }

    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    let p = match sided {
        Sided::Two => 2.0 * (1.0 - dist.cdf(t.abs())),
        Sided::OneGreater => 1.0 - dist.cdf(t),
    };
    Ok(WelchTest { t, df, p })
}
