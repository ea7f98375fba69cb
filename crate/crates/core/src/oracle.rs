//! Dense Gauss-Newton oracle for validating the EK-FAC approximation on
//! models small enough to afford it.

use nalgebra::{DMatrix, DVector};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward, propagate_deltas, softmax_row, GradientBundle, Model};

pub const ORACLE_PARAM_LIMIT: usize = 2000;

/// Curvature of the softmax cross-entropy in logit space: diag(p) - p p^T.
pub fn softmax_curvature(probs: &[f64]) -> DMatrix<f64> {
    let v = probs.len();
    DMatrix::from_fn(v, v, |r, c| {
        let d = if r == c { probs[r] } else { 0.0 };
        d - probs[r] * probs[c]
    })
}

/// Exact Gauss-Newton Hessian over the dense parameters, assembled densely:
/// the per-position logit Jacobians are contracted through the softmax
/// curvature, summed over a document's scored positions, and averaged over
/// documents. Parameter order matches `GradientBundle::flatten`.
pub fn exact_gn_oracle(model: &Model, sample: &Corpus) -> Result<DMatrix<f64>> {
    let p_count = model.param_count();
    if p_count > ORACLE_PARAM_LIMIT {
        return Err(Error::ParamBudget {
            count: p_count,
            limit: ORACLE_PARAM_LIMIT,
        });
    }
    let vocab = model.config.vocab_size;
    let mut h = DMatrix::zeros(p_count, p_count);
    let mut docs = 0u64;

    for doc in &sample.documents {
        let n = doc.tokens.len();
        if n < 2 {
            continue;
        }
        let trace = forward(model, &doc.tokens)?;
        for pos in 0..n - 1 {
            // Rows of j: gradient of each logit at this position.
            let mut j = DMatrix::zeros(vocab, p_count);
            for k in 0..vocab {
                let mut delta = DMatrix::zeros(n, vocab);
                delta[(pos, k)] = 1.0;
                let deltas = propagate_deltas(model, &trace, delta);
                let mut offset = 0;
                for (li, d) in deltas.iter().enumerate() {
                    let input = &trace.inputs[li];
                    let d_in = input.ncols();
                    let d_out = d.ncols();
                    // Rank-one gradient of this position only.
                    for r in 0..d_out {
                        let dv = d[(pos, r)];
                        if dv != 0.0 {
                            for c in 0..d_in {
                                j[(k, offset + r * (d_in + 1) + c)] = dv * input[(pos, c)];
                            }
                            j[(k, offset + r * (d_in + 1) + d_in)] = dv;
                        }
                    }
                    offset += d_out * (d_in + 1);
                }
            }
            // diag(p) - p p^T factors as D^{1/2}(I - q q^T)D^{1/2} with
            // q = sqrt(p), so the contribution K^T K is symmetric PSD by
            // construction.
            let probs = softmax_row(trace.logits(), pos);
            let mut k_mat = j;
            for r in 0..vocab {
                let s = probs[r].sqrt();
                for c in 0..p_count {
                    k_mat[(r, c)] *= s;
                }
            }
            let q = DVector::from_iterator(vocab, probs.iter().map(|&p| p.sqrt()));
            let qk = q.transpose() * &k_mat;
            k_mat -= q * qk;
            h += k_mat.transpose() * k_mat;
        }
        docs += 1;
    }
    if docs == 0 {
        return Err(Error::EmptySample);
    }
    h /= docs as f64;
    Ok(h)
}

/// Solve (h + damping I) x = rhs by Cholesky.
pub fn solve_damped(h: &DMatrix<f64>, damping: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let mut m = h.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += damping;
    }
    let chol = m
        .cholesky()
        .ok_or(Error::SingularCurvature { count: 0 })?;
    Ok(chol.solve(rhs))
}

/// Damped-inverse product expressed on bundles, for side-by-side use with
/// the EK-FAC path.
pub fn oracle_ihvp(model: &Model, h: &DMatrix<f64>, damping: f64, gradient: &GradientBundle) -> Result<GradientBundle> {
    let flat = gradient.flatten();
    let solved = solve_damped(h, damping, &flat)?;
    GradientBundle::from_flat(model, &solved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusLimits, DocumentRecord};
    use crate::model::{init_model, per_example_gradient, sequence_loss, training_positions, Activation, ModelConfig};
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus_of(texts: &[&str]) -> Corpus {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| DocumentRecord {
                id: format!("d{i}"),
                text: t.to_string(),
                source: "synth".into(),
                batch: 0,
            })
            .collect();
        Corpus::from_records(records, CorpusLimits::default()).unwrap()
    }

    #[test]
    fn softmax_curvature_uniform_two_class() {
        let m = softmax_curvature(&[0.5, 0.5]);
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_relative_eq!(m, expected, epsilon = 1e-12);
    }

    #[test]
    fn oracle_is_symmetric_psd() {
        let corpus = corpus_of(&["a b c d", "d c a b", "b a d c"]);
        let model = init_model(&ModelConfig {
            vocab_size: corpus.vocab_size,
            embed_dim: 3,
            layer_widths: vec![4, corpus.vocab_size],
            activation: Activation::Tanh,
            seed: 23,
        })
        .unwrap();
        let h = exact_gn_oracle(&model, &corpus).unwrap();
        let mut asym: f64 = 0.0;
        for r in 0..h.nrows() {
            for c in 0..r {
                asym = asym.max((h[(r, c)] - h[(c, r)]).abs());
            }
        }
        assert!(asym < 1e-8, "asymmetry {asym}");
        let eig = SymmetricEigen::new(h);
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-8));
    }

    #[test]
    fn param_budget_enforced() {
        let corpus = corpus_of(&["a b"]);
        let model = init_model(&ModelConfig {
            vocab_size: corpus.vocab_size,
            embed_dim: 64,
            layer_widths: vec![64, corpus.vocab_size],
            activation: Activation::Relu,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(
            exact_gn_oracle(&model, &corpus),
            Err(Error::ParamBudget { .. })
        ));
    }

    /// For a single dense layer the logits are linear in the parameters, so
    /// the Gauss-Newton matrix equals the true loss Hessian at the current
    /// point regardless of targets. Check H v against central differences of
    /// the loss gradient with model-sampled targets.
    #[test]
    fn oracle_hvp_matches_finite_difference_gradient() {
        let corpus = corpus_of(&["a b c a c", "c b a b"]);
        let model = init_model(&ModelConfig {
            vocab_size: corpus.vocab_size,
            embed_dim: 3,
            layer_widths: vec![corpus.vocab_size],
            activation: Activation::Tanh,
            seed: 9,
        })
        .unwrap();
        let h = exact_gn_oracle(&model, &corpus).unwrap();

        // Model-sampled targets, fixed once: rewrite each document's targets.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sampled_docs: Vec<Vec<u32>> = Vec::new();
        for doc in &corpus.documents {
            let trace = forward(&model, &doc.tokens).unwrap();
            let mut toks = doc.tokens.clone();
            for p in 0..toks.len() - 1 {
                let probs = softmax_row(trace.logits(), p);
                let u: f64 = rand::Rng::random(&mut rng);
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (k, &pr) in probs.iter().enumerate() {
                    acc += pr;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                toks[p + 1] = pick as u32;
            }
            sampled_docs.push(toks);
        }

        let grad_at = |m: &Model| -> DVector<f64> {
            let mut acc = DVector::zeros(m.param_count());
            for toks in &sampled_docs {
                let scored = training_positions(toks);
                let g = per_example_gradient(m, toks, &scored).unwrap();
                acc += g.flatten();
            }
            acc / sampled_docs.len() as f64
        };

        // Direction vector with entries in [-1, 1].
        let p_count = model.param_count();
        let v = DVector::from_fn(p_count, |i, _| ((i * 37 % 17) as f64 / 8.5) - 1.0);
        let hv = &h * &v;

        let step = 1e-5;
        let mut plus = model.clone();
        let mut minus = model.clone();
        let flat_v = GradientBundle::from_flat(&model, &v).unwrap();
        for (li, lv) in flat_v.layers.iter().enumerate() {
            let cols = lv.ncols();
            for r in 0..lv.nrows() {
                for c in 0..cols - 1 {
                    plus.layers[li].weight[(r, c)] += step * lv[(r, c)];
                    minus.layers[li].weight[(r, c)] -= step * lv[(r, c)];
                }
                plus.layers[li].bias[r] += step * lv[(r, cols - 1)];
                minus.layers[li].bias[r] -= step * lv[(r, cols - 1)];
            }
        }
        let fd = (grad_at(&plus) - grad_at(&minus)) / (2.0 * step);
        let denom = hv.norm().max(1e-9);
        assert!(
            (&hv - &fd).norm() / denom < 1e-3,
            "relative error {}",
            (&hv - &fd).norm() / denom
        );
        // Self-consistency of the loss path used above.
        let l = sequence_loss(&model, &sampled_docs[0], &training_positions(&sampled_docs[0])).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn solve_damped_inverts() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let rhs = DVector::from_vec(vec![1.0, -1.0]);
        let x = solve_damped(&h, 0.1, &rhs).unwrap();
        let mut m = h.clone();
        m[(0, 0)] += 0.1;
        m[(1, 1)] += 0.1;
        assert_relative_eq!(m * x, rhs, epsilon = 1e-12);
    }
}
