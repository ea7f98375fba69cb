//! EK-FAC curvature: Kronecker factor estimation, block-diagonal
//! eigendecomposition, eigenvalue rescaling, and damped inverse-HVPs.
//!
//! Per layer, the Gauss-Newton Hessian is approximated by the Kronecker
//! product of two covariances: the layer-input second moment A (with a
//! constant-1 coordinate appended so biases share the factor pair) and the
//! pre-activation pseudo-gradient second moment S. Pseudo-gradients draw
//! their targets from the model's own output distribution. After the bases
//! are fixed, per-coordinate eigenvalues are re-estimated as second moments
//! of whole-document pseudo-gradient bundles projected into the eigenbasis,
//! so the inverse matches document-level curvature scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{backward_from_deltas, forward, propagate_deltas, softmax_row, GradientBundle, Model};

pub const DEFAULT_DAMPING: f64 = 0.1;
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LayerFactors {
    /// (d_in + 1) x (d_in + 1) input second moment, bias coordinate last.
    pub a: DMatrix<f64>,
    /// d_out x d_out pre-activation pseudo-gradient second moment.
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct KroneckerFactors {
    pub layers: Vec<LayerFactors>,
    /// Number of positions averaged into the factors.
    pub sample_positions: u64,
}

#[derive(Debug, Clone)]
pub struct LayerBasis {
    /// Block-orthonormal eigenbasis of the A factor.
    pub q_a: DMatrix<f64>,
    /// Block-orthonormal eigenbasis of the S factor.
    pub q_s: DMatrix<f64>,
    pub a_eigvals: DVector<f64>,
    pub s_eigvals: DVector<f64>,
    /// Rescaled eigenvalues, one per parameter coordinate in the eigenbasis
    /// (d_out x (d_in + 1)). Zero until `rescale_eigenvalues` runs.
    pub lambda: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EkfacState {
    pub layers: Vec<LayerBasis>,
    pub damping: f64,
    pub block_count: usize,
    /// Number of gradient bundles averaged into the rescaled eigenvalues.
    pub rescale_samples: u64,
}

/// Draw one next-token target per position from the model's output
/// distribution and return the corresponding cross-entropy deltas
/// (softmax minus sampled one-hot) over the first `len - 1` positions.
fn sampled_deltas(logits: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = logits.nrows();
    let vocab = logits.ncols();
    let mut delta = DMatrix::zeros(n, vocab);
    for p in 0..n.saturating_sub(1) {
        let probs = softmax_row(logits, p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut target = vocab - 1;
        for (k, &pr) in probs.iter().enumerate() {
            acc += pr;
            if u < acc {
                target = k;
                break;
            }
        }
        for (k, &pr) in probs.iter().enumerate() {
            delta[(p, k)] = pr;
        }
        delta[(p, target)] -= 1.0;
    }
    delta
}

/// Whole-document pseudo-gradient bundle with sampled targets, or None for
/// documents too short to score.
pub fn pseudo_gradient_bundle(model: &Model, tokens: &[u32], rng: &mut ChaCha8Rng) -> Result<Option<GradientBundle>> {
    if tokens.len() < 2 {
        return Ok(None);
    }
    let trace = forward(model, tokens)?;
    let delta = sampled_deltas(trace.logits(), rng);
    Ok(Some(backward_from_deltas(model, &trace, delta)))
}

/// Estimate the Kronecker factors as running means over all scored
/// positions of the sample, deterministic in `seed`.
pub fn estimate_factors(model: &Model, sample: &Corpus, seed: u64) -> Result<KroneckerFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<LayerFactors> = model
        .layers
        .iter()
        .map(|l| LayerFactors {
            a: DMatrix::zeros(l.in_dim() + 1, l.in_dim() + 1),
            s: DMatrix::zeros(l.out_dim(), l.out_dim()),
        })
        .collect();
    let mut positions = 0u64;

    for doc in &sample.documents {
        let n = doc.tokens.len();
        if n < 2 {
            continue;
        }
        let trace = forward(model, &doc.tokens)?;
        let delta = sampled_deltas(trace.logits(), &mut rng);
        let deltas = propagate_deltas(model, &trace, delta);
        let scored = n - 1;
        for (li, facs) in layers.iter_mut().enumerate() {
            let input = trace.inputs[li].rows(0, scored);
            let mut aug = DMatrix::zeros(scored, input.ncols() + 1);
            aug.view_mut((0, 0), (scored, input.ncols())).copy_from(&input);
            for r in 0..scored {
                aug[(r, input.ncols())] = 1.0;
            }
            facs.a += aug.transpose() * &aug;
            let d = deltas[li].rows(0, scored);
            facs.s += d.transpose() * &d;
        }
        positions += scored as u64;
    }

    if positions == 0 {
        return Err(Error::EmptySample);
    }
    let inv = 1.0 / positions as f64;
    for f in &mut layers {
        f.a *= inv;
        f.s *= inv;
    }
    Ok(KroneckerFactors {
        layers,
        sample_positions: positions,
    })
}

/// Trailing-block partition: every block gets `dim / count` coordinates and
/// the last block absorbs the remainder.
fn block_sizes(dim: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("block_count must be positive".into()));
    }
    let base = dim / count;
    if base == 0 {
        return Err(Error::Config(format!(
            "block_count {count} exceeds factor dimension {dim}"
        )));
    }
    let mut sizes = vec![base; count];
    *sizes.last_mut().unwrap() += dim % count;
    Ok(sizes)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)]).abs());
            scale = scale.max(m[(r, c)].abs());
        }
    }
    if worst > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::NotSymmetric {
            tol: SYMMETRY_TOL,
            found: worst,
        });
    }
    Ok(())
}

/// Symmetric eigendecomposition after zeroing all off-block entries.
/// Returns the block-orthonormal basis and eigenvalues sorted ascending
/// within each block.
pub fn block_eigh(m: &DMatrix<f64>, block_count: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_symmetric(m)?;
    let dim = m.nrows();
    let sizes = block_sizes(dim, block_count)?;
    let mut q = DMatrix::zeros(dim, dim);
    let mut vals = DVector::zeros(dim);
    let mut offset = 0;
    for size in sizes {
        let mut block = m.view((offset, offset), (size, size)).into_owned();
        // Exact symmetry for the decomposition.
        for r in 0..size {
            for c in 0..r {
                let avg = 0.5 * (block[(r, c)] + block[(c, r)]);
                block[(r, c)] = avg;
                block[(c, r)] = avg;
            }
        }
        let eig = SymmetricEigen::new(block);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
        for (k, &src) in order.iter().enumerate() {
            vals[offset + k] = eig.eigenvalues[src];
            q.view_mut((offset, offset + k), (size, 1))
                .copy_from(&eig.eigenvectors.column(src));
        }
        offset += size;
    }
    Ok((q, vals))
}

/// Build the eigenbases from the factors; rescaled eigenvalues start at
/// zero and damping at the default until the caller sets them.
pub fn eigendecompose(factors: &KroneckerFactors, block_count: usize) -> Result<EkfacState> {
    let mut layers = Vec::with_capacity(factors.layers.len());
    for f in &factors.layers {
        let (q_a, a_eigvals) = block_eigh(&f.a, block_count)?;
        let (q_s, s_eigvals) = block_eigh(&f.s, block_count)?;
        let lambda = DMatrix::zeros(f.s.nrows(), f.a.nrows());
        layers.push(LayerBasis {
            q_a,
            q_s,
            a_eigvals,
            s_eigvals,
            lambda,
        });
    }
    Ok(EkfacState {
        layers,
        damping: DEFAULT_DAMPING,
        block_count,
        rescale_samples: 0,
    })
}

/// Replace the eigenvalues with second moments of the given bundles in the
/// eigenbasis: for each layer, lambda[(i, j)] is the mean of
/// (q_s^T g q_a)[(i, j)]^2.
pub fn rescale_with<I>(state: &mut EkfacState, bundles: I) -> Result<()>
where
    I: IntoIterator<Item = GradientBundle>,
{
    for layer in &mut state.layers {
        layer.lambda.fill(0.0);
    }
    let mut count = 0u64;
    for bundle in bundles {
        if bundle.layers.len() != state.layers.len() {
            return Err(Error::Shape(format!(
                "bundle has {} layers, state has {}",
                bundle.layers.len(),
                state.layers.len()
            )));
        }
        for (layer, g) in state.layers.iter_mut().zip(&bundle.layers) {
            let proj = layer.q_s.transpose() * g * &layer.q_a;
            layer.lambda.zip_apply(&proj, |l, p| *l += p * p);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySample);
    }
    let inv = 1.0 / count as f64;
    for layer in &mut state.layers {
        layer.lambda *= inv;
    }
    state.rescale_samples = count;
    Ok(())
}

/// Estimate the rescaled eigenvalues from whole-document pseudo-gradient
/// bundles over the sample, deterministic in `seed`.
pub fn rescale_eigenvalues(model: &Model, sample: &Corpus, mut state: EkfacState, seed: u64) -> Result<EkfacState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundles = Vec::new();
    for doc in &sample.documents {
        if let Some(b) = pseudo_gradient_bundle(model, &doc.tokens, &mut rng)? {
            bundles.push(b);
        }
    }
    rescale_with(&mut state, bundles)?;
    Ok(state)
}

fn check_state_shapes(state: &EkfacState, bundle: &GradientBundle) -> Result<()> {
    if state.layers.len() != bundle.layers.len() {
        return Err(Error::Shape(format!(
            "bundle has {} layers, state has {}",
            bundle.layers.len(),
            state.layers.len()
        )));
    }
    for (layer, g) in state.layers.iter().zip(&bundle.layers) {
        if g.nrows() != layer.q_s.nrows() || g.ncols() != layer.q_a.nrows() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match bases ({}, {})",
                g.shape(),
                layer.q_s.nrows(),
                layer.q_a.nrows()
            )));
        }
    }
    Ok(())
}

/// Damped inverse-Hessian-vector product: project into the eigenbasis,
/// divide coordinate-wise by (lambda + damping), project back. This is the
/// exact inverse of `hvp` for the same state.
pub fn ihvp(state: &EkfacState, gradient: &GradientBundle) -> Result<GradientBundle> {
    check_state_shapes(state, gradient)?;
    if state.damping == 0.0 {
        let zeros = state
            .layers
            .iter()
            .map(|l| l.lambda.iter().filter(|&&v| v == 0.0).count())
            .sum::<usize>();
        if zeros > 0 {
            return Err(Error::SingularCurvature { count: zeros });
        }
    }
    let layers = state
        .layers
        .iter()
        .zip(&gradient.layers)
        .map(|(layer, g)| {
            let mut proj = layer.q_s.transpose() * g * &layer.q_a;
            proj.zip_apply(&layer.lambda, |p, l| *p /= l + state.damping);
            &layer.q_s * proj * layer.q_a.transpose()
        })
        .collect();
    Ok(GradientBundle { layers })
}

/// Forward product with the approximate damped curvature (lambda + damping
/// in the eigenbasis).
pub fn hvp(state: &EkfacState, gradient: &GradientBundle) -> Result<GradientBundle> {
    check_state_shapes(state, gradient)?;
    let layers = state
        .layers
        .iter()
        .zip(&gradient.layers)
        .map(|(layer, g)| {
            let mut proj = layer.q_s.transpose() * g * &layer.q_a;
            proj.zip_apply(&layer.lambda, |p, l| *p *= l + state.damping);
            &layer.q_s * proj * layer.q_a.transpose()
        })
        .collect();
    Ok(GradientBundle { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusLimits, DocumentRecord};
    use crate::model::{init_model, Activation, ModelConfig};
    use approx::assert_relative_eq;

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

    fn model_for(corpus: &Corpus, widths: Vec<usize>, embed: usize) -> Model {
        init_model(&ModelConfig {
            vocab_size: corpus.vocab_size,
            embed_dim: embed,
            layer_widths: widths,
            activation: Activation::Tanh,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn single_position_a_factor_is_outer_product() {
        let corpus = corpus_of(&["a b"]);
        let mut model = model_for(&corpus, vec![corpus.vocab_size], 2);
        // Force the one scored position's layer input to [1, 2].
        model.embedding.row_mut(corpus.tokenizer().encode("a")[0] as usize).copy_from_slice(&[1.0, 2.0]);
        let factors = estimate_factors(&model, &corpus, 0).unwrap();
        assert_eq!(factors.sample_positions, 1);
        let a = &factors.layers[0].a;
        // Weight block is the bare outer product; the last coordinate is the
        // bias augmentation.
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
        assert_relative_eq!(a, &expected, epsilon = 1e-12);
        assert_relative_eq!(a.view((0, 0), (2, 2)).into_owned(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]), epsilon = 1e-12);
    }

    #[test]
    fn factors_are_psd() {
        let corpus = corpus_of(&["a b c d a c", "b d c a", "c c b a d"]);
        let model = model_for(&corpus, vec![4, corpus.vocab_size], 3);
        let factors = estimate_factors(&model, &corpus, 3).unwrap();
        for f in &factors.layers {
            for m in [&f.a, &f.s] {
                let eig = SymmetricEigen::new(m.clone());
                assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-8), "eigenvalue {:?}", eig.eigenvalues);
            }
        }
    }

    #[test]
    fn empty_sample_rejected() {
        let corpus = corpus_of(&[]);
        let model = init_model(&ModelConfig {
            vocab_size: 4,
            embed_dim: 2,
            layer_widths: vec![4],
            activation: Activation::Relu,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(estimate_factors(&model, &corpus, 0), Err(Error::EmptySample)));
    }

    #[test]
    fn eigendecompose_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let (q, vals) = block_eigh(&m, 1).unwrap();
        assert_relative_eq!(vals, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-12);
        let qtq = q.transpose() * &q;
        assert_relative_eq!(qtq, DMatrix::identity(2, 2), epsilon = 1e-8);
    }

    #[test]
    fn two_blocks_union_of_block_eigenvalues() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                3.0, 1.0, 9.0, 9.0, //
                1.0, 3.0, 9.0, 9.0, //
                9.0, 9.0, 5.0, 2.0, //
                9.0, 9.0, 2.0, 5.0,
            ],
        );
        // Off-block 9s are discarded by the block-diagonal approximation.
        let sym = 0.5 * (&m + m.transpose());
        let (q, vals) = block_eigh(&sym, 2).unwrap();
        let mut got: Vec<f64> = vals.iter().copied().collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Blocks [[3,1],[1,3]] and [[5,2],[2,5]] have eigenvalues {2,4} and {3,7}.
        let expected = vec![2.0, 3.0, 4.0, 7.0];
        for (g, e) in got.iter().zip(&expected) {
            assert_relative_eq!(*g, *e, epsilon = 1e-10);
        }
        // Off-block entries of the basis are zero.
        assert_eq!(q[(0, 2)], 0.0);
        assert_eq!(q[(3, 0)], 0.0);
        let qtq = q.transpose() * &q;
        assert_relative_eq!(qtq, DMatrix::identity(4, 4), epsilon = 1e-8);
    }

    #[test]
    fn non_symmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(block_eigh(&m, 1), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn block_count_must_fit() {
        let m = DMatrix::identity(3, 3);
        assert!(block_eigh(&m, 4).is_err());
        assert!(block_eigh(&m, 0).is_err());
    }

    #[test]
    fn trailing_block_absorbs_remainder() {
        assert_eq!(block_sizes(10, 4).unwrap(), vec![2, 2, 2, 4]);
        assert_eq!(block_sizes(8, 2).unwrap(), vec![4, 4]);
    }

    #[test]
    fn single_block_matches_unblocked() {
        let corpus = corpus_of(&["a b c d", "d c b a", "b a d c"]);
        let model = model_for(&corpus, vec![corpus.vocab_size], 3);
        let factors = estimate_factors(&model, &corpus, 5).unwrap();
        let (_, vals) = block_eigh(&factors.layers[0].a, 1).unwrap();
        let mut direct: Vec<f64> = SymmetricEigen::new(factors.layers[0].a.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        direct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, e) in vals.iter().zip(&direct) {
            assert_relative_eq!(*g, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_bundles_give_zero_lambda() {
        let corpus = corpus_of(&["a b c", "c b a"]);
        let model = model_for(&corpus, vec![corpus.vocab_size], 2);
        let factors = estimate_factors(&model, &corpus, 1).unwrap();
        let mut state = eigendecompose(&factors, 1).unwrap();
        let zero = GradientBundle::zeros_like(&model);
        rescale_with(&mut state, vec![zero.clone(), zero]).unwrap();
        assert!(state.layers[0].lambda.iter().all(|&v| v == 0.0));
        assert_eq!(state.rescale_samples, 2);
    }

    #[test]
    fn rescaled_lambda_nonnegative() {
        let corpus = corpus_of(&["a b c d a", "d b a c", "c a d b a"]);
        let model = model_for(&corpus, vec![3, corpus.vocab_size], 3);
        let factors = estimate_factors(&model, &corpus, 2).unwrap();
        let state = eigendecompose(&factors, 1).unwrap();
        let state = rescale_eigenvalues(&model, &corpus, state, 7).unwrap();
        assert!(state.rescale_samples == 3);
        for l in &state.layers {
            assert!(l.lambda.iter().all(|&v| v >= 0.0));
        }
    }

    fn identity_state(d_out: usize, d_in_aug: usize) -> EkfacState {
        EkfacState {
            layers: vec![LayerBasis {
                q_a: DMatrix::identity(d_in_aug, d_in_aug),
                q_s: DMatrix::identity(d_out, d_out),
                a_eigvals: DVector::from_element(d_in_aug, 1.0),
                s_eigvals: DVector::from_element(d_out, 1.0),
                lambda: DMatrix::from_element(d_out, d_in_aug, 1.0),
            }],
            damping: 0.1,
            block_count: 1,
            rescale_samples: 1,
        }
    }

    #[test]
    fn ihvp_identity_curvature_divides_by_one_plus_damping() {
        let state = identity_state(2, 3);
        let g = GradientBundle {
            layers: vec![DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])],
        };
        let out = ihvp(&state, &g).unwrap();
        for (o, i) in out.layers[0].iter().zip(g.layers[0].iter()) {
            assert_relative_eq!(*o, i / 1.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn default_damping_is_tenth() {
        assert_eq!(DEFAULT_DAMPING, 0.1);
        let corpus = corpus_of(&["a b c", "b a c"]);
        let model = model_for(&corpus, vec![corpus.vocab_size], 2);
        let factors = estimate_factors(&model, &corpus, 1).unwrap();
        let state = eigendecompose(&factors, 1).unwrap();
        assert_eq!(state.damping, 0.1);
    }

    #[test]
    fn hvp_then_ihvp_round_trips() {
        let corpus = corpus_of(&["a b c d", "c d b a", "d a c b"]);
        let model = model_for(&corpus, vec![3, corpus.vocab_size], 3);
        let factors = estimate_factors(&model, &corpus, 4).unwrap();
        let state = rescale_eigenvalues(&model, &corpus, eigendecompose(&factors, 1).unwrap(), 6).unwrap();
        let g = crate::model::per_example_gradient(&model, &corpus.documents[0].tokens, &[0, 1, 2]).unwrap();
        let round = ihvp(&state, &hvp(&state, &g).unwrap()).unwrap();
        for (a, b) in round.layers.iter().zip(&g.layers) {
            let denom = b.norm().max(1e-12);
            assert!((a - b).norm() / denom < 1e-6);
        }
    }

    #[test]
    fn ihvp_is_linear() {
        let state = {
            let corpus = corpus_of(&["a b c d", "c d b a"]);
            let model = model_for(&corpus, vec![corpus.vocab_size], 3);
            let factors = estimate_factors(&model, &corpus, 4).unwrap();
            rescale_eigenvalues(&model, &corpus, eigendecompose(&factors, 1).unwrap(), 6).unwrap()
        };
        let shape = (state.layers[0].q_s.nrows(), state.layers[0].q_a.nrows());
        let g1 = GradientBundle {
            layers: vec![DMatrix::from_fn(shape.0, shape.1, |r, c| (r + 2 * c) as f64 * 0.25 - 1.0)],
        };
        let g2 = GradientBundle {
            layers: vec![DMatrix::from_fn(shape.0, shape.1, |r, c| ((r * c) as f64).sin())],
        };
        let mut combo = g1.clone();
        combo.scale_mut(2.0);
        combo.add_scaled(&g2, -3.0);
        let lhs = ihvp(&state, &combo).unwrap();
        let mut rhs = ihvp(&state, &g1).unwrap();
        rhs.scale_mut(2.0);
        rhs.add_scaled(&ihvp(&state, &g2).unwrap(), -3.0);
        for (a, b) in lhs.layers.iter().zip(&rhs.layers) {
            assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
        }
    }

    #[test]
    fn ihvp_norm_nonincreasing_in_damping() {
        let mut state = identity_state(3, 4);
        for (i, v) in state.layers[0].lambda.iter_mut().enumerate() {
            *v = (i % 5) as f64 * 0.3;
        }
        let g = GradientBundle {
            layers: vec![DMatrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.7 + 0.1)],
        };
        let mut last = f64::INFINITY;
        for damping in [0.01, 0.1, 1.0, 10.0] {
            state.damping = damping;
            let norm = ihvp(&state, &g).unwrap().norm();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }

    #[test]
    fn zero_damping_with_zero_lambda_is_singular() {
        let mut state = identity_state(2, 2);
        state.damping = 0.0;
        state.layers[0].lambda[(0, 0)] = 0.0;
        let g = GradientBundle {
            layers: vec![DMatrix::from_element(2, 2, 1.0)],
        };
        assert!(matches!(ihvp(&state, &g), Err(Error::SingularCurvature { .. })));
    }
}
