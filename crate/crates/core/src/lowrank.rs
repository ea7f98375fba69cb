//! Low-rank compression of query gradients via randomized SVD, so a batch
//! of preconditioned query gradients fits in memory during the single pass
//! over the corpus.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::GradientBundle;

pub const DEFAULT_RANK: usize = 32;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 2;

#[derive(Debug, Clone)]
pub struct LowRankLayer {
    /// d_out x r left factors.
    pub u: DMatrix<f64>,
    /// r singular values, descending.
    pub sv: DVector<f64>,
    /// r x (d_in + 1) right factors.
    pub vt: DMatrix<f64>,
    /// Effective rank after clamping to the layer dimensions.
    pub rank: usize,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct LowRankGradient {
    pub layers: Vec<LowRankLayer>,
}

fn thin_qr(m: DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols().min(m.nrows());
    let qr = m.qr();
    let q = qr.q();
    q.columns(0, cols.min(q.ncols())).into_owned()
}

/// Range-finder randomized SVD (Gaussian sketch, QR re-orthonormalized
/// power iterations) truncated to `rank`.
fn rsvd(m: &DMatrix<f64>, rank: usize, rng: &mut ChaCha8Rng) -> LowRankLayer {
    let (rows, cols) = m.shape();
    let max_rank = rows.min(cols);
    let rank = rank.min(max_rank);
    let sketch = (rank + OVERSAMPLE).min(max_rank);

    let normal = StandardNormal;
    let omega = DMatrix::from_fn(cols, sketch, |_, _| {
        let x: f64 = normal.sample(rng);
        x
    });
    let mut q = thin_qr(m * omega);
    for _ in 0..POWER_ITERS {
        let z = thin_qr(m.transpose() * &q);
        q = thin_qr(m * z);
    }
    let b = q.transpose() * m;
    let svd = b.svd(true, true);
    let u_b = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let keep = rank.min(svd.singular_values.len());
    let u = (&q * u_b).columns(0, keep).into_owned();
    LowRankLayer {
        u,
        sv: DVector::from_iterator(keep, svd.singular_values.iter().take(keep).copied()),
        vt: vt.rows(0, keep).into_owned(),
        rank: keep,
        shape: (rows, cols),
    }
}

fn exact_svd(m: &DMatrix<f64>, rank: usize) -> LowRankLayer {
    let (rows, cols) = m.shape();
    let rank = rank.min(rows.min(cols));
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let keep = rank.min(svd.singular_values.len());
    LowRankLayer {
        u: u.columns(0, keep).into_owned(),
        sv: DVector::from_iterator(keep, svd.singular_values.iter().take(keep).copied()),
        vt: vt.rows(0, keep).into_owned(),
        rank: keep,
        shape: (rows, cols),
    }
}

fn check_rank(bundle: &GradientBundle, rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("compression rank must be at least 1".into()));
    }
    for (li, g) in bundle.layers.iter().enumerate() {
        let max_rank = g.nrows().min(g.ncols());
        if rank > max_rank {
            log::warn!("layer {li}: rank {rank} exceeds min dimension {max_rank}; clamping");
        }
    }
    Ok(())
}

/// Randomized-projection SVD of every layer at the given rank,
/// deterministic in `seed`. Ranks above a layer's smaller dimension are
/// clamped (with a warning) and the effective rank is recorded.
pub fn compress_query_gradient(bundle: &GradientBundle, rank: usize, seed: u64) -> Result<LowRankGradient> {
    check_rank(bundle, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LowRankGradient {
        layers: bundle.layers.iter().map(|g| rsvd(g, rank, &mut rng)).collect(),
    })
}

/// Deterministic truncated SVD; the exact counterpart used to isolate the
/// error introduced by the randomized range finder.
pub fn compress_query_gradient_exact(bundle: &GradientBundle, rank: usize) -> Result<LowRankGradient> {
    check_rank(bundle, rank)?;
    Ok(LowRankGradient {
        layers: bundle.layers.iter().map(|g| exact_svd(g, rank)).collect(),
    })
}

impl LowRankGradient {
    pub fn reconstruct(&self) -> GradientBundle {
        GradientBundle {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut us = l.u.clone();
                    for (k, &s) in l.sv.iter().enumerate() {
                        us.column_mut(k).scale_mut(s);
                    }
                    us * &l.vt
                })
                .collect(),
        }
    }

    /// Inner product with a full bundle without reconstructing and without
    /// materializing the d_out x d_in product.
    pub fn dot(&self, other: &GradientBundle) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "low-rank bundle has {} layers, dense has {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        let mut acc = 0.0;
        for (l, g) in self.layers.iter().zip(&other.layers) {
            if l.shape != g.shape() {
                return Err(Error::Shape(format!("layer shape {:?} vs {:?}", l.shape, g.shape())));
            }
            // <U S Vt, G> = sum_k s_k u_k^T G v_k^T.
            let t = l.u.transpose() * g;
            for k in 0..l.rank {
                acc += l.sv[k] * t.row(k).dot(&l.vt.row(k));
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(mats: Vec<DMatrix<f64>>) -> GradientBundle {
        GradientBundle { layers: mats }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        DMatrix::from_fn(rows, cols, |_, _| {
            let x: f64 = normal.sample(&mut rng);
            x
        })
    }

    #[test]
    fn full_rank_reconstructs() {
        let g = bundle(vec![random_matrix(6, 9, 1)]);
        let lr = compress_query_gradient(&g, 6, 7).unwrap();
        let back = lr.reconstruct();
        let err = (&back.layers[0] - &g.layers[0]).norm() / g.layers[0].norm();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rank_one_matrix_exact_at_rank_one() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = DVector::from_vec(vec![3.0, 1.0, 0.0, -1.0]);
        let g = bundle(vec![&u * v.transpose()]);
        let lr = compress_query_gradient(&g, 1, 3).unwrap();
        let back = lr.reconstruct();
        let err = (&back.layers[0] - &g.layers[0]).norm() / g.layers[0].norm();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn over_rank_is_clamped() {
        let g = bundle(vec![random_matrix(3, 8, 2)]);
        let lr = compress_query_gradient(&g, 40, 5).unwrap();
        assert_eq!(lr.layers[0].rank, 3);
    }

    #[test]
    fn zero_rank_rejected() {
        let g = bundle(vec![random_matrix(3, 3, 2)]);
        assert!(compress_query_gradient(&g, 0, 5).is_err());
    }

    #[test]
    fn dot_matches_reconstruction() {
        let g = bundle(vec![random_matrix(7, 5, 11), random_matrix(4, 9, 12)]);
        let other = bundle(vec![random_matrix(7, 5, 13), random_matrix(4, 9, 14)]);
        let lr = compress_query_gradient(&g, 3, 21).unwrap();
        let direct = lr.dot(&other).unwrap();
        let via_dense = lr.reconstruct().dot(&other).unwrap();
        assert!((direct - via_dense).abs() <= 1e-10 * via_dense.abs().max(1.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let g = bundle(vec![random_matrix(8, 8, 4)]);
        let a = compress_query_gradient(&g, 3, 9).unwrap();
        let b = compress_query_gradient(&g, 3, 9).unwrap();
        assert_eq!(a.layers[0].u, b.layers[0].u);
        assert_eq!(a.layers[0].sv, b.layers[0].sv);
    }

    #[test]
    fn exact_svd_beats_or_matches_randomized() {
        let g = bundle(vec![random_matrix(12, 10, 6)]);
        let exact = compress_query_gradient_exact(&g, 4).unwrap().reconstruct();
        let approx = compress_query_gradient(&g, 4, 8).unwrap().reconstruct();
        let err_exact = (&exact.layers[0] - &g.layers[0]).norm();
        let err_approx = (&approx.layers[0] - &g.layers[0]).norm();
        assert!(err_exact <= err_approx + 1e-9);
    }
}
