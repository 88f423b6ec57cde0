//! Compression of confident (unmasked) patch tokens into one class token.
//!
//! Each aggregation block is
//!
//! ```text
//! c' = c + MCA(LN([c; Z]))          Q from c, K/V from Z, masked tokens excluded
//! c'' = c' + FF(LN(c'))
//! ```
//!
//! with single-head attention `softmax(Q Kᵀ / sqrt(D))` restricted to the
//! unmasked columns and output `(A V) W_O`. GAP and GMP over the unmasked
//! tokens are provided as parameter-free baselines.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::AggregationKind;
use crate::encoder::LN_EPS;
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationShape {
    pub dim: usize,
    pub blocks: usize,
    pub ff_dim: usize,
}

pub struct AggregationOutput {
    pub class_token: Var,
    /// `1 x N` attention of each block (empty for GAP/GMP).
    pub attention: Vec<Var>,
}

impl AggregationShape {
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        let d = self.dim;
        store.insert("agg.cls_token", Matrix::trunc_normal(1, d, std, rng));
        for b in 0..self.blocks {
            let p = |s: &str| format!("agg.b{b}.{s}");
            store.insert(p("ln1.g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln1.b"), Matrix::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(p(w), Matrix::trunc_normal(d, d, std, rng));
            }
            store.insert(p("ln2.g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln2.b"), Matrix::zeros(1, d));
            store.insert(p("ff1.w"), Matrix::trunc_normal(d, self.ff_dim, std, rng));
            store.insert(p("ff1.b"), Matrix::zeros(1, self.ff_dim));
            store.insert(p("ff2.w"), Matrix::trunc_normal(self.ff_dim, d, std, rng));
            store.insert(p("ff2.b"), Matrix::zeros(1, d));
        }
    }

    /// One masked cross-attention block; returns the updated class token and
    /// the `1 x N` attention row.
    pub fn block_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        class_tok: Var,
        patches: Var,
        masked: &[bool],
    ) -> Result<(Var, Var)> {
        let (n, d) = g.shape(patches);
        if masked.len() != n {
            return Err(FsrError::Shape(format!(
                "mask of length {} for {n} patches",
                masked.len()
            )));
        }
        if g.shape(class_tok) != (1, d) {
            return Err(FsrError::Shape("class token must be 1 x D".into()));
        }
        let p = |s: &str| format!("agg.b{block}.{s}");
        let (g1, b1) = (g.param(store, &p("ln1.g"))?, g.param(store, &p("ln1.b"))?);
        let nc = g.layer_norm(class_tok, g1, b1, LN_EPS)?;
        let np = g.layer_norm(patches, g1, b1, LN_EPS)?;
        let wq = g.param(store, &p("wq"))?;
        let wk = g.param(store, &p("wk"))?;
        let wv = g.param(store, &p("wv"))?;
        let wo = g.param(store, &p("wo"))?;
        let q = g.matmul(nc, wq)?;
        let k = g.matmul(np, wk)?;
        let v = g.matmul(np, wv)?;
        let logits = g.matmul_t(q, k)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = g.masked_softmax(logits, masked)?;
        let ctx = g.matmul(attn, v)?;
        let out = g.matmul(ctx, wo)?;
        let c = g.add(class_tok, out)?;
        let (g2, b2) = (g.param(store, &p("ln2.g"))?, g.param(store, &p("ln2.b"))?);
        let h = g.layer_norm(c, g2, b2, LN_EPS)?;
        let (w1, bb1) = (g.param(store, &p("ff1.w"))?, g.param(store, &p("ff1.b"))?);
        let f = g.linear(h, w1, Some(bb1))?;
        let f = g.gelu(f);
        let (w2, bb2) = (g.param(store, &p("ff2.w"))?, g.param(store, &p("ff2.b"))?);
        let f = g.linear(f, w2, Some(bb2))?;
        Ok((g.add(c, f)?, attn))
    }

    /// Runs the configured aggregation over `patches` (`N x D`).
    pub fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        kind: AggregationKind,
        patches: Var,
        masked: &[bool],
    ) -> Result<AggregationOutput> {
        match kind {
            AggregationKind::Mca => {
                let mut c = g.param(store, "agg.cls_token")?;
                let mut attention = Vec::with_capacity(self.blocks);
                for b in 0..self.blocks {
                    let (next, a) = self.block_graph(g, store, b, c, patches, masked)?;
                    c = next;
                    attention.push(a);
                }
                Ok(AggregationOutput {
                    class_token: c,
                    attention,
                })
            }
            AggregationKind::Gap | AggregationKind::Gmp => {
                let keep: Vec<usize> = (0..masked.len()).filter(|&i| !masked[i]).collect();
                if keep.is_empty() {
                    return Err(FsrError::NoAttendableToken);
                }
                let rows = g.select_rows(patches, &keep)?;
                let class_token = if kind == AggregationKind::Gap {
                    g.mean_rows(rows)
                } else {
                    g.max_rows(rows)?
                };
                Ok(AggregationOutput {
                    class_token,
                    attention: Vec::new(),
                })
            }
        }
    }
}

/// Value-level single block: `(class token, attention row)`.
pub fn mca_block_forward(
    shape: &AggregationShape,
    store: &ParamStore,
    block: usize,
    class_tok: &Matrix,
    patches: &Matrix,
    masked: &[bool],
) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new(false);
    let c = g.constant(class_tok.clone());
    let p = g.constant(patches.clone());
    let (out, attn) = shape.block_graph(&mut g, store, block, c, p, masked)?;
    Ok((g.value(out).clone(), g.value(attn).clone()))
}

/// Value-level aggregation starting from the learned class token.
pub fn aggregate_class_token(
    shape: &AggregationShape,
    store: &ParamStore,
    kind: AggregationKind,
    patches: &Matrix,
    masked: &[bool],
) -> Result<Matrix> {
    let mut g = Graph::new(false);
    let p = g.constant(patches.clone());
    let out = shape.aggregate_graph(&mut g, store, kind, p, masked)?;
    Ok(g.value(out.class_token).clone())
}

fn unmasked_rows(patches: &Matrix, masked: &[bool]) -> Result<Vec<usize>> {
    if masked.len() != patches.rows() {
        return Err(FsrError::Shape(format!(
            "mask of length {} for {} patches",
            masked.len(),
            patches.rows()
        )));
    }
    let keep: Vec<usize> = (0..masked.len()).filter(|&i| !masked[i]).collect();
    if keep.is_empty() {
        return Err(FsrError::NoAttendableToken);
    }
    Ok(keep)
}

/// Mean over unmasked tokens.
pub fn pool_gap(patches: &Matrix, masked: &[bool]) -> Result<Matrix> {
    Ok(patches
        .select_rows(&unmasked_rows(patches, masked)?)
        .mean_rows())
}

/// Per-dimension maximum over unmasked tokens.
pub fn pool_gmp(patches: &Matrix, masked: &[bool]) -> Result<Matrix> {
    let rows = patches.select_rows(&unmasked_rows(patches, masked)?);
    let mut out = Matrix::filled(1, rows.cols(), f64::NEG_INFINITY);
    for r in rows.iter_rows() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(r) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (AggregationShape, ParamStore) {
        let shape = AggregationShape {
            dim,
            blocks: 2,
            ff_dim: 2 * dim,
        };
        let mut store = ParamStore::new();
        shape.init_params(&mut store, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        (shape, store)
    }

    #[test]
    fn pooling_baselines() {
        let t = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(
            pool_gap(&t, &[false, false]).unwrap().as_slice(),
            &[2.0, 2.0]
        );
        assert_eq!(
            pool_gmp(&t, &[false, false]).unwrap().as_slice(),
            &[3.0, 3.0]
        );
        assert_eq!(
            pool_gap(&t, &[true, false]).unwrap().as_slice(),
            &[3.0, 1.0]
        );
        assert_eq!(
            pool_gmp(&t, &[false, true]).unwrap().as_slice(),
            &[1.0, 3.0]
        );
        assert!(matches!(
            pool_gap(&t, &[true, true]),
            Err(FsrError::NoAttendableToken)
        ));
    }

    #[test]
    fn graph_pooling_matches_value_pooling() {
        let (shape, store) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng);
        let mask = [false, true, false, false, true];
        let gap = aggregate_class_token(&shape, &store, AggregationKind::Gap, &p, &mask).unwrap();
        let gmp = aggregate_class_token(&shape, &store, AggregationKind::Gmp, &p, &mask).unwrap();
        assert_eq!(gap, pool_gap(&p, &mask).unwrap());
        assert_eq!(gmp, pool_gmp(&p, &mask).unwrap());
    }

    #[test]
    fn single_unmasked_token_gets_all_weight() {
        let (shape, store) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng);
        let c = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let (_, a) =
            mca_block_forward(&shape, &store, 0, &c, &p, &[true, true, false, true, true]).unwrap();
        assert_eq!(a.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_logits_spread_uniformly() {
        let (shape, mut store) = setup(4);
        // Zero keys make every logit equal.
        store.insert("agg.b0.wk", Matrix::zeros(4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng);
        let c = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let (_, a) = mca_block_forward(
            &shape,
            &store,
            0,
            &c,
            &p,
            &[false, true, false, false, true],
        )
        .unwrap();
        for (i, &w) in a.as_slice().iter().enumerate() {
            if [1, 4].contains(&i) {
                assert_eq!(w, 0.0);
            } else {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let (shape, store) = setup(4);
        let p = Matrix::zeros(3, 4);
        let err = aggregate_class_token(&shape, &store, AggregationKind::Mca, &p, &[true; 3]);
        assert!(matches!(err, Err(FsrError::NoAttendableToken)));
    }

    #[test]
    fn masked_features_have_no_influence() {
        let (shape, store) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Matrix::uniform(8, 6, -1.0, 1.0, &mut rng);
        let mask = [false, true, true, false, false, true, false, false];
        let base = aggregate_class_token(&shape, &store, AggregationKind::Mca, &p, &mask).unwrap();
        let mut q = p.clone();
        for i in [1, 2, 5] {
            q.row_mut(i).iter_mut().for_each(|x| *x = *x * 50.0 - 7.0);
        }
        for kind in [
            AggregationKind::Mca,
            AggregationKind::Gap,
            AggregationKind::Gmp,
        ] {
            let a = aggregate_class_token(&shape, &store, kind, &p, &mask).unwrap();
            let b = aggregate_class_token(&shape, &store, kind, &q, &mask).unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
        assert_eq!(base.shape(), (1, 6));
    }

    #[test]
    fn unmasked_order_does_not_matter() {
        let (shape, store) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Matrix::uniform(6, 6, -1.0, 1.0, &mut rng);
        let mask = [false, true, false, false, true, false];
        let perm = [5, 3, 4, 0, 1, 2];
        let pp = p.select_rows(&perm);
        let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        for kind in [
            AggregationKind::Mca,
            AggregationKind::Gap,
            AggregationKind::Gmp,
        ] {
            let a = aggregate_class_token(&shape, &store, kind, &p, &mask).unwrap();
            let b = aggregate_class_token(&shape, &store, kind, &pp, &pm).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "{kind:?}");
        }
    }
}
