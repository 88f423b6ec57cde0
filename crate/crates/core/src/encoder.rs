//! Small vision transformer backbone.
//!
//! Pre-norm blocks: `t' = t + SA(LN(t))`, `t'' = t' + FF(LN(t'))`. There is no
//! class token and no final norm; the classifier `W (C x D)` is applied to
//! patch tokens directly and shared with CAM generation.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::synthdata::RgbImage;
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-6;

/// Patch tokens of one view at some depth of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    pub tokens: Matrix,
    pub grid: (usize, usize),
    pub layer_index: usize,
}

impl TokenEmbeddings {
    pub fn new(tokens: Matrix, grid: (usize, usize), layer_index: usize) -> Result<Self> {
        if tokens.rows() != grid.0 * grid.1 {
            return Err(FsrError::Shape(format!(
                "{} tokens for a {}x{} grid",
                tokens.rows(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self {
            tokens,
            grid,
            layer_index,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderShape {
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub num_classes: usize,
}

impl EncoderShape {
    pub fn new(
        model: &ModelConfig,
        image_size: usize,
        patch_size: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
            return Err(FsrError::Shape(format!(
                "view size {image_size} is not a multiple of patch size {patch_size}"
            )));
        }
        let g = image_size / patch_size;
        Ok(Self {
            patch_size,
            grid: (g, g),
            dim: model.dim,
            depth: model.depth,
            heads: model.heads,
            ff_dim: model.ff_dim,
            num_classes,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Inserts freshly initialized encoder and classifier parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        let d = self.dim;
        store.insert(
            "enc.patch.w",
            Matrix::trunc_normal(self.patch_dim(), d, std, rng),
        );
        store.insert("enc.patch.b", Matrix::zeros(1, d));
        store.insert(
            "enc.pos",
            Matrix::trunc_normal(self.num_tokens(), d, std, rng),
        );
        store.insert("enc.mask_token", Matrix::trunc_normal(1, d, std, rng));
        for l in 0..self.depth {
            let p = |s: &str| format!("enc.l{l}.{s}");
            store.insert(p("ln1.g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln1.b"), Matrix::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    p(&format!("attn.{w}")),
                    Matrix::trunc_normal(d, d, std, rng),
                );
                store.insert(p(&format!("attn.b{}", &w[1..])), Matrix::zeros(1, d));
            }
            store.insert(p("ln2.g"), Matrix::filled(1, d, 1.0));
            store.insert(p("ln2.b"), Matrix::zeros(1, d));
            store.insert(p("ff1.w"), Matrix::trunc_normal(d, self.ff_dim, std, rng));
            store.insert(p("ff1.b"), Matrix::zeros(1, self.ff_dim));
            store.insert(p("ff2.w"), Matrix::trunc_normal(self.ff_dim, d, std, rng));
            store.insert(p("ff2.b"), Matrix::zeros(1, d));
        }
        store.insert("cls.w", Matrix::trunc_normal(self.num_classes, d, std, rng));
    }
}

/// Flattens non-overlapping `P x P` patches of a view into rows, in grid
/// row-major order; each row is `(py, px, channel)` row-major.
pub fn patchify(view: &RgbImage, patch: usize) -> Result<Matrix> {
    if patch == 0 || !view.height.is_multiple_of(patch) || !view.width.is_multiple_of(patch) {
        return Err(FsrError::Shape(format!(
            "{}x{} view is not divisible into {patch}x{patch} patches",
            view.height, view.width
        )));
    }
    let (gh, gw) = (view.height / patch, view.width / patch);
    let pd = patch * patch * 3;
    let mut out = Matrix::zeros(gh * gw, pd);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        row[k] = view.get(gy * patch + py, gx * patch + px, c) as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Graph outputs of one encoder pass.
pub struct EncoderOutput {
    pub z: Var,
    /// Token embeddings after each block (`layers[l]` is the output of block `l`).
    pub layers: Vec<Var>,
    /// Softmax attention per block, one `N x N` node per head.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderShape {
    /// `patches · W_p + b_p`, optionally replacing masked rows by the mask
    /// token, then adding positional embeddings.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &Matrix,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        if patches.shape() != (self.num_tokens(), self.patch_dim()) {
            return Err(FsrError::Shape(format!(
                "patch matrix {}x{} does not match {} tokens of width {}",
                patches.rows(),
                patches.cols(),
                self.num_tokens(),
                self.patch_dim()
            )));
        }
        let x = g.constant(patches.clone());
        let w = g.param(store, "enc.patch.w")?;
        let b = g.param(store, "enc.patch.b")?;
        let mut t = g.linear(x, w, Some(b))?;
        if let Some(mask) = mask {
            if mask.iter().any(|&m| m) {
                let token = g.param(store, "enc.mask_token")?;
                t = g.replace_rows(t, token, mask)?;
            }
        }
        let pos = g.param(store, "enc.pos")?;
        g.add(t, pos)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
    ) -> Result<EncoderOutput> {
        let (n, d) = g.shape(tokens);
        if d != self.dim {
            return Err(FsrError::Shape(format!(
                "tokens have width {d}, encoder expects {}",
                self.dim
            )));
        }
        let heads = self.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.depth);
        let mut attention = Vec::with_capacity(self.depth);
        for l in 0..self.depth {
            let p = |s: &str| format!("enc.l{l}.{s}");
            let (g1, b1) = (g.param(store, &p("ln1.g"))?, g.param(store, &p("ln1.b"))?);
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let proj = |g: &mut Graph, w: &str| -> Result<Var> {
                let wv = g.param(store, &p(&format!("attn.w{w}")))?;
                let bv = g.param(store, &p(&format!("attn.b{w}")))?;
                g.linear(h, wv, Some(bv))
            };
            let q = proj(g, "q")?;
            let k = proj(g, "k")?;
            let v = proj(g, "v")?;
            let mut head_out = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let logits = g.matmul_t(qh, kh)?;
                let logits = g.scale(logits, scale);
                let a = g.softmax(logits);
                maps.push(a);
                head_out.push(g.matmul(a, vh)?);
            }
            let cat = if heads == 1 {
                head_out[0]
            } else {
                g.concat_cols(&head_out)?
            };
            let (wo, bo) = (
                g.param(store, &p("attn.wo"))?,
                g.param(store, &p("attn.bo"))?,
            );
            let sa = g.linear(cat, wo, Some(bo))?;
            x = g.add(x, sa)?;
            let (g2, b2) = (g.param(store, &p("ln2.g"))?, g.param(store, &p("ln2.b"))?);
            let h2 = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1) = (g.param(store, &p("ff1.w"))?, g.param(store, &p("ff1.b"))?);
            let f = g.linear(h2, w1, Some(bb1))?;
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(store, &p("ff2.w"))?, g.param(store, &p("ff2.b"))?);
            let f = g.linear(f, w2, Some(bb2))?;
            x = g.add(x, f)?;
            if !g.value(x).all_finite() {
                return Err(FsrError::NonFinite(format!("encoder layer {l}")));
            }
            layers.push(x);
            attention.push(maps);
        }
        debug_assert_eq!(g.shape(x), (n, d));
        Ok(EncoderOutput {
            z: x,
            layers,
            attention,
        })
    }

    /// Per-token class logits `Z · Wᵀ` (`N x C`).
    pub fn token_logits_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let w = g.param(store, "cls.w")?;
        g.matmul_t(z, w)
    }
}

/// Patch embedding of a view without gradient tracking.
pub fn patchify_embed(
    view: &RgbImage,
    shape: &EncoderShape,
    store: &ParamStore,
) -> Result<TokenEmbeddings> {
    let patches = patchify(view, shape.patch_size)?;
    let grid = (
        view.height / shape.patch_size,
        view.width / shape.patch_size,
    );
    if grid != shape.grid {
        return Err(FsrError::Shape(format!(
            "view grid {grid:?} differs from encoder grid {:?}",
            shape.grid
        )));
    }
    let mut g = Graph::new(false);
    let t = shape.embed_graph(&mut g, store, &patches, None)?;
    TokenEmbeddings::new(g.value(t).clone(), grid, 0)
}

/// Final embeddings plus per-layer attention (`attention[l][h]` is `N x N`).
pub fn transformer_forward(
    tokens: &TokenEmbeddings,
    shape: &EncoderShape,
    store: &ParamStore,
) -> Result<(TokenEmbeddings, Vec<Vec<Matrix>>)> {
    let mut g = Graph::new(false);
    let t = g.constant(tokens.tokens.clone());
    let out = shape.forward_graph(&mut g, store, t)?;
    let attention = out
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&a| g.value(a).clone()).collect())
        .collect();
    let z = TokenEmbeddings::new(
        g.value(out.z).clone(),
        tokens.grid,
        tokens.layer_index + shape.depth,
    )?;
    Ok((z, attention))
}

/// Read-out of the attention maps of a forward pass.
pub fn capture_attention(
    shape: &EncoderShape,
    store: &ParamStore,
    tokens: &TokenEmbeddings,
) -> Result<Vec<Vec<Matrix>>> {
    transformer_forward(tokens, shape, store).map(|(_, a)| a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize) -> (EncoderShape, ParamStore) {
        let model = ModelConfig {
            dim: 8,
            depth,
            heads: 2,
            ff_dim: 16,
            ..ModelConfig::default()
        };
        let shape = EncoderShape::new(&model, 16, 8, 3).unwrap();
        let mut store = ParamStore::new();
        shape.init_params(&mut store, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        (shape, store)
    }

    fn random_view(size: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage {
            height: size,
            width: size,
            data: (0..size * size * 3).map(|_| rng.gen()).collect(),
        }
    }

    #[test]
    fn token_counts() {
        let model = ModelConfig::default();
        assert_eq!(
            EncoderShape::new(&model, 448, 16, 20).unwrap().num_tokens(),
            784
        );
        assert_eq!(EncoderShape::new(&model, 8, 8, 3).unwrap().num_tokens(), 1);
        assert_eq!(
            EncoderShape::new(&model, 64, 8, 3).unwrap().num_tokens(),
            64
        );
        assert!(EncoderShape::new(&model, 60, 8, 3).is_err());
    }

    #[test]
    fn zero_image_and_zero_positions_embed_to_zero() {
        let model = ModelConfig::default();
        let shape = EncoderShape::new(&model, 64, 8, 3).unwrap();
        let mut store = ParamStore::new();
        shape.init_params(&mut store, 0.02, &mut ChaCha8Rng::seed_from_u64(0));
        store.insert("enc.pos", Matrix::zeros(64, 64));
        let emb = patchify_embed(&RgbImage::zeros(64, 64), &shape, &store).unwrap();
        assert_eq!(emb.tokens.shape(), (64, 64));
        assert!(emb.tokens.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_rows_follow_grid_order() {
        let mut view = RgbImage::zeros(16, 16);
        view.set(8, 0, 1, 0.5); // first pixel of patch (1, 0), green channel
        let p = patchify(&view, 8).unwrap();
        assert_eq!(p.shape(), (4, 192));
        assert_eq!(p[(2, 1)], 0.5);
        assert!(patchify(&view, 5).is_err());
    }

    #[test]
    fn depth_zero_is_identity() {
        let (shape, store) = tiny(0);
        let emb = patchify_embed(&random_view(16, 3), &shape, &store).unwrap();
        let (z, att) = transformer_forward(&emb, &shape, &store).unwrap();
        assert_eq!(z.tokens, emb.tokens);
        assert!(att.is_empty());
    }

    #[test]
    fn zero_block_weights_give_identity() {
        let (shape, mut store) = tiny(2);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.contains("attn.") || n.contains(".ff"))
            .map(String::from)
            .collect();
        for n in names {
            let m = store.get_mut(&n).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let emb = patchify_embed(&random_view(16, 4), &shape, &store).unwrap();
        let (z, _) = transformer_forward(&emb, &shape, &store).unwrap();
        assert_eq!(z.tokens, emb.tokens);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (shape, store) = tiny(3);
        let emb = patchify_embed(&random_view(16, 5), &shape, &store).unwrap();
        let att = capture_attention(&shape, &store, &emb).unwrap();
        assert_eq!(att.len(), 3);
        for layer in &att {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for row in head.iter_rows() {
                    assert!(row.iter().all(|&a| a >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn permuting_tokens_and_positions_permutes_output() {
        let (shape, store) = tiny(2);
        let patches = patchify(&random_view(16, 6), 8).unwrap();
        let perm = [2usize, 0, 3, 1];
        let run = |patches: &Matrix, store: &ParamStore| {
            let mut g = Graph::new(false);
            let t = shape.embed_graph(&mut g, store, patches, None).unwrap();
            let out = shape.forward_graph(&mut g, store, t).unwrap();
            g.value(out.z).clone()
        };
        let base = run(&patches, &store);
        let mut permuted_store = store.clone();
        permuted_store.insert("enc.pos", store.get("enc.pos").unwrap().select_rows(&perm));
        let permuted = run(&patches.select_rows(&perm), &permuted_store);
        assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let (shape, mut store) = tiny(2);
        store.get_mut("enc.l1.ff2.b").unwrap().as_mut_slice()[0] = f64::INFINITY;
        let emb = patchify_embed(&random_view(16, 7), &shape, &store).unwrap();
        match transformer_forward(&emb, &shape, &store) {
            Err(FsrError::NonFinite(what)) => assert_eq!(what, "encoder layer 1"),
            other => panic!("expected a non-finite error, got {:?}", other.map(|_| ())),
        }
    }
}
