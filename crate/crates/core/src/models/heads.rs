//! Temporal heads. All heads map a (B,T,D) feature sequence to (B,T,7)
//! logits (many-to-many).

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FerError, Result};
use crate::labels::NUM_CLASSES;
use crate::nn::attention::{to_2d, to_3d, BlockCache};
use crate::nn::gru::GruCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{
    dropout_mask, join, positional_encoding, EncoderBlock, GruLayer, LayerNorm, Linear, Module,
    Param,
};

use super::TemporalHeadConfig;

pub enum Head {
    Static(StaticHead),
    Gru(GruHead),
    Transformer(TransformerHead),
}

pub enum HeadCache {
    Static(Array2<f64>),
    Gru(GruHeadCache),
    Transformer(TfHeadCache),
}

impl Head {
    pub fn forward(
        &self,
        features: &Array3<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array3<f64>, HeadCache)> {
        let (_, t, _) = features.dim();
        if t == 0 {
            return Err(FerError::InvalidInput("empty time axis".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FerError::InvalidInput("non-finite features".into()));
        }
        match self {
            Head::Static(h) => {
                let (y, c) = h.forward(features);
                Ok((y, HeadCache::Static(c)))
            }
            Head::Gru(h) => {
                let (y, c) = h.forward(features, dropout_rng);
                Ok((y, HeadCache::Gru(c)))
            }
            Head::Transformer(h) => {
                let (y, c) = h.forward(features, dropout_rng);
                Ok((y, HeadCache::Transformer(c)))
            }
        }
    }

    pub fn backward(&mut self, cache: &HeadCache, dlogits: &Array3<f64>) -> Array3<f64> {
        match (self, cache) {
            (Head::Static(h), HeadCache::Static(c)) => h.backward(c, dlogits),
            (Head::Gru(h), HeadCache::Gru(c)) => h.backward(c, dlogits),
            (Head::Transformer(h), HeadCache::Transformer(c)) => h.backward(c, dlogits),
            _ => panic!("head/cache mismatch"),
        }
    }
}

impl Module for Head {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Head::Static(h) => h.visit_params(prefix, f),
            Head::Gru(h) => h.visit_params(prefix, f),
            Head::Transformer(h) => h.visit_params(prefix, f),
        }
    }
}

/// A single affine map applied independently per frame.
pub struct StaticHead {
    pub fc: Linear,
}

impl StaticHead {
    pub fn new(feature_dim: usize, rng: &mut impl Rng) -> Self {
        StaticHead {
            fc: Linear::new(feature_dim, NUM_CLASSES, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (b, t, _) = x.dim();
        let x2 = to_2d(x);
        let y = self.fc.forward(&x2);
        (to_3d(y, b, t), x2)
    }

    fn backward(&mut self, x2: &Array2<f64>, dy: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = dy.dim();
        let dx = self.fc.backward(x2, &to_2d(dy));
        to_3d(dx, b, t)
    }
}

impl Module for StaticHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}

/// Stacked unidirectional GRU layers, then a per-timestep classifier.
pub struct GruHead {
    pub layers: Vec<GruLayer>,
    pub fc: Linear,
    pub dropout: f64,
}

pub struct GruHeadCache {
    layer_caches: Vec<GruCache>,
    /// Inverted-dropout masks between layers (train only).
    masks: Vec<Option<Array3<f64>>>,
    fc_in: Array2<f64>,
}

impl GruHead {
    pub fn new(feature_dim: usize, cfg: &TemporalHeadConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut din = feature_dim;
        for _ in 0..cfg.gru_layers {
            layers.push(GruLayer::new(din, cfg.gru_hidden, rng));
            din = cfg.gru_hidden;
        }
        GruHead {
            layers,
            fc: Linear::new(cfg.gru_hidden, NUM_CLASSES, rng),
            dropout: cfg.dropout,
        }
    }

    fn forward(
        &self,
        x: &Array3<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, GruHeadCache) {
        let (b, t, _) = x.dim();
        let mut cur = x.clone();
        let mut layer_caches = Vec::new();
        let mut masks = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (h, cache) = layer.forward(&cur);
            layer_caches.push(cache);
            cur = h;
            let mask = match (&mut dropout_rng, self.dropout > 0.0 && i < last) {
                (Some(rng), true) => {
                    let m = dropout_mask(cur.raw_dim(), self.dropout, *rng);
                    cur *= &m;
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
        }
        let fc_in = to_2d(&cur);
        let y = self.fc.forward(&fc_in);
        (
            to_3d(y, b, t),
            GruHeadCache {
                layer_caches,
                masks,
                fc_in,
            },
        )
    }

    fn backward(&mut self, cache: &GruHeadCache, dy: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = dy.dim();
        let mut dcur = to_3d(self.fc.backward(&cache.fc_in, &to_2d(dy)), b, t);
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if let Some(m) = &cache.masks[i] {
                dcur *= m;
            }
            dcur = layer.backward(&cache.layer_caches[i], &dcur);
        }
        dcur
    }
}

impl Module for GruHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("gru.l{i}")), f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}

/// Projection to the model width, sinusoidal positional encoding, pre-norm
/// encoder blocks, final layer norm, per-position classifier.
pub struct TransformerHead {
    pub proj: Linear,
    /// Normalizes the projected tokens so their scale is commensurate with
    /// the positional encoding regardless of the backbone's feature scale.
    pub proj_ln: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
    pub fc: Linear,
    pub dropout: f64,
    /// Test hook: permutation-equivariance checks disable the encoding.
    pub use_positional_encoding: bool,
}

pub struct TfHeadCache {
    proj_in: Array2<f64>,
    proj_ln_cache: LayerNormCache,
    drop_mask: Option<Array3<f64>>,
    block_caches: Vec<BlockCache>,
    ln_cache: LayerNormCache,
    fc_in: Array2<f64>,
}

impl TransformerHead {
    pub fn new(feature_dim: usize, cfg: &TemporalHeadConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        for _ in 0..cfg.tf_layers {
            blocks.push(EncoderBlock::new(
                cfg.tf_model_dim,
                cfg.tf_heads,
                cfg.tf_ffn_dim,
                rng,
            ));
        }
        TransformerHead {
            proj: Linear::new(feature_dim, cfg.tf_model_dim, rng),
            proj_ln: LayerNorm::new(cfg.tf_model_dim),
            blocks,
            final_ln: LayerNorm::new(cfg.tf_model_dim),
            fc: Linear::new(cfg.tf_model_dim, NUM_CLASSES, rng),
            dropout: cfg.dropout,
            use_positional_encoding: true,
        }
    }

    fn forward(
        &self,
        x: &Array3<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, TfHeadCache) {
        let (b, t, _) = x.dim();
        let proj_in = to_2d(x);
        let (tokens, proj_ln_cache) = self.proj_ln.forward(&self.proj.forward(&proj_in));
        let mut cur = to_3d(tokens, b, t);
        if self.use_positional_encoding {
            let pe = positional_encoding(t, self.proj.dout).expect("even model dim");
            for bi in 0..b {
                let mut slab = cur.index_axis_mut(ndarray::Axis(0), bi);
                slab += &pe;
            }
        }
        let drop_mask = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let m = dropout_mask(cur.raw_dim(), self.dropout, rng);
                cur *= &m;
                Some(m)
            }
            _ => None,
        };
        let mut block_caches = Vec::new();
        for block in &self.blocks {
            let (next, cache) = block.forward(&cur);
            block_caches.push(cache);
            cur = next;
        }
        let (normed, ln_cache) = self.final_ln.forward(&to_2d(&cur));
        let y = self.fc.forward(&normed);
        (
            to_3d(y, b, t),
            TfHeadCache {
                proj_in,
                proj_ln_cache,
                drop_mask,
                block_caches,
                ln_cache,
                fc_in: normed,
            },
        )
    }

    fn backward(&mut self, cache: &TfHeadCache, dy: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = dy.dim();
        let dnormed = self.fc.backward(&cache.fc_in, &to_2d(dy));
        let dcur2 = self.final_ln.backward(&cache.ln_cache, &dnormed);
        let mut dcur = to_3d(dcur2, b, t);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            dcur = block.backward(bc, &dcur);
        }
        if let Some(m) = &cache.drop_mask {
            dcur *= m;
        }
        // positional encoding is an additive constant: gradient passes through
        let dtokens = self.proj_ln.backward(&cache.proj_ln_cache, &to_2d(&dcur));
        let dproj = self.proj.backward(&cache.proj_in, &dtokens);
        to_3d(dproj, b, t)
    }
}

impl Module for TransformerHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.proj_ln.visit_params(&join(prefix, "proj_ln"), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.final_ln.visit_params(&join(prefix, "final_ln"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HeadKind, TemporalHeadConfig};
    use ndarray::{s, Ix1};
    use rand::SeedableRng;

    fn tiny_cfg(kind: HeadKind) -> TemporalHeadConfig {
        TemporalHeadConfig {
            kind,
            gru_layers: 2,
            gru_hidden: 4,
            tf_model_dim: 8,
            tf_heads: 2,
            tf_layers: 2,
            tf_ffn_dim: 8,
            dropout: 0.0,
        }
    }

    #[test]
    fn static_head_zero_features_give_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let h = StaticHead::new(6, &mut rng);
        let x = Array3::zeros((2, 3, 6));
        let (y, _) = h.forward(&x);
        assert_eq!(y.dim(), (2, 3, NUM_CLASSES));
        let bias = h.fc.b.view::<Ix1>();
        for bi in 0..2 {
            for t in 0..3 {
                for c in 0..NUM_CLASSES {
                    assert_eq!(y[[bi, t, c]], bias[c]);
                }
            }
        }
    }

    #[test]
    fn static_head_commutes_with_time_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let h = StaticHead::new(5, &mut rng);
        let x = Array3::from_shape_fn((1, 4, 5), |_| rng.gen_range(-1.0..1.0));
        let perm = [2usize, 0, 3, 1];
        let mut xp = Array3::<f64>::zeros(x.raw_dim());
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![0, dst, ..]).assign(&x.slice(s![0, src, ..]));
        }
        let (y, _) = h.forward(&x);
        let (yp, _) = h.forward(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..NUM_CLASSES {
                assert_eq!(y[[0, src, c]], yp[[0, dst, c]]);
            }
        }
    }

    #[test]
    fn gru_head_shapes_and_causality() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg(HeadKind::Gru);
        let h = GruHead::new(3, &cfg, &mut rng);
        let x = Array3::from_shape_fn((2, 9, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = h.forward(&x, None);
        assert_eq!(y.dim(), (2, 9, NUM_CLASSES));
        let mut x2 = x.clone();
        for k in 0..3 {
            x2[[0, 8, k]] = 5.0;
        }
        let (y2, _) = h.forward(&x2, None);
        for t in 0..8 {
            for c in 0..NUM_CLASSES {
                assert_eq!(y[[0, t, c]], y2[[0, t, c]]);
            }
        }
    }

    #[test]
    fn transformer_head_shape_and_pe_free_equivariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg(HeadKind::Transformer);
        let mut h = TransformerHead::new(5, &cfg, &mut rng);
        let x = Array3::from_shape_fn((1, 9, 5), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = h.forward(&x, None);
        assert_eq!(y.dim(), (1, 9, NUM_CLASSES));

        h.use_positional_encoding = false;
        let perm = [8usize, 3, 0, 5, 1, 7, 2, 6, 4];
        let mut xp = Array3::<f64>::zeros(x.raw_dim());
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![0, dst, ..]).assign(&x.slice(s![0, src, ..]));
        }
        let (y0, _) = h.forward(&x, None);
        let (yp, _) = h.forward(&xp, None);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..NUM_CLASSES {
                assert!((y0[[0, src, c]] - yp[[0, dst, c]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn heads_reject_empty_time_axis() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let h = Head::Gru(GruHead::new(3, &tiny_cfg(HeadKind::Gru), &mut rng));
        let x = Array3::<f64>::zeros((1, 0, 3));
        assert!(h.forward(&x, None).is_err());
    }
}
