use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;

use super::norm::{LayerNorm, LayerNormCache};
use super::{join, relu, relu_backward, Linear, Module, Param};

pub fn to_2d(x: &Array3<f64>) -> Array2<f64> {
    let (b, t, d) = x.dim();
    x.to_owned().into_shape((b * t, d)).unwrap()
}

pub fn to_3d(x: Array2<f64>, b: usize, t: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape((b, t, d)).unwrap()
}

/// Unmasked multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub model_dim: usize,
    pub heads: usize,
}

pub struct MhaCache {
    pub x2: Array2<f64>,     // (B*T, dm)
    pub q: Array4<f64>,      // (B,H,T,dk)
    pub k: Array4<f64>,
    pub v: Array4<f64>,
    pub attn: Array4<f64>,   // (B,H,T,T)
    pub concat: Array2<f64>, // (B*T, dm)
    pub b: usize,
    pub t: usize,
}

impl MultiHeadAttention {
    pub fn new(model_dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(model_dim % heads == 0, "model_dim must divide by heads");
        MultiHeadAttention {
            wq: Linear::new(model_dim, model_dim, rng),
            wk: Linear::new(model_dim, model_dim, rng),
            wv: Linear::new(model_dim, model_dim, rng),
            wo: Linear::new(model_dim, model_dim, rng),
            model_dim,
            heads,
        }
    }

    fn split_heads(&self, x: &Array2<f64>, b: usize, t: usize) -> Array4<f64> {
        let dk = self.model_dim / self.heads;
        x.to_owned()
            .into_shape((b, t, self.heads, dk))
            .unwrap()
            .permuted_axes([0, 2, 1, 3])
            .as_standard_layout()
            .to_owned()
    }

    fn merge_heads(&self, x: &Array4<f64>) -> Array2<f64> {
        let (b, h, t, dk) = x.dim();
        x.to_owned()
            .permuted_axes([0, 2, 1, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape((b * t, h * dk))
            .unwrap()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, MhaCache) {
        let (b, t, _) = x.dim();
        let dk = self.model_dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let x2 = to_2d(x);
        let q = self.split_heads(&self.wq.forward(&x2), b, t);
        let k = self.split_heads(&self.wk.forward(&x2), b, t);
        let v = self.split_heads(&self.wv.forward(&x2), b, t);

        let mut attn = Array4::<f64>::zeros((b, self.heads, t, t));
        let mut ctx = Array4::<f64>::zeros((b, self.heads, t, dk));
        for bi in 0..b {
            for hi in 0..self.heads {
                let qm = q.slice(s![bi, hi, .., ..]);
                let km = k.slice(s![bi, hi, .., ..]);
                let vm = v.slice(s![bi, hi, .., ..]);
                let mut scores = qm.dot(&km.t());
                scores *= scale;
                crate::math::softmax_rows(&mut scores);
                ctx.slice_mut(s![bi, hi, .., ..]).assign(&scores.dot(&vm));
                attn.slice_mut(s![bi, hi, .., ..]).assign(&scores);
            }
        }
        let concat = self.merge_heads(&ctx);
        let y2 = self.wo.forward(&concat);
        (
            to_3d(y2, b, t),
            MhaCache {
                x2,
                q,
                k,
                v,
                attn,
                concat,
                b,
                t,
            },
        )
    }

    pub fn backward(&mut self, cache: &MhaCache, dy: &Array3<f64>) -> Array3<f64> {
        let (b, t) = (cache.b, cache.t);
        let dk = self.model_dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let dy2 = to_2d(dy);
        let dconcat = self.wo.backward(&cache.concat, &dy2);
        let dctx = self.split_heads(&dconcat, b, t);

        let mut dq = Array4::<f64>::zeros(cache.q.raw_dim());
        let mut dkk = Array4::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array4::<f64>::zeros(cache.v.raw_dim());
        for bi in 0..b {
            for hi in 0..self.heads {
                let a = cache.attn.slice(s![bi, hi, .., ..]);
                let qm = cache.q.slice(s![bi, hi, .., ..]);
                let km = cache.k.slice(s![bi, hi, .., ..]);
                let vm = cache.v.slice(s![bi, hi, .., ..]);
                let dout = dctx.slice(s![bi, hi, .., ..]);

                let da = dout.dot(&vm.t()); // (T,T)
                dv.slice_mut(s![bi, hi, .., ..]).assign(&a.t().dot(&dout));

                // softmax backward, rowwise
                let mut dscores = Array2::<f64>::zeros((t, t));
                for r in 0..t {
                    let arow = a.row(r);
                    let darow = da.row(r);
                    let dot: f64 = arow.iter().zip(darow.iter()).map(|(x, y)| x * y).sum();
                    for c in 0..t {
                        dscores[[r, c]] = arow[c] * (darow[c] - dot);
                    }
                }
                dscores *= scale;
                dq.slice_mut(s![bi, hi, .., ..]).assign(&dscores.dot(&km));
                dkk.slice_mut(s![bi, hi, .., ..])
                    .assign(&dscores.t().dot(&qm));
            }
        }
        let dq2 = self.merge_heads(&dq);
        let dk2 = self.merge_heads(&dkk);
        let dv2 = self.merge_heads(&dv);
        let mut dx2 = self.wq.backward(&cache.x2, &dq2);
        dx2 += &self.wk.backward(&cache.x2, &dk2);
        dx2 += &self.wv.backward(&cache.x2, &dv2);
        to_3d(dx2, b, t)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.wq.visit_params(&join(prefix, "q"), f);
        self.wk.visit_params(&join(prefix, "k"), f);
        self.wv.visit_params(&join(prefix, "v"), f);
        self.wo.visit_params(&join(prefix, "out"), f);
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FfnCache {
    pub x2: Array2<f64>,
    pub h: Array2<f64>, // relu output
}

impl FeedForward {
    pub fn new(model_dim: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            lin1: Linear::new(model_dim, ffn_dim, rng),
            lin2: Linear::new(ffn_dim, model_dim, rng),
        }
    }

    pub fn forward(&self, x2: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let h = relu(&self.lin1.forward(x2));
        let y = self.lin2.forward(&h);
        (
            y,
            FfnCache {
                x2: x2.clone(),
                h,
            },
        )
    }

    pub fn backward(&mut self, cache: &FfnCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.lin2.backward(&cache.h, dy);
        let dpre = relu_backward(&cache.h, &dh);
        self.lin1.backward(&cache.x2, &dpre)
    }
}

impl Module for FeedForward {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.lin1.visit_params(&join(prefix, "lin1"), f);
        self.lin2.visit_params(&join(prefix, "lin2"), f);
    }
}

/// Pre-norm encoder block: x + MHA(LN(x)), then u + FFN(LN(u)).
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub mha: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct BlockCache {
    pub ln1_cache: LayerNormCache,
    pub mha_cache: MhaCache,
    pub ln2_cache: LayerNormCache,
    pub ffn_cache: FfnCache,
    pub b: usize,
    pub t: usize,
}

impl EncoderBlock {
    pub fn new(model_dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(model_dim),
            mha: MultiHeadAttention::new(model_dim, heads, rng),
            ln2: LayerNorm::new(model_dim),
            ffn: FeedForward::new(model_dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
        let (b, t, _) = x.dim();
        let (norm1, ln1_cache) = self.ln1.forward(&to_2d(x));
        let (att, mha_cache) = self.mha.forward(&to_3d(norm1, b, t));
        let u = x + &att;
        let (norm2, ln2_cache) = self.ln2.forward(&to_2d(&u));
        let (ff, ffn_cache) = self.ffn.forward(&norm2);
        let y = &u + &to_3d(ff, b, t);
        (
            y,
            BlockCache {
                ln1_cache,
                mha_cache,
                ln2_cache,
                ffn_cache,
                b,
                t,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array3<f64>) -> Array3<f64> {
        let (b, t) = (cache.b, cache.t);
        let dff = self.ffn.backward(&cache.ffn_cache, &to_2d(dy));
        let dnorm2 = self.ln2.backward(&cache.ln2_cache, &dff);
        let du = dy + &to_3d(dnorm2, b, t);
        let datt = self.mha.backward(&cache.mha_cache, &du);
        let dnorm1 = self.ln1.backward(&cache.ln1_cache, &to_2d(&datt));
        &du + &to_3d(dnorm1, b, t)
    }
}

impl Module for EncoderBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.mha.visit_params(&join(prefix, "attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }
}
