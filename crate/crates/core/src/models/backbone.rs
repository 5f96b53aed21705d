//! Frame-wise feature extractors. The `tiny` backbone keeps coarse spatial
//! layout in its features (flatten instead of global pooling) so temporal
//! heads can read object position; the `resnet50` backbone is the full-scale
//! configuration and consumes externally pretrained weights.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::dataio::FRAME_SIZE;
use crate::error::{FerError, Result};
use crate::nn::{relu, relu_backward, AvgPool2d, Conv2d, Linear, Module, Param};

use super::resnet::{ResNet50, ResNetCache};

pub const TINY_FEATURE_DIM: usize = 128;
pub const RESNET50_FEATURE_DIM: usize = 2048;

pub enum Backbone {
    Tiny(TinyCnn),
    ResNet50(Box<ResNet50>),
}

pub enum BackboneCache {
    Tiny(TinyCache),
    ResNet50(Box<ResNetCache>),
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Tiny(_) => TINY_FEATURE_DIM,
            Backbone::ResNet50(_) => RESNET50_FEATURE_DIM,
        }
    }

    pub fn forward(&self, frames: &Array4<f64>) -> Result<(Array2<f64>, BackboneCache)> {
        let (_, c, h, w) = frames.dim();
        if c != 3 || h != FRAME_SIZE || w != FRAME_SIZE {
            return Err(FerError::InvalidInput(format!(
                "backbone expects (N,3,{FRAME_SIZE},{FRAME_SIZE}) frames, got (.,{c},{h},{w})"
            )));
        }
        match self {
            Backbone::Tiny(m) => {
                let (y, cache) = m.forward(frames);
                Ok((y, BackboneCache::Tiny(cache)))
            }
            Backbone::ResNet50(m) => {
                let (y, cache) = m.forward(frames);
                Ok((y, BackboneCache::ResNet50(Box::new(cache))))
            }
        }
    }

    /// Accumulate parameter gradients from feature gradients.
    pub fn backward(&mut self, cache: &BackboneCache, dfeat: &Array2<f64>) {
        match (self, cache) {
            (Backbone::Tiny(m), BackboneCache::Tiny(c)) => m.backward(c, dfeat),
            (Backbone::ResNet50(m), BackboneCache::ResNet50(c)) => m.backward(c, dfeat),
            _ => panic!("backbone/cache mismatch"),
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Backbone::Tiny(m) => m.visit_params(prefix, f),
            Backbone::ResNet50(m) => m.visit_params(prefix, f),
        }
    }
}

/// Small strided CNN for desk-scale runs: fixed 4x4 average downsample, two
/// strided convolutions, then a flatten + linear to 128 features.
pub struct TinyCnn {
    pub pool: AvgPool2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
}

pub struct TinyCache {
    pooled_shape: (usize, usize, usize, usize),
    c1: crate::nn::conv::Conv2dCache,
    a1: Array4<f64>,
    c2: crate::nn::conv::Conv2dCache,
    a2: Array4<f64>,
    flat: Array2<f64>,
}

impl TinyCnn {
    pub fn new(rng: &mut impl Rng) -> Self {
        TinyCnn {
            pool: AvgPool2d { kernel: 4 },
            conv1: Conv2d::new(3, 8, 5, 2, 0, true, rng),
            conv2: Conv2d::new(8, 16, 3, 2, 0, true, rng),
            fc: Linear::new(16 * 5 * 5, TINY_FEATURE_DIM, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, TinyCache) {
        let n = x.dim().0;
        let pooled = self.pool.forward(x); // (N,3,28,28)
        let (y1, c1) = self.conv1.forward(&pooled); // (N,8,12,12)
        let a1 = relu(&y1);
        let (y2, c2) = self.conv2.forward(&a1); // (N,16,5,5)
        let a2 = relu(&y2);
        let flat = a2
            .to_owned()
            .into_shape((n, 16 * 5 * 5))
            .unwrap();
        let feat = self.fc.forward(&flat);
        (
            feat,
            TinyCache {
                pooled_shape: pooled.dim(),
                c1,
                a1,
                c2,
                a2,
                flat,
            },
        )
    }

    pub fn backward(&mut self, cache: &TinyCache, dfeat: &Array2<f64>) {
        let n = dfeat.nrows();
        let dflat = self.fc.backward(&cache.flat, dfeat);
        let da2 = dflat.into_shape((n, 16, 5, 5)).unwrap();
        let dy2 = relu_backward(&cache.a2, &da2);
        let da1 = self.conv2.backward(&cache.c2, &dy2);
        let dy1 = relu_backward(&cache.a1, &da1);
        let dpooled = self.conv1.backward(&cache.c1, &dy1);
        // pool has no params; dx below the pool is discarded (input layer)
        let _ = self.pool.backward(
            (
                cache.pooled_shape.0,
                cache.pooled_shape.1,
                cache.pooled_shape.2 * 4,
                cache.pooled_shape.3 * 4,
            ),
            &dpooled,
        );
    }
}

impl Module for TinyCnn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&crate::nn::join(prefix, "conv1"), f);
        self.conv2.visit_params(&crate::nn::join(prefix, "conv2"), f);
        self.fc.visit_params(&crate::nn::join(prefix, "fc"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tiny_backbone_shape_and_framewise_independence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = TinyCnn::new(&mut rng);
        let mut x = Array4::from_shape_fn((3, 3, 112, 112), |_| rng.gen_range(-1.0..1.0));
        // duplicate frame 0 into frame 2
        let f0 = x.index_axis(ndarray::Axis(0), 0).to_owned();
        x.index_axis_mut(ndarray::Axis(0), 2).assign(&f0);
        let (y, _) = m.forward(&x);
        assert_eq!(y.dim(), (3, TINY_FEATURE_DIM));
        for d in 0..TINY_FEATURE_DIM {
            assert_eq!(y[[0, d]], y[[2, d]]);
        }
    }

    #[test]
    fn tiny_backbone_deterministic_given_seed() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m1 = TinyCnn::new(&mut r1);
        let m2 = TinyCnn::new(&mut r2);
        let x = Array4::from_shape_fn((1, 3, 112, 112), |_| 0.3);
        let (y1, _) = m1.forward(&x);
        let (y2, _) = m2.forward(&x);
        assert_eq!(y1, y2);
    }

    #[test]
    fn backbone_rejects_wrong_spatial_size() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::Tiny(TinyCnn::new(&mut rng));
        let x = Array4::<f64>::zeros((1, 3, 64, 64));
        assert!(b.forward(&x).is_err());
    }
}
