//! ResNet-50 feature extractor (bottleneck blocks, frozen-stat batch norm).
//! Parameter names follow the conventional `layer{i}.{j}.conv{k}.weight`
//! scheme so converted pretrained weight files line up by name. The final
//! classifier is not part of the backbone; heads own their own classifiers.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::nn::conv::Conv2dCache;
use crate::nn::norm::BatchNormCache;
use crate::nn::pool::MaxPoolCache;
use crate::nn::{
    join, relu, relu_backward, BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, Module, Param,
};

pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

pub struct BottleneckCache {
    c1: Conv2dCache,
    b1: BatchNormCache,
    a1: Array4<f64>,
    c2: Conv2dCache,
    b2: BatchNormCache,
    a2: Array4<f64>,
    c3: Conv2dCache,
    b3: BatchNormCache,
    ds: Option<(Conv2dCache, BatchNormCache)>,
    out: Array4<f64>,
}

impl Bottleneck {
    fn new(cin: usize, mid: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(cout),
            ))
        } else {
            None
        };
        Bottleneck {
            conv1: Conv2d::new(cin, mid, 1, 1, 0, false, rng),
            bn1: BatchNorm2d::new(mid),
            conv2: Conv2d::new(mid, mid, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(mid),
            conv3: Conv2d::new(mid, cout, 1, 1, 0, false, rng),
            bn3: BatchNorm2d::new(cout),
            downsample,
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, BottleneckCache) {
        let (y1, c1) = self.conv1.forward(x);
        let (n1, b1) = self.bn1.forward(&y1);
        let a1 = relu(&n1);
        let (y2, c2) = self.conv2.forward(&a1);
        let (n2, b2) = self.bn2.forward(&y2);
        let a2 = relu(&n2);
        let (y3, c3) = self.conv3.forward(&a2);
        let (n3, b3) = self.bn3.forward(&y3);
        let (identity, ds) = match &self.downsample {
            Some((conv, bn)) => {
                let (d1, dc) = conv.forward(x);
                let (d2, dbc) = bn.forward(&d1);
                (d2, Some((dc, dbc)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(&n3 + &identity));
        (
            out.clone(),
            BottleneckCache {
                c1,
                b1,
                a1,
                c2,
                b2,
                a2,
                c3,
                b3,
                ds,
                out,
            },
        )
    }

    fn backward(&mut self, cache: &BottleneckCache, dout: &Array4<f64>) -> Array4<f64> {
        let dz = relu_backward(&cache.out, dout);
        let dn3 = self.bn3.backward(&cache.b3, &dz);
        let da2 = self.conv3.backward(&cache.c3, &dn3);
        let dy2 = relu_backward(&cache.a2, &da2);
        let dn2 = self.bn2.backward(&cache.b2, &dy2);
        let da1 = self.conv2.backward(&cache.c2, &dn2);
        let dy1 = relu_backward(&cache.a1, &da1);
        let dn1 = self.bn1.backward(&cache.b1, &dy1);
        let mut dx = self.conv1.backward(&cache.c1, &dn1);
        match (&mut self.downsample, &cache.ds) {
            (Some((conv, bn)), Some((dc, dbc))) => {
                let dident = bn.backward(dbc, &dz);
                dx += &conv.backward(dc, &dident);
            }
            (None, None) => dx += &dz,
            _ => unreachable!(),
        }
        dx
    }
}

impl Module for Bottleneck {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.bn3.visit_params(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(&join(prefix, "downsample.0"), f);
            bn.visit_params(&join(prefix, "downsample.1"), f);
        }
    }
}

pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    maxpool: MaxPool2d,
    stages: Vec<Vec<Bottleneck>>,
    gap: GlobalAvgPool,
}

pub struct ResNetCache {
    c1: Conv2dCache,
    b1: BatchNormCache,
    a1: Array4<f64>,
    mp: MaxPoolCache,
    blocks: Vec<Vec<BottleneckCache>>,
    gap_in_shape: (usize, usize, usize, usize),
}

impl ResNet50 {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = 64;
        for (mid, cout, blocks, stride) in
            [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2)]
        {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(cin, mid, cout, s, rng));
                cin = cout;
            }
            stages.push(stage);
        }
        ResNet50 {
            conv1: Conv2d::new(3, 64, 7, 2, 3, false, rng),
            bn1: BatchNorm2d::new(64),
            maxpool: MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            stages,
            gap: GlobalAvgPool,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, ResNetCache) {
        let (y1, c1) = self.conv1.forward(x);
        let (n1, b1) = self.bn1.forward(&y1);
        let a1 = relu(&n1);
        let (mut cur, mp) = self.maxpool.forward(&a1);
        let mut blocks = Vec::new();
        for stage in &self.stages {
            let mut stage_caches = Vec::new();
            for block in stage {
                let (next, cache) = block.forward(&cur);
                stage_caches.push(cache);
                cur = next;
            }
            blocks.push(stage_caches);
        }
        let gap_in_shape = cur.dim();
        let feat = self.gap.forward(&cur);
        (
            feat,
            ResNetCache {
                c1,
                b1,
                a1,
                mp,
                blocks,
                gap_in_shape,
            },
        )
    }

    pub fn backward(&mut self, cache: &ResNetCache, dfeat: &Array2<f64>) {
        let mut dcur = self.gap.backward(cache.gap_in_shape, dfeat);
        for (stage, stage_caches) in self.stages.iter_mut().zip(&cache.blocks).rev() {
            for (block, bc) in stage.iter_mut().zip(stage_caches).rev() {
                dcur = block.backward(bc, &dcur);
            }
        }
        let da1 = self.maxpool.backward(&cache.mp, &dcur);
        let dy1 = relu_backward(&cache.a1, &da1);
        let dn1 = self.bn1.backward(&cache.b1, &dy1);
        let _ = self.conv1.backward(&cache.c1, &dn1);
    }
}

impl Module for ResNet50 {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }
}
