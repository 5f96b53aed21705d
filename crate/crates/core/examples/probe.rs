//! scratch probe: head-only training on frozen backbone features,
//! motion-only subset (classes 5/6 -> binary labels 0/1).

use fer_core::dataio::{self, FrameCache, Normalization};
use fer_core::models::heads::{Head, TransformerHead};
use fer_core::models::{ModelBundle, TemporalHeadConfig};
use fer_core::nn::{Module, Param};
use ndarray::{Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let t = 9;
    let anns = dataio::load_annotations(
        std::path::Path::new("/tmp/fer7/motion/annotations"),
        std::path::Path::new("/tmp/fer7/motion/frames"),
    )
    .unwrap();
    let hc = TemporalHeadConfig {
        kind: fer_core::models::HeadKind::Transformer,
        tf_model_dim: 32,
        gru_hidden: 64,
        tf_heads: 4,
        tf_ffn_dim: 64,
        ..Default::default()
    };
    let bundle = ModelBundle::new(Default::default(), hc.clone(), 1).unwrap();
    let mut cache = FrameCache::new("/tmp/fer7/motion/frames", Normalization::default());

    // precompute per-window backbone features
    let mut feats: Vec<Array3<f64>> = Vec::new(); // (1,T,D)
    let mut labels: Vec<usize> = Vec::new();
    for ann in &anns {
        let n = ann.labels.len();
        for start in (0..=n - t).step_by(4) {
            let mut frames = Array4::zeros((t, 3, 112, 112));
            for f in 0..t {
                frames
                    .index_axis_mut(Axis(0), f)
                    .assign(&cache.get(&ann.video_id, start + f).unwrap());
            }
            let mode = std::env::args().nth(1).unwrap_or_default();
            let (f3, _d) = if mode == "conv2" || mode == "never" {
                let tiny = match &bundle.backbone {
                    fer_core::models::backbone::Backbone::Tiny(t) => t,
                    _ => unreachable!(),
                };
                let pooled = tiny.pool.forward(&frames);
                let a1 = fer_core::nn::relu(&tiny.conv1.forward(&pooled).0);
                let a2 = fer_core::nn::relu(&tiny.conv2.forward(&a1).0);
                let flat = a2.into_shape((t, 400)).unwrap();
                let mut f3 = Array3::zeros((1, t, 400));
                f3.index_axis_mut(Axis(0), 0).assign(&flat);
                (f3, 400)
            } else if mode == "profiles" {
                let tiny = match &bundle.backbone {
                    fer_core::models::backbone::Backbone::Tiny(t) => t,
                    _ => unreachable!(),
                };
                let pooled = tiny.pool.forward(&frames); // (T,3,28,28)
                let mut f3 = Array3::zeros((1, t, 56));
                for f in 0..t {
                    for i in 0..28 {
                        let mut col = 0.0;
                        let mut row = 0.0;
                        for c in 0..3 {
                            for j in 0..28 {
                                col += pooled[[f, c, j, i]];
                                row += pooled[[f, c, i, j]];
                            }
                        }
                        f3[[0, f, i]] = col / (3.0 * 28.0);
                        f3[[0, f, 28 + i]] = row / (3.0 * 28.0);
                    }
                }
                (f3, 56)
            } else if mode == "gray14" {
                // grayscale mean over channels of 8x8-avg-pooled input
                let mut f3 = Array3::zeros((1, t, 196));
                for f in 0..t {
                    for gy in 0..14 {
                        for gx in 0..14 {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for yy in 0..8 {
                                    for xx in 0..8 {
                                        acc += frames[[f, c, gy * 8 + yy, gx * 8 + xx]];
                                    }
                                }
                            }
                            f3[[0, f, gy * 14 + gx]] = acc / (3.0 * 64.0);
                        }
                    }
                }
                (f3, 196)
            } else if mode == "pooledrow" {
                let tiny = match &bundle.backbone {
                    fer_core::models::backbone::Backbone::Tiny(t) => t,
                    _ => unreachable!(),
                };
                let pooled = tiny.pool.forward(&frames); // (T,3,28,28)
                let mut f3 = Array3::zeros((1, t, 28));
                for f in 0..t {
                    for xcol in 0..28 {
                        f3[[0, f, xcol]] = pooled[[f, 0, 14, xcol]];
                    }
                }
                (f3, 28)
            } else if mode == "conv1" {
                let tiny = match &bundle.backbone {
                    fer_core::models::backbone::Backbone::Tiny(t) => t,
                    _ => unreachable!(),
                };
                let pooled = tiny.pool.forward(&frames);
                let a1 = fer_core::nn::relu(&tiny.conv1.forward(&pooled).0); // (T,8,12,12)
                let flat = a1.into_shape((t, 8 * 12 * 12)).unwrap();
                let mut f3 = Array3::zeros((1, t, 8 * 12 * 12));
                f3.index_axis_mut(Axis(0), 0).assign(&flat);
                (f3, 8 * 12 * 12)
            } else if mode == "raw" {
                // centre-row pixels, channel 0: localized bump features
                let mut f3 = Array3::zeros((1, t, 112));
                for f in 0..t {
                    for xcol in 0..112 {
                        f3[[0, f, xcol]] = frames[[f, 0, 56, xcol]];
                    }
                }
                (f3, 112)
            } else {
                let feat2 = bundle.backbone.forward(&frames).unwrap().0;
                let d = feat2.ncols();
                let mut f3 = Array3::zeros((1, t, d));
                f3.index_axis_mut(Axis(0), 0).assign(&feat2);
                (f3, d)
            };
            feats.push(f3);
            labels.push(if ann.labels[start] == 5 { 0 } else { 1 });
        }
    }
    if std::env::args().nth(1).as_deref() == Some("fcstd") {
        // per-dim standardization over the dataset
        let d = feats[0].dim().2;
        let n = (feats.len() * t) as f64;
        let mut mu = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for f in &feats {
            for tt in 0..t {
                for k in 0..d {
                    mu[k] += f[[0, tt, k]];
                    sq[k] += f[[0, tt, k]] * f[[0, tt, k]];
                }
            }
        }
        for k in 0..d {
            mu[k] /= n;
            sq[k] = (sq[k] / n - mu[k] * mu[k]).max(1e-12).sqrt();
        }
        for f in feats.iter_mut() {
            for tt in 0..t {
                for k in 0..d {
                    f[[0, tt, k]] = (f[[0, tt, k]] - mu[k]) / sq[k];
                }
            }
        }
    }
    eprintln!("windows: {}", feats.len());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fdim = feats[0].dim().2;
    let mut head = Head::Transformer(TransformerHead::new(fdim, &hc, &mut rng));
    let lr = 0.02;
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    let accum = 8;
    for step in 0..12000 {
        if step % feats.len() == 0 {
            idx.shuffle(&mut rng);
        }
        let i = idx[step % feats.len()];
        let (y, c) = head.forward(&feats[i], None).unwrap();
        // binary CE over classes 0/1 at every position
        let lbl = labels[i];
        let mut dlog = Array3::zeros(y.raw_dim());
        let mut loss = 0.0;
        for tt in 0..t {
            let l0 = y[[0, tt, 0]];
            let l1 = y[[0, tt, 1]];
            let m = l0.max(l1);
            let z = ((l0 - m).exp() + (l1 - m).exp()).ln() + m;
            let p0 = (l0 - z).exp();
            let p1 = (l1 - z).exp();
            loss += if lbl == 0 { -(p0.ln()) } else { -(p1.ln()) };
            dlog[[0, tt, 0]] = (p0 - if lbl == 0 { 1.0 } else { 0.0 }) / t as f64;
            dlog[[0, tt, 1]] = (p1 - if lbl == 1 { 1.0 } else { 0.0 }) / t as f64;
        }
        head.backward(&c, &dlog);
        if step % accum != accum - 1 { continue; }
        head.visit_params("", &mut |_n: String, p: &mut Param| {
            let g = p.grad.mapv(|v| v / accum as f64);
            let mut v = p.value.clone();
            v.scaled_add(-lr, &g);
            p.value = v;
            p.grad.fill(0.0);
        });
        if step % 600 < accum {
            println!("step {step:4} loss {:.4}", loss / t as f64);
        }
    }
}
