use ndarray::{Array2, Array4};

/// Max pooling with padding (padded cells are -inf, never selected).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct MaxPoolCache {
    /// For each output element, the flat input index of its maximum.
    pub argmax: Vec<usize>,
    pub in_shape: (usize, usize, usize, usize),
    pub out_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xs = x.as_slice().expect("contiguous");
        let mut oi = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut besti = 0;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let fi = base + iy as usize * w + ix as usize;
                                if xs[fi] > best {
                                    best = xs[fi];
                                    besti = fi;
                                }
                            }
                        }
                        y[[ni, ci, oy, ox]] = best;
                        argmax[oi] = besti;
                        oi += 1;
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                in_shape: (n, c, h, w),
                out_shape: (n, c, oh, ow),
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let mut dx = Array4::<f64>::zeros(cache.in_shape);
        let dxs = dx.as_slice_mut().unwrap();
        for (dv, &ai) in dy.iter().zip(&cache.argmax) {
            dxs[ai] += dv;
        }
        dx
    }
}

/// Non-overlapping average pooling (kernel == stride), used as a fixed
/// parameter-free downsample.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
}

impl AvgPool2d {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += x[[ni, ci, oy * k + ky, ox * k + kx]];
                            }
                        }
                        y[[ni, ci, oy, ox]] = s * inv;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, in_shape: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
        let k = self.kernel;
        let inv = 1.0 / (k * k) as f64;
        let (_, _, oh, ow) = dy.dim();
        let mut dx = Array4::<f64>::zeros(in_shape);
        for ni in 0..in_shape.0 {
            for ci in 0..in_shape.1 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[[ni, ci, oy, ox]] * inv;
                        for ky in 0..k {
                            for kx in 0..k {
                                dx[[ni, ci, oy * k + ky, ox * k + kx]] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial axes: (N,C,H,W) -> (N,C).
#[derive(Debug, Clone)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(&self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let inv = 1.0 / (h * w) as f64;
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += x[[ni, ci, hi, wi]];
                    }
                }
                y[[ni, ci]] = s * inv;
            }
        }
        y
    }

    pub fn backward(
        &self,
        in_shape: (usize, usize, usize, usize),
        dy: &Array2<f64>,
    ) -> Array4<f64> {
        let (_, _, h, w) = in_shape;
        let inv = 1.0 / (h * w) as f64;
        let mut dx = Array4::<f64>::zeros(in_shape);
        for ni in 0..in_shape.0 {
            for ci in 0..in_shape.1 {
                let g = dy[[ni, ci]] * inv;
                dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
            }
        }
        dx
    }
}
