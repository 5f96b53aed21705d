use ndarray::{Array1, Array2, Array4, Axis, Ix1};
use rand::Rng;

use super::{join, Module, Param};

/// 2D convolution via im2col + matmul. Weight layout (cout, cin, kh, kw).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    /// (N*OH*OW, cin*k*k)
    pub cols: Array2<f64>,
    pub in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        Conv2d {
            w: Param::uniform(&[cout, cin, kernel, kernel], bound, rng),
            b: if bias {
                Some(Param::uniform(&[cout], bound, rng))
            } else {
                None
            },
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let w_mat = self
            .w
            .value
            .view()
            .into_shape((self.cout, self.cin * self.kernel * self.kernel))
            .unwrap();
        let mut y_mat = cols.dot(&w_mat.t()); // (N*OH*OW, cout)
        if let Some(b) = &self.b {
            y_mat += &b.view::<Ix1>();
        }
        let y = y_mat
            .into_shape((n, oh, ow, self.cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            Conv2dCache {
                cols,
                in_shape: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, _, oh, ow) = dy.dim();
        let dy_mat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape((n * oh * ow, self.cout))
            .unwrap();
        let dw = dy_mat
            .t()
            .dot(&cache.cols)
            .into_shape((self.cout, self.cin, self.kernel, self.kernel))
            .unwrap();
        self.w.add_grad(&dw);
        if let Some(b) = &mut self.b {
            let db: Array1<f64> = dy_mat.sum_axis(Axis(0));
            b.add_grad(&db);
        }
        let w_mat = self
            .w
            .value
            .view()
            .into_shape((self.cout, self.cin * self.kernel * self.kernel))
            .unwrap();
        let dcols = dy_mat.dot(&w_mat);
        col2im(
            &dcols,
            cache.in_shape,
            self.kernel,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(join(prefix, "bias"), b);
        }
    }
}

fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                cols[[row, col]] = x[[ni, ci, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (n, c, h, w) = in_shape;
    let mut dx = Array4::<f64>::zeros(in_shape);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                dx[[ni, ci, iy as usize, ix as usize]] += dcols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}
