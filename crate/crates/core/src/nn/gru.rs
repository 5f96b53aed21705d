use ndarray::{s, Array1, Array2, Array3, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, sigmoid, Module, Param};

/// One unidirectional GRU layer. Gate weights are packed column-wise in the
/// order [reset | update | candidate]:
///   r_t = sigma(x_t W_ir + h_{t-1} W_hr + b_ir + b_hr)
///   z_t = sigma(x_t W_iz + h_{t-1} W_hz + b_iz + b_hz)
///   n_t = tanh(x_t W_in + b_in + r_t * (h_{t-1} W_hn + b_hn))
///   h_t = (1 - z_t) * n_t + z_t * h_{t-1}
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub w_ih: Param, // (din, 3h)
    pub w_hh: Param, // (h, 3h)
    pub b_ih: Param, // (3h)
    pub b_hh: Param, // (3h)
    pub din: usize,
    pub hidden: usize,
}

pub struct GruCache {
    pub x: Array3<f64>,      // (B,T,din)
    pub hs: Array3<f64>,     // (B,T+1,h) with hs[:,0,:] = 0
    pub r: Array3<f64>,      // (B,T,h)
    pub z: Array3<f64>,      // (B,T,h)
    pub n: Array3<f64>,      // (B,T,h)
    pub gh_n: Array3<f64>,   // (B,T,h): h_{t-1} W_hn + b_hn before gating
}

impl GruLayer {
    pub fn new(din: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        GruLayer {
            w_ih: Param::uniform(&[din, 3 * hidden], bound, rng),
            w_hh: Param::uniform(&[hidden, 3 * hidden], bound, rng),
            b_ih: Param::uniform(&[3 * hidden], bound, rng),
            b_hh: Param::uniform(&[3 * hidden], bound, rng),
            din,
            hidden,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GruCache) {
        let (b, t, _) = x.dim();
        let h = self.hidden;
        let w_ih = self.w_ih.view::<Ix2>();
        let w_hh = self.w_hh.view::<Ix2>();
        let b_ih = self.b_ih.view::<Ix1>();
        let b_hh = self.b_hh.view::<Ix1>();

        let mut hs = Array3::<f64>::zeros((b, t + 1, h));
        let mut rr = Array3::<f64>::zeros((b, t, h));
        let mut zz = Array3::<f64>::zeros((b, t, h));
        let mut nn = Array3::<f64>::zeros((b, t, h));
        let mut gh_n = Array3::<f64>::zeros((b, t, h));

        for ti in 0..t {
            let xt = x.slice(s![.., ti, ..]);
            let h_prev = hs.slice(s![.., ti, ..]).to_owned();
            let mut gi = xt.dot(&w_ih); // (B,3h)
            gi += &b_ih;
            let mut gh = h_prev.dot(&w_hh);
            gh += &b_hh;
            for bi in 0..b {
                for j in 0..h {
                    let r = sigmoid(gi[[bi, j]] + gh[[bi, j]]);
                    let z = sigmoid(gi[[bi, h + j]] + gh[[bi, h + j]]);
                    let ghn = gh[[bi, 2 * h + j]];
                    let n = (gi[[bi, 2 * h + j]] + r * ghn).tanh();
                    let ht = (1.0 - z) * n + z * h_prev[[bi, j]];
                    rr[[bi, ti, j]] = r;
                    zz[[bi, ti, j]] = z;
                    nn[[bi, ti, j]] = n;
                    gh_n[[bi, ti, j]] = ghn;
                    hs[[bi, ti + 1, j]] = ht;
                }
            }
        }
        let out = hs.slice(s![.., 1.., ..]).to_owned();
        (
            out,
            GruCache {
                x: x.clone(),
                hs,
                r: rr,
                z: zz,
                n: nn,
                gh_n,
            },
        )
    }

    /// BPTT. `d_out` is the gradient w.r.t. every timestep output.
    pub fn backward(&mut self, cache: &GruCache, d_out: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = cache.x.dim();
        let h = self.hidden;
        let w_ih = self.w_ih.view::<Ix2>().to_owned();
        let w_hh = self.w_hh.view::<Ix2>().to_owned();

        let mut dx = Array3::<f64>::zeros(cache.x.raw_dim());
        let mut dw_ih = Array2::<f64>::zeros((self.din, 3 * h));
        let mut dw_hh = Array2::<f64>::zeros((h, 3 * h));
        let mut db_ih = Array1::<f64>::zeros(3 * h);
        let mut db_hh = Array1::<f64>::zeros(3 * h);
        let mut dh_carry = Array2::<f64>::zeros((b, h));

        for ti in (0..t).rev() {
            let mut dh = d_out.slice(s![.., ti, ..]).to_owned();
            dh += &dh_carry;
            let h_prev = cache.hs.slice(s![.., ti, ..]);

            let mut dgi = Array2::<f64>::zeros((b, 3 * h));
            let mut dgh = Array2::<f64>::zeros((b, 3 * h));
            let mut dh_prev_direct = Array2::<f64>::zeros((b, h));
            for bi in 0..b {
                for j in 0..h {
                    let r = cache.r[[bi, ti, j]];
                    let z = cache.z[[bi, ti, j]];
                    let n = cache.n[[bi, ti, j]];
                    let ghn = cache.gh_n[[bi, ti, j]];
                    let g = dh[[bi, j]];

                    let dz = g * (h_prev[[bi, j]] - n) * z * (1.0 - z);
                    let dn = g * (1.0 - z) * (1.0 - n * n);
                    let dr = dn * ghn * r * (1.0 - r);

                    dgi[[bi, j]] = dr;
                    dgi[[bi, h + j]] = dz;
                    dgi[[bi, 2 * h + j]] = dn;
                    dgh[[bi, j]] = dr;
                    dgh[[bi, h + j]] = dz;
                    dgh[[bi, 2 * h + j]] = dn * r;
                    dh_prev_direct[[bi, j]] = g * z;
                }
            }
            let xt = cache.x.slice(s![.., ti, ..]);
            dw_ih += &xt.t().dot(&dgi);
            dw_hh += &h_prev.t().dot(&dgh);
            db_ih += &dgi.sum_axis(Axis(0));
            db_hh += &dgh.sum_axis(Axis(0));
            dx.slice_mut(s![.., ti, ..]).assign(&dgi.dot(&w_ih.t()));
            dh_carry = dh_prev_direct + dgh.dot(&w_hh.t());
        }
        self.w_ih.add_grad(&dw_ih);
        self.w_hh.add_grad(&dw_hh);
        self.b_ih.add_grad(&db_ih);
        self.b_hh.add_grad(&db_hh);
        dx
    }
}

impl Module for GruLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight_ih"), &mut self.w_ih);
        f(join(prefix, "weight_hh"), &mut self.w_hh);
        f(join(prefix, "bias_ih"), &mut self.b_ih);
        f(join(prefix, "bias_hh"), &mut self.b_hh);
    }
}
