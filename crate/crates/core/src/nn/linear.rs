use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Module, Param};

/// Affine map y = x W + b with W: (din, dout).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        Linear {
            w: Param::uniform(&[din, dout], bound, rng),
            b: Param::uniform(&[dout], bound, rng),
            din,
            dout,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view::<Ix2>());
        y += &self.b.view::<Ix1>();
        y
    }

    /// Accumulates parameter grads; returns dx.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw: Array2<f64> = x.t().dot(dy);
        let db: Array1<f64> = dy.sum_axis(Axis(0));
        self.w.add_grad(&dw);
        self.b.add_grad(&db);
        dy.dot(&self.w.view::<Ix2>().t())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.w);
        f(join(prefix, "bias"), &mut self.b);
    }
}
