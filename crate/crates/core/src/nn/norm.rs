use ndarray::{Array1, Array2, Array4, Axis, Ix1};
use ndarray::{ArrayD, IxDyn};

use super::{join, Module, Param};

/// Batch norm with frozen running statistics (inference-mode normalization).
/// Gamma/beta stay trainable; running mean/var are loaded buffers. Fine-tuning
/// therefore never updates the statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub channels: usize,
}

pub struct BatchNormCache {
    /// Normalized input, needed for dgamma.
    pub xhat: Array4<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            channels,
        }
    }

    fn inv_std(&self) -> Array1<f64> {
        self.running_var
            .view::<Ix1>()
            .mapv(|v| 1.0 / (v + self.eps).sqrt())
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, BatchNormCache) {
        let inv = self.inv_std();
        let mean = self.running_mean.view::<Ix1>();
        let gamma = self.gamma.view::<Ix1>();
        let beta = self.beta.view::<Ix1>();
        let mut xhat = x.clone();
        let mut y = Array4::zeros(x.raw_dim());
        for c in 0..self.channels {
            let mut xc = xhat.index_axis_mut(Axis(1), c);
            xc.mapv_inplace(|v| (v - mean[c]) * inv[c]);
            let mut yc = y.index_axis_mut(Axis(1), c);
            yc.assign(&xc);
            yc.mapv_inplace(|v| v * gamma[c] + beta[c]);
        }
        (y, BatchNormCache { xhat })
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array4<f64>) -> Array4<f64> {
        let inv = self.inv_std();
        let gamma = self.gamma.view::<Ix1>().to_owned();
        let mut dgamma = Array1::<f64>::zeros(self.channels);
        let mut dbeta = Array1::<f64>::zeros(self.channels);
        let mut dx = Array4::zeros(dy.raw_dim());
        for c in 0..self.channels {
            let dyc = dy.index_axis(Axis(1), c);
            let xc = cache.xhat.index_axis(Axis(1), c);
            dgamma[c] = (&dyc * &xc).sum();
            dbeta[c] = dyc.sum();
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            dxc.assign(&dyc);
            dxc.mapv_inplace(|v| v * gamma[c] * inv[c]);
        }
        self.gamma.add_grad(&dgamma);
        self.beta.add_grad(&dbeta);
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.gamma);
        f(join(prefix, "bias"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Layer normalization over the last axis of a (rows, dim) view.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ArrayD::ones(IxDyn(&[dim]))),
            beta: Param::zeros(&[dim]),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.nrows();
        let d = self.dim as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.mapv(|v| (v - mean) * (v - mean)).sum() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = inv;
            let mut out = xhat.row_mut(i);
            out.assign(&row);
            out.mapv_inplace(|v| (v - mean) * inv);
        }
        let gamma = self.gamma.view::<Ix1>();
        let beta = self.beta.view::<Ix1>();
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gamma, |v, g| *v *= g);
            row += &beta;
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = self.dim as f64;
        let gamma = self.gamma.view::<Ix1>().to_owned();
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dyr = dy.row(i);
            let xr = cache.xhat.row(i);
            let dxhat: Array1<f64> = &dyr * &gamma;
            let m1 = dxhat.sum() / d;
            let m2 = (&dxhat * &xr).sum() / d;
            let mut out = dx.row_mut(i);
            for j in 0..self.dim {
                out[j] = cache.inv_std[i] * (dxhat[j] - m1 - xr[j] * m2);
            }
        }
        self.gamma.add_grad(&dgamma);
        self.beta.add_grad(&dbeta);
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.gamma);
        f(join(prefix, "bias"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ln = LayerNorm::new(8);
        let x = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-3.0..3.0));
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean = row.sum() / 8.0;
            let var = row.mapv(|v| (v - mean) * (v - mean)).sum() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut ln = LayerNorm::new(5);
        ln.gamma.value.map_inplace(|v| *v = 1.0 + 0.1 * *v);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-2.0..2.0));
        let loss = |ln: &LayerNorm, x: &Array2<f64>| ln.forward(x).0.mapv(|v| v * v / 2.0).sum();
        let (y, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &y);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let num = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * eps);
                assert!((dx[[i, j]] - num).abs() < 1e-6, "{} vs {num}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn batchnorm_uses_running_stats() {
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean.value[IxDyn(&[0])] = 1.0;
        bn.running_var.value[IxDyn(&[0])] = 4.0;
        let x = Array4::from_elem((1, 2, 2, 2), 3.0);
        let (y, _) = bn.forward(&x);
        // channel 0: (3-1)/2 = 1; channel 1: (3-0)/1 = 3
        assert!((y[[0, 0, 0, 0]] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((y[[0, 1, 0, 0]] - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
