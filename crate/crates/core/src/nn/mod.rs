//! Minimal f64 neural-net layers with explicit forward caches and hand-rolled
//! backward passes. Everything is deterministic given the seeded RNG; no
//! threading, no global state.

pub mod attention;
pub mod conv;
pub mod gru;
pub mod linear;
pub mod norm;
pub mod pe;
pub mod pool;

pub use attention::{EncoderBlock, FeedForward, MultiHeadAttention};
pub use conv::Conv2d;
pub use gru::GruLayer;
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm};
pub use pe::positional_encoding;
pub use pool::{AvgPool2d, GlobalAvgPool, MaxPool2d};

use ndarray::{Array, ArrayD, ArrayView, ArrayViewMut, Dimension, IxDyn};
use rand::Rng;

/// One named parameter array (or non-trainable buffer) with its gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    /// Non-trainable buffer (e.g. batch-norm running statistics).
    pub fn buffer(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform(-bound, bound) init.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::new(Array::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn view<D: Dimension>(&self) -> ArrayView<'_, f64, D> {
        self.value.view().into_dimensionality::<D>().unwrap()
    }

    pub fn grad_mut<D: Dimension>(&mut self) -> ArrayViewMut<'_, f64, D> {
        self.grad.view_mut().into_dimensionality::<D>().unwrap()
    }

    pub fn add_grad<D: Dimension>(&mut self, g: &Array<f64, D>) {
        self.grad += &g.view().into_dyn();
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform access to every parameter of a model, used by the optimizer,
/// serialization, fingerprinting, and finite-difference tests.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// ReLU; the returned copy of the output doubles as the backward mask.
pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverted dropout. `p` is the drop probability; mask entries are
/// 0 or 1/(1-p) so expectations match eval mode.
pub fn dropout_mask<D: Dimension>(
    shape: D,
    p: f64,
    rng: &mut impl Rng,
) -> Array<f64, D> {
    let keep = 1.0 - p;
    Array::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
