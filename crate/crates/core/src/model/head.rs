//! The fixed dense classification head.
//!
//! The first dense layer runs independently at every spatial position of the
//! backbone feature map (it acts on the channel axis only); the result is then
//! flattened in row-major `(h, w, units)` order and fed to the remaining dense
//! layers.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureShape, ParamStore};
use crate::train::math::{relu, softmax_rows};

pub const DEFAULT_WIDTHS: [usize; 3] = [512, 256, 128];
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub widths: [usize; 3],
    pub classes: usize,
    pub dropout_rate: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self::new(10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadLayer {
    /// `positionwise` dense layers act on the channel axis of an unflattened map.
    Dense {
        units: usize,
        activation: Activation,
        positionwise: bool,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl fmt::Display for HeadLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadLayer::Dense { units, activation, .. } => write!(f, "Dense({units}, {activation:?})"),
            HeadLayer::Dropout { rate } => write!(f, "Dropout({rate})"),
            HeadLayer::Flatten => write!(f, "Flatten"),
        }
    }
}

impl HeadSpec {
    pub fn new(classes: usize) -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            classes,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "head widths {:?} and class count {} must be positive",
                self.widths, self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<HeadLayer> {
        let [a, b, c] = self.widths;
        let dropout = HeadLayer::Dropout {
            rate: self.dropout_rate,
        };
        let dense = |units, activation| HeadLayer::Dense {
            units,
            activation,
            positionwise: false,
        };
        vec![
            HeadLayer::Dense {
                units: a,
                activation: Activation::Relu,
                positionwise: true,
            },
            dropout,
            HeadLayer::Flatten,
            dense(b, Activation::Relu),
            dropout,
            dense(c, Activation::Relu),
            dropout,
            dense(self.classes, Activation::Softmax),
        ]
    }

    /// `(fan_in, fan_out)` of the four dense kernels over a given feature map.
    pub fn kernel_shapes(&self, features: FeatureShape) -> [(usize, usize); 4] {
        let [a, b, c] = self.widths;
        [
            (features.channels, a),
            (features.positions() * a, b),
            (b, c),
            (c, self.classes),
        ]
    }

    pub fn param_count(&self, features: FeatureShape) -> usize {
        self.kernel_shapes(features).iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            kernel: Array2::zeros(self.kernel.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.kernel) + &self.bias
    }
}

/// Keras layer names for the four dense layers, used as checkpoint keys.
pub const LAYER_NAMES: [&str; 4] = ["dense", "dense_1", "dense_2", "dense_3"];

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    spec: HeadSpec,
    input: FeatureShape,
    layers: [Dense; 4],
}

/// Gradients with the same layout as the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub layers: [Dense; 4],
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    // post-ReLU, post-dropout activations of the three hidden layers
    hidden: [Array2<f64>; 3],
    masks: [Option<Array2<f64>>; 3],
    pub probs: Array2<f64>,
}

impl Head {
    /// Glorot-uniform kernels and zero biases.
    pub fn init<R: Rng>(spec: HeadSpec, input: FeatureShape, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec.kernel_shapes(input).map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            Dense {
                kernel: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
                bias: Array1::zeros(fan_out),
            }
        });
        Ok(Self { spec, input, layers })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let spec = self.spec.clone().with_dropout(rate);
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn layers(&self) -> &[Dense; 4] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense; 4] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|d| d.kernel.len() + d.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input.len() {
            return Err(Error::Shape(format!(
                "head expects flattened {} features ({}), got {}",
                self.input,
                self.input.len(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Position-wise first layer: `(n, P*c)` -> `(n, P*units)`.
    fn first_layer(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let p = self.input.positions();
        let per_position = x
            .as_standard_layout()
            .into_owned()
            .into_shape((n * p, self.input.channels))
            .expect("contiguous reshape");
        let z = relu(&self.layers[0].apply(&per_position));
        let units = z.ncols();
        z.into_shape((n, p * units)).expect("contiguous reshape")
    }

    /// Inference-mode logits for flattened features `(n, h*w*c)`.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&features)?;
        let mut h = self.first_layer(&features);
        for layer in &self.layers[1..3] {
            h = relu(&layer.apply(&h));
        }
        Ok(self.layers[3].apply(&h))
    }

    pub fn probabilities(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        softmax_rows(&self.logits(features)?)
    }

    /// Forward pass that keeps what [`Head::backward`] needs. Dropout masks are
    /// drawn from `rng` when given; `None` runs in inference mode.
    pub fn forward_cached<R: Rng>(&self, features: ArrayView2<f64>, mut rng: Option<&mut R>) -> Result<HeadCache> {
        self.check_input(&features)?;
        let rate = self.spec.dropout_rate;
        let mut dropout = |h: Array2<f64>| -> Result<(Array2<f64>, Option<Array2<f64>>)> {
            match rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = Bernoulli::new(1.0 - rate).map_err(|e| Error::Config(e.to_string()))?;
                    let scale = 1.0 / (1.0 - rate);
                    let mask = Array2::from_shape_simple_fn(h.raw_dim(), || if keep.sample(rng) { scale } else { 0.0 });
                    Ok((h * &mask, Some(mask)))
                }
                _ => Ok((h, None)),
            }
        };
        let (h1, m1) = dropout(self.first_layer(&features))?;
        let (h2, m2) = dropout(relu(&self.layers[1].apply(&h1)))?;
        let (h3, m3) = dropout(relu(&self.layers[2].apply(&h2)))?;
        let probs = softmax_rows(&self.layers[3].apply(&h3))?;
        Ok(HeadCache {
            input: features.to_owned(),
            hidden: [h1, h2, h3],
            masks: [m1, m2, m3],
            probs,
        })
    }

    /// Backpropagates `grad_logits` (n, K). Returns parameter gradients and,
    /// when `want_input` is set, the gradient on the flattened features.
    pub fn backward(
        &self,
        cache: &HeadCache,
        grad_logits: &Array2<f64>,
        want_input: bool,
    ) -> (HeadGrads, Option<Array2<f64>>) {
        let n = cache.input.nrows();
        let p = self.input.positions();
        let mut grads = HeadGrads {
            layers: self.layers.clone().map(|d| d.zeros_like()),
        };

        let mut g = grad_logits.clone();
        for i in (1..4).rev() {
            let below = &cache.hidden[i - 1];
            grads.layers[i].kernel = below.t().dot(&g);
            grads.layers[i].bias = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[i].kernel.t());
            relu_dropout_backward(&mut g, below, cache.masks[i - 1].as_ref());
        }

        // g is now d loss / d z1, laid out (n, P*units); undo the flattening
        let units = self.spec.widths[0];
        let g1 = g.into_shape((n * p, units)).expect("contiguous reshape");
        let x = cache
            .input
            .as_standard_layout()
            .into_owned()
            .into_shape((n * p, self.input.channels))
            .expect("contiguous reshape");
        grads.layers[0].kernel = x.t().dot(&g1);
        grads.layers[0].bias = g1.sum_axis(Axis(0));
        let input_grad = want_input.then(|| self.unflatten_input_grad(&g1, n));
        (grads, input_grad)
    }

    /// Gradient on the flattened features only, skipping parameter gradients.
    pub fn input_gradient(&self, cache: &HeadCache, grad_logits: &Array2<f64>) -> Array2<f64> {
        let n = cache.input.nrows();
        let mut g = grad_logits.clone();
        for i in (1..4).rev() {
            g = g.dot(&self.layers[i].kernel.t());
            relu_dropout_backward(&mut g, &cache.hidden[i - 1], cache.masks[i - 1].as_ref());
        }
        let g1 = g
            .into_shape((n * self.input.positions(), self.spec.widths[0]))
            .expect("contiguous reshape");
        self.unflatten_input_grad(&g1, n)
    }

    fn unflatten_input_grad(&self, g1: &Array2<f64>, n: usize) -> Array2<f64> {
        g1.dot(&self.layers[0].kernel.t())
            .into_shape((n, self.input.positions() * self.input.channels))
            .expect("contiguous reshape")
    }

    pub fn to_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, d) in LAYER_NAMES.iter().zip(&self.layers) {
            store.insert(format!("{name}/kernel"), d.kernel.clone().into_dyn());
            store.insert(format!("{name}/bias"), d.bias.clone().into_dyn());
        }
        store
    }

    pub fn from_params(spec: HeadSpec, input: FeatureShape, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.kernel_shapes(input);
        let mut layers = Vec::with_capacity(4);
        for (name, (fan_in, fan_out)) in LAYER_NAMES.iter().zip(shapes) {
            let kernel = store.require(&format!("{name}/kernel"), &[fan_in, fan_out])?;
            let bias = store.require(&format!("{name}/bias"), &[fan_out])?;
            layers.push(Dense {
                kernel: kernel.clone().into_dimensionality().expect("shape checked"),
                bias: bias.clone().into_dimensionality().expect("shape checked"),
            });
        }
        let layers: [Dense; 4] = layers.try_into().expect("four layers");
        Ok(Self { spec, input, layers })
    }
}

/// In-place chain rule through `h = dropout(relu(z))`, given the stored `h`.
fn relu_dropout_backward(g: &mut Array2<f64>, h: &Array2<f64>, mask: Option<&Array2<f64>>) {
    match mask {
        // a kept unit with h > 0 had z > 0; a dropped unit has mask 0
        Some(mask) => ndarray::Zip::from(g).and(h).and(mask).for_each(|g, &h, &m| {
            *g = if h > 0.0 { *g * m } else { 0.0 };
        }),
        None => ndarray::Zip::from(g).and(h).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        }),
    }
}
