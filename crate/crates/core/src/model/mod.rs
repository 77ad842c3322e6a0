//! Multilayer perceptron regressor with grouped outputs: per landmark, its
//! coordinates and one extra neuron estimating that landmark's inaccuracy.
//!
//! Forward and backward passes are written out by hand over `ndarray`; the
//! network is generic over `f32` (training) and `f64` (gradient checks).

mod checkpoint;
mod layout;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_BIN, CHECKPOINT_JSON};
pub use layout::{Group, GroupLayout, Role, Slot};

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RasterGrid;
use crate::synthdata::{LandmarkCounts, Sample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("forward trace was already consumed by a backward pass")]
    TraceReused,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub trait Scalar:
    LinalgScalar + Float + std::ops::AddAssign + std::ops::SubAssign + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("f64 converts to every scalar type")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InaccuracyActivation {
    Softplus,
    Identity,
}

impl std::str::FromStr for InaccuracyActivation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softplus" => Ok(InaccuracyActivation::Softplus),
            "identity" => Ok(InaccuracyActivation::Identity),
            other => Err(format!("unknown inaccuracy activation '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: RasterGrid,
    pub hidden: Vec<usize>,
    pub layout: GroupLayout,
    pub inaccuracy_activation: InaccuracyActivation,
}

impl ModelConfig {
    /// Two tanh layers of width 256 over the rendered image.
    pub fn for_dataset(counts: &LandmarkCounts, input: RasterGrid) -> Self {
        ModelConfig {
            input,
            hidden: vec![256, 256],
            layout: GroupLayout::for_counts(counts),
            inaccuracy_activation: InaccuracyActivation::Softplus,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.pixel_count()
    }

    pub fn output_dim(&self) -> usize {
        self.layout.total_outputs()
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.output_dim());
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(ModelError::InvalidArgument("hidden layers need positive width".into()));
        }
        if self.input_dim() == 0 || self.output_dim() == 0 {
            return Err(ModelError::InvalidArgument("empty input or output".into()));
        }
        Ok(())
    }
}

/// Dense layer computing `x · w + b`; `w` is `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regressor<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

/// Parameter gradients, shaped like [`Regressor::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Layer<T>>,
}

/// Cached activations of one forward pass, consumed by one backward pass.
#[derive(Debug)]
pub struct ForwardTrace<T> {
    /// Layer inputs: the network input followed by each hidden activation.
    inputs: Vec<Array2<T>>,
    output_pre: Array2<T>,
    consumed: bool,
}

impl<T> ForwardTrace<T> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Scalar> Regressor<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer { w: Array2::zeros((i, o)), b: Array1::zeros(o) })
            .collect();
        Ok(Regressor { config, layers })
    }

    /// Glorot-uniform hidden layers. The output layer starts small, with
    /// coordinate biases at the frame center and inaccuracy biases at a small
    /// positive error.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = model.layers.len() - 1;
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = layer.w.dim();
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if k == last {
                limit *= 0.1;
            }
            layer.w.mapv_inplace(|_| cast(rng.random_range(-limit..=limit)));
        }
        let layout = model.config.layout.clone();
        let inacc_bias = match model.config.inaccuracy_activation {
            InaccuracyActivation::Softplus => softplus_inverse(0.01),
            InaccuracyActivation::Identity => 0.01,
        };
        for (i, b) in model.layers[last].b.iter_mut().enumerate() {
            *b = cast(if layout.is_inaccuracy(i) { inacc_bias } else { 0.5 });
        }
        Ok(model)
    }

    /// Sets the coordinate biases of the output layer, e.g. to the mean
    /// training landmarks. `coords` lists all coordinates in layout order.
    pub fn set_coordinate_bias(&mut self, coords: &[f64]) -> Result<()> {
        let layout = &self.config.layout;
        if coords.len() != layout.group_count() * layout.group_size {
            return Err(ModelError::InvalidArgument("coordinate bias length mismatch".into()));
        }
        let b = &mut self.layers.last_mut().expect("at least one layer").b;
        let mut it = coords.iter();
        for (i, v) in b.iter_mut().enumerate() {
            if !layout.is_inaccuracy(i) {
                *v = cast(*it.next().expect("length checked"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters in a fixed order: per layer, `w` row-major then `b`.
    pub fn params_flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(ModelError::InvalidArgument("parameter count mismatch".into()));
        }
        let mut it = values.iter();
        for layer in self.layers.iter_mut() {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Mutable parameter slices in the order of [`params_flat`](Self::params_flat).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in self.layers.iter_mut() {
            out.push(layer.w.as_slice_mut().expect("standard layout"));
            out.push(layer.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Regressor<U> {
        Regressor {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.mapv(|v| cast(v.to_f64().unwrap())),
                    b: l.b.mapv(|v| cast(v.to_f64().unwrap())),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Outputs are `[batch, total_outputs]`: coordinates pass through the
    /// identity, inaccuracies through the configured activation.
    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, ForwardTrace<T>)> {
        if x.ncols() != self.config.input_dim() {
            return Err(ModelError::InvalidArgument(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.config.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in &self.layers[..last] {
            let mut z = a.dot(&layer.w);
            z += &layer.b;
            z.mapv_inplace(|v| v.tanh());
            inputs.push(std::mem::replace(&mut a, z));
        }
        let mut z = a.dot(&self.layers[last].w);
        z += &self.layers[last].b;
        inputs.push(a);
        let mut out = z.clone();
        if self.config.inaccuracy_activation == InaccuracyActivation::Softplus {
            let layout = &self.config.layout;
            for mut row in out.rows_mut() {
                for (i, v) in row.iter_mut().enumerate() {
                    if layout.is_inaccuracy(i) {
                        *v = softplus(*v);
                    }
                }
            }
        }
        Ok((out, ForwardTrace { inputs, output_pre: z, consumed: false }))
    }

    /// Forward pass without keeping the trace.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.forward(x).map(|(out, _)| out)
    }

    /// Gradients of `Σ outputs ⊙ grad_out` with respect to every parameter.
    pub fn backward(&self, trace: &mut ForwardTrace<T>, grad_out: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        if trace.consumed {
            return Err(ModelError::TraceReused);
        }
        if grad_out.dim() != trace.output_pre.dim() {
            return Err(ModelError::InvalidArgument("output gradient shape mismatch".into()));
        }
        trace.consumed = true;
        let mut delta = grad_out.to_owned();
        if self.config.inaccuracy_activation == InaccuracyActivation::Softplus {
            let layout = &self.config.layout;
            for (mut row, pre) in delta.rows_mut().into_iter().zip(trace.output_pre.rows()) {
                for (i, (d, z)) in row.iter_mut().zip(pre.iter()).enumerate() {
                    if layout.is_inaccuracy(i) {
                        *d = *d * sigmoid(*z);
                    }
                }
            }
        }
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let a = &trace.inputs[k];
            let gw = a.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut da = delta.dot(&self.layers[k].w.t());
                // tanh'(z) = 1 - tanh(z)^2, and a is tanh(z)
                da.zip_mut_with(a, |d, &h| *d = *d * (T::one() - h * h));
                delta = da;
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            out.push(layer.w.as_slice().expect("standard layout"));
            out.push(layer.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

fn flatten<T: Scalar>(layers: &[Layer<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.w.iter().copied());
        out.extend(l.b.iter().copied());
    }
    out
}

/// Network input for a batch: one row per sample, intensities shifted to be
/// centered on zero.
pub fn input_batch<T: Scalar>(samples: &[&Sample]) -> Array2<T> {
    let dim = samples.first().map_or(0, |s| s.image.len());
    let mut x = Array2::zeros((samples.len(), dim));
    for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
        for (v, &p) in row.iter_mut().zip(&s.image) {
            *v = cast(p as f64 - 0.5);
        }
    }
    x
}

/// Ground-truth landmark coordinates in layout order (no inaccuracy slots).
pub fn target_coords(sample: &Sample) -> Vec<f64> {
    sample.landmarks.iter().flatten().flat_map(|p| [p.x, p.y]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ShapeKind;
    use ndarray::array;

    fn tiny_config(hidden: Vec<usize>) -> ModelConfig {
        ModelConfig {
            input: RasterGrid { width: 8, height: 8 },
            hidden,
            layout: GroupLayout::new(2, vec![(ShapeKind::Pupil, 2), (ShapeKind::Eyelid, 1)]).unwrap(),
            inaccuracy_activation: InaccuracyActivation::Softplus,
        }
    }

    #[test]
    fn zero_model_outputs() {
        let m = Regressor::<f64>::zeros(tiny_config(vec![4])).unwrap();
        let (out, _) = m.forward(Array2::from_elem((1, 64), 0.3).view()).unwrap();
        let layout = &m.config.layout;
        for (i, v) in out.row(0).iter().enumerate() {
            let expect = if layout.is_inaccuracy(i) { std::f64::consts::LN_2 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_rows_give_identical_outputs() {
        let m = Regressor::<f32>::init(tiny_config(vec![5, 3]), 4).unwrap();
        let row: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut x = Array2::zeros((2, 64));
        for mut r in x.rows_mut() {
            r.assign(&Array1::from(row.clone()));
        }
        let out = m.predict(x.view()).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn trace_cannot_be_reused() {
        let m = Regressor::<f64>::init(tiny_config(vec![3]), 1).unwrap();
        let (out, mut trace) = m.forward(Array2::zeros((2, 64)).view()).unwrap();
        let g = Array2::ones(out.dim());
        m.backward(&mut trace, g.view()).unwrap();
        assert!(matches!(m.backward(&mut trace, g.view()), Err(ModelError::TraceReused)));
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let mut cfg = tiny_config(vec![]);
        cfg.inaccuracy_activation = InaccuracyActivation::Identity;
        let m = Regressor::<f64>::init(cfg, 2).unwrap();
        let x = Array2::from_shape_fn((1, 64), |(_, j)| j as f64 / 64.0);
        let (out, mut trace) = m.forward(x.view()).unwrap();
        let g = Array2::from_shape_fn(out.dim(), |(_, j)| (j as f64) - 3.0);
        let grads = m.backward(&mut trace, g.view()).unwrap();
        let expect = x.t().dot(&g);
        assert_eq!(grads.layers[0].w, expect);
        assert_eq!(grads.layers[0].b, g.row(0).to_owned());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let m = Regressor::<f64>::init(tiny_config(vec![6]), 3).unwrap();
        let x = Array2::from_elem((3, 64), 0.1);
        let (out, mut trace) = m.forward(x.view()).unwrap();
        let grads = m.backward(&mut trace, Array2::zeros(out.dim()).view()).unwrap();
        assert!(grads.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let m = Regressor::<f64>::zeros(tiny_config(vec![2])).unwrap();
        assert!(m.forward(Array2::zeros((1, 63)).view()).is_err());
    }

    #[test]
    fn softplus_helpers() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(softplus_inverse(0.01)) - 0.01f64).abs() < 1e-15);
        assert!(softplus(-800.0f64) >= 0.0 && softplus(800.0f64) == 800.0);
        let s = sigmoid(array![-3.0f64, 0.0, 3.0][0]);
        assert!((s - 1.0 / (1.0 + 3f64.exp())).abs() < 1e-15);
    }
}
