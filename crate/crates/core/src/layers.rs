//! Equivariant teacher layers (translation convolution, C4 lifting and group
//! convolution), pooling, and the reference CNN / GCNN classifiers.
//!
//! All layers are cross-correlations with 3x3 kernels at stride 1 and "same"
//! output size. Tensors are batched: planar maps are `[batch, C, H, W]` and lifted
//! maps `[batch, C, 4, H, W]`, orientation `s` corresponding to the filter turned
//! clockwise by `s` quarter turns.

use serde::{Deserialize, Serialize};

use crate::agnostic::TrainMode;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::groups::PaddingMode;
use crate::param::{Module, ParamId, Parameter};
use crate::rng::{sample_normal, SeededRng};
use crate::spatial::{self, TAPS};
use crate::tensor::{Scalar, Tensor};

fn dims4(x: &Var<'_, impl Scalar>, op: &str) -> Result<[usize; 4]> {
    let s = x.shape();
    <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| Error::invalid(format!("{op} expects [batch, C, H, W], got {s:?}")))
}

/// Same-size 3x3 cross-correlation: `x [batch, C, H, W]`, `weight [O, C, 9]`,
/// optional `bias [O]`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    padding: PaddingMode,
) -> Result<Var<'t, T>> {
    let [batch, c, h, w] = dims4(&x, "conv2d")?;
    let ws = weight.shape();
    if ws.len() != 3 || ws[1] != c || ws[2] != TAPS {
        return Err(Error::shape("conv2d", &[batch, c, h, w], &ws));
    }
    let o = ws[0];
    let cols = x.gather(&spatial::im2col(c, h, w, padding), 1)?;
    let mut y = weight.reshape(&[o, c * TAPS])?.bmm(cols)?;
    if let Some(b) = bias {
        y = y.add_bias(b, 1)?;
    }
    y.reshape(&[batch, o, h, w])
}

/// Lifting convolution: `x [batch, C, H, H]`, `weight [O, C, 9]` ->
/// `[batch, O, 4, H, H]` where orientation `s` convolves with the filter turned by `s`.
pub fn lifting_conv<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    padding: PaddingMode,
) -> Result<Var<'t, T>> {
    let [batch, c, h, w] = dims4(&x, "lifting_conv")?;
    if h != w {
        return Err(Error::invalid(format!("lifting_conv needs a square grid, got {h}x{w}")));
    }
    let ws = weight.shape();
    if ws.len() != 3 || ws[1] != c || ws[2] != TAPS {
        return Err(Error::shape("lifting_conv", &[batch, c, h, w], &ws));
    }
    let o = ws[0];
    let stacked = weight.gather(&spatial::lifting_weights(o, c), 0)?;
    let cols = x.gather(&spatial::im2col(c, h, w, padding), 1)?;
    let mut y = stacked.bmm(cols)?.reshape(&[batch, o, 4 * h * w])?;
    if let Some(b) = bias {
        y = y.add_bias(b, 1)?;
    }
    y.reshape(&[batch, o, 4, h, w])
}

/// Group convolution on lifted maps: `f [batch, C, 4, H, H]`, `psi [O, C, 4, 9]` ->
/// `[batch, O, 4, H, H]`, realizing `[f * psi](g) = sum_h sum_c f_c(h) psi_c(g^-1 h)`.
pub fn group_conv<'t, T: Scalar>(
    f: Var<'t, T>,
    psi: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    padding: PaddingMode,
) -> Result<Var<'t, T>> {
    let fs = f.shape();
    let &[batch, c, 4, h, w] = fs.as_slice() else {
        return Err(Error::invalid(format!(
            "group_conv expects [batch, C, 4, H, W] with 4 orientation channels, got {fs:?}"
        )));
    };
    let ps = psi.shape();
    if ps.len() != 4 || ps[1] != c || ps[2] != 4 || ps[3] != TAPS {
        return Err(Error::shape("group_conv", &fs, &ps));
    }
    let o = ps[0];
    let stacked = psi.gather(&spatial::group_conv_weights(o, c), 0)?;
    let cols = f
        .reshape(&[batch, c * 4, h, w])?
        .gather(&spatial::im2col(c * 4, h, w, padding), 1)?;
    let mut y = stacked.bmm(cols)?.reshape(&[batch, o, 4 * h * w])?;
    if let Some(b) = bias {
        y = y.add_bias(b, 1)?;
    }
    y.reshape(&[batch, o, 4, h, w])
}

/// Maximum over the orientation axis: `[batch, C, 4, H, W]` -> `[batch, C, H, W]`.
pub fn group_pool<'t, T: Scalar>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let fs = f.shape();
    let &[batch, c, 4, h, w] = fs.as_slice() else {
        return Err(Error::invalid(format!("group_pool expects [batch, C, 4, H, W], got {fs:?}")));
    };
    f.max_pool(&spatial::group_max(c, h * w), 1)?.reshape(&[batch, c, h, w])
}

/// 2x2 stride-2 max pooling of the trailing `[H, W]` plane; keeps the first `lead` axes
/// and folds the rest into planes.
pub fn max_pool_2x2<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::invalid(format!("max_pool_2x2 on shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("max_pool_2x2 needs at least 2x2, got {h}x{w}")));
    }
    let planes: usize = s[1..s.len() - 2].iter().product();
    let mut out_shape = s.clone();
    let n = out_shape.len();
    out_shape[n - 2] = h / 2;
    out_shape[n - 1] = w / 2;
    x.max_pool(&spatial::max_pool_2x2(planes, h, w), 1)?.reshape(&out_shape)
}

/// Weights of a convolution layer in `[C_out, C_in, 3, 3]` layout plus border rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub padding: PaddingMode,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>, padding: PaddingMode) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::invalid(format!("kernel must be [C_out, C_in, 3, 3], got {s:?}")));
        }
        if !weights.is_finite() {
            return Err(Error::invalid("kernel weights must be finite"));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape("ConvKernel bias", b.shape(), &s[..1]));
            }
        }
        Ok(Self { weights, bias, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn flat_weights(&self) -> Tensor<T> {
        let s = self.weights.shape();
        self.weights.clone().reshape(vec![s[0], s[1], TAPS]).expect("3x3 kernel")
    }
}

fn with_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

fn drop_batch<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    y.clone().reshape(y.shape()[1..].to_vec())
}

/// Unbatched convolution `[C_in, H, W] -> [C_out, H, W]`.
pub fn conv2d_tensor<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 3 || x.shape()[0] != k.in_channels() {
        return Err(Error::shape("conv2d", x.shape(), k.weights.shape()));
    }
    let tape = Tape::new();
    let xv = tape.constant(with_batch(x)?);
    let w = tape.constant(k.flat_weights());
    let b = k.bias.clone().map(|b| tape.constant(b));
    drop_batch(&conv2d(xv, w, b, k.padding)?.value())
}

/// Unbatched lifting convolution `[C_in, H, H] -> [C_out, 4, H, H]` (for one
/// channel: `[1, H, H] -> [1, 4, H, H]`, i.e. one lifted feature map).
pub fn lifting_conv_tensor<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 3 || x.shape()[0] != k.in_channels() {
        return Err(Error::shape("lifting_conv", x.shape(), k.weights.shape()));
    }
    let tape = Tape::new();
    let xv = tape.constant(with_batch(x)?);
    let w = tape.constant(k.flat_weights());
    let b = k.bias.clone().map(|b| tape.constant(b));
    drop_batch(&lifting_conv(xv, w, b, k.padding)?.value())
}

/// Unbatched single-channel group convolution `[4, H, H]` with `psi [4, 3, 3]`.
pub fn group_conv_tensor<T: Scalar>(f: &Tensor<T>, psi: &Tensor<T>, padding: PaddingMode) -> Result<Tensor<T>> {
    let fs = f.shape();
    if fs.len() != 3 || fs[0] != 4 {
        return Err(Error::invalid(format!("group_conv expects a [4, H, H] lifted map, got {fs:?}")));
    }
    if psi.len() != 4 * TAPS {
        return Err(Error::invalid(format!("group_conv filter must have 4x3x3 entries, got {:?}", psi.shape())));
    }
    let tape = Tape::new();
    let fv = tape.constant(f.clone().reshape(vec![1, 1, 4, fs[1], fs[2]])?);
    let pv = tape.constant(psi.clone().reshape(vec![1, 1, 4, TAPS])?);
    let y = group_conv(fv, pv, None, padding)?.value();
    (*y).clone().reshape(fs.to_vec())
}

/// Unbatched orientation max: `[4, H, W] -> [1, H, W]`.
pub fn group_pool_tensor<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let fs = f.shape();
    if fs.len() != 3 || fs[0] != 4 {
        return Err(Error::invalid(format!("group_pool expects [4, H, W], got {fs:?}")));
    }
    let tape = Tape::new();
    let fv = tape.constant(f.clone().reshape(vec![1, 1, 4, fs[1], fs[2]])?);
    let y = group_pool(fv)?.value();
    (*y).clone().reshape(vec![1, fs[1], fs[2]])
}

/// Fully connected layer `x [batch, in] -> [batch, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, gain: f64, rng: &mut SeededRng) -> Result<Self> {
        let std = (gain / inputs as f64).sqrt();
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), sample_normal(rng, &[inputs, outputs], std)?),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![outputs])),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(tape.param(&self.weight))?.add_bias(tape.param(&self.bias), 1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Translation convolutions, planar feature maps.
    Cnn,
    /// Lifting then group convolutions, orientation max before the head.
    Gcnn,
}

/// Layer stack of a convolutional classifier: 3x3 layers with ReLU, optional 2x2 max
/// pooling between layers, global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub family: Family,
    pub grid: usize,
    pub channels: Vec<usize>,
    pub pool_between: bool,
    pub padding: PaddingMode,
    pub classes: usize,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(format!("invalid channel chain {:?}", self.channels)));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        let grids = self.grids();
        if grids.contains(&0) {
            return Err(Error::invalid(format!("grid {} is too small", self.grid)));
        }
        Ok(())
    }

    /// Spatial size seen by each layer.
    pub fn grids(&self) -> Vec<usize> {
        let mut g = self.grid;
        (0..self.channels.len())
            .map(|i| {
                if i > 0 && self.pools_after(i - 1) {
                    g /= 2;
                }
                g
            })
            .collect()
    }

    /// Whether the output of layer `i` is max-pooled. Odd grids are never pooled:
    /// dropping the last row and column would break rotation invariance.
    pub fn pools_after(&self, i: usize) -> bool {
        let mut g = self.grid;
        for j in 0..=i {
            let pool = self.pool_between && j + 1 < self.channels.len() && (g & 1) == 0;
            if j == i {
                return pool;
            }
            if pool {
                g /= 2;
            }
        }
        false
    }

    /// Input channels of layer `i`.
    pub fn in_channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.channels[i - 1]
        }
    }
}

/// Conv layers → ReLU → (pool) ... → (orientation max) → global average → linear head.
pub(crate) fn classifier_tail<'t, T: Scalar>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    family: Family,
    head: &Linear<T>,
) -> Result<Var<'t, T>> {
    let pooled = match family {
        Family::Cnn => features,
        Family::Gcnn => group_pool(features)?,
    };
    let global = pooled.mean_trailing(2)?;
    head.forward(tape, global)
}

/// Reference CNN or GCNN classifier trained from scratch.
#[derive(Debug, Clone)]
pub struct ConvClassifier<T: Scalar = f32> {
    pub spec: ClassifierSpec,
    pub weights: Vec<Parameter<T>>,
    pub biases: Vec<Parameter<T>>,
    pub head: Linear<T>,
}

/// He-normal initialization of a kernel tensor of `shape` whose fan-in is the
/// product of all axes but the first.
pub(crate) fn kernel_init<T: Scalar>(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    sample_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

impl<T: Scalar> ConvClassifier<T> {
    pub fn new(spec: ClassifierSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &o) in spec.channels.iter().enumerate() {
            let c = spec.in_channels(i);
            let shape = match (spec.family, i) {
                (Family::Gcnn, i) if i > 0 => vec![o, c, 4, TAPS],
                _ => vec![o, c, TAPS],
            };
            weights.push(Parameter::new(format!("conv{i}.weight"), kernel_init(&shape, rng)?));
            biases.push(Parameter::new(format!("conv{i}.bias"), Tensor::zeros(vec![o])));
        }
        let last = *spec.channels.last().expect("validated");
        let head = Linear::new("head", last, spec.classes, 1.0, rng)?;
        Ok(Self {
            spec,
            weights,
            biases,
            head,
        })
    }

    /// Feature extractor output before pooling: planar `[batch, C, h, w]` or lifted
    /// `[batch, C, 4, h, w]`.
    pub fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        let n = self.spec.channels.len();
        for i in 0..n {
            let w = tape.param(&self.weights[i]);
            let b = Some(tape.param(&self.biases[i]));
            h = match (self.spec.family, i) {
                (Family::Cnn, _) => conv2d(h, w, b, self.spec.padding)?,
                (Family::Gcnn, 0) => lifting_conv(h, w, b, self.spec.padding)?,
                (Family::Gcnn, _) => group_conv(h, w, b, self.spec.padding)?,
            }
            .relu();
            if self.spec.pools_after(i) {
                h = max_pool_2x2(h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for ConvClassifier<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut ps: Vec<&Parameter<T>> = self.weights.iter().chain(&self.biases).collect();
        ps.extend(self.head.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps: Vec<&mut Parameter<T>> = self.weights.iter_mut().chain(self.biases.iter_mut()).collect();
        ps.extend(self.head.parameters_mut());
        ps
    }
}

/// Image classifier interface shared by the baselines and the cloned students.
pub trait Classifier<T: Scalar>: Module<T> {
    /// Logits `[batch, classes]` for images `[batch, 1, H, W]`.
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>>;

    fn classes(&self) -> usize;

    fn grid(&self) -> usize;

    /// Sets trainability for a downstream mode; models without kernel parameters
    /// cannot be frozen.
    fn set_mode(&mut self, mode: TrainMode) -> Result<()> {
        match mode {
            TrainMode::Freeze => Err(Error::invalid("freeze mode needs a model with cloned layers and kernel parameters")),
            TrainMode::Unfreeze => {
                self.set_trainable(true);
                Ok(())
            }
        }
    }

    /// Parameters pulled toward their initial distribution by the KL penalty.
    fn regularized_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

impl<T: Scalar> Classifier<T> for ConvClassifier<T> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.features(tape, x)?;
        classifier_tail(tape, f, self.spec.family, &self.head)
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn grid(&self) -> usize {
        self.spec.grid
    }
}

/// Builds a reference classifier from its spec.
pub fn build_reference_classifier<T: Scalar>(spec: ClassifierSpec, rng: &mut SeededRng) -> Result<ConvClassifier<T>> {
    ConvClassifier::new(spec, rng)
}
