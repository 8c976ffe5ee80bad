//! A small dense/convolutional network with exact backpropagation.
//!
//! Models are an ordered list of [`Layer`]s operating on `(channels, height,
//! width)` inputs. Only `Dense` and `Conv2d` carry parameters; the index of a
//! parameterized layer among its peers is what the rest of the crate calls the
//! "layer index" `l`.
//!
//! Second-order information (how a layer's gradient moves when an input pixel
//! moves) is obtained by central differences of the analytic gradient, see
//! [`input_jacobians`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions are clamped into `[PRED_CLAMP, 1 - PRED_CLAMP]` before taking logs.
pub const PRED_CLAMP: f64 = 1e-7;

/// Default central-difference step for input Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// The two network families the simulator trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Architecture {
    /// See [`Model::segmentation`].
    Segmentation,
    /// See [`Model::mlp`].
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn build(&self, height: usize, width: usize, seed: u64) -> Result<Model> {
        match *self {
            Architecture::Segmentation => Model::segmentation(height, width, seed),
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidModel(
                        "mlp needs at least one hidden unit".into(),
                    ));
                }
                Model::mlp(height, width, hidden, seed)
            }
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    /// `segmentation`, or `mlp:<hidden>`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "segmentation" => Ok(Architecture::Segmentation),
            Some(("mlp", n)) => n
                .parse()
                .map(|hidden| Architecture::Mlp { hidden })
                .map_err(|_| format!("bad hidden width {n:?} in {s:?}")),
            _ => Err(format!(
                "unknown model {s:?}, expected segmentation or mlp:<hidden>"
            )),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Segmentation => f.write_str("segmentation"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    /// Fully connected layer; flattens whatever it receives.
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    /// Stride-1 convolution with symmetric zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Elementwise logistic function; must be the final layer.
    SigmoidHead,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => {
                let n: usize = input.iter().product();
                if n != in_features {
                    return Err(Error::InvalidModel(format!(
                        "dense layer expects {in_features} inputs, receives shape {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::InvalidModel(format!(
                        "conv layer expects ({in_channels}, H, W), receives {input:?}"
                    )));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if kernel == 0 || kernel > h || kernel > w {
                    return Err(Error::InvalidModel(format!(
                        "kernel {kernel} does not fit padded input {h}x{w}"
                    )));
                }
                Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
            }
            Layer::Relu | Layer::SigmoidHead => Ok(input.to_vec()),
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match *self {
            Layer::Dense {
                in_features,
                out_features,
                bias,
            } => Some((
                vec![out_features, in_features],
                bias.then(|| vec![out_features]),
            )),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                Some(vec![out_channels]),
            )),
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => (in_features, out_features),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            ),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Mean per-pixel binary cross-entropy on sigmoid outputs.
    BinaryCrossEntropy,
    /// `0.5 * mean((output - target)^2)`, used by closed-form test models.
    HalfSquaredError,
}

/// Weight and optional bias of one parameterized layer. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight entries followed by bias entries.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.weight.data());
        if let Some(b) = &self.bias {
            v.extend_from_slice(b.data());
        }
        v
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::shape(&[self.len()], &[values.len()]));
        }
        let nw = self.weight.len();
        self.weight.data_mut().copy_from_slice(&values[..nw]);
        if let Some(b) = &mut self.bias {
            b.data_mut().copy_from_slice(&values[nw..]);
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.weight.norm_sq() + self.bias.as_ref().map_or(0.0, Tensor::norm_sq)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn zeros_like(&self) -> Self {
        ParamBlock {
            weight: Tensor::zeros(self.weight.shape()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight
            .data_mut()
            .iter_mut()
            .chain(self.bias.iter_mut().flat_map(|b| b.data_mut().iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight
            .data()
            .iter()
            .chain(self.bias.iter().flat_map(|b| b.data().iter()))
    }

    /// `self += k * other`, shapes must agree.
    pub fn axpy(&mut self, k: f64, other: &ParamBlock) -> Result<()> {
        if self.len() != other.len() || self.weight.shape() != other.weight.shape() {
            return Err(Error::shape(self.weight.shape(), other.weight.shape()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|v| *v *= k);
    }
}

/// Per-layer parameter gradients for one client or sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub per_layer: Vec<ParamBlock>,
    pub sample_count: usize,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradientSet {
            per_layer: model.params.iter().map(ParamBlock::zeros_like).collect(),
            sample_count: 0,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }

    pub fn norm(&self) -> f64 {
        self.per_layer
            .iter()
            .map(ParamBlock::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// All layers flattened in order.
    pub fn flat(&self) -> Vec<f64> {
        self.per_layer.iter().flat_map(|p| p.flat()).collect()
    }

    pub fn axpy(&mut self, k: f64, other: &GradientSet) -> Result<()> {
        if self.per_layer.len() != other.per_layer.len() {
            return Err(Error::shape(
                &[self.per_layer.len()],
                &[other.per_layer.len()],
            ));
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.axpy(k, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.per_layer.iter_mut().for_each(|p| p.scale(k));
    }

    /// Checks the layer count and every block shape against `model`.
    pub fn check_matches(&self, model: &Model) -> Result<()> {
        if self.per_layer.len() != model.layer_count() {
            return Err(Error::shape(
                &[model.layer_count()],
                &[self.per_layer.len()],
            ));
        }
        for (g, p) in self.per_layer.iter().zip(&model.params) {
            if g.weight.shape() != p.weight.shape() {
                return Err(Error::shape(p.weight.shape(), g.weight.shape()));
            }
            match (&g.bias, &p.bias) {
                (Some(a), Some(b)) if a.shape() == b.shape() => {}
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "gradient bias layout does not match model".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    params: Vec<ParamBlock>,
    loss: LossKind,
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        loss: LossKind,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Model::zeroed(input_shape, layers, loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parameterized: Vec<Layer> = model
            .layers
            .iter()
            .copied()
            .filter(Layer::is_parameterized)
            .collect();
        for (layer, block) in parameterized.iter().zip(&mut model.params) {
            let (fan_in, fan_out) = layer.fans();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in block.weight.data_mut() {
                *w = rng.gen_range(-s..s);
            }
        }
        Ok(model)
    }

    /// Builds a model with every parameter set to zero.
    pub fn zeroed(input_shape: [usize; 3], layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidModel(format!(
                "input extents must be positive, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::SigmoidHead) && i + 1 != layers.len() {
                return Err(Error::InvalidModel(
                    "sigmoid head must be the last layer".into(),
                ));
            }
            shape = layer.output_shape(&shape)?;
            if let Some((w, b)) = layer.param_shapes() {
                params.push(ParamBlock {
                    weight: Tensor::zeros(&w),
                    bias: b.map(|b| Tensor::zeros(&b)),
                });
            }
        }
        if params.is_empty() {
            return Err(Error::InvalidModel(
                "model has no parameterized layer".into(),
            ));
        }
        let has_head = matches!(layers.last(), Some(Layer::SigmoidHead));
        match loss {
            LossKind::BinaryCrossEntropy if !has_head => {
                return Err(Error::InvalidModel(
                    "binary cross-entropy needs a sigmoid head".into(),
                ))
            }
            LossKind::HalfSquaredError if has_head => {
                return Err(Error::InvalidModel(
                    "squared-error models have no sigmoid head".into(),
                ))
            }
            _ => {}
        }
        Ok(Model {
            input_shape,
            layers,
            params,
            loss,
        })
    }

    /// Conv(1→4, 3×3, pad 1) → ReLU → Conv(4→1, 3×3, pad 1) → sigmoid, for
    /// single-channel `height × width` images.
    pub fn segmentation(height: usize, width: usize, seed: u64) -> Result<Self> {
        Model::new(
            [1, height, width],
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv2d {
                    in_channels: 4,
                    out_channels: 1,
                    kernel: 3,
                    padding: 1,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
            seed,
        )
    }

    /// Dense(HW→hidden) → ReLU → Dense(hidden→HW) → sigmoid: a per-pixel
    /// head on a fully connected bottleneck.
    pub fn mlp(height: usize, width: usize, hidden: usize, seed: u64) -> Result<Self> {
        let n = height * width;
        Model::new(
            [1, height, width],
            vec![
                Layer::Dense {
                    in_features: n,
                    out_features: hidden,
                    bias: true,
                },
                Layer::Relu,
                Layer::Dense {
                    in_features: hidden,
                    out_features: n,
                    bias: true,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
            seed,
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Number of parameterized layers.
    pub fn layer_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[ParamBlock] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.params
    }

    pub fn param_count(&self, layer: usize) -> usize {
        self.params[layer].len()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.to_vec();
        for layer in &self.layers {
            shape = layer
                .output_shape(&shape)
                .expect("layer shapes validated at construction");
        }
        shape
    }

    /// `params += k * grads`, layer by layer.
    pub fn apply(&mut self, k: f64, grads: &GradientSet) -> Result<()> {
        grads.check_matches(self)?;
        for (p, g) in self.params.iter_mut().zip(&grads.per_layer) {
            p.axpy(k, g)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.values().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape
            && !(input.len() == self.input_shape.iter().product::<usize>()
                && input.squeezed_shape() == Tensor::zeros(&self.input_shape).squeezed_shape())
        {
            return Err(Error::shape(&self.input_shape, input.shape()));
        }
        Ok(())
    }

    /// Activations after every layer, starting with the input itself.
    fn trace(&self, shape: [usize; 3], input: &Tensor) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.data().to_vec());
        let mut shape = shape.to_vec();
        let mut pi = 0;
        for layer in &self.layers {
            let x = acts.last().expect("input pushed");
            let out_shape = layer.output_shape(&shape).expect("validated");
            let y = match *layer {
                Layer::Dense { .. } => {
                    let y = dense_forward(&self.params[pi], x);
                    pi += 1;
                    y
                }
                Layer::Conv2d { padding, .. } => {
                    let y = conv_forward(&self.params[pi], x, &shape, &out_shape, padding);
                    pi += 1;
                    y
                }
                Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                Layer::SigmoidHead => x.iter().map(|&v| sigmoid(v)).collect(),
            };
            acts.push(y);
            shape = out_shape;
        }
        acts
    }

    /// Model output; per-pixel probabilities when the model ends in a sigmoid head.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let out = self
            .trace(self.input_shape, input)
            .pop()
            .expect("non-empty trace");
        Tensor::from_vec(&self.output_shape(), out)
    }

    /// Loss of the model on one `(input, target)` pair.
    pub fn loss(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let mut pred = self.forward(input)?;
        if self.accepts_target(target) {
            pred = pred.reshape(target.shape())?;
        }
        match self.loss {
            LossKind::BinaryCrossEntropy => bce_loss(&pred, target),
            LossKind::HalfSquaredError => half_squared_loss(&pred, target),
        }
    }

    /// Exact gradient of the loss with respect to every parameter block.
    pub fn backward(&self, input: &Tensor, target: &Tensor) -> Result<GradientSet> {
        self.check_input(input)?;
        if !self.accepts_target(target) {
            return Err(Error::shape(&self.output_shape(), target.shape()));
        }
        Ok(self.backward_unchecked(input.data(), target.data()))
    }

    /// Spatial outputs need a target of the same extent; flat (dense) outputs
    /// take any target with the right element count, so an `(H, W)` mask can
    /// label a `H * W`-wide dense head.
    pub fn accepts_target(&self, target: &Tensor) -> bool {
        let out = Tensor::zeros(&self.output_shape());
        target.len() == out.len() && (out.squeezed_shape().len() <= 1 || target.same_extent(&out))
    }

    fn backward_unchecked(&self, input: &[f64], target: &[f64]) -> GradientSet {
        self.backward_shaped(self.input_shape, input, target)
    }

    /// Receptive radius of a stack of same-padded odd convolutions and
    /// elementwise layers. `None` when some layer mixes all positions.
    fn local_radius(&self) -> Option<usize> {
        let mut r = 0;
        for layer in &self.layers {
            match *layer {
                Layer::Conv2d {
                    kernel, padding, ..
                } if 2 * padding + 1 == kernel => r += padding,
                Layer::Conv2d { .. } | Layer::Dense { .. } => return None,
                Layer::Relu | Layer::SigmoidHead => {}
            }
        }
        Some(r)
    }

    /// Backward pass on an input of another spatial extent. Only valid for
    /// models with a `local_radius`, whose parameters do not depend on it.
    fn backward_shaped(&self, shape: [usize; 3], input: &[f64], target: &[f64]) -> GradientSet {
        let input = Tensor::from_vec(&shape, input.to_vec()).expect("checked shape");
        let acts = self.trace(shape, &input);
        let mut shapes = vec![shape.to_vec()];
        for layer in &self.layers {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .expect("validated");
            shapes.push(next);
        }

        let out = acts.last().unwrap();
        let n = out.len() as f64;
        let mut grads: Vec<ParamBlock> = self.params.iter().map(ParamBlock::zeros_like).collect();

        // Gradient w.r.t. the output of the last layer, or with the sigmoid
        // head fused in, w.r.t. its input.
        let mut layer_idx = self.layers.len();
        let mut delta: Vec<f64> = match self.loss {
            LossKind::BinaryCrossEntropy => {
                layer_idx -= 1;
                out.iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < PRED_CLAMP || p > 1.0 - PRED_CLAMP {
                            0.0
                        } else {
                            (p - y) / n
                        }
                    })
                    .collect()
            }
            LossKind::HalfSquaredError => {
                out.iter().zip(target).map(|(&o, &y)| (o - y) / n).collect()
            }
        };

        let mut pi = self.params.len();
        for li in (0..layer_idx).rev() {
            let x = &acts[li];
            match self.layers[li] {
                Layer::Dense { .. } => {
                    pi -= 1;
                    delta = dense_backward(&self.params[pi], x, &delta, &mut grads[pi]);
                }
                Layer::Conv2d { padding, .. } => {
                    pi -= 1;
                    delta = conv_backward(
                        &self.params[pi],
                        x,
                        &shapes[li],
                        &shapes[li + 1],
                        padding,
                        &delta,
                        &mut grads[pi],
                    );
                }
                Layer::Relu => {
                    for (d, &v) in delta.iter_mut().zip(x) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Layer::SigmoidHead => {
                    let y = &acts[li + 1];
                    for (d, &p) in delta.iter_mut().zip(y) {
                        *d *= p * (1.0 - p);
                    }
                }
            }
        }
        GradientSet {
            per_layer: grads,
            sample_count: 1,
        }
    }

    /// Gradient averaged over `(input, target)` pairs; `sample_count` records how many.
    pub fn mean_backward<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
    ) -> Result<GradientSet> {
        let mut acc = GradientSet::zeros_like(self);
        let mut count = 0usize;
        for (x, y) in pairs {
            let g = self.backward(x, y)?;
            acc.axpy(1.0, &g)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no samples to average".into()));
        }
        acc.scale(1.0 / count as f64);
        acc.sample_count = count;
        Ok(acc)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    if !pred.same_extent(mask) {
        return Err(Error::shape(pred.shape(), mask.shape()));
    }
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

pub fn half_squared_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if !pred.same_extent(target) {
        return Err(Error::shape(pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| 0.5 * (p - y) * (p - y))
        .sum();
    Ok(total / n)
}

fn dense_forward(p: &ParamBlock, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            let b = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn dense_backward(p: &ParamBlock, x: &[f64], delta: &[f64], g: &mut ParamBlock) -> Vec<f64> {
    let (out, inp) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    let gw = g.weight.data_mut();
    let mut dx = vec![0.0; inp];
    for o in 0..out {
        let d = delta[o];
        for i in 0..inp {
            gw[o * inp + i] += d * x[i];
            dx[i] += w[o * inp + i] * d;
        }
    }
    if let Some(gb) = &mut g.bias {
        for (b, d) in gb.data_mut().iter_mut().zip(delta) {
            *b += d;
        }
    }
    dx
}

fn conv_forward(
    p: &ParamBlock,
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    pad: usize,
) -> Vec<f64> {
    let (cin, h, w) = (in_shape[0], in_shape[1] as isize, in_shape[2] as isize);
    let (cout, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = p.weight.shape()[2];
    let wt = p.weight.data();
    let bias = p.bias.as_ref().map(|b| b.data());
    let mut y = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b[o]);
        let plane = &mut y[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = b);
        for c in 0..cin {
            let xin = &x[c * (h * w) as usize..(c + 1) * (h * w) as usize];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = wt[((o * cin + c) * k + ki) * k + kj];
                    let di = ki as isize - pad as isize;
                    let dj = kj as isize - pad as isize;
                    let (j0, j1) = valid_range(dj, w, wo);
                    for i in 0..ho {
                        let si = i as isize + di;
                        if si < 0 || si >= h {
                            continue;
                        }
                        let src = &xin[(si * w) as usize..((si + 1) * w) as usize];
                        let dst = &mut plane[i * wo..(i + 1) * wo];
                        for j in j0..j1 {
                            dst[j] += wv * src[(j as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Output columns `j` for which `j + offset` is a valid source column.
#[inline]
fn valid_range(offset: isize, src_len: isize, out_len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = ((src_len - offset).max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

fn conv_backward(
    p: &ParamBlock,
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    pad: usize,
    delta: &[f64],
    g: &mut ParamBlock,
) -> Vec<f64> {
    let (cin, h, w) = (in_shape[0], in_shape[1] as isize, in_shape[2] as isize);
    let (cout, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = p.weight.shape()[2];
    let wt = p.weight.data();
    let plane_in = (h * w) as usize;
    let mut dx = vec![0.0; x.len()];
    {
        let gw = g.weight.data_mut();
        for o in 0..cout {
            let d_plane = &delta[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..cin {
                let xin = &x[c * plane_in..(c + 1) * plane_in];
                let dxin = &mut dx[c * plane_in..(c + 1) * plane_in];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((o * cin + c) * k + ki) * k + kj;
                        let wv = wt[widx];
                        let di = ki as isize - pad as isize;
                        let dj = kj as isize - pad as isize;
                        let (j0, j1) = valid_range(dj, w, wo);
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let si = i as isize + di;
                            if si < 0 || si >= h {
                                continue;
                            }
                            let row = (si * w) as usize;
                            let drow = &d_plane[i * wo..(i + 1) * wo];
                            for j in j0..j1 {
                                let s = row + (j as isize + dj) as usize;
                                acc += drow[j] * xin[s];
                                dxin[s] += wv * drow[j];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gb) = &mut g.bias {
        for (o, b) in gb.data_mut().iter_mut().enumerate() {
            *b += delta[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    dx
}

/// Central-difference Jacobians of every layer's gradient with respect to the
/// input, one tensor of shape `(P_l, c, H, W)` per parameterized layer.
///
/// When `pixels` is given only those `(row, col)` positions are differentiated
/// (all channels); every other column is left at zero. Each differentiated
/// input feature costs two backward passes.
pub fn input_jacobians(
    model: &Model,
    input: &Tensor,
    target: &Tensor,
    pixels: Option<&[(usize, usize)]>,
    h: f64,
) -> Result<Vec<Tensor>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Numeric(format!(
            "finite-difference step {h} is not positive"
        )));
    }
    // Shape validation happens once here.
    model.backward(input, target)?;
    let [c, height, width] = model.input_shape();
    let owned;
    let pixels: &[(usize, usize)] = match pixels {
        Some(p) => {
            if let Some(&(r, q)) = p.iter().find(|&&(r, q)| r >= height || q >= width) {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({r}, {q}) outside {height}x{width} input"
                )));
            }
            p
        }
        None => {
            owned = (0..height)
                .flat_map(|r| (0..width).map(move |q| (r, q)))
                .collect::<Vec<_>>();
            &owned
        }
    };

    let mut jac: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(&[p.len(), c, height, width]))
        .collect();
    let plane = height * width;
    let out_channels = target.len() / plane.max(1);
    let local = model
        .local_radius()
        .filter(|_| target.len() == out_channels * plane);
    let x = input.data();
    let y = target.data();
    for &(r, q) in pixels {
        // A convolutional stack with receptive radius rf: perturbing one pixel
        // changes gradient terms within 2 rf of it, and those terms only read
        // inputs within 3 rf. Differencing on that crop matches the full pass.
        let (shape, xs, ys, scale, at) = match local {
            Some(rf) => {
                let reach = 3 * rf;
                let (r0, r1) = (r.saturating_sub(reach), (r + reach + 1).min(height));
                let (q0, q1) = (q.saturating_sub(reach), (q + reach + 1).min(width));
                let crop = |src: &[f64], channels: usize| {
                    let mut v = Vec::with_capacity(channels * (r1 - r0) * (q1 - q0));
                    for ch in 0..channels {
                        for row in r0..r1 {
                            let base = ch * plane + row * width;
                            v.extend_from_slice(&src[base + q0..base + q1]);
                        }
                    }
                    v
                };
                let area = (r1 - r0) * (q1 - q0);
                (
                    [c, r1 - r0, q1 - q0],
                    crop(x, c),
                    crop(y, out_channels),
                    area as f64 / plane as f64,
                    (r - r0) * (q1 - q0) + (q - q0),
                )
            }
            None => (
                model.input_shape,
                x.to_vec(),
                y.to_vec(),
                1.0,
                r * width + q,
            ),
        };
        let mut xs = xs;
        let local_plane = shape[1] * shape[2];
        for ch in 0..c {
            let feat = ch * plane + r * width + q;
            let at = ch * local_plane + at;
            let orig = xs[at];
            xs[at] = orig + h;
            let plus = model.backward_shaped(shape, &xs, &ys);
            xs[at] = orig - h;
            let minus = model.backward_shaped(shape, &xs, &ys);
            xs[at] = orig;
            for (l, t) in jac.iter_mut().enumerate() {
                let gp = plus.per_layer[l].values();
                let gm = minus.per_layer[l].values();
                let data = t.data_mut();
                for (p, (a, b)) in gp.zip(gm).enumerate() {
                    let v = scale * (a - b) / (2.0 * h);
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite Jacobian entry at layer {l}, pixel ({r}, {q})"
                        )));
                    }
                    data[p * c * plane + feat] = v;
                }
            }
        }
    }
    Ok(jac)
}

/// Jacobian of layer `layer`'s gradient with respect to every input feature.
pub fn grad_input_jacobian(
    model: &Model,
    input: &Tensor,
    target: &Tensor,
    layer: usize,
    h: f64,
) -> Result<Tensor> {
    if layer >= model.layer_count() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} parameterized layers",
            model.layer_count()
        )));
    }
    let mut all = input_jacobians(model, input, target, None, h)?;
    Ok(all.swap_remove(layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(w: f64, bias: bool) -> Model {
        let mut m = Model::zeroed(
            [1, 1, 1],
            vec![Layer::Dense {
                in_features: 1,
                out_features: 1,
                bias,
            }],
            LossKind::HalfSquaredError,
        )
        .unwrap();
        m.params_mut()[0].weight.data_mut()[0] = w;
        m
    }

    #[test]
    fn cropped_jacobian_matches_full_passes() {
        let m = Model::segmentation(13, 11, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(
            &[1, 13, 11],
            (0..143).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::from_vec(
            &[13, 11],
            (0..143).map(|i| (i % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        let h = 1e-4;
        let jac = input_jacobians(&m, &x, &y, None, h).unwrap();
        for &(r, q) in &[(0, 0), (6, 5), (12, 10), (2, 9)] {
            let feat = r * 11 + q;
            let mut xp = x.data().to_vec();
            xp[feat] += h;
            let mut xm = x.data().to_vec();
            xm[feat] -= h;
            let gp = m.backward_unchecked(&xp, y.data());
            let gm = m.backward_unchecked(&xm, y.data());
            for (l, t) in jac.iter().enumerate() {
                let n = m.params()[l].len();
                for (p, (a, b)) in gp.per_layer[l]
                    .values()
                    .zip(gm.per_layer[l].values())
                    .enumerate()
                {
                    let want = (a - b) / (2.0 * h);
                    let got = t.data()[p * 143 + feat];
                    assert!(
                        (got - want).abs() <= 1e-6 * want.abs() + 1e-9,
                        "layer {l} param {p}/{n}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let m = Model::zeroed(
            [1, 2, 3],
            vec![
                Layer::Dense {
                    in_features: 6,
                    out_features: 6,
                    bias: true,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 2, 3], vec![0.3, -2.0, 5.0, 1.0, 0.0, 9.0]).unwrap();
        let y = m.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_conv_is_sigmoid() {
        let mut m = Model::zeroed(
            [1, 2, 2],
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    padding: 0,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        m.params_mut()[0].weight.data_mut()[0] = 1.0;
        let t = [-1.5, 0.0, 0.25, 3.0];
        let x = Tensor::from_vec(&[1, 2, 2], t.to_vec()).unwrap();
        let y = m.forward(&x).unwrap();
        for (a, &b) in y.data().iter().zip(&t) {
            assert_eq!(*a, sigmoid(b));
        }
    }

    #[test]
    fn bce_reference_values() {
        let half = Tensor::filled(&[4], 0.5);
        let mask = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((bce_loss(&half, &mask).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Tensor::scalar(0.9);
        let m = Tensor::scalar(1.0);
        assert!((bce_loss(&p, &m).unwrap() - 0.10536051565782628).abs() < 1e-12);
        assert!(bce_loss(&mask, &mask).unwrap() <= 1e-6);
        assert!(bce_loss(&half, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = Model::segmentation(4, 4, 1).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 4, 5])).is_err());
        assert!(m.forward(&Tensor::zeros(&[4, 4])).is_ok());
    }

    #[test]
    fn rejects_non_composing_layers() {
        let r = Model::zeroed(
            [1, 4, 4],
            vec![
                Layer::Conv2d {
                    in_channels: 2,
                    out_channels: 1,
                    kernel: 3,
                    padding: 1,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        );
        assert!(r.is_err());
        let r = Model::zeroed(
            [1, 4, 4],
            vec![Layer::SigmoidHead, Layer::Relu],
            LossKind::BinaryCrossEntropy,
        );
        assert!(r.is_err());
    }

    #[test]
    fn linear_sigmoid_closed_form_gradient() {
        // p = sigmoid(w x), L = -(y ln p + (1-y) ln(1-p)), dL/dw = (p - y) x
        let mut m = Model::zeroed(
            [1, 1, 1],
            vec![
                Layer::Dense {
                    in_features: 1,
                    out_features: 1,
                    bias: false,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        let (w, x, y) = (0.7, -1.3, 1.0);
        m.params_mut()[0].weight.data_mut()[0] = w;
        let g = m
            .backward(
                &Tensor::scalar(x).reshape(&[1, 1, 1]).unwrap(),
                &Tensor::scalar(y),
            )
            .unwrap();
        let expected = (sigmoid(w * x) - y) * x;
        assert!((g.per_layer[0].weight.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_no_gradient() {
        // Large-magnitude weights saturate the head onto the mask.
        let mut m = Model::zeroed(
            [1, 1, 2],
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    padding: 0,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        m.params_mut()[0].weight.data_mut()[0] = 100.0;
        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0, -1.0]).unwrap();
        let mask = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(m.loss(&x, &mask).unwrap() <= 1e-6);
        assert!(m.backward(&x, &mask).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn scalar_mixed_derivative() {
        // g_w(x) = (w x - y) x so dg_w/dx = 2 w x - y.
        let m = scalar_model(1.0, false);
        let x = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let y = Tensor::scalar(0.0);
        let j = grad_input_jacobian(&m, &x, &y, 0, DEFAULT_FD_STEP).unwrap();
        assert_eq!(j.shape(), &[1, 1, 1, 1]);
        assert!((j.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_gives_zero_jacobian() {
        // Zero weights into the head: the output, and hence every gradient, is
        // independent of the input.
        let m = Model::zeroed(
            [1, 2, 2],
            vec![
                Layer::Dense {
                    in_features: 4,
                    out_features: 2,
                    bias: true,
                },
                Layer::Relu,
                Layer::Dense {
                    in_features: 2,
                    out_features: 1,
                    bias: true,
                },
                Layer::SigmoidHead,
            ],
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        for l in 0..2 {
            let j = grad_input_jacobian(&m, &x, &Tensor::scalar(1.0), l, DEFAULT_FD_STEP).unwrap();
            assert!(j.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bad_step_is_numeric_error() {
        let m = scalar_model(1.0, false);
        let x = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let err = grad_input_jacobian(&m, &x, &Tensor::scalar(0.0), 0, 0.0).unwrap_err();
        assert!(err.is_numeric());
        let err = grad_input_jacobian(&m, &x, &Tensor::scalar(0.0), 0, f64::NAN).unwrap_err();
        assert!(err.is_numeric());
        assert!(grad_input_jacobian(&m, &x, &Tensor::scalar(0.0), 1, 1e-4).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = Model::segmentation(8, 8, 42).unwrap();
        let b = Model::segmentation(8, 8, 42).unwrap();
        let c = Model::segmentation(8, 8, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.layer_count(), 2);
        assert_eq!(a.param_count(0), 40);
        assert_eq!(a.param_count(1), 37);
    }
}
