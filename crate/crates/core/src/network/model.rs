use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::spec::{Activation, Architecture, LayerKind, LayerSpec, Padding, Shape3};
use crate::conv::{flip, RelKernel};
use crate::error::{Error, Result};
use crate::visloss::{self, Norm, VrWeights};

/// Weights and biases of one parameterized layer.
///
/// Dense and output layers store `weights` as `[units, inputs]`; conv layers
/// as `[out_channels, in_channels * size * size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    fn zeros_like(other: &Self) -> Self {
        Self {
            weights: Array2::zeros(other.weights.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inputs as rows (`[batch, c*h*w]`, channel-major) plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Regularizer weights and kernel for the composite loss
/// `L_c + mu1 VL1 + mu2 VL2 + lambda L2'`.
#[derive(Clone, Debug, PartialEq)]
pub struct Regularization {
    pub mu1: f64,
    pub mu2: f64,
    pub lambda: f64,
    pub kernel: RelKernel,
}

impl Regularization {
    pub fn none() -> Self {
        Self {
            mu1: 0.0,
            mu2: 0.0,
            lambda: 0.0,
            kernel: RelKernel::laplacian(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The four terms of the composite loss, unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub class: f64,
    pub vl1: f64,
    pub vl2: f64,
    pub l2: f64,
}

impl LossTerms {
    pub fn total(&self, reg: &Regularization) -> f64 {
        self.class + reg.mu1 * self.vl1 + reg.mu2 * self.vl2 + reg.lambda * self.l2
    }
}

/// Per-layer parameter gradients (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            layers: model
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect(),
        }
    }

    /// Flattened in the same order as [`NetworkModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.layers.iter().flatten() {
            out.extend(p.weights.iter());
            out.extend(p.bias.iter());
        }
        out
    }

    pub fn weights(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.get(layer)?.as_ref().map(|p| &p.weights)
    }
}

/// Fig.-2 style gradient pieces: `u` (classification backprop), `v` (L2'
/// gradient, `2w` on every non-VR weight), `z1`/`z2` (VL1/VL2 gradients of the
/// VR layer's incoming weights, zero elsewhere and therefore stored only for
/// that layer).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientParts {
    pub class: Gradients,
    pub l2: Gradients,
    pub vr_layer: Option<usize>,
    pub vr1: Option<Array2<f64>>,
    pub vr2: Option<Array2<f64>>,
}

impl GradientParts {
    /// `g = u + lambda v + mu1 z1 + mu2 z2`
    pub fn assemble(&self, reg: &Regularization) -> Gradients {
        let mut out = self.class.clone();
        for (idx, (g, v)) in out.layers.iter_mut().zip(&self.l2.layers).enumerate() {
            let (Some(g), Some(v)) = (g.as_mut(), v.as_ref()) else {
                continue;
            };
            Zip::from(&mut g.weights)
                .and(&v.weights)
                .for_each(|g, &v| *g += reg.lambda * v);
            if Some(idx) == self.vr_layer {
                if let Some(z1) = &self.vr1 {
                    Zip::from(&mut g.weights).and(z1).for_each(|g, &z| *g += reg.mu1 * z);
                }
                if let Some(z2) = &self.vr2 {
                    Zip::from(&mut g.weights).and(z2).for_each(|g, &z| *g += reg.mu2 * z);
                }
            }
        }
        out
    }
}

/// Activations retained by [`NetworkModel::forward`] for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    version: u64,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of fc/conv/output layers (logits for the output layer).
    pre: Vec<Option<Array2<f64>>>,
    masks: Vec<Option<Array2<f64>>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    /// Softmax probabilities, `[batch, classes]`.
    pub fn outputs(&self) -> &Array2<f64> {
        self.acts.last().expect("at least the input")
    }

    pub fn layer_output(&self, layer: usize) -> &Array2<f64> {
        &self.acts[layer + 1]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Dropout masks sampled in train mode (1 = kept).
    pub fn dropout_mask(&self, layer: usize) -> Option<&Array2<f64>> {
        self.masks.get(layer)?.as_ref()
    }
}

/// Feed-forward network with one designated VR layer.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    input_shape: Shape3,
    layers: Vec<LayerSpec>,
    /// Output shape of each layer.
    shapes: Vec<Shape3>,
    params: Vec<Option<LayerParams>>,
    vr_layer: Option<usize>,
    /// Bumped on every parameter mutation so stale caches are detected.
    version: u64,
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.params == other.params
            && self.vr_layer == other.vr_layer
    }
}

impl NetworkModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Shape3,
        layers: Vec<LayerSpec>,
        vr_layer: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = Self::check_layers(input_shape, &layers, vr_layer)?;
        let mut params = Vec::with_capacity(layers.len());
        for (l, spec) in layers.iter().enumerate() {
            let input = if l == 0 { input_shape } else { shapes[l - 1] };
            params.push(match spec.kind {
                LayerKind::Dense { units } | LayerKind::Output { classes: units } => {
                    Some(glorot(units, input.len(), input.len(), units, rng))
                }
                LayerKind::Conv { size, channels, .. } => {
                    let fan_in = input.channels * size * size;
                    Some(glorot(channels, fan_in, fan_in, channels * size * size, rng))
                }
                _ => None,
            });
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            params,
            vr_layer,
            version: 0,
        })
    }

    /// Builds from a parsed architecture, resolving its input against `data_shape`.
    /// `vr_layer = None` picks the first fc layer.
    pub fn from_architecture<R: Rng + ?Sized>(
        arch: &Architecture,
        data_shape: Shape3,
        vr_layer: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let input = arch.input.resolve(data_shape)?;
        let vr = vr_layer.or_else(|| arch.default_vr_layer());
        Self::new(input, arch.layers.clone(), vr, rng)
    }

    /// Assembles a model from explicit parameters (checkpoint loading, tests).
    pub fn from_parts(
        input_shape: Shape3,
        layers: Vec<LayerSpec>,
        vr_layer: Option<usize>,
        params: Vec<Option<LayerParams>>,
    ) -> Result<Self> {
        let shapes = Self::check_layers(input_shape, &layers, vr_layer)?;
        if params.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                expected: layers.len(),
                actual: params.len(),
            });
        }
        let model = Self {
            input_shape,
            layers,
            shapes,
            params,
            vr_layer,
            version: 0,
        };
        for l in 0..model.layers.len() {
            let expected = model.param_shape(l);
            let actual = model.params[l]
                .as_ref()
                .map(|p| (p.weights.dim(), p.bias.len()));
            if expected != actual {
                return Err(Error::LayerShape {
                    layer: l,
                    msg: format!("parameter shapes {actual:?} do not match expected {expected:?}"),
                });
            }
        }
        Ok(model)
    }

    fn check_layers(input: Shape3, layers: &[LayerSpec], vr_layer: Option<usize>) -> Result<Vec<Shape3>> {
        if input.is_empty() {
            return Err(Error::Shape("input shape must be non-empty".into()));
        }
        if !matches!(layers.last().map(|l| l.kind), Some(LayerKind::Output { .. })) {
            return Err(Error::Shape("the last layer must be an output layer".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut s = input;
        for (l, spec) in layers.iter().enumerate() {
            spec.validate().map_err(|e| Error::LayerShape {
                layer: l,
                msg: e.to_string(),
            })?;
            if l + 1 < layers.len() && matches!(spec.kind, LayerKind::Output { .. }) {
                return Err(Error::LayerShape {
                    layer: l,
                    msg: "output layer must be last".into(),
                });
            }
            s = spec.output_shape(s).map_err(|e| Error::LayerShape {
                layer: l,
                msg: e.to_string(),
            })?;
            shapes.push(s);
        }
        if let Some(v) = vr_layer {
            match layers.get(v).map(|l| l.kind) {
                Some(LayerKind::Dense { .. }) => {}
                _ => {
                    return Err(Error::LayerShape {
                        layer: v,
                        msg: "the VR layer must be a dense (fc) layer".into(),
                    })
                }
            }
        }
        Ok(shapes)
    }

    fn param_shape(&self, l: usize) -> Option<((usize, usize), usize)> {
        let input = self.layer_input_shape(l);
        match self.layers[l].kind {
            LayerKind::Dense { units } | LayerKind::Output { classes: units } => Some(((units, input.len()), units)),
            LayerKind::Conv { size, channels, .. } => Some(((channels, input.channels * size * size), channels)),
            _ => None,
        }
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_input_shape(&self, layer: usize) -> Shape3 {
        if layer == 0 {
            self.input_shape
        } else {
            self.shapes[layer - 1]
        }
    }

    pub fn layer_output_shape(&self, layer: usize) -> Shape3 {
        self.shapes[layer]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(0, Shape3::len)
    }

    pub fn vr_layer(&self) -> Option<usize> {
        self.vr_layer
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params.iter().flatten() {
            out.extend(p.weights.iter());
            out.extend(p.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.param_count();
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for p in self.params_mut().iter_mut().flatten() {
            p.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            p.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Applies `w <- w - step` for every parameter.
    pub fn apply_step(&mut self, step: &Gradients) {
        for (p, s) in self.params_mut().iter_mut().zip(&step.layers) {
            if let (Some(p), Some(s)) = (p.as_mut(), s.as_ref()) {
                p.weights -= &s.weights;
                p.bias -= &s.bias;
            }
        }
    }

    /// Slab geometry `(slab_count, rows, cols)` of the VR layer's incoming weights.
    pub fn vr_geometry(&self) -> Option<(usize, usize, usize)> {
        let v = self.vr_layer?;
        let input = self.layer_input_shape(v);
        let units = self.shapes[v].len();
        Some((units * input.channels, input.rows, input.cols))
    }

    /// The VR layer's incoming weights as slabs (one per node and input channel).
    pub fn vr_weights(&self) -> Result<VrWeights> {
        let v = self.vr_layer.ok_or(Error::NoVrLayer)?;
        let input = self.layer_input_shape(v);
        let w = &self.params[v].as_ref().expect("dense layer has params").weights;
        VrWeights::new(
            w.nrows(),
            input.channels,
            input.rows,
            input.cols,
            w.iter().copied().collect(),
        )
    }

    /// `VL(M)` over the VR layer.
    pub fn vl(&self, kernel: &RelKernel, norm: Norm) -> Result<f64> {
        let v = self.vr_layer.ok_or(Error::NoVrLayer)?;
        let (count, rows, cols) = self.vr_geometry().expect("vr layer set");
        let w = &self.params[v].as_ref().expect("dense layer has params").weights;
        visloss::vl_model_slice(count, rows, cols, w.as_slice().expect("standard layout"), kernel, norm)
    }

    /// Mean of per-node `VL2(w_n)` (each node's channel slabs summed).
    pub fn mean_node_vl(&self, kernel: &RelKernel, norm: Norm) -> Result<f64> {
        let v = self.vr_layer.ok_or(Error::NoVrLayer)?;
        Ok(self.vl(kernel, norm)? / self.shapes[v].len() as f64)
    }

    /// `L2'(M)`: squared weights of every layer except the VR layer, biases excluded.
    pub fn l2_prime(&self) -> f64 {
        self.params
            .iter()
            .enumerate()
            .filter(|(l, _)| Some(*l) != self.vr_layer)
            .filter_map(|(_, p)| p.as_ref())
            .map(|p| p.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Forward pass over a batch of input rows.
    ///
    /// Train mode samples dropout masks from `rng` and records them; eval mode
    /// scales dropout inputs by `1 - p` and never touches `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, inputs: &Array2<f64>, mode: Mode, rng: &mut R) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_shape.len() {
            return Err(Error::LayerShape {
                layer: 0,
                msg: format!(
                    "expected {} input features ({}), got {}",
                    self.input_shape.len(),
                    self.input_shape,
                    inputs.ncols()
                ),
            });
        }
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = vec![None; n];
        let mut masks = vec![None; n];
        let mut argmax = vec![None; n];
        acts.push(inputs.as_standard_layout().into_owned());
        for l in 0..n {
            let x = &acts[l];
            let spec = self.layers[l];
            let out = match spec.kind {
                LayerKind::Dense { .. } => {
                    let p = self.params[l].as_ref().expect("params");
                    let z = affine(x, p);
                    let a = z.mapv(|v| spec.activation.apply(v));
                    pre[l] = Some(z);
                    a
                }
                LayerKind::Output { .. } => {
                    let p = self.params[l].as_ref().expect("params");
                    let z = affine(x, p);
                    let probs = softmax_rows(&z);
                    pre[l] = Some(z);
                    probs
                }
                LayerKind::Conv { size, padding, .. } => {
                    let p = self.params[l].as_ref().expect("params");
                    let z = conv_forward(x, self.layer_input_shape(l), self.shapes[l], size, padding, p);
                    let a = z.mapv(|v| spec.activation.apply(v));
                    pre[l] = Some(z);
                    a
                }
                LayerKind::MaxPool { size } => {
                    let (y, idx) = maxpool_forward(x, self.layer_input_shape(l), self.shapes[l], size);
                    argmax[l] = Some(idx);
                    y
                }
                LayerKind::Dropout { p } => match mode {
                    Mode::Train => {
                        let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                            if rng.random::<f64>() >= p {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        let y = x * &mask;
                        masks[l] = Some(mask);
                        y
                    }
                    Mode::Eval => x * (1.0 - p),
                },
            };
            acts.push(out);
        }
        Ok(ForwardCache {
            mode,
            version: self.version,
            acts,
            pre,
            masks,
            argmax,
        })
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut rng = eval_rng();
        Ok(self.forward(inputs, Mode::Eval, &mut rng)?.acts.pop().expect("output"))
    }

    /// All loss terms, evaluated in eval mode.
    pub fn loss_terms(&self, batch: &Batch, reg: &Regularization) -> Result<LossTerms> {
        let probs = self.predict(&batch.inputs)?;
        self.loss_terms_from(&probs, &batch.labels, reg)
    }

    /// Loss terms with the classification term taken from precomputed probabilities.
    pub fn loss_terms_from(&self, probs: &Array2<f64>, labels: &[usize], reg: &Regularization) -> Result<LossTerms> {
        let class = class_loss(probs, labels)?;
        let vl_term = |mu: f64, norm| -> Result<f64> {
            if mu == 0.0 && self.vr_layer.is_none() {
                Ok(0.0)
            } else {
                self.vl(&reg.kernel, norm)
            }
        };
        Ok(LossTerms {
            class,
            vl1: vl_term(reg.mu1, Norm::L1)?,
            vl2: vl_term(reg.mu2, Norm::L2)?,
            l2: self.l2_prime(),
        })
    }

    /// `L_c + mu1 VL1 + mu2 VL2 + lambda L2'` in eval mode.
    pub fn total_loss(&self, batch: &Batch, reg: &Regularization) -> Result<f64> {
        Ok(self.loss_terms(batch, reg)?.total(reg))
    }

    /// Gradient pieces of the composite loss at the state recorded in `cache`.
    ///
    /// `cache` must come from a train-mode [`forward`](Self::forward) on
    /// `labels`' inputs with the current parameters. `z1`/`z2` are only
    /// computed when the matching weight is nonzero.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize], reg: &Regularization) -> Result<GradientParts> {
        let class = self.class_gradient(cache, labels)?;
        let l2 = self.l2_gradient();
        let (mut vr1, mut vr2) = (None, None);
        if reg.mu1 != 0.0 || reg.mu2 != 0.0 {
            let v = self.vr_layer.ok_or(Error::NoVrLayer)?;
            let flipped = flip(&reg.kernel);
            if reg.mu1 != 0.0 {
                vr1 = Some(self.vr_gradient(v, &reg.kernel, &flipped, Norm::L1)?);
            }
            if reg.mu2 != 0.0 {
                vr2 = Some(self.vr_gradient(v, &reg.kernel, &flipped, Norm::L2)?);
            }
        }
        Ok(GradientParts {
            class,
            l2,
            vr_layer: self.vr_layer,
            vr1,
            vr2,
        })
    }

    /// `u`: gradient of the mean cross-entropy by backprop through the cached pass.
    pub fn class_gradient(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        if cache.mode != Mode::Train {
            return Err(Error::StaleCache("backward needs a train-mode forward pass".into()));
        }
        if cache.version != self.version {
            return Err(Error::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        let probs = cache.outputs();
        if probs.nrows() != labels.len() {
            return Err(Error::StaleCache(format!(
                "forward pass saw {} samples, got {} labels",
                probs.nrows(),
                labels.len()
            )));
        }
        check_labels(labels, probs.ncols())?;

        // d(mean CE)/d(logits) = (p - onehot) / batch
        let batch = labels.len() as f64;
        let mut delta = probs.clone();
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        delta.mapv_inplace(|d| d / batch);
        Ok(self.backprop(cache, self.layers.len() - 1, delta, true)?.0)
    }

    /// `v`: gradient of `L2'`, i.e. `2w` on every weight outside the VR layer, zero on biases.
    pub fn l2_gradient(&self) -> Gradients {
        let mut out = Gradients::zeros_like(self);
        self.l2_gradient_into(&mut out);
        out
    }

    /// [`l2_gradient`](Self::l2_gradient) into an existing store shaped like the model.
    pub fn l2_gradient_into(&self, out: &mut Gradients) {
        for (l, (p, g)) in self.params.iter().zip(&mut out.layers).enumerate() {
            if let (Some(p), Some(g)) = (p.as_ref(), g.as_mut()) {
                if Some(l) == self.vr_layer {
                    g.weights.fill(0.0);
                } else {
                    ndarray::Zip::from(&mut g.weights).and(&p.weights).for_each(|g, &w| *g = 2.0 * w);
                }
                g.bias.fill(0.0);
            }
        }
    }

    /// VL gradient of the VR layer's incoming weights, shaped like that weight matrix.
    pub fn vr_gradient(&self, v: usize, kernel: &RelKernel, flipped: &RelKernel, norm: Norm) -> Result<Array2<f64>> {
        let w = &self.params[v].as_ref().expect("dense layer has params").weights;
        let mut out = Array2::zeros(w.raw_dim());
        self.vr_gradient_into(v, kernel, flipped, norm, &mut out)?;
        Ok(out)
    }

    /// [`vr_gradient`](Self::vr_gradient) into a preallocated matrix.
    pub fn vr_gradient_into(
        &self,
        v: usize,
        kernel: &RelKernel,
        flipped: &RelKernel,
        norm: Norm,
        out: &mut Array2<f64>,
    ) -> Result<()> {
        let (count, rows, cols) = self.vr_geometry().ok_or(Error::NoVrLayer)?;
        let w = &self.params[v].as_ref().expect("dense layer has params").weights;
        if out.dim() != w.dim() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                actual: out.len(),
            });
        }
        visloss::grad_vl_model_slice_into(
            count,
            rows,
            cols,
            w.as_slice().expect("standard layout"),
            kernel,
            flipped,
            norm,
            out.as_slice_mut().expect("standard layout"),
        )
    }

    /// Activation of `node` in `layer` for a single input, with its gradient
    /// with respect to the input. Output-layer nodes report the pre-softmax logit.
    pub fn node_activation_grad(&self, x: &[f64], layer: usize, node: usize) -> Result<(f64, Vec<f64>)> {
        if layer >= self.layers.len() || node >= self.shapes[layer].len() {
            return Err(Error::LayerShape {
                layer,
                msg: format!("node {node} out of range"),
            });
        }
        let inputs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let mut rng = eval_rng();
        // Eval mode; run the whole stack for simplicity, then backprop from `layer`.
        let cache = self.forward(&inputs, Mode::Eval, &mut rng)?;
        let is_output = matches!(self.layers[layer].kind, LayerKind::Output { .. });
        let value = if is_output {
            cache.pre[layer].as_ref().expect("logits")[[0, node]]
        } else {
            cache.acts[layer + 1][[0, node]]
        };
        let mut seed = Array2::zeros((1, self.shapes[layer].len()));
        seed[[0, node]] = 1.0;
        let (_, dx) = self.backprop(&cache, layer, seed, is_output)?;
        Ok((value, dx.into_raw_vec_and_offset().0))
    }

    /// Backpropagates `delta` from the output of layer `top` down to the input.
    /// `delta_is_pre` marks `delta` as already taken w.r.t. `top`'s pre-activation.
    fn backprop(
        &self,
        cache: &ForwardCache,
        top: usize,
        mut delta: Array2<f64>,
        delta_is_pre: bool,
    ) -> Result<(Gradients, Array2<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        for l in (0..=top).rev() {
            let spec = self.layers[l];
            let x = &cache.acts[l];
            match spec.kind {
                LayerKind::Dense { .. } | LayerKind::Output { .. } | LayerKind::Conv { .. } => {
                    if !(l == top && delta_is_pre) && spec.activation != Activation::None {
                        let z = cache.pre[l].as_ref().expect("pre-activation");
                        let a = &cache.acts[l + 1];
                        Zip::from(&mut delta)
                            .and(z)
                            .and(a)
                            .for_each(|d, &z, &a| *d *= spec.activation.derivative(z, a));
                    }
                    let p = self.params[l].as_ref().expect("params");
                    let g = grads.layers[l].as_mut().expect("params");
                    delta = if let LayerKind::Conv { size, padding, .. } = spec.kind {
                        conv_backward(x, &delta, self.layer_input_shape(l), self.shapes[l], size, padding, p, g)
                    } else {
                        general_mat_mul(1.0, &delta.t(), x, 0.0, &mut g.weights);
                        g.bias = delta.sum_axis(Axis(0));
                        delta.dot(&p.weights)
                    };
                }
                LayerKind::MaxPool { .. } => {
                    let idx = cache.argmax[l].as_ref().expect("argmax recorded");
                    let in_len = self.layer_input_shape(l).len();
                    let out_len = self.shapes[l].len();
                    let mut dx = Array2::zeros((delta.nrows(), in_len));
                    for (b, (mut dxr, dr)) in dx.rows_mut().into_iter().zip(delta.rows()).enumerate() {
                        for (o, &d) in dr.iter().enumerate() {
                            dxr[idx[b * out_len + o]] += d;
                        }
                    }
                    delta = dx;
                }
                LayerKind::Dropout { p } => match cache.mode {
                    Mode::Train => delta *= cache.masks[l].as_ref().expect("mask recorded"),
                    Mode::Eval => delta *= 1.0 - p,
                },
            }
        }
        Ok((grads, delta))
    }
}

/// Eval mode never draws from the rng; any generator will do.
fn eval_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> LayerParams {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    LayerParams {
        weights: Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit)),
        bias: Array1::zeros(rows),
    }
}

fn affine(x: &Array2<f64>, p: &LayerParams) -> Array2<f64> {
    let mut z = x.dot(&p.weights.t());
    z += &p.bias;
    z
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Probabilities are clamped to `[1e-12, 1]` before the log.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&y) => Err(Error::Shape(format!("label {y} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy `-log p[label]` over the batch.
pub fn class_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.nrows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    check_labels(labels, probs.ncols())?;
    let sum: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].clamp(PROB_FLOOR, 1.0).ln())
        .sum();
    Ok(sum / labels.len() as f64)
}

fn conv_pad(size: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => size / 2,
    }
}

/// Unrolls one sample into `[c_in * size * size, oh * ow]` patches (zero outside the input).
fn im2col(x: &[f64], input: Shape3, output: Shape3, size: usize, pad: usize) -> Array2<f64> {
    let (oh, ow) = (output.rows, output.cols);
    let mut cols = Array2::zeros((input.channels * size * size, oh * ow));
    let cols_slice = cols.as_slice_mut().expect("fresh array");
    let (h, w) = (input.rows as isize, input.cols as isize);
    for c in 0..input.channels {
        let plane = &x[c * input.rows * input.cols..(c + 1) * input.rows * input.cols];
        for ki in 0..size {
            for kj in 0..size {
                let row = (c * size + ki) * size + kj;
                let dst = &mut cols_slice[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w {
                            dst[oi * ow + oj] = plane[(ii * w + jj) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, dx: &mut [f64], input: Shape3, output: Shape3, size: usize, pad: usize) {
    let (oh, ow) = (output.rows, output.cols);
    let (h, w) = (input.rows as isize, input.cols as isize);
    for c in 0..input.channels {
        let plane = &mut dx[c * input.rows * input.cols..(c + 1) * input.rows * input.cols];
        for ki in 0..size {
            for kj in 0..size {
                let row = cols.row((c * size + ki) * size + kj);
                for oi in 0..oh {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w {
                            plane[(ii * w + jj) as usize] += row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation over each sample.
fn conv_forward(x: &Array2<f64>, input: Shape3, output: Shape3, size: usize, padding: Padding, p: &LayerParams) -> Array2<f64> {
    let pad = conv_pad(size, padding);
    let spatial = output.rows * output.cols;
    let mut z = Array2::zeros((x.nrows(), output.len()));
    for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
        let xs = xr.to_slice().expect("standard layout");
        let cols = im2col(xs, input, output, size, pad);
        let mut out = p.weights.dot(&cols);
        out += &p.bias.view().insert_axis(Axis(1));
        zr.assign(&ndarray::ArrayView1::from(out.as_slice().expect("fresh array")));
        debug_assert_eq!(out.len(), output.channels * spatial);
    }
    z
}

/// Accumulates weight/bias gradients into `g` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Array2<f64>,
    dz: &Array2<f64>,
    input: Shape3,
    output: Shape3,
    size: usize,
    padding: Padding,
    p: &LayerParams,
    g: &mut LayerParams,
) -> Array2<f64> {
    let pad = conv_pad(size, padding);
    let spatial = output.rows * output.cols;
    let mut dx = Array2::zeros((x.nrows(), input.len()));
    for ((xr, dzr), mut dxr) in x.rows().into_iter().zip(dz.rows()).zip(dx.rows_mut()) {
        let cols = im2col(xr.to_slice().expect("standard layout"), input, output, size, pad);
        let dz_n = dzr
            .to_shape((output.channels, spatial))
            .expect("contiguous row")
            .to_owned();
        general_mat_mul(1.0, &dz_n, &cols.t(), 1.0, &mut g.weights);
        g.bias += &dz_n.sum_axis(Axis(1));
        let dcols = p.weights.t().dot(&dz_n);
        col2im_add(&dcols, dxr.as_slice_mut().expect("standard layout"), input, output, size, pad);
    }
    dx
}

/// Non-overlapping max pooling with partial trailing windows; records flat argmax indices.
fn maxpool_forward(x: &Array2<f64>, input: Shape3, output: Shape3, size: usize) -> (Array2<f64>, Vec<usize>) {
    let out_len = output.len();
    let mut y = Array2::zeros((x.nrows(), out_len));
    let mut idx = vec![0usize; x.nrows() * out_len];
    for (b, (xr, mut yr)) in x.rows().into_iter().zip(y.rows_mut()).enumerate() {
        for c in 0..input.channels {
            let base = c * input.rows * input.cols;
            for oi in 0..output.rows {
                for oj in 0..output.cols {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = base + oi * size * input.cols + oj * size;
                    for i in oi * size..((oi + 1) * size).min(input.rows) {
                        for j in oj * size..((oj + 1) * size).min(input.cols) {
                            let at = base + i * input.cols + j;
                            if xr[at] > best {
                                best = xr[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (c * output.rows + oi) * output.cols + oj;
                    yr[o] = best;
                    idx[b * out_len + o] = best_at;
                }
            }
        }
    }
    (y, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn glorot_weights_respect_their_limit() {
        let layers = vec![LayerSpec::dense(30, Activation::Relu), LayerSpec::output(10)];
        let m = NetworkModel::new(Shape3::flat(50), layers, None, &mut rng()).unwrap();
        let first = m.params()[0].as_ref().unwrap();
        let limit = (6.0f64 / 80.0).sqrt();
        assert!(first.weights.iter().all(|w| w.abs() < limit));
        assert!(first.bias.iter().all(|&b| b == 0.0));
        assert_eq!(m.param_count(), 50 * 30 + 30 + 30 * 10 + 10);
    }

    #[test]
    fn vr_geometry_counts_one_slab_per_node_and_channel() {
        let layers = vec![
            LayerSpec::conv(3, 4, Padding::Valid, Activation::Relu),
            LayerSpec::dense(6, Activation::Relu),
            LayerSpec::output(2),
        ];
        let m = NetworkModel::new(Shape3::new(2, 7, 7), layers, Some(1), &mut rng()).unwrap();
        assert_eq!(m.vr_geometry(), Some((24, 5, 5)));
        let w = m.vr_weights().unwrap();
        assert_eq!((w.nodes(), w.channels(), w.slab_len()), (6, 4, 25));
    }

    #[test]
    fn invalid_layer_stacks_are_rejected() {
        let no_output = vec![LayerSpec::dense(3, Activation::Relu)];
        assert!(NetworkModel::new(Shape3::flat(4), no_output, None, &mut rng()).is_err());
        let vr_on_pool = vec![LayerSpec::maxpool(2), LayerSpec::output(2)];
        assert!(NetworkModel::new(Shape3::new(1, 4, 4), vr_on_pool, Some(0), &mut rng()).is_err());
        let too_small = vec![LayerSpec::conv(5, 1, Padding::Valid, Activation::Relu), LayerSpec::output(2)];
        assert!(NetworkModel::new(Shape3::new(1, 3, 3), too_small, None, &mut rng()).is_err());
    }

    #[test]
    fn flat_params_round_trip_and_length_is_checked() {
        let layers = vec![LayerSpec::dense(3, Activation::Tanh), LayerSpec::output(2)];
        let mut m = NetworkModel::new(Shape3::flat(4), layers, Some(0), &mut rng()).unwrap();
        let v: Vec<f64> = (0..m.param_count()).map(|i| i as f64 * 0.5).collect();
        m.set_flat_params(&v).unwrap();
        assert_eq!(m.flat_params(), v);
        assert!(m.set_flat_params(&v[1..]).is_err());
    }

    #[test]
    fn l2_prime_skips_the_vr_layer_and_biases() {
        let layers = vec![LayerSpec::dense(2, Activation::Tanh), LayerSpec::output(2)];
        let mut m = NetworkModel::new(Shape3::flat(2), layers, Some(0), &mut rng()).unwrap();
        for p in m.params_mut().iter_mut().flatten() {
            p.weights.fill(2.0);
            p.bias.fill(5.0);
        }
        assert_eq!(m.l2_prime(), 16.0);
    }
}
