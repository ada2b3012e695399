//! Toy zero-shot generator: a feed-forward network from `(reference, content)`
//! to `identity ++ content`, with hand-written backpropagation, AdamW and the
//! cloning pretraining loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dist_sq, gaussian_vector, DenseMatrix, DenseVector, Rng};
use crate::poisoning::triplet_loss;
use crate::world::{Partition, SpeakerWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`, row-major.
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

/// Multilayer perceptron. Hidden layers use `activation`; the output layer is
/// always linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl GeneratorModel {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(layer_dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidParameter("need at least two positive layer sizes".into()));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let std = 1.0 / libm::sqrt(w[0] as f64);
                let values = gaussian_vector(rng, w[0] * w[1], 0.0, std)?.into_inner();
                Ok(Layer { weights: DenseMatrix::new(w[1], w[0], values)?, bias: DenseVector::zeros(w[1]) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layer_dims: layer_dims.to_vec(), activation, layers })
    }

    /// `[d_id + d_content, hidden.., d_id + d_content]`.
    pub fn for_dims(
        d_id: usize,
        d_content: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let io = d_id + d_content;
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(io);
        dims.extend_from_slice(hidden);
        dims.push(io);
        Self::new(&dims, activation, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.values().len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() != self.layers.len() + 1 || self.layers.is_empty() {
            return Err(Error::InvalidParameter("layer count disagrees with layer_dims".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.cols() != self.layer_dims[i]
                || layer.weights.rows() != self.layer_dims[i + 1]
                || layer.bias.len() != self.layer_dims[i + 1]
            {
                return Err(Error::InvalidParameter(format!("layer {i} shape disagrees with layer_dims")));
            }
            if !layer.weights.values().iter().all(|v| v.is_finite()) || !layer.bias.all_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
        }
        Ok(())
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Linear
        } else {
            self.activation
        }
    }

    fn input(&self, reference: &DenseVector, content: &DenseVector) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), reference.len() + content.len())?;
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(reference.as_slice());
        input.extend_from_slice(content.as_slice());
        Ok(input)
    }

    /// Forward pass recording every layer's output into `trace`.
    pub(crate) fn forward_trace(&self, input: &[f64], trace: &mut Trace) {
        trace.ensure(self);
        trace.activations[0].copy_from_slice(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(l);
            let (head, tail) = trace.activations.split_at_mut(l + 1);
            let out = &mut tail[0];
            layer.weights.matvec_into(&head[l], out);
            for (o, b) in out.iter_mut().zip(layer.bias.as_slice()) {
                *o = act.apply(*o + b);
            }
        }
    }

    /// Reverse accumulation of `∂loss/∂θ` into `grads` given `∂loss/∂output`.
    pub(crate) fn backward_accumulate(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        grads: &mut Gradients,
        scratch: &mut Scratch,
    ) {
        scratch.ensure(self);
        let last = self.layers.len() - 1;
        scratch.delta[last].copy_from_slice(grad_out);
        for l in (0..self.layers.len()).rev() {
            let act = self.activation_for(l);
            let output = &trace.activations[l + 1];
            let input = &trace.activations[l];
            {
                let delta = &mut scratch.delta[l];
                for (d, y) in delta.iter_mut().zip(output) {
                    *d *= act.derivative_from_output(*y);
                }
            }
            let delta = &scratch.delta[l];
            let g = &mut grads.layers[l];
            let cols = input.len();
            for (r, d) in delta.iter().enumerate() {
                let row = &mut g.weights[r * cols..(r + 1) * cols];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
                g.bias[r] += d;
            }
            if l > 0 {
                let (head, tail) = scratch.delta.split_at_mut(l);
                self.layers[l].weights.matvec_transposed_into(&tail[0], &mut head[l - 1]);
            }
        }
    }
}

/// Per-layer outputs of one forward pass; index 0 is the input.
#[derive(Debug, Clone, Default)]
pub(crate) struct Trace {
    pub(crate) activations: Vec<Vec<f64>>,
}

impl Trace {
    fn ensure(&mut self, model: &GeneratorModel) {
        if self.activations.len() != model.layer_dims.len() {
            self.activations = model.layer_dims.iter().map(|&d| vec![0.0; d]).collect();
        }
    }

    pub(crate) fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Scratch {
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn ensure(&mut self, model: &GeneratorModel) {
        if self.delta.len() != model.layers.len() {
            self.delta = model.layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        }
    }
}

pub fn forward(model: &GeneratorModel, reference: &DenseVector, content: &DenseVector) -> Result<DenseVector> {
    let input = model.input(reference, content)?;
    let mut trace = Trace::default();
    model.forward_trace(&input, &mut trace);
    DenseVector::new(trace.output().to_vec())
}

pub fn backward(
    model: &GeneratorModel,
    reference: &DenseVector,
    content: &DenseVector,
    loss_grad_at_output: &DenseVector,
) -> Result<Gradients> {
    check_dim(model.output_dim(), loss_grad_at_output.len())?;
    let input = model.input(reference, content)?;
    let mut trace = Trace::default();
    model.forward_trace(&input, &mut trace);
    let mut grads = Gradients::zeros_like(model);
    model.backward_accumulate(&trace, loss_grad_at_output.as_slice(), &mut grads, &mut Scratch::default());
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped buffers, also used for optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(model: &GeneratorModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients { weights: vec![0.0; l.weights.values().len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x = 0.0);
            l.bias.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Parameters in model order: per layer, weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn check_shape(&self, model: &GeneratorModel) -> Result<()> {
        check_dim(model.layers.len(), self.layers.len())?;
        for (g, l) in self.layers.iter().zip(&model.layers) {
            check_dim(l.weights.values().len(), g.weights.len())?;
            check_dim(l.bias.len(), g.bias.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl Default for AdamWConfig {
    /// The fine-tuning learning rate, 1e-4.
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
}

impl OptimizerState {
    pub fn new(model: &GeneratorModel, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Gradients::zeros_like(model),
            second_moment: Gradients::zeros_like(model),
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction:
///
/// ```text
/// θ ← θ − lr·λ·θ
/// m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
/// ```
pub fn adamw_step(model: &mut GeneratorModel, opt: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    grads.check_shape(model)?;
    opt.first_moment.check_shape(model)?;
    opt.step += 1;
    let c = opt.config;
    let t = opt.step as f64;
    let bias1 = 1.0 - libm::pow(c.beta1, t);
    let bias2 = 1.0 - libm::pow(c.beta2, t);
    let decay = 1.0 - c.lr * c.weight_decay;

    let update = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..params.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            params[i] = params[i] * decay - c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
        }
    };
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        let m = &mut opt.first_moment.layers[l];
        let v = &mut opt.second_moment.layers[l];
        update(layer.weights.values_mut(), &g.weights, &mut m.weights, &mut v.weights);
        update(bias_values_mut(&mut layer.bias), &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

fn bias_values_mut(bias: &mut DenseVector) -> &mut [f64] {
    bias.values_mut()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 32, lr: 1e-3 }
    }
}

/// Where a training sample came from. Emitted to observers so tests can audit
/// how forget-set utterances are consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRole {
    /// Pretraining reconstruction of any train utterance.
    Reconstruction,
    /// Poisoning item whose student sees its retain reference.
    RetainReference,
    /// Poisoning item whose student reference was swapped for a forget utterance.
    ForgetSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleTag {
    pub role: SampleRole,
    /// Utterance the student is conditioned on.
    pub utterance: usize,
    /// Utterance that defines the target identity.
    pub target_utterance: usize,
    pub content: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GeneratorModel,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Squared-error gradient `2(x − t)·scale` added into `out`; returns `‖x − t‖²`.
#[inline]
pub(crate) fn l2_into(x: &[f64], target: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    for ((o, a), b) in out.iter_mut().zip(x).zip(target) {
        *o += 2.0 * (a - b) * scale;
    }
    dist_sq(x, target)
}

/// Trains the model to clone every train utterance of every speaker: the
/// target of `(u, c)` is `identity(speaker(u)) ++ c`.
pub fn pretrain(
    model: GeneratorModel,
    world: &SpeakerWorld,
    partition: &Partition,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    pretrain_observed(model, world, partition, cfg, seed, &mut |_| {})
}

pub fn pretrain_observed(
    mut model: GeneratorModel,
    world: &SpeakerWorld,
    partition: &Partition,
    cfg: &PretrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(SampleTag),
) -> Result<TrainOutcome> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidParameter("pretraining needs positive steps, batch and lr".into()));
    }
    check_dim(model.input_dim(), world.d_id() + world.d_content())?;
    check_dim(model.output_dim(), world.d_id() + world.d_content())?;
    let pool = partition.all_train();
    if pool.is_empty() || partition.train_contents.is_empty() {
        return Err(Error::EmptyPool("train utterances"));
    }
    let mut rng = Rng::new(seed);
    let mut opt = OptimizerState::new(&model, AdamWConfig::with_lr(cfg.lr));
    let mut grads = Gradients::zeros_like(&model);
    let mut trace = Trace::default();
    let mut scratch = Scratch::default();
    let d_id = world.d_id();
    let mut input = vec![0.0; model.input_dim()];
    let mut target = vec![0.0; model.output_dim()];
    let mut grad_out = vec![0.0; model.output_dim()];
    let scale = 1.0 / cfg.batch as f64;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        grads.fill_zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let u = pool[rng.index(pool.len())];
            let c = partition.train_contents[rng.index(partition.train_contents.len())];
            observer(SampleTag { role: SampleRole::Reconstruction, utterance: u, target_utterance: u, content: c });
            input[..d_id].copy_from_slice(world.embedding(u).as_slice());
            input[d_id..].copy_from_slice(world.content(c).as_slice());
            target[..d_id].copy_from_slice(world.identity_of(u).as_slice());
            target[d_id..].copy_from_slice(world.content(c).as_slice());
            model.forward_trace(&input, &mut trace);
            grad_out.iter_mut().for_each(|g| *g = 0.0);
            loss += l2_into(trace.output(), &target, scale, &mut grad_out);
            model.backward_accumulate(&trace, &grad_out, &mut grads, &mut scratch);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        adamw_step(&mut model, &mut opt, &grads)?;
    }
    Ok(TrainOutcome { model, losses })
}

/// One input/target configuration for finite-difference checking of
/// `‖x − target‖² + weight · triplet(x, target, negative, margin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub reference: DenseVector,
    pub content: DenseVector,
    pub target: DenseVector,
    pub negative: Option<DenseVector>,
    pub margin: f64,
    pub triplet_weight: f64,
}

impl GradCheckCase {
    /// Random case; with `triplet` the negative sits close to the model output
    /// so the hinge is active well away from its boundary.
    pub fn random(model: &GeneratorModel, d_id: usize, rng: &mut Rng, triplet: bool) -> Result<Self> {
        let d_content = model.input_dim() - d_id;
        let reference = gaussian_vector(rng, d_id, 0.0, 1.0)?;
        let content = gaussian_vector(rng, d_content, 0.0, 1.0)?;
        let target = gaussian_vector(rng, model.output_dim(), 0.0, 1.0)?;
        let negative = if triplet {
            let x = forward(model, &reference, &content)?;
            Some(x.add(&gaussian_vector(rng, model.output_dim(), 0.0, 0.05)?)?)
        } else {
            None
        };
        Ok(Self { reference, content, target, negative, margin: 0.3, triplet_weight: 1.0 })
    }

    /// Objective value and `∂/∂x` at the output `x`.
    pub fn objective(&self, x: &DenseVector) -> Result<(f64, DenseVector)> {
        check_dim(self.target.len(), x.len())?;
        let mut grad = vec![0.0; x.len()];
        let mut loss = l2_into(x.as_slice(), self.target.as_slice(), 1.0, &mut grad);
        if let Some(negative) = &self.negative {
            let (t, g) = triplet_loss(x, &self.target, negative, self.margin)?;
            loss += self.triplet_weight * t;
            for (o, gi) in grad.iter_mut().zip(g.as_slice()) {
                *o += self.triplet_weight * gi;
            }
        }
        Ok((loss, DenseVector::new(grad)?))
    }

    fn loss(&self, model: &GeneratorModel) -> Result<f64> {
        Ok(self.objective(&forward(model, &self.reference, &self.content)?)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Flat index of the parameter with the largest relative error.
    pub worst_param: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so parameters with vanishing
/// gradients are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences for every parameter.
/// Relative error is `|a − f| / max(|a|, |f|, REL_ERROR_FLOOR)`.
pub fn grad_check(model: &GeneratorModel, case: &GradCheckCase, tolerance: f64) -> Result<GradCheckReport> {
    let x = forward(model, &case.reference, &case.content)?;
    let (_, grad_x) = case.objective(&x)?;
    let analytic = backward(model, &case.reference, &case.content, &grad_x)?.flat();

    let mut probe = model.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst_param = 0;
    let mut flat = 0;
    for l in 0..model.layers.len() {
        let n_weights = model.layers[l].weights.values().len();
        let n_bias = model.layers[l].bias.len();
        for i in 0..(n_weights + n_bias) {
            let numeric = {
                let plus = set_param(&mut probe, l, i, n_weights, FD_STEP, model);
                let lp = case.loss(&probe)?;
                let _ = set_param(&mut probe, l, i, n_weights, -FD_STEP, model);
                let lm = case.loss(&probe)?;
                let _ = set_param(&mut probe, l, i, n_weights, 0.0, model);
                (lp - lm) / (2.0 * (plus))
            };
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_param = flat;
            }
            flat += 1;
        }
    }
    Ok(GradCheckReport { n_params: flat, max_rel_error, worst_param, tolerance, passed: max_rel_error < tolerance })
}

/// Sets parameter `i` of layer `l` in `probe` to `original + offset` and
/// returns the offset actually representable in f64.
fn set_param(
    probe: &mut GeneratorModel,
    l: usize,
    i: usize,
    n_weights: usize,
    offset: f64,
    original: &GeneratorModel,
) -> f64 {
    let (slot, base) = if i < n_weights {
        (&mut probe.layers[l].weights.values_mut()[i], original.layers[l].weights.values()[i])
    } else {
        (
            &mut bias_values_mut(&mut probe.layers[l].bias)[i - n_weights],
            original.layers[l].bias.as_slice()[i - n_weights],
        )
    };
    *slot = base + offset;
    *slot - base
}
