//! Dense feed-forward networks with hand-written backprop.
//!
//! Weights are stored `in x out` so a layer is `x * W + b` on a batch-major
//! input. Dropout and DropConnect masks are passed explicitly to
//! [`Network::forward`]; with no masks the pass is plain inference.

use crate::numkit::{Matrix, NumError, Rng};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error(transparent)]
    Shape(#[from] NumError),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`
    pub weights: Matrix,
    /// `1 x out`
    pub bias: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    /// He-uniform for relu layers, Xavier-uniform otherwise; zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            Activation::Identity => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        Self {
            weights: rng.uniform_matrix(inputs, outputs, -limit, limit),
            bias: Matrix::zeros(1, outputs),
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    head: OutputHead,
}

/// Per-layer noise for one forward pass. `dropout[l]` multiplies the
/// activations leaving layer `l`; `dropconnect[l]` multiplies its weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseMasks {
    pub dropout: Vec<Option<Matrix>>,
    pub dropconnect: Vec<Option<Matrix>>,
}

impl NoiseMasks {
    pub fn none(layers: usize) -> Self {
        Self {
            dropout: vec![None; layers],
            dropconnect: vec![None; layers],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` feeds layer `l`; the final entry is the last layer's
    /// activated output (logits for a softmax head).
    pub inputs: Vec<Matrix>,
    /// Pre-activations per layer.
    pub pre: Vec<Matrix>,
    /// Output after the head.
    pub output: Matrix,
    masks: Option<NoiseMasks>,
}

impl ForwardTrace {
    /// Activation of the last hidden layer (the input of the output layer).
    pub fn latent(&self) -> &Matrix {
        &self.inputs[self.inputs.len() - 2]
    }

    /// Output of the final layer before the head.
    pub fn logits(&self) -> &Matrix {
        self.inputs.last().expect("trace has at least one entry")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network, batch: usize) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Matrix::zeros(l.inputs(), l.outputs()),
                    bias: Matrix::zeros(1, l.outputs()),
                })
                .collect(),
            input: Matrix::zeros(batch, net.input_width()),
        }
    }

    /// Sum of squares over all parameter gradients.
    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| {
                g.weights.as_slice().iter().map(|v| v * v).sum::<f64>()
                    + g.bias.as_slice().iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }
}

impl Network {
    /// Builds a network from layer widths `[in, h1, ..., out]`. Hidden layers
    /// use relu; the last layer is linear and feeds `head`.
    pub fn new(widths: &[usize], head: OutputHead, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NeuralError::Architecture(format!("bad widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 < n {
                    Activation::Relu
                } else {
                    Activation::Identity
                };
                DenseLayer::init(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Self { layers, head })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, head: OutputHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(NeuralError::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.outputs()) {
                return Err(NeuralError::Architecture(format!(
                    "layer {i}: bias {:?} for {} outputs",
                    l.bias.shape(),
                    l.outputs()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NeuralError::Architecture(format!(
                    "layer {i} emits {} but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Width of the last hidden layer.
    pub fn latent_width(&self) -> usize {
        self.layers[self.layers.len() - 1].inputs()
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(DenseLayer::outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &Network) -> bool {
        self.head == other.head
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.activation == b.activation
            })
    }

    /// Forward pass. `masks == None` is inference mode.
    pub fn forward(&self, x: &Matrix, masks: Option<&NoiseMasks>) -> Result<ForwardTrace> {
        if x.cols() != self.input_width() {
            return Err(NumError::Shape {
                op: "forward",
                left: x.shape(),
                right: (self.input_width(), self.output_width()),
            }
            .into());
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &inputs[l];
            let z = match masks.and_then(|m| m.dropconnect.get(l).and_then(Option::as_ref)) {
                Some(mask) => input.matmul(&layer.weights.hadamard(mask)?)?,
                None => input.matmul(&layer.weights)?,
            }
            .add_row_broadcast(&layer.bias)?;
            let mut a = z.map(|v| layer.activation.apply(v));
            if let Some(mask) = masks.and_then(|m| m.dropout.get(l).and_then(Option::as_ref)) {
                a = a.hadamard(mask)?;
            }
            pre.push(z);
            inputs.push(a);
        }
        let last = inputs.last().expect("non-empty");
        let output = match self.head {
            OutputHead::Softmax => crate::numkit::softmax_rows(last),
            OutputHead::Identity => last.clone(),
        };
        Ok(ForwardTrace {
            inputs,
            pre,
            output,
            masks: masks.cloned(),
        })
    }

    /// Backprop of `grad_out`, the loss gradient with respect to the final
    /// layer's output before the head (logits for a softmax head; the losses
    /// in this crate return the fused softmax/cross-entropy form).
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<ParamGrads> {
        self.backward_from(trace, self.layers.len(), grad_out, true)
    }

    /// Backprop of a gradient arriving at `trace.inputs[top]`, i.e. at the
    /// output of layer `top - 1`. Layers at and above `top` receive zero
    /// gradients. `top == layers - 1` pushes a latent-feature gradient into
    /// every layer except the output layer.
    pub fn backward_from(
        &self,
        trace: &ForwardTrace,
        top: usize,
        grad: &Matrix,
        want_input_grad: bool,
    ) -> Result<ParamGrads> {
        if top == 0 || top > self.layers.len() || trace.pre.len() != self.layers.len() {
            return Err(NeuralError::Architecture(format!(
                "cannot backprop from layer {top} of {}",
                self.layers.len()
            )));
        }
        let batch = trace.inputs[0].rows();
        if grad.shape() != trace.inputs[top].shape() {
            return Err(NumError::Shape {
                op: "backward",
                left: grad.shape(),
                right: trace.inputs[top].shape(),
            }
            .into());
        }
        let mut grads = ParamGrads::zeros_like(self, 0);
        let mut upstream = grad.clone();
        for l in (0..top).rev() {
            let layer = &self.layers[l];
            let masks = trace.masks.as_ref();
            // Through dropout on this layer's output, then the activation.
            if let Some(mask) = masks.and_then(|m| m.dropout.get(l).and_then(Option::as_ref)) {
                upstream = upstream.hadamard(mask)?;
            }
            let act = layer.activation;
            let delta = upstream.zip_map(&trace.pre[l], "activation backward", |g, z| {
                g * act.derivative(z)
            })?;
            let dropconnect = masks.and_then(|m| m.dropconnect.get(l).and_then(Option::as_ref));
            let mut dw = trace.inputs[l].t_matmul(&delta)?;
            if let Some(mask) = dropconnect {
                dw = dw.hadamard(mask)?;
            }
            grads.layers[l] = LayerGrads {
                weights: dw,
                bias: delta.col_sums(),
            };
            if l > 0 || want_input_grad {
                upstream = match dropconnect {
                    Some(mask) => delta.matmul_t(&layer.weights.hadamard(mask)?)?,
                    None => delta.matmul_t(&layer.weights)?,
                };
            }
        }
        grads.input = if want_input_grad {
            upstream
        } else {
            Matrix::zeros(batch, self.input_width())
        };
        Ok(grads)
    }

    /// Visits every parameter tensor in layer order (weights then bias).
    pub fn params(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

fn inverted_mask(rng: &mut Rng, rows: usize, cols: usize, p_drop: f64) -> Matrix {
    assert!((0.0..1.0).contains(&p_drop), "p_drop must lie in [0, 1)");
    let keep = 1.0 - p_drop;
    rng.bernoulli_matrix(rows, cols, keep).scale(1.0 / keep)
}

/// Inverted-dropout activation mask with entries in `{0, 1/(1-p_drop)}`.
pub fn dropout_mask(rng: &mut Rng, rows: usize, cols: usize, p_drop: f64) -> Matrix {
    inverted_mask(rng, rows, cols, p_drop)
}

/// Weight mask for DropConnect, scaled like [`dropout_mask`].
pub fn dropconnect_mask(rng: &mut Rng, weight_shape: (usize, usize), p_drop: f64) -> Matrix {
    inverted_mask(rng, weight_shape.0, weight_shape.1, p_drop)
}

/// `secondary <- beta * secondary + (1 - beta) * primary`, parameter-wise.
pub fn ema_update(secondary: &mut Network, primary: &Network, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(NeuralError::Architecture(format!("EMA beta {beta} outside [0, 1]")));
    }
    if !secondary.same_architecture(primary) {
        return Err(NeuralError::Architecture(
            "EMA requires identical architectures".into(),
        ));
    }
    for (s, p) in secondary.params_mut().zip(primary.params()) {
        for (a, &b) in s.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

// Unknown keys are rejected by the flattened `OptimizerKind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::SgdMomentum { momentum },
        }
    }
}

/// Optimizer with per-parameter state mirroring the network's tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Self {
        let zeros: Vec<Matrix> = net.params().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(NeuralError::Architecture("gradient/network layer count".into()));
        }
        for (layer, g) in net.layers.iter().zip(&grads.layers) {
            if layer.weights.shape() != g.weights.shape() || layer.bias.shape() != g.bias.shape() {
                return Err(NumError::Shape {
                    op: "optimizer_step",
                    left: layer.weights.shape(),
                    right: g.weights.shape(),
                }
                .into());
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        let grad_iter = grads.layers.iter().flat_map(|g| [&g.weights, &g.bias]);
        match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in net.params_mut().zip(grad_iter).zip(&mut self.first) {
                    let (p, g, v) = (p.as_mut_slice(), g.as_slice(), v.as_mut_slice());
                    for i in 0..p.len() {
                        v[i] = momentum * v[i] + g[i];
                        p[i] -= lr * v[i];
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in net
                    .params_mut()
                    .zip(grad_iter)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let (p, g) = (p.as_mut_slice(), g.as_slice());
                    let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

// Checkpoint layout (all integers little-endian):
//
//   magic     8 bytes  "HSSLCKPT"
//   version   u32      1
//   n_nets    u32
//   per net:  head u8 (0 softmax, 1 identity), n_layers u32,
//             per layer: in u32, out u32, activation u8 (0 relu, 1 identity)
//   n_extra   u32
//   per extra matrix: rows u32, cols u32
//   then every parameter buffer as f64 LE: nets in order, layers in order,
//   weights (row-major in x out) then bias; then the extra matrices.
const MAGIC: &[u8; 8] = b"HSSLCKPT";
const VERSION: u32 = 1;

/// Networks plus auxiliary matrices (e.g. input normalization) in one file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<Network>,
    pub extras: Vec<Matrix>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NeuralError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn put_f64s(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Matrix::from_vec(rows, cols, data)?)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(w, self.networks.len())?;
        for net in &self.networks {
            w.write_all(&[match net.head {
                OutputHead::Softmax => 0,
                OutputHead::Identity => 1,
            }])?;
            put_u32(w, net.layers.len())?;
            for l in &net.layers {
                put_u32(w, l.inputs())?;
                put_u32(w, l.outputs())?;
                w.write_all(&[match l.activation {
                    Activation::Relu => 0,
                    Activation::Identity => 1,
                }])?;
            }
        }
        put_u32(w, self.extras.len())?;
        for m in &self.extras {
            put_u32(w, m.rows())?;
            put_u32(w, m.cols())?;
        }
        for net in &self.networks {
            for p in net.params() {
                put_f64s(w, p)?;
            }
        }
        for m in &self.extras {
            put_f64s(w, m)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NeuralError::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
        }
        let n_nets = get_u32(r)?;
        let mut specs = Vec::with_capacity(n_nets);
        for _ in 0..n_nets {
            let head = match get_u8(r)? {
                0 => OutputHead::Softmax,
                1 => OutputHead::Identity,
                t => return Err(NeuralError::Checkpoint(format!("unknown head tag {t}"))),
            };
            let n_layers = get_u32(r)?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let (i, o) = (get_u32(r)?, get_u32(r)?);
                let act = match get_u8(r)? {
                    0 => Activation::Relu,
                    1 => Activation::Identity,
                    t => return Err(NeuralError::Checkpoint(format!("unknown activation tag {t}"))),
                };
                layers.push((i, o, act));
            }
            specs.push((head, layers));
        }
        let n_extra = get_u32(r)?;
        let extra_shapes = (0..n_extra)
            .map(|_| Ok((get_u32(r)?, get_u32(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut networks = Vec::with_capacity(n_nets);
        for (head, layer_specs) in specs {
            let mut layers = Vec::with_capacity(layer_specs.len());
            for (i, o, activation) in layer_specs {
                let weights = get_matrix(r, i, o)?;
                let bias = get_matrix(r, 1, o)?;
                layers.push(DenseLayer {
                    weights,
                    bias,
                    activation,
                });
            }
            networks.push(Network::from_layers(layers, head)?);
        }
        let extras = extra_shapes
            .into_iter()
            .map(|(rows, cols)| get_matrix(r, rows, cols))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NeuralError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { networks, extras })
    }
}
