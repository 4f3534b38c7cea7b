//! Classifiers mapping features to the probability simplex, with hand-written
//! forward and backward passes.
//!
//! Two architectures are supported: softmax over one affine map, and tanh MLPs
//! with one or two hidden layers. An optional elementwise log on the input lets
//! the linear model represent posteriors of the form `softmax(A·ln x + b)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

/// Floor applied before the log input map.
pub const LOG_INPUT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("architecture needs at least 1 input and 2 classes (got d={0}, C={1})")]
    BadShape(usize, usize),
    #[error("MLPs take one or two hidden layers, got {0}")]
    BadDepth(usize),
    #[error("hidden width must be positive")]
    ZeroWidth,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMap {
    Identity,
    /// `x ↦ ln(max(x, LOG_INPUT_FLOOR))` per feature.
    Log,
}

impl InputMap {
    fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            InputMap::Identity => x.to_vec(),
            InputMap::Log => x.iter().map(|v| v.max(LOG_INPUT_FLOOR).ln()).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMap::Identity => "identity",
            InputMap::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(InputMap::Identity),
            "log" => Some(InputMap::Log),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    SoftmaxLinear { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: Vec<usize>, classes: usize },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match self {
            Architecture::SoftmaxLinear { inputs, .. } | Architecture::Mlp { inputs, .. } => *inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::SoftmaxLinear { classes, .. } | Architecture::Mlp { classes, .. } => *classes,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        match self {
            Architecture::SoftmaxLinear { inputs, classes } => vec![*inputs, *classes],
            Architecture::Mlp { inputs, hidden, classes } => {
                let mut w = vec![*inputs];
                w.extend(hidden);
                w.push(*classes);
                w
            }
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.inputs() == 0 || self.classes() < 2 {
            return Err(ModelError::BadShape(self.inputs(), self.classes()));
        }
        if let Architecture::Mlp { hidden, .. } = self {
            if hidden.is_empty() || hidden.len() > 2 {
                return Err(ModelError::BadDepth(hidden.len()));
            }
            if hidden.contains(&0) {
                return Err(ModelError::ZeroWidth);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out × in
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub architecture: Architecture,
    pub input_map: InputMap,
    pub layers: Vec<Dense>,
}

/// Gradients laid out like [`ClassifierParams::blocks`]: `[W0, b0, W1, b1, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ClassifierParams) -> Self {
        Self { blocks: p.blocks().iter().map(|b| vec![0.0; b.len()]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post input map / post tanh).
    activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ClassifierParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(architecture: Architecture, input_map: InputMap, seed: u64) -> Result<Self, ModelError> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = architecture.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { architecture, input_map, layers })
    }

    pub fn zeros(architecture: Architecture, input_map: InputMap) -> Result<Self, ModelError> {
        architecture.validate()?;
        let layers = architecture
            .widths()
            .windows(2)
            .map(|w| Dense { weight: Matrix::zeros(w[1], w[0]), bias: vec![0.0; w[1]] })
            .collect();
        Ok(Self { architecture, input_map, layers })
    }

    pub fn classes(&self) -> usize {
        self.architecture.classes()
    }

    pub fn inputs(&self) -> usize {
        self.architecture.inputs()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).probs
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        assert_eq!(x.len(), self.inputs(), "feature length mismatch");
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut a = self.input_map.apply(x);
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.mat_vec(&a).expect("layer shapes chain");
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            activations.push(std::mem::take(&mut a));
            if l == last {
                logits = z;
            } else {
                a = z.into_iter().map(f64::tanh).collect();
            }
        }
        ForwardCache { activations, probs: softmax(&logits) }
    }

    /// Gradient of `grad_out · forward(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> ParamGrads {
        let cache = self.forward_cached(x);
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(&cache, grad_out, &mut grads);
        grads
    }

    /// Accumulates the gradient of `grad_out · probs` into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut ParamGrads) {
        assert_eq!(grad_out.len(), self.classes(), "grad_out length mismatch");
        let p = &cache.probs;
        let pg: f64 = p.iter().zip(grad_out).map(|(a, b)| a * b).sum();
        let grad_logits: Vec<f64> = p.iter().zip(grad_out).map(|(pi, gi)| pi * (gi - pg)).collect();
        self.backward_logits_into(cache, grad_logits, grads);
    }

    /// Accumulates given the gradient with respect to the output logits.
    pub fn backward_logits_into(&self, cache: &ForwardCache, grad_logits: Vec<f64>, grads: &mut ParamGrads) {
        let mut gz = grad_logits;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let (out_dim, in_dim) = layer.weight.shape();
            {
                let gw = &mut grads.blocks[2 * l];
                for o in 0..out_dim {
                    let g = gz[o];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..in_dim {
                        gw[o * in_dim + i] += g * input[i];
                    }
                }
            }
            for (gb, g) in grads.blocks[2 * l + 1].iter_mut().zip(&gz) {
                *gb += g;
            }
            if l > 0 {
                // input is tanh output of the previous layer
                let mut ga = vec![0.0; in_dim];
                for (o, g) in gz.iter().enumerate() {
                    for (a, w) in ga.iter_mut().zip(layer.weight.row(o)) {
                        *a += w * g;
                    }
                }
                gz = ga.iter().zip(input).map(|(g, a)| g * (1.0 - a * a)).collect();
            }
        }
    }

    /// Named blocks in the matrix text format, preceded by an architecture line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.architecture.widths().iter().map(usize::to_string).collect();
        let kind = match self.architecture {
            Architecture::SoftmaxLinear { .. } => "softmax-linear",
            Architecture::Mlp { .. } => "mlp",
        };
        writeln!(out, "# arch {kind} input={} widths={}", self.input_map.name(), widths.join(",")).unwrap();
        for (l, layer) in self.layers.iter().enumerate() {
            let (r, c) = layer.weight.shape();
            writeln!(out, "# block layer{l}.weight {r}x{c}").unwrap();
            out.push_str(&layer.weight.to_text());
            writeln!(out, "# block layer{l}.bias 1x{}", layer.bias.len()).unwrap();
            out.push_str(&Matrix::from_fn(1, layer.bias.len(), |_, c| layer.bias[c]).to_text());
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let header = text.lines().find(|l| l.starts_with("# arch ")).ok_or_else(|| bad("missing arch line"))?;
        let mut kind = None;
        let mut input_map = None;
        let mut widths: Vec<usize> = Vec::new();
        for tok in header["# arch ".len()..].split_whitespace() {
            if let Some(v) = tok.strip_prefix("input=") {
                input_map = InputMap::parse(v);
            } else if let Some(v) = tok.strip_prefix("widths=") {
                widths = v.split(',').map(|s| s.parse().map_err(|_| bad("bad widths"))).collect::<Result<_, _>>()?;
            } else {
                kind = Some(tok.to_string());
            }
        }
        let input_map = input_map.ok_or_else(|| bad("bad input map"))?;
        if widths.len() < 2 {
            return Err(bad("need at least two widths"));
        }
        let architecture = match kind.as_deref() {
            Some("softmax-linear") if widths.len() == 2 => {
                Architecture::SoftmaxLinear { inputs: widths[0], classes: widths[1] }
            }
            Some("mlp") => Architecture::Mlp {
                inputs: widths[0],
                hidden: widths[1..widths.len() - 1].to_vec(),
                classes: widths[widths.len() - 1],
            },
            _ => return Err(bad("unknown architecture")),
        };
        let mut params = Self::zeros(architecture, input_map)?;

        // Split the body into named blocks.
        let mut blocks: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# block ") {
                let name = rest.split_whitespace().next().unwrap_or("").to_string();
                blocks.push((name, String::new()));
            } else if !line.starts_with('#') {
                if let Some((_, body)) = blocks.last_mut() {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let find = |name: String| {
                blocks
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, b)| b.as_str())
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing block {name}")))
            };
            let w = Matrix::parse_text(find(format!("layer{l}.weight"))?)?;
            let b = Matrix::parse_text(find(format!("layer{l}.bias"))?)?;
            if w.shape() != layer.weight.shape() || b.cols() != layer.bias.len() || b.rows() != 1 {
                return Err(bad(&format!("layer {l} has the wrong shape")));
            }
            layer.weight = w;
            layer.bias = b.into_vec();
        }
        Ok(params)
    }
}
