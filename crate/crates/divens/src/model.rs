//! Relu MLP classifiers and the ensemble container.
//!
//! Every member of an [`Ensemble`] is a plain feed-forward network mapping
//! `input_dim` features to a probability vector over `num_classes` classes.
//! Members share an architecture but never share parameters: each one is
//! initialized from its own named RNG stream, so ensembles are reproducible
//! member-by-member regardless of how many siblings exist.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::{pairwise_sum, Tensor};
use rand_chacha::ChaCha8Rng;

fn default_temperature() -> f64 {
    1.0
}

/// Architecture of a single MLP member.
///
/// Deserialized values are not revalidated automatically; callers that
/// accept external JSON run [`MlpConfig::validate`] first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Number of input features.
    pub input_dim: usize,
    /// Hidden layer widths, in order. Empty means a single linear layer.
    pub hidden_layers: Vec<usize>,
    /// Number of output classes (at least 2).
    pub num_classes: usize,
    /// Softmax temperature: logits are divided by this before softmax.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl MlpConfig {
    /// Standard desk-scale architecture: `input_dim -> 64 -> 64 -> classes`,
    /// temperature 1.
    pub fn new(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::with_hidden(input_dim, vec![64, 64], num_classes)
    }

    /// Custom hidden widths, temperature 1.
    pub fn with_hidden(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let cfg = MlpConfig {
            input_dim,
            hidden_layers,
            num_classes,
            temperature: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the softmax temperature.
    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    /// Checks dimension and temperature ranges.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(
                "hidden layer widths must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_layers {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }
}

/// One affine layer: `x . weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]` weight matrix.
    pub weight: Tensor,
    /// `[1, fan_out]` bias row, broadcast over the batch.
    pub bias: Tensor,
}

/// All trainable parameters of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Affine layers, input to output.
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, drawn from `rng`.
    pub fn init(cfg: &MlpConfig, rng: &mut ChaCha8Rng) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng::uniform(rng, -limit, limit))
                    .collect();
                Layer {
                    weight: Tensor::new(fan_in, fan_out, data)
                        .expect("layer dims are consistent by construction"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        ModelParams { layers }
    }

    /// All-zero parameters (useful for degenerate-case tests).
    pub fn zeros(cfg: &MlpConfig) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Tensor::zeros(fan_in, fan_out),
                bias: Tensor::zeros(1, fan_out),
            })
            .collect();
        ModelParams { layers }
    }

    fn check_shapes(&self, cfg: &MlpConfig) -> Result<()> {
        let dims = cfg.layer_dims();
        if self.layers.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} layers, got {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, (fan_in, fan_out))) in self.layers.iter().zip(dims).enumerate() {
            if layer.weight.shape() != [fan_in, fan_out] || layer.bias.shape() != [1, fan_out] {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} shapes {:?}/{:?} do not chain as [{fan_in},{fan_out}]",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for one staged member, parallel to [`ModelParams::layers`].
#[derive(Debug, Clone)]
pub struct MemberVars {
    /// Weight leaf per layer.
    pub weights: Vec<Var>,
    /// Bias leaf per layer.
    pub biases: Vec<Var>,
}

/// A fixed-size collection of independently parameterized MLP members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    config: MlpConfig,
    members: Vec<ModelParams>,
}

impl Ensemble {
    /// Initializes `k` members; member `i` draws from the `"init-member"`
    /// stream at index `i`, so adding members never perturbs earlier ones.
    pub fn init(config: MlpConfig, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty("ensemble"));
        }
        let members = (0..k)
            .map(|i| {
                let mut r = rng::stream(seed, "init-member", i as u64);
                ModelParams::init(&config, &mut r)
            })
            .collect();
        Ok(Ensemble { config, members })
    }

    /// Wraps externally constructed members, validating shape chains.
    pub fn from_members(config: MlpConfig, members: Vec<ModelParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        config.validate()?;
        for m in &members {
            m.check_shapes(&config)?;
        }
        Ok(Ensemble { config, members })
    }

    /// Number of members.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    /// Always false: construction rejects empty ensembles.
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Shared architecture.
    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Read access to member parameters.
    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    /// Mutable access for optimizers. Shape invariants are the caller's
    /// responsibility while borrowed; they are re-checked on checkpoint load.
    pub fn members_mut(&mut self) -> &mut [ModelParams] {
        &mut self.members
    }

    /// Extracts member `k` as a standalone single-member ensemble.
    pub fn single(&self, k: usize) -> Result<Ensemble> {
        let member = self
            .members
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no member {k} in ensemble of {}", self.len())))?;
        Ok(Ensemble {
            config: self.config.clone(),
            members: vec![member.clone()],
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                details: format!(
                    "input has {} features, model expects {}",
                    x.cols(),
                    self.config.input_dim
                ),
            });
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite input to predict".into()));
        }
        Ok(())
    }

    /// Registers member `k`'s parameters on `graph` as leaves.
    pub fn stage_member(&self, graph: &mut Graph, k: usize, requires_grad: bool) -> MemberVars {
        let member = &self.members[k];
        let mut weights = Vec::with_capacity(member.layers.len());
        let mut biases = Vec::with_capacity(member.layers.len());
        for layer in &member.layers {
            weights.push(graph.leaf(layer.weight.clone(), requires_grad));
            biases.push(graph.leaf(layer.bias.clone(), requires_grad));
        }
        MemberVars { weights, biases }
    }

    /// Forward pass on the tape up to the softmax input: affine + relu
    /// stacks, a final affine, temperature scaling. Returns the `[n, L]`
    /// scaled-logit node.
    pub fn forward_logits(&self, graph: &mut Graph, vars: &MemberVars, x: Var) -> Result<Var> {
        let last = vars.weights.len() - 1;
        let mut h = x;
        for (i, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let lin = graph.matmul(h, w)?;
            h = graph.add(lin, b)?;
            if i < last {
                h = graph.relu(h);
            }
        }
        if self.config.temperature != 1.0 {
            h = graph.scale(h, 1.0 / self.config.temperature);
        }
        Ok(h)
    }

    /// Forward pass on the tape: [`Self::forward_logits`] followed by a
    /// row-wise softmax. Returns the `[n, L]` probability node.
    pub fn forward_probs(&self, graph: &mut Graph, vars: &MemberVars, x: Var) -> Result<Var> {
        let logits = self.forward_logits(graph, vars, x)?;
        Ok(graph.softmax(logits))
    }

    /// Probabilities of member `k` on a `[n, input_dim]` batch.
    pub fn predict_member(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        if k >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "no member {k} in ensemble of {}",
                self.len()
            )));
        }
        self.check_input(x)?;
        let mut graph = Graph::new();
        let xv = graph.constant(x.clone());
        let vars = self.stage_member(&mut graph, k, false);
        let probs = self.forward_probs(&mut graph, &vars, xv)?;
        Ok(graph.value(probs).clone())
    }

    /// Ensemble prediction: the plain average of member probabilities,
    /// accumulated pairwise so member order cannot shift the result.
    pub fn predict_ensemble(&self, x: &Tensor) -> Result<Tensor> {
        let per_member: Vec<Tensor> = (0..self.len())
            .map(|k| self.predict_member(k, x))
            .collect::<Result<_>>()?;
        let mut mean = pairwise_sum(&per_member)?;
        let inv_k = 1.0 / self.len() as f64;
        for v in mean.data_mut() {
            *v *= inv_k;
        }
        Ok(mean)
    }
}
