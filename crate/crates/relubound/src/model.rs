//! Network data model: layered affine maps with ReLU activations, file
//! ingestion, magnitude pruning, and exact forward evaluation.
//!
//! Weights are stored with rows = output neurons, so a layer computes
//! `a = weights * h + bias` directly.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Errors raised while loading, validating, or transforming networks.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid input box: {0}")]
    InvalidInputBox(String),
    #[error("architecture must list an input width and at least one layer width")]
    EmptyArchitecture,
    #[error("pruning threshold must be nonnegative, got {0}")]
    NegativeEpsilon(f64),
    #[error("invalid activation layout: {0}")]
    InvalidActivation(String),
}

/// Activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Linear => write!(f, "linear"),
        }
    }
}

/// One fully connected layer: `a = weights * h_prev + bias`.
///
/// `weights[i]` is the incoming weight row of output neuron `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Number of output neurons (the layer width).
    pub fn width(&self) -> usize {
        self.bias.len()
    }

    /// Number of inputs expected from the previous layer.
    pub fn fan_in(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Maximum absolute row sum of the weight matrix.
    pub fn weight_inf_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute bias entry.
    pub fn bias_inf_norm(&self) -> f64 {
        self.bias.iter().map(|b| b.abs()).fold(0.0, f64::max)
    }
}

/// A feed-forward ReLU network together with its admissible input box.
///
/// All hidden layers use ReLU; the last layer is linear (logit output).
/// Instances are immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub input_dim: usize,
    pub input_lb: Vec<f64>,
    pub input_ub: Vec<f64>,
    pub layers: Vec<Layer>,
}

/// Per-layer pre-activation (`a`) and post-activation (`h`) vectors of one
/// forward pass. `pre[l]` and `post[l]` describe layer `l + 1` in
/// 1-based layer numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl Activations {
    /// Output logits (post-activation of the last, linear layer).
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("network has at least one layer")
    }

    /// Index of the largest logit; ties break to the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(self.output())
    }
}

/// Lowest index attaining the maximum of `values`.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Network {
    /// Number of layers L (hidden layers plus the linear output layer).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width of layer `l` in 1-based numbering; layer 0 is the input.
    pub fn layer_width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layers[l - 1].width()
        }
    }

    /// Total number of ReLU neurons in layers `1..=last_layer`.
    pub fn relu_count_through(&self, last_layer: usize) -> usize {
        self.layers
            .iter()
            .take(last_layer)
            .filter(|l| l.activation == Activation::Relu)
            .map(Layer::width)
            .sum()
    }

    /// Checks every structural invariant; called by all constructors.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::EmptyArchitecture);
        }
        if self.input_lb.len() != self.input_dim || self.input_ub.len() != self.input_dim {
            return Err(ModelError::InvalidInputBox(format!(
                "input box has lengths {}/{}, expected {}",
                self.input_lb.len(),
                self.input_ub.len(),
                self.input_dim
            )));
        }
        for (j, (lb, ub)) in self.input_lb.iter().zip(&self.input_ub).enumerate() {
            if !lb.is_finite() || !ub.is_finite() {
                return Err(ModelError::NonFinite(format!("input box entry {j}")));
            }
            if lb > ub {
                return Err(ModelError::InvalidInputBox(format!(
                    "input_lb[{j}] = {lb} exceeds input_ub[{j}] = {ub}"
                )));
            }
        }
        let mut fan_in = self.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.width() == 0 {
                return Err(ModelError::DimensionMismatch(format!(
                    "layer {} has zero width",
                    l + 1
                )));
            }
            if layer.weights.len() != layer.bias.len() {
                return Err(ModelError::DimensionMismatch(format!(
                    "layer {}: {} weight rows but {} bias entries",
                    l + 1,
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            for (i, row) in layer.weights.iter().enumerate() {
                if row.len() != fan_in {
                    return Err(ModelError::DimensionMismatch(format!(
                        "layer {} row {i} has {} columns, expected {fan_in}",
                        l + 1,
                        row.len()
                    )));
                }
                if row.iter().any(|w| !w.is_finite()) {
                    return Err(ModelError::NonFinite(format!("layer {} row {i}", l + 1)));
                }
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(ModelError::NonFinite(format!("layer {} bias", l + 1)));
            }
            let want = if l + 1 == self.layers.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            if layer.activation != want {
                return Err(ModelError::InvalidActivation(format!(
                    "layer {} must be {want}, found {}",
                    l + 1,
                    layer.activation
                )));
            }
            fan_in = layer.width();
        }
        Ok(())
    }

    /// Loads a network from the JSON schema and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Network, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let net: Network = serde_json::from_str(&text)?;
        net.validate()?;
        Ok(net)
    }

    /// Serializes to JSON. Doubles round-trip exactly (shortest decimal form).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Exact layer-by-layer evaluation of the network at `x`.
    ///
    /// The input is not clamped to the input box.
    pub fn forward(&self, x: &[f64]) -> Result<Activations, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "input has length {}, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = x.to_vec();
        for layer in &self.layers {
            let a: Vec<f64> = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            h = match layer.activation {
                Activation::Relu => a.iter().map(|v| v.max(0.0)).collect(),
                Activation::Linear => a.clone(),
            };
            pre.push(a);
            post.push(h.clone());
        }
        Ok(Activations { pre, post })
    }

    /// Returns a copy with every weight and bias of magnitude strictly
    /// below `epsilon` replaced by exactly 0.
    pub fn prune(&self, epsilon: f64) -> Result<Network, ModelError> {
        self.prune_with(epsilon, true)
    }

    /// Magnitude pruning with a switch for leaving biases untouched.
    pub fn prune_with(&self, epsilon: f64, include_biases: bool) -> Result<Network, ModelError> {
        if epsilon < 0.0 {
            return Err(ModelError::NegativeEpsilon(epsilon));
        }
        let clip = |v: f64| if v.abs() < epsilon { 0.0 } else { v };
        let layers = self
            .layers
            .iter()
            .map(|layer| Layer {
                weights: layer
                    .weights
                    .iter()
                    .map(|row| row.iter().map(|w| clip(*w)).collect())
                    .collect(),
                bias: if include_biases {
                    layer.bias.iter().map(|b| clip(*b)).collect()
                } else {
                    layer.bias.clone()
                },
                activation: layer.activation,
            })
            .collect();
        Ok(Network {
            name: self.name.clone(),
            input_dim: self.input_dim,
            input_lb: self.input_lb.clone(),
            input_ub: self.input_ub.clone(),
            layers,
        })
    }

    /// Number of nonzero weight and bias entries.
    pub fn nonzero_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights
                    .iter()
                    .flat_map(|row| row.iter())
                    .chain(l.bias.iter())
                    .filter(|v| **v != 0.0)
                    .count()
            })
            .sum()
    }

    /// Generates a random network with the given widths
    /// `[n0, n1, ..., nL]` (input width first, output width last).
    ///
    /// Weights and biases are drawn i.i.d. uniform on
    /// `[-weight_scale, weight_scale]` from a ChaCha8 stream seeded with
    /// `seed`, layer by layer, each layer's weight rows first (row-major)
    /// and then its bias. The input box defaults to `[0, 1]^{n0}`. The
    /// same seed always reproduces the same network bit for bit.
    pub fn generate_random(
        arch: &[usize],
        seed: u64,
        weight_scale: f64,
    ) -> Result<Network, ModelError> {
        if arch.len() < 2 {
            return Err(ModelError::EmptyArchitecture);
        }
        if arch.iter().any(|w| *w == 0) {
            return Err(ModelError::DimensionMismatch(
                "architecture widths must be >= 1".to_string(),
            ));
        }
        if !weight_scale.is_finite() || weight_scale < 0.0 {
            return Err(ModelError::NonFinite(format!(
                "weight scale {weight_scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if weight_scale == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-weight_scale..=weight_scale)
                    }
                })
                .collect()
        };
        let depth = arch.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let (fan_in, width) = (arch[l], arch[l + 1]);
            let weights = (0..width).map(|_| draw(fan_in)).collect();
            let bias = draw(width);
            layers.push(Layer {
                weights,
                bias,
                activation: if l + 1 == depth {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            });
        }
        let net = Network {
            name: format!(
                "rand-{}-s{seed}",
                arch.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            ),
            input_dim: arch[0],
            input_lb: vec![0.0; arch[0]],
            input_ub: vec![1.0; arch[0]],
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Small 2-2-1 example whose LP relaxation bound (3) strictly exceeds
    /// the exact MILP bound (2) on the output neuron: computes
    /// `relu(x1 + x2) + relu(x1 - x2)` over the box `[-1, 1]^2`.
    pub fn example_relu_gap() -> Network {
        Network {
            name: "relu-gap".to_string(),
            input_dim: 2,
            input_lb: vec![-1.0, -1.0],
            input_ub: vec![1.0, 1.0],
            layers: vec![
                Layer {
                    weights: vec![vec![1.0, 1.0], vec![1.0, -1.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Relu,
                },
                Layer {
                    weights: vec![vec![1.0, 1.0]],
                    bias: vec![0.0],
                    activation: Activation::Linear,
                },
            ],
        }
    }

    /// Two-class example whose logits equal the (nonnegative) inputs:
    /// identity ReLU layer followed by an identity linear layer over
    /// `[0, 1]^2`.
    pub fn example_identity_logit() -> Network {
        Network {
            name: "identity-logit".to_string(),
            input_dim: 2,
            input_lb: vec![0.0, 0.0],
            input_ub: vec![1.0, 1.0],
            layers: vec![
                Layer {
                    weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Relu,
                },
                Layer {
                    weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Linear,
                },
            ],
        }
    }
}

/// Parses an architecture string such as `2x20x20x3` into widths.
pub fn parse_arch(s: &str) -> Result<Vec<usize>, ModelError> {
    let widths: Result<Vec<usize>, _> = s.split('x').map(str::parse::<usize>).collect();
    match widths {
        Ok(w) if w.len() >= 2 && w.iter().all(|v| *v >= 1) => Ok(w),
        _ => Err(ModelError::EmptyArchitecture),
    }
}

/// Deterministically samples `count` inputs uniformly from the network's
/// input box; used by soundness checks and primal heuristics.
pub fn sample_inputs(net: &Network, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = net
            .input_lb
            .iter()
            .zip(&net.input_ub)
            .map(|(lb, ub)| {
                if lb == ub {
                    *lb
                } else {
                    rng.gen_range(*lb..=*ub)
                }
            })
            .collect();
        out.push(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gap_example_has_expected_shape() {
        let net = Network::example_relu_gap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.layer_width(1), 2);
        assert_eq!(net.layer_width(2), 1);
        net.validate().unwrap();
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let net = Network::example_relu_gap();
        let acts = net.forward(&[1.0, 0.0]).unwrap();
        assert_eq!(acts.pre[0], vec![1.0, 1.0]);
        assert_eq!(acts.post[0], vec![1.0, 1.0]);
        assert_eq!(acts.pre[1], vec![2.0]);

        let acts = net.forward(&[-1.0, 1.0]).unwrap();
        assert_eq!(acts.pre[0], vec![0.0, -2.0]);
        assert_eq!(acts.post[0], vec![0.0, 0.0]);
        assert_eq!(acts.pre[1], vec![0.0]);
    }

    #[test]
    fn forward_zeroes_negative_preactivations() {
        let net = Network::example_relu_gap();
        // Both layer-1 pre-activations are <= 0 at (-1, 0.5).
        let acts = net.forward(&[-1.0, 0.5]).unwrap();
        assert!(acts.pre[0].iter().all(|a| *a <= 0.0));
        assert_eq!(acts.post[0], vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = Network::example_relu_gap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = Network::example_relu_gap();
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net, loaded);

        // Awkward decimals survive the round trip bit for bit.
        let mut tricky = Network::generate_random(&[3, 4, 2], 11, 0.3).unwrap();
        tricky.layers[0].weights[0][0] = 0.1 + 0.2;
        tricky.save(&path).unwrap();
        assert_eq!(tricky, Network::load(&path).unwrap());
    }

    #[test]
    fn load_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        // Second layer row has 3 columns after a 2-neuron layer.
        let text = r#"{
            "name": "bad", "input_dim": 2,
            "input_lb": [0.0, 0.0], "input_ub": [1.0, 1.0],
            "layers": [
                {"weights": [[1.0, 0.0], [0.0, 1.0]], "bias": [0.0, 0.0], "activation": "relu"},
                {"weights": [[1.0, 0.0, 2.0]], "bias": [0.0], "activation": "linear"}
            ]
        }"#;
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            Network::load(&path),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn load_rejects_non_finite_weight() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.json");
        // A bare NaN token is not valid JSON, so it surfaces as a parse
        // error; an overflowing literal decodes to infinity and is caught
        // by validation.
        let text = r#"{
            "name": "nan", "input_dim": 1,
            "input_lb": [0.0], "input_ub": [1.0],
            "layers": [{"weights": [[NaN]], "bias": [0.0], "activation": "linear"}]
        }"#;
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Network::load(&path), Err(ModelError::Parse(_))));

        let text = text.replace("NaN", "1e999");
        std::fs::write(&path, text).unwrap();
        match Network::load(&path) {
            Err(ModelError::NonFinite(_)) | Err(ModelError::Parse(_)) => {}
            other => panic!("expected non-finite rejection, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_missing_input_box() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nobox.json");
        let text = r#"{
            "name": "nobox", "input_dim": 1,
            "layers": [{"weights": [[1.0]], "bias": [0.0], "activation": "linear"}]
        }"#;
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Network::load(&path), Err(ModelError::Parse(_))));
    }

    #[test]
    fn prune_thresholds_strictly() {
        let mut net = Network::example_relu_gap();
        net.layers[0].weights[0][0] = 0.005;
        net.layers[0].weights[1][1] = -0.02;
        let pruned = net.prune(0.01).unwrap();
        assert_eq!(pruned.layers[0].weights[0][0], 0.0);
        assert_eq!(pruned.layers[0].weights[1][1], -0.02);
        // Entries exactly at the threshold survive (strict inequality).
        let mut at = Network::example_relu_gap();
        at.layers[0].weights[0][0] = 0.01;
        assert_eq!(at.prune(0.01).unwrap().layers[0].weights[0][0], 0.01);
    }

    #[test]
    fn prune_zero_epsilon_is_identity() {
        let net = Network::generate_random(&[3, 5, 2], 3, 1.0).unwrap();
        assert_eq!(net.prune(0.0).unwrap(), net);
    }

    #[test]
    fn prune_rejects_negative_epsilon() {
        let net = Network::example_relu_gap();
        assert!(matches!(
            net.prune(-0.1),
            Err(ModelError::NegativeEpsilon(_))
        ));
    }

    #[test]
    fn prune_keeps_biases_when_asked() {
        let mut net = Network::example_relu_gap();
        net.layers[0].bias[0] = 0.001;
        let pruned = net.prune_with(0.01, false).unwrap();
        assert_eq!(pruned.layers[0].bias[0], 0.001);
        let pruned = net.prune_with(0.01, true).unwrap();
        assert_eq!(pruned.layers[0].bias[0], 0.0);
    }

    #[test]
    fn generate_is_deterministic() {
        let a = Network::generate_random(&[4, 8, 8, 3], 7, 1.0).unwrap();
        let b = Network::generate_random(&[4, 8, 8, 3], 7, 1.0).unwrap();
        assert_eq!(a, b);
        let c = Network::generate_random(&[4, 8, 8, 3], 8, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generate_scale_zero_gives_zero_network() {
        let net = Network::generate_random(&[2, 3, 1], 5, 0.0).unwrap();
        assert_eq!(net.nonzero_count(), 0);
    }

    #[test]
    fn generate_shapes_and_errors() {
        let net = Network::generate_random(&[2, 2, 1], 1, 1.0).unwrap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.input_dim, 2);
        assert_eq!(net.input_lb, vec![0.0, 0.0]);
        assert_eq!(net.input_ub, vec![1.0, 1.0]);
        assert!(matches!(
            Network::generate_random(&[], 1, 1.0),
            Err(ModelError::EmptyArchitecture)
        ));
        assert!(matches!(
            Network::generate_random(&[4], 1, 1.0),
            Err(ModelError::EmptyArchitecture)
        ));
    }

    #[test]
    fn parse_arch_accepts_and_rejects() {
        assert_eq!(parse_arch("2x20x20x3").unwrap(), vec![2, 20, 20, 3]);
        assert!(parse_arch("x").is_err());
        assert!(parse_arch("5").is_err());
        assert!(parse_arch("2x0x1").is_err());
    }

    #[test]
    fn forward_is_affine_composition_when_all_active() {
        // Identity-logit net over [0,1]^2 keeps every pre-activation >= 0,
        // so the output equals the composed affine maps.
        let net = Network::example_identity_logit();
        for x in sample_inputs(&net, 50, 99) {
            let acts = net.forward(&x).unwrap();
            assert!(acts.pre.iter().flatten().all(|a| *a >= 0.0));
            assert_eq!(acts.output(), &x[..]);
        }
    }

    proptest! {
        #[test]
        fn round_trip_preserves_all_fields(seed in 0u64..500) {
            let net = Network::generate_random(&[3, 4, 4, 2], seed, 0.7).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("net.json");
            net.save(&path).unwrap();
            prop_assert_eq!(Network::load(&path).unwrap(), net);
        }

        #[test]
        fn pruning_is_monotone(seed in 0u64..200, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let net = Network::generate_random(&[3, 6, 2], seed, 1.0).unwrap();
            let a = net.prune(lo).unwrap().nonzero_count();
            let b = net.prune(hi).unwrap().nonzero_count();
            prop_assert!(b <= a);
        }
    }
}
