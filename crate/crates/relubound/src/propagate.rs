//! Closed-form activation bounds: infinity-norm propagation (one scalar
//! per layer) and elementwise interval propagation.
//!
//! Both run in a single forward sweep and need no optimization; they seed
//! the big-M constants for the LP/MILP bound tighteners.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{Activation, ModelError, Network};

/// How a bounds set was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NaiveNorm,
    NaiveInterval,
    Weak,
    Strong,
    /// Per-layer mix of the other methods.
    Hybrid,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::NaiveNorm => "naive_norm",
            Method::NaiveInterval => "naive_interval",
            Method::Weak => "weak",
            Method::Strong => "strong",
            Method::Hybrid => "hybrid",
        };
        write!(f, "{s}")
    }
}

/// Provenance of a single neuron's bound pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    ClosedForm,
    LpOptimal,
    MilpOptimal,
    DualBound,
    Fallback,
}

impl std::fmt::Display for BoundStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BoundStatus::ClosedForm => "closed_form",
            BoundStatus::LpOptimal => "lp_optimal",
            BoundStatus::MilpOptimal => "milp_optimal",
            BoundStatus::DualBound => "dual_bound",
            BoundStatus::Fallback => "fallback",
        };
        write!(f, "{s}")
    }
}

/// Pre-activation bounds for one layer, one entry per neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub status: Vec<BoundStatus>,
    pub solve_time: Vec<f64>,
}

impl LayerBounds {
    pub fn closed_form(lb: Vec<f64>, ub: Vec<f64>) -> LayerBounds {
        let n = lb.len();
        LayerBounds {
            lb,
            ub,
            status: vec![BoundStatus::ClosedForm; n],
            solve_time: vec![0.0; n],
        }
    }
}

/// Per-neuron pre-activation bounds for every layer of a network.
///
/// `layers[l - 1]` holds the bounds of layer `l` in 1-based numbering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSet {
    pub method: Method,
    pub layers: Vec<LayerBounds>,
    pub total_time: f64,
    pub network_name: String,
}

impl BoundsSet {
    /// Bounds of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &LayerBounds {
        &self.layers[l - 1]
    }

    /// Checks shape agreement with `net`, bound ordering, and finiteness.
    pub fn validate(&self, net: &Network) -> Result<(), ModelError> {
        if self.layers.len() > net.depth() {
            return Err(ModelError::DimensionMismatch(format!(
                "bounds cover {} layers but the network has {}",
                self.layers.len(),
                net.depth()
            )));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let width = net.layer_width(idx + 1);
            if layer.lb.len() != width
                || layer.ub.len() != width
                || layer.status.len() != width
                || layer.solve_time.len() != width
            {
                return Err(ModelError::DimensionMismatch(format!(
                    "bounds layer {} has {} entries, expected {width}",
                    idx + 1,
                    layer.lb.len()
                )));
            }
            for j in 0..width {
                let (lb, ub) = (layer.lb[j], layer.ub[j]);
                if !lb.is_finite() || !ub.is_finite() {
                    return Err(ModelError::NonFinite(format!(
                        "bound for layer {} neuron {j}",
                        idx + 1
                    )));
                }
                if lb > ub {
                    return Err(ModelError::DimensionMismatch(format!(
                        "layer {} neuron {j}: lb {lb} exceeds ub {ub}",
                        idx + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BoundsSet, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Magnitude cap on a layer's post-activation values, given that layer's
/// pre-activation upper bounds: `max_j max(0, ub_j)` for ReLU layers and
/// `max_j max(|lb_j|, |ub_j|)` for the input box (layer 0).
pub fn post_activation_magnitude(net: &Network, layer: usize, bounds: &[LayerBounds]) -> f64 {
    if layer == 0 {
        net.input_lb
            .iter()
            .zip(&net.input_ub)
            .map(|(lb, ub)| lb.abs().max(ub.abs()))
            .fold(0.0, f64::max)
    } else {
        bounds[layer - 1]
            .ub
            .iter()
            .map(|ub| ub.max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Scalar norm bound for layer `l` (1-based) given the previous layer's
/// post-activation magnitude cap: `|W|_inf * mag + |b|_inf`.
pub fn norm_layer_bound(net: &Network, l: usize, prev_magnitude: f64) -> f64 {
    let layer = &net.layers[l - 1];
    layer.weight_inf_norm() * prev_magnitude + layer.bias_inf_norm()
}

/// Norm-based bounds: one scalar `B_l` per layer, replicated per neuron as
/// `[-B_l, B_l]`, propagated forward from the input box magnitude.
pub fn naive_norm_bounds(net: &Network) -> BoundsSet {
    let start = Instant::now();
    let mut layers: Vec<LayerBounds> = Vec::with_capacity(net.depth());
    for l in 1..=net.depth() {
        let mag = post_activation_magnitude(net, l - 1, &layers);
        let b = norm_layer_bound(net, l, mag);
        let width = net.layer_width(l);
        layers.push(LayerBounds::closed_form(vec![-b; width], vec![b; width]));
    }
    BoundsSet {
        method: Method::NaiveNorm,
        layers,
        total_time: start.elapsed().as_secs_f64(),
        network_name: net.name.clone(),
    }
}

/// Interval bounds of one affine layer given the previous layer's
/// post-activation box `[p, q]`.
pub fn affine_interval(
    weights: &[Vec<f64>],
    bias: &[f64],
    p: &[f64],
    q: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut lb = Vec::with_capacity(bias.len());
    let mut ub = Vec::with_capacity(bias.len());
    for (row, b) in weights.iter().zip(bias) {
        let mut lo = *b;
        let mut hi = *b;
        for (w, (pj, qj)) in row.iter().zip(p.iter().zip(q)) {
            if *w >= 0.0 {
                lo += w * pj;
                hi += w * qj;
            } else {
                lo += w * qj;
                hi += w * pj;
            }
        }
        lb.push(lo);
        ub.push(hi);
    }
    (lb, ub)
}

/// Elementwise interval propagation through the network.
///
/// Exact on the first layer (a linear function's box extremum is attained
/// coordinatewise) and pointwise at least as tight as
/// [`naive_norm_bounds`] everywhere.
pub fn interval_bounds(net: &Network) -> BoundsSet {
    let start = Instant::now();
    let mut layers: Vec<LayerBounds> = Vec::with_capacity(net.depth());
    let mut p = net.input_lb.clone();
    let mut q = net.input_ub.clone();
    for layer in &net.layers {
        let (lb, ub) = affine_interval(&layer.weights, &layer.bias, &p, &q);
        if layer.activation == Activation::Relu {
            p = lb.iter().map(|v| v.max(0.0)).collect();
            q = ub.iter().map(|v| v.max(0.0)).collect();
        } else {
            p = lb.clone();
            q = ub.clone();
        }
        layers.push(LayerBounds::closed_form(lb, ub));
    }
    BoundsSet {
        method: Method::NaiveInterval,
        layers,
        total_time: start.elapsed().as_secs_f64(),
        network_name: net.name.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_inputs, Layer};

    #[test]
    fn norm_bounds_on_gap_example() {
        let net = Network::example_relu_gap();
        let b = naive_norm_bounds(&net);
        assert_eq!(b.layer(1).lb, vec![-2.0, -2.0]);
        assert_eq!(b.layer(1).ub, vec![2.0, 2.0]);
        assert_eq!(b.layer(2).lb, vec![-4.0]);
        assert_eq!(b.layer(2).ub, vec![4.0]);
        b.validate(&net).unwrap();
    }

    #[test]
    fn norm_bounds_zero_network() {
        let net = Network::generate_random(&[2, 3, 2], 1, 0.0).unwrap();
        let b = naive_norm_bounds(&net);
        for layer in &b.layers {
            assert!(layer.lb.iter().all(|v| *v == 0.0));
            assert!(layer.ub.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn interval_bounds_single_affine_row() {
        // a = 2x - y + 1 over x, y in [0, 1] lands in [0, 3].
        let (lb, ub) = affine_interval(
            &[vec![2.0, -1.0]],
            &[1.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
        );
        assert_eq!(lb, vec![0.0]);
        assert_eq!(ub, vec![3.0]);
    }

    #[test]
    fn interval_bounds_on_gap_example() {
        let net = Network::example_relu_gap();
        let b = interval_bounds(&net);
        assert_eq!(b.layer(1).lb, vec![-2.0, -2.0]);
        assert_eq!(b.layer(1).ub, vec![2.0, 2.0]);
        // Layer 2 sums two post-activations each in [0, 2].
        assert_eq!(b.layer(2).lb, vec![0.0]);
        assert_eq!(b.layer(2).ub, vec![4.0]);
    }

    #[test]
    fn interval_bounds_identity_layer() {
        let net = Network {
            name: "id".into(),
            input_dim: 2,
            input_lb: vec![0.0, 0.0],
            input_ub: vec![1.0, 1.0],
            layers: vec![Layer {
                weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                bias: vec![0.0, 0.0],
                activation: Activation::Linear,
            }],
        };
        let b = interval_bounds(&net);
        assert_eq!(b.layer(1).lb, vec![0.0, 0.0]);
        assert_eq!(b.layer(1).ub, vec![1.0, 1.0]);
    }

    #[test]
    fn interval_dominates_norm_on_random_networks() {
        for seed in 0..20 {
            let net = Network::generate_random(&[3, 5, 4, 2], seed, 1.2).unwrap();
            let norm = naive_norm_bounds(&net);
            let iv = interval_bounds(&net);
            for l in 1..=net.depth() {
                for j in 0..net.layer_width(l) {
                    assert!(iv.layer(l).lb[j] >= norm.layer(l).lb[j] - 1e-12);
                    assert!(iv.layer(l).ub[j] <= norm.layer(l).ub[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn both_methods_are_sound_on_samples() {
        for seed in [3u64, 17, 40] {
            let net = Network::generate_random(&[4, 6, 5, 3], seed, 1.0).unwrap();
            let sets = [naive_norm_bounds(&net), interval_bounds(&net)];
            for x in sample_inputs(&net, 500, seed ^ 0xabcd) {
                let acts = net.forward(&x).unwrap();
                for set in &sets {
                    for (l, pre) in acts.pre.iter().enumerate() {
                        for (j, a) in pre.iter().enumerate() {
                            assert!(*a >= set.layer(l + 1).lb[j] - 1e-9);
                            assert!(*a <= set.layer(l + 1).ub[j] + 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bounds_json_round_trip() {
        let net = Network::example_relu_gap();
        let b = naive_norm_bounds(&net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        b.save(&path).unwrap();
        let loaded = BoundsSet::load(&path).unwrap();
        assert_eq!(b, loaded);
        // Schema spot checks: exact key names and method string.
        let text = std::fs::read_to_string(&path).unwrap();
        for key in [
            "\"method\"",
            "\"layers\"",
            "\"lb\"",
            "\"ub\"",
            "\"status\"",
            "\"solve_time\"",
            "\"total_time\"",
            "\"network_name\"",
            "\"naive_norm\"",
            "\"closed_form\"",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }

    #[test]
    fn validate_rejects_shape_mismatch() {
        let net = Network::example_relu_gap();
        let mut b = naive_norm_bounds(&net);
        b.layers[0].lb.pop();
        assert!(b.validate(&net).is_err());
    }
}
