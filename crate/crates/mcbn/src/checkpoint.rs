//! Versioned JSON checkpoints. Serialisation uses shortest-round-trip
//! decimal floats, so reloading a checkpoint reproduces every parameter
//! value exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNormState, DenseParams};
use crate::matrix::Matrix;
use crate::network::{Layer, Network};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerRecord {
    Dense {
        in_dim: usize,
        out_dim: usize,
        /// Row-major `in_dim x out_dim`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        features: usize,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
        momentum_alpha: f64,
        num_updates: u64,
    },
    Relu,
    Dropout {
        p: f64,
    },
    Softmax,
}

pub fn network_to_json(net: &Network) -> String {
    let layers = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Dense(p) => LayerRecord::Dense {
                in_dim: p.in_dim(),
                out_dim: p.out_dim(),
                weights: p.weights.data().to_vec(),
                bias: p.bias.clone(),
            },
            Layer::BatchNorm(s) => LayerRecord::BatchNorm {
                features: s.features(),
                gamma: s.gamma.clone(),
                beta: s.beta.clone(),
                running_mean: s.running_mean.clone(),
                running_var: s.running_var.clone(),
                eps: s.eps,
                momentum_alpha: s.momentum_alpha,
                num_updates: s.num_updates,
            },
            Layer::Relu => LayerRecord::Relu,
            Layer::Dropout(p) => LayerRecord::Dropout { p: *p },
            Layer::Softmax => LayerRecord::Softmax,
        })
        .collect();
    let doc = CheckpointDoc { version: CHECKPOINT_VERSION, layers };
    serde_json::to_string_pretty(&doc).expect("checkpoint serialisation cannot fail")
}

pub fn network_from_json(json: &str) -> Result<Network> {
    let doc: CheckpointDoc =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {} (expected {})",
            doc.version, CHECKPOINT_VERSION
        )));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for record in doc.layers {
        layers.push(match record {
            LayerRecord::Dense { in_dim, out_dim, weights, bias } => {
                let weights = Matrix::from_vec(in_dim, out_dim, weights)?;
                Layer::Dense(DenseParams::new(weights, bias)?)
            }
            LayerRecord::BatchNorm {
                features,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum_alpha,
                num_updates,
            } => {
                if gamma.len() != features {
                    return Err(Error::Shape(format!(
                        "batch-norm record declares {features} features but gamma has length {}",
                        gamma.len()
                    )));
                }
                let state = BatchNormState {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    momentum_alpha,
                    num_updates,
                };
                state.validate()?;
                Layer::BatchNorm(state)
            }
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::Dropout { p } => Layer::Dropout(p),
            LayerRecord::Softmax => Layer::Softmax,
        });
    }
    Network::new(layers)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, network_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    network_from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_mlp;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_value_exact() {
        let mut rng = Rng::new(31);
        let mut net = build_mlp(2, &[5, 4], 3, true, Some(0.25), &mut rng).unwrap();
        // make the stored values awkward on purpose
        if let Layer::BatchNorm(s) = &mut net.layers_mut()[1] {
            s.running_mean = vec![0.1 + 0.2, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300, 0.0];
            s.running_var = vec![2.0 / 3.0, 1e-300, std::f64::consts::PI, 0.0, 1.0];
            s.num_updates = 77;
        }
        let json = network_to_json(&net);
        let back = network_from_json(&json).unwrap();
        assert_eq!(net.param_vector(), back.param_vector());
        for (a, b) in net.layers().iter().zip(back.layers()) {
            if let (Layer::BatchNorm(x), Layer::BatchNorm(y)) = (a, b) {
                assert_eq!(x, y);
            }
        }
        assert_eq!(json, network_to_json(&back));
    }

    #[test]
    fn version_mismatch_rejected() {
        let doc = r#"{"version": 2, "layers": []}"#;
        assert!(network_from_json(doc).is_err());
    }

    #[test]
    fn negative_running_var_rejected_on_load() {
        let doc = r#"{"version": 1, "layers": [{
            "type": "batch_norm", "features": 1,
            "gamma": [1.0], "beta": [0.0],
            "running_mean": [0.0], "running_var": [-0.5],
            "eps": 1e-5, "momentum_alpha": 0.1, "num_updates": 0
        }]}"#;
        assert!(network_from_json(doc).is_err());
    }

    #[test]
    fn document_shape() {
        let mut rng = Rng::new(1);
        let net = build_mlp(2, &[3], 2, true, None, &mut rng).unwrap();
        let v: serde_json::Value = serde_json::from_str(&network_to_json(&net)).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["layers"][0]["type"], "dense");
        assert_eq!(v["layers"][1]["type"], "batch_norm");
        assert!(v["layers"][1]["num_updates"].is_u64());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::rng::Rng;

        proptest! {
            #[test]
            fn roundtrip_preserves_every_parameter_bit(
                input_dim in 1usize..4,
                hidden in 1usize..6,
                classes in 2usize..4,
                batch_norm in proptest::bool::ANY,
                dropout_p in proptest::option::of(0.0..0.9_f64),
                seed in 0u64..10_000,
            ) {
                let mut rng = Rng::new(seed);
                let net = build_mlp(
                    input_dim,
                    &[hidden],
                    classes,
                    batch_norm,
                    dropout_p,
                    &mut rng,
                )
                .unwrap();
                let back = network_from_json(&network_to_json(&net)).unwrap();
                let (a, b) = (net.param_vector(), back.param_vector());
                prop_assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(&b) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
