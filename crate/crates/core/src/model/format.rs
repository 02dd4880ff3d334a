//! Portable model format, version 1.
//!
//! A single JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "toy",
//!   "input_shape": [1, 112, 112],
//!   "output_labels": ["AU04", "AU25"],
//!   "layers": [
//!     {"kind": "conv2d", "stride": 1, "padding": 1,
//!      "kernels": {"shape": [4, 1, 3, 3], "data_b64": "..."},
//!      "bias": {"shape": [4], "data_b64": "..."}},
//!     {"kind": "relu"},
//!     ...
//!     {"kind": "sigmoid"}
//!   ],
//!   "golden": {"input": {"shape": [...], "data_b64": "..."}, "probabilities": [0.41, 0.57]}
//! }
//! ```
//!
//! Weight tensors are little-endian `f32`, row-major. Kernels are OIHW and
//! dense weights are `(in, out)`. An optional free-form `metadata` object is
//! accepted and ignored.

use std::collections::BTreeSet;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{BatchNorm, Conv2d, Dense, Golden, LayerSpec, ModelSpec, ResidualAdd};

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldenDoc {
    input: TensorDoc,
    probabilities: Vec<f32>,
}

#[derive(Debug, Deserialize)]
struct Header {
    name: String,
    input_shape: Vec<usize>,
    output_labels: Vec<ActionUnit>,
    layers: Vec<Value>,
    #[serde(default)]
    golden: Option<GoldenDoc>,
    #[serde(default, rename = "metadata")]
    _metadata: Option<Value>,
}

const KINDS: &[(&str, &[&str], &[&str])] = &[
    // (kind, required fields, optional fields)
    ("conv2d", &["kernels"], &["bias", "stride", "padding"]),
    ("dense", &["weights"], &["bias"]),
    ("relu", &[], &[]),
    ("sigmoid", &[], &[]),
    ("maxpool", &["window"], &["stride"]),
    ("global_avgpool", &[], &[]),
    (
        "batchnorm",
        &["gamma", "beta", "running_mean", "running_var", "epsilon"],
        &[],
    ),
    ("residual_add", &["skip_source"], &["projection"]),
    ("flatten", &[], &[]),
];

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = parse_model(&text)?;
    model.self_check()?;
    Ok(model)
}

/// Parses and validates a model document without running the golden self-check.
pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("invalid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Parse("top level must be an object".into()))?;
    let version = obj
        .get("format_version")
        .ok_or_else(|| Error::Parse("missing format_version".into()))?
        .as_i64()
        .ok_or_else(|| Error::Parse("format_version must be an integer".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(root.clone()).map_err(|e| Error::Parse(e.to_string()))?;
    let input_shape: [usize; 3] = header.input_shape.as_slice().try_into().map_err(|_| {
        Error::Parse(format!(
            "input_shape must be [C, H, W], got {:?}",
            header.input_shape
        ))
    })?;

    let layers = header
        .layers
        .iter()
        .enumerate()
        .map(|(i, v)| parse_layer(i, v))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelSpec::new(header.name, input_shape, layers, header.output_labels)?;
    match header.golden {
        Some(g) => {
            let input = decode_tensor(&g.input, usize::MAX, "golden.input")?;
            model.with_golden(Golden {
                input,
                probabilities: g.probabilities,
            })
        }
        None => Ok(model),
    }
}

fn parse_layer(index: usize, value: &Value) -> Result<LayerSpec> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse(format!("layer {index} is not an object")))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse(format!("layer {index} has no string `kind`")))?;
    let (_, required, optional) =
        KINDS
            .iter()
            .find(|(k, _, _)| *k == kind)
            .ok_or_else(|| Error::UnknownLayerKind {
                index,
                kind: kind.to_string(),
            })?;
    for field in *required {
        if !obj.contains_key(*field) {
            return Err(Error::Parse(format!(
                "layer {index} ({kind}) is missing `{field}`"
            )));
        }
    }
    let allowed: BTreeSet<&str> = required.iter().chain(optional.iter()).copied().collect();
    for key in obj.keys() {
        if key != "kind" && !allowed.contains(key.as_str()) {
            return Err(Error::Parse(format!(
                "layer {index} ({kind}) has unexpected field `{key}`"
            )));
        }
    }

    let tensor = |field: &str| -> Result<Tensor> {
        let doc: TensorDoc = serde_json::from_value(obj[field].clone())
            .map_err(|e| Error::Parse(format!("layer {index} field {field}: {e}")))?;
        decode_tensor(&doc, index, field)
    };
    let uint = |field: &str, default: Option<usize>| -> Result<usize> {
        match obj.get(field) {
            Some(v) => v.as_u64().map(|n| n as usize).ok_or_else(|| {
                Error::Parse(format!(
                    "layer {index} field {field} must be a non-negative integer"
                ))
            }),
            None => {
                default.ok_or_else(|| Error::Parse(format!("layer {index} is missing `{field}`")))
            }
        }
    };

    Ok(match kind {
        "conv2d" => {
            let kernels = tensor("kernels")?;
            let bias = optional_bias(obj, index, &kernels, 0)?;
            LayerSpec::Conv2d(Conv2d {
                kernels,
                bias,
                stride: uint("stride", Some(1))?,
                padding: uint("padding", Some(0))?,
            })
        }
        "dense" => {
            let weights = tensor("weights")?;
            let bias = optional_bias(obj, index, &weights, 1)?;
            LayerSpec::Dense(Dense { weights, bias })
        }
        "relu" => LayerSpec::Relu,
        "sigmoid" => LayerSpec::Sigmoid,
        "maxpool" => {
            let window = uint("window", None)?;
            LayerSpec::MaxPool {
                window,
                stride: uint("stride", Some(window))?,
            }
        }
        "global_avgpool" => LayerSpec::GlobalAvgPool,
        "batchnorm" => LayerSpec::BatchNorm(BatchNorm {
            gamma: tensor("gamma")?,
            beta: tensor("beta")?,
            running_mean: tensor("running_mean")?,
            running_var: tensor("running_var")?,
            epsilon: obj["epsilon"]
                .as_f64()
                .ok_or_else(|| Error::Parse(format!("layer {index} epsilon must be a number")))?
                as f32,
        }),
        "residual_add" => {
            let projection = match obj.get("projection") {
                None | Some(Value::Null) => None,
                Some(p) => Some(parse_projection(index, p)?),
            };
            LayerSpec::ResidualAdd(ResidualAdd {
                skip_source: uint("skip_source", None)?,
                projection,
            })
        }
        "flatten" => LayerSpec::Flatten,
        _ => unreachable!("kind checked against KINDS"),
    })
}

fn parse_projection(index: usize, value: &Value) -> Result<Conv2d> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse(format!("layer {index} projection must be an object")))?;
    for key in obj.keys() {
        if !["kernels", "bias", "stride"].contains(&key.as_str()) {
            return Err(Error::Parse(format!(
                "layer {index} projection has unexpected field `{key}`"
            )));
        }
    }
    let doc: TensorDoc =
        serde_json::from_value(obj.get("kernels").cloned().ok_or_else(|| {
            Error::Parse(format!("layer {index} projection is missing `kernels`"))
        })?)
        .map_err(|e| Error::Parse(format!("layer {index} projection kernels: {e}")))?;
    let kernels = decode_tensor(&doc, index, "projection.kernels")?;
    let bias = optional_bias(obj, index, &kernels, 0)?;
    let stride = match obj.get("stride") {
        Some(v) => v.as_u64().ok_or_else(|| {
            Error::Parse(format!(
                "layer {index} projection stride must be an integer"
            ))
        })? as usize,
        None => 1,
    };
    Ok(Conv2d {
        kernels,
        bias,
        stride,
        padding: 0,
    })
}

fn optional_bias(
    obj: &Map<String, Value>,
    index: usize,
    weights: &Tensor,
    out_dim: usize,
) -> Result<Tensor> {
    match obj.get("bias") {
        None | Some(Value::Null) => {
            let n = weights.shape().get(out_dim).copied().unwrap_or(1);
            Tensor::zeros(&[n])
        }
        Some(v) => {
            let doc: TensorDoc = serde_json::from_value(v.clone())
                .map_err(|e| Error::Parse(format!("layer {index} bias: {e}")))?;
            decode_tensor(&doc, index, "bias")
        }
    }
}

fn decode_tensor(doc: &TensorDoc, layer: usize, field: &str) -> Result<Tensor> {
    let bytes = B64
        .decode(doc.data_b64.as_bytes())
        .map_err(|e| Error::Parse(format!("layer {layer} field {field}: bad base64: {e}")))?;
    let expected: usize = doc.shape.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::WeightLength {
            layer,
            field: field.to_string(),
            shape: doc.shape.clone(),
            expected,
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(doc.shape.clone(), data)
        .map_err(|e| Error::Parse(format!("layer {layer} field {field}: {e}")))
}

fn encode_tensor(t: &Tensor) -> Value {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    serde_json::to_value(TensorDoc {
        shape: t.shape().to_vec(),
        data_b64: B64.encode(bytes),
    })
    .expect("tensor doc serializes")
}

fn encode_layer(layer: &LayerSpec) -> Value {
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::from(layer.kind()));
    match layer {
        LayerSpec::Conv2d(c) => {
            obj.insert("kernels".into(), encode_tensor(&c.kernels));
            obj.insert("bias".into(), encode_tensor(&c.bias));
            obj.insert("stride".into(), Value::from(c.stride));
            obj.insert("padding".into(), Value::from(c.padding));
        }
        LayerSpec::Dense(d) => {
            obj.insert("weights".into(), encode_tensor(&d.weights));
            obj.insert("bias".into(), encode_tensor(&d.bias));
        }
        LayerSpec::MaxPool { window, stride } => {
            obj.insert("window".into(), Value::from(*window));
            obj.insert("stride".into(), Value::from(*stride));
        }
        LayerSpec::BatchNorm(bn) => {
            obj.insert("gamma".into(), encode_tensor(&bn.gamma));
            obj.insert("beta".into(), encode_tensor(&bn.beta));
            obj.insert("running_mean".into(), encode_tensor(&bn.running_mean));
            obj.insert("running_var".into(), encode_tensor(&bn.running_var));
            obj.insert("epsilon".into(), Value::from(bn.epsilon as f64));
        }
        LayerSpec::ResidualAdd(r) => {
            obj.insert("skip_source".into(), Value::from(r.skip_source));
            if let Some(p) = &r.projection {
                let mut proj = Map::new();
                proj.insert("kernels".into(), encode_tensor(&p.kernels));
                proj.insert("bias".into(), encode_tensor(&p.bias));
                proj.insert("stride".into(), Value::from(p.stride));
                obj.insert("projection".into(), Value::Object(proj));
            }
        }
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::GlobalAvgPool | LayerSpec::Flatten => {}
    }
    Value::Object(obj)
}

pub fn to_json_string(model: &ModelSpec) -> String {
    let mut root = Map::new();
    root.insert("format_version".into(), Value::from(FORMAT_VERSION));
    root.insert("name".into(), Value::from(model.name()));
    root.insert(
        "input_shape".into(),
        Value::from(model.input_shape().to_vec()),
    );
    root.insert(
        "output_labels".into(),
        serde_json::to_value(model.output_labels()).expect("labels serialize"),
    );
    root.insert(
        "layers".into(),
        Value::Array(model.layers().iter().map(encode_layer).collect()),
    );
    if let Some(g) = model.golden() {
        root.insert(
            "golden".into(),
            serde_json::json!({
                "input": encode_tensor(&g.input),
                "probabilities": g.probabilities,
            }),
        );
    }
    serde_json::to_string_pretty(&Value::Object(root)).expect("model serializes")
}

pub fn save_model(model: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json_string(model)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn b64(values: &[f32]) -> String {
        B64.encode(
            values
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>(),
        )
    }

    fn minimal() -> Value {
        json!({
            "format_version": 1,
            "name": "min",
            "input_shape": [1, 1, 2],
            "output_labels": ["AU04"],
            "layers": [
                {"kind": "dense",
                 "weights": {"shape": [2, 1], "data_b64": b64(&[0.5, -0.5])},
                 "bias": {"shape": [1], "data_b64": b64(&[0.0])}},
                {"kind": "sigmoid"}
            ]
        })
    }

    #[test]
    fn minimal_file_parses() {
        let m = parse_model(&minimal().to_string()).unwrap();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.output_labels(), &[ActionUnit(4)]);
    }

    #[test]
    fn wrong_weight_length_reports_layer_zero() {
        let mut doc = minimal();
        doc["layers"][0]["weights"]["data_b64"] = Value::from(b64(&[1.0, 2.0, 3.0]));
        match parse_model(&doc.to_string()).unwrap_err() {
            Error::WeightLength {
                layer,
                expected,
                found,
                ..
            } => {
                assert_eq!((layer, expected, found), (0, 2, 3));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_kind_and_version_rejected() {
        let mut doc = minimal();
        doc["layers"][1]["kind"] = Value::from("softmax");
        assert!(matches!(
            parse_model(&doc.to_string()),
            Err(Error::UnknownLayerKind { index: 1, .. })
        ));
        let mut doc = minimal();
        doc["format_version"] = Value::from(2);
        assert!(matches!(
            parse_model(&doc.to_string()),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        assert!(matches!(parse_model("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn params_present_iff_required() {
        let mut doc = minimal();
        doc["layers"][1]["window"] = Value::from(2);
        assert!(matches!(
            parse_model(&doc.to_string()),
            Err(Error::Parse(_))
        ));
        let mut doc = minimal();
        doc["layers"][0].as_object_mut().unwrap().remove("weights");
        assert!(matches!(
            parse_model(&doc.to_string()),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn golden_mismatch_detected_on_self_check() {
        let mut doc = minimal();
        doc["golden"] = json!({
            "input": {"shape": [1, 1, 2], "data_b64": b64(&[1.0, 0.0])},
            "probabilities": [0.5]
        });
        let m = parse_model(&doc.to_string()).unwrap();
        assert!(matches!(
            m.self_check(),
            Err(Error::GoldenMismatch { index: 0, .. })
        ));
        doc["golden"]["probabilities"] = json!([crate::tensor::sigmoid_scalar(0.5)]);
        parse_model(&doc.to_string()).unwrap().self_check().unwrap();
    }

    #[test]
    fn serialization_round_trips() {
        let m = parse_model(&minimal().to_string()).unwrap();
        let again = parse_model(&to_json_string(&m)).unwrap();
        assert_eq!(m, again);
    }
}
