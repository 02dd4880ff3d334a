use std::collections::BTreeSet;

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::tensor::{self, ArgmaxIndices, Tensor};

use super::{LayerSpec, ModelSpec};

/// What one layer saw and produced during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Tensor,
    pub output: Tensor,
    /// Max-pool winners.
    pub argmax: Option<ArgmaxIndices>,
    /// Residual adds: the (projected) skip tensor that was added to `input`.
    pub skip: Option<Tensor>,
}

/// Per-layer record of a forward pass; the substrate relevance propagation runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    /// Pre-sigmoid head values.
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub labels: Vec<ActionUnit>,
    /// Input values outside `[0, 1]`.
    pub out_of_range_inputs: usize,
}

pub fn forward(model: &ModelSpec, input: &Tensor) -> Result<ActivationTrace> {
    if input.shape() != model.input_shape() {
        return Err(Error::Dimension {
            op: "forward input",
            left: input.shape().to_vec(),
            right: model.input_shape().to_vec(),
        });
    }
    let out_of_range = input
        .data()
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if out_of_range > 0 {
        log::warn!(
            "{out_of_range} input values outside [0, 1]; the model expects normalized pixels"
        );
    }

    let mut layers: Vec<LayerTrace> = Vec::with_capacity(model.layers().len());
    let mut current = input.clone();
    for layer in model.layers() {
        let mut argmax = None;
        let mut skip = None;
        let output = match layer {
            LayerSpec::Conv2d(c) => {
                tensor::conv2d_forward(&current, &c.kernels, &c.bias, c.stride, c.padding)?
            }
            LayerSpec::Dense(d) => tensor::dense_forward(&current, &d.weights, &d.bias)?,
            LayerSpec::Relu => tensor::relu(&current),
            LayerSpec::Sigmoid => tensor::sigmoid(&current),
            LayerSpec::MaxPool { window, stride } => {
                let (out, idx) = tensor::maxpool2d(&current, *window, *stride)?;
                argmax = Some(idx);
                out
            }
            LayerSpec::GlobalAvgPool => tensor::global_avgpool(&current)?,
            LayerSpec::BatchNorm(bn) => {
                let affine = bn.affine();
                let per_channel = current.len() / affine.len();
                let data = current
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let (s, t) = affine[i / per_channel];
                        (v as f64 * s + t) as f32
                    })
                    .collect();
                Tensor::new(current.shape().to_vec(), data)?
            }
            LayerSpec::ResidualAdd(res) => {
                let source = &layers[res.skip_source].output;
                let branch = match &res.projection {
                    Some(p) => {
                        tensor::conv2d_forward(source, &p.kernels, &p.bias, p.stride, p.padding)?
                    }
                    None => source.clone(),
                };
                let out = current.add(&branch)?;
                skip = Some(branch);
                out
            }
            LayerSpec::Flatten => current.clone().reshape(vec![current.len()])?,
        };
        layers.push(LayerTrace {
            input: current,
            output: output.clone(),
            argmax,
            skip,
        });
        current = output;
    }

    let head = layers.last().expect("validated model has layers");
    Ok(ActivationTrace {
        logits: head.input.data().to_vec(),
        probabilities: head.output.data().to_vec(),
        labels: model.output_labels().to_vec(),
        out_of_range_inputs: out_of_range,
        layers,
    })
}

/// Labels whose probability reaches the threshold (inclusive).
pub fn classify(trace: &ActivationTrace, threshold: f32) -> BTreeSet<ActionUnit> {
    trace
        .labels
        .iter()
        .zip(&trace.probabilities)
        .filter(|(_, &p)| p >= threshold)
        .map(|(&au, _)| au)
        .collect()
}
