//! Network description, validation, and batch-norm canonicalization.
//!
//! A [`ModelSpec`] is an ordered list of layers where each layer consumes the
//! previous layer's output. The only non-sequential edge is
//! [`LayerSpec::ResidualAdd`], which adds the output of an earlier layer.
//! Construction validates the whole shape chain, so every `ModelSpec` in
//! circulation is runnable.

mod format;
mod forward;

pub use format::{load_model, parse_model, save_model, to_json_string};
pub use forward::{classify, forward, ActivationTrace, LayerTrace};

use std::collections::BTreeSet;
use std::fmt;

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_dims, pool_output_dims, Tensor};

/// Zero-padded convolution with `O x C x kH x kW` kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Fully connected layer with `(in, out)` weights. Inputs of any rank are
/// consumed as flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Inference-mode batch normalization over dimension 0 (channels).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
}

impl BatchNorm {
    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.gamma.len())
            .map(|c| {
                let g = self.gamma.data()[c] as f64;
                let b = self.beta.data()[c] as f64;
                let m = self.running_mean.data()[c] as f64;
                let v = self.running_var.data()[c] as f64;
                let scale = g / (v + self.epsilon as f64).sqrt();
                (scale, b - m * scale)
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Adds the output of layer `skip_source` (optionally through a 1x1
/// projection convolution) to the previous layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdd {
    pub skip_source: usize,
    pub projection: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(BatchNorm),
    ResidualAdd(ResidualAdd),
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::GlobalAvgPool => "global_avgpool",
            LayerSpec::BatchNorm(_) => "batchnorm",
            LayerSpec::ResidualAdd(_) => "residual_add",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Dense(_))
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.kernels.len() + c.bias.len(),
            LayerSpec::Dense(d) => d.weights.len() + d.bias.len(),
            LayerSpec::BatchNorm(b) => 4 * b.channels(),
            LayerSpec::ResidualAdd(r) => r
                .projection
                .as_ref()
                .map_or(0, |p| p.kernels.len() + p.bias.len()),
            _ => 0,
        }
    }

    /// Output shape for a given input shape (and skip shape for residual adds).
    pub fn output_shape(
        &self,
        input: &[usize],
        skip: Option<&[usize]>,
    ) -> Result<Vec<usize>, String> {
        match self {
            LayerSpec::Conv2d(conv) => conv_output_shape(conv, input),
            LayerSpec::Dense(d) => {
                let n: usize = input.iter().product();
                match d.weights.shape() {
                    &[rows, cols] => {
                        if rows != n {
                            return Err(format!(
                                "dense weights expect {rows} inputs, previous layer yields {n} ({input:?})"
                            ));
                        }
                        if d.bias.shape() != [cols] {
                            return Err(format!(
                                "dense bias shape {:?} does not match {cols} outputs",
                                d.bias.shape()
                            ));
                        }
                        Ok(vec![cols])
                    }
                    other => Err(format!("dense weights must be rank 2, got {other:?}")),
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool { window, stride } => match input {
                &[c, h, w] => {
                    let (oh, ow) =
                        pool_output_dims(h, w, *window, *stride).map_err(|e| e.to_string())?;
                    Ok(vec![c, oh, ow])
                }
                _ => Err(format!("maxpool needs a C x H x W input, got {input:?}")),
            },
            LayerSpec::GlobalAvgPool => match input {
                &[c, _, _] => Ok(vec![c]),
                _ => Err(format!(
                    "global_avgpool needs a C x H x W input, got {input:?}"
                )),
            },
            LayerSpec::BatchNorm(bn) => {
                let c = input[0];
                for (name, t) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    if t.shape() != [c] {
                        return Err(format!(
                            "batchnorm {name} shape {:?} does not match {c} channels",
                            t.shape()
                        ));
                    }
                }
                if !bn.epsilon.is_finite() || bn.epsilon < 0.0 {
                    return Err(format!(
                        "batchnorm epsilon {} must be finite and >= 0",
                        bn.epsilon
                    ));
                }
                if bn.running_var.data().iter().any(|&v| {
                    let s = v as f64 + bn.epsilon as f64;
                    s <= 0.0 || s.is_nan()
                }) {
                    return Err("batchnorm running_var + epsilon must be positive".into());
                }
                Ok(input.to_vec())
            }
            LayerSpec::ResidualAdd(res) => {
                let skip = skip.ok_or("residual_add without a skip source")?;
                let projected = match &res.projection {
                    Some(p) => {
                        if p.kernels.rank() != 4
                            || p.kernels.shape()[2..] != [1, 1]
                            || p.padding != 0
                        {
                            return Err(format!(
                                "residual projection must be a 1x1 convolution without padding, got kernels {:?} padding {}",
                                p.kernels.shape(),
                                p.padding
                            ));
                        }
                        conv_output_shape(p, skip)?
                    }
                    None => skip.to_vec(),
                };
                if projected != input {
                    return Err(format!(
                        "residual branch shape {input:?} differs from skip shape {projected:?} (source layer {})",
                        res.skip_source
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn conv_output_shape(conv: &Conv2d, input: &[usize]) -> Result<Vec<usize>, String> {
    let (c, h, w) = match input {
        &[c, h, w] => (c, h, w),
        _ => return Err(format!("conv2d needs a C x H x W input, got {input:?}")),
    };
    let (o, kc, kh, kw) = match conv.kernels.shape() {
        &[o, kc, kh, kw] => (o, kc, kh, kw),
        other => {
            return Err(format!(
                "conv2d kernels must be O x C x kH x kW, got {other:?}"
            ))
        }
    };
    if kc != c {
        return Err(format!(
            "conv2d kernels expect {kc} channels, input has {c}"
        ));
    }
    if conv.bias.shape() != [o] {
        return Err(format!(
            "conv2d bias shape {:?} does not match {o} output channels",
            conv.bias.shape()
        ));
    }
    let (oh, ow) =
        conv2d_output_dims(h, w, kh, kw, conv.stride, conv.padding).map_err(|e| e.to_string())?;
    Ok(vec![o, oh, ow])
}

/// One input/output pair the engine can check itself against at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Golden {
    pub input: Tensor,
    pub probabilities: Vec<f32>,
}

pub const GOLDEN_TOLERANCE: f32 = 1e-4;

/// A validated network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    output_labels: Vec<ActionUnit>,
    golden: Option<Golden>,
    output_shapes: Vec<Vec<usize>>,
    /// `folded[i]` holds layer `i - 1` with batch-norm layer `i` merged into it.
    folded: Vec<Option<LayerSpec>>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        output_labels: Vec<ActionUnit>,
    ) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        if output_labels.is_empty() {
            return Err(Error::Config("model declares no output labels".into()));
        }
        let unique: BTreeSet<_> = output_labels.iter().collect();
        if unique.len() != output_labels.len() {
            return Err(Error::Config(format!(
                "duplicate output labels in {output_labels:?}"
            )));
        }
        let last = layers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::ShapeChain {
                layer: 0,
                reason: "model has no layers".into(),
            })?;

        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Sigmoid) && i != last {
                return Err(Error::ShapeChain {
                    layer: i,
                    reason: "sigmoid is only allowed as the final layer".into(),
                });
            }
            let skip = match layer {
                LayerSpec::ResidualAdd(res) => {
                    if res.skip_source >= i {
                        return Err(Error::ShapeChain {
                            layer: i,
                            reason: format!(
                                "skip_source {} must reference an earlier layer",
                                res.skip_source
                            ),
                        });
                    }
                    Some(shapes[res.skip_source].as_slice())
                }
                _ => None,
            };
            let out = layer
                .output_shape(&current, skip)
                .map_err(|reason| Error::ShapeChain { layer: i, reason })?;
            shapes.push(out.clone());
            current = out;
        }
        if !matches!(layers[last], LayerSpec::Sigmoid) {
            return Err(Error::ShapeChain {
                layer: last,
                reason: format!("final layer must be sigmoid, found {}", layers[last].kind()),
            });
        }
        if current != [output_labels.len()] {
            return Err(Error::ShapeChain {
                layer: last,
                reason: format!(
                    "sigmoid head has shape {current:?} but {} output labels are declared",
                    output_labels.len()
                ),
            });
        }

        let folded = fold_plan(&layers)?;
        Ok(Self {
            name: name.into(),
            input_shape,
            layers,
            output_labels,
            golden: None,
            output_shapes: shapes,
            folded,
        })
    }

    pub fn with_golden(mut self, golden: Golden) -> Result<Self> {
        if golden.input.shape() != self.input_shape {
            return Err(Error::Dimension {
                op: "golden input",
                left: golden.input.shape().to_vec(),
                right: self.input_shape.to_vec(),
            });
        }
        if golden.probabilities.len() != self.output_labels.len() {
            return Err(Error::Config(format!(
                "golden has {} probabilities for {} labels",
                golden.probabilities.len(),
                self.output_labels.len()
            )));
        }
        self.golden = Some(golden);
        Ok(self)
    }

    /// Runs the embedded golden input and compares probabilities.
    pub fn self_check(&self) -> Result<()> {
        let Some(golden) = &self.golden else {
            return Ok(());
        };
        let trace = forward(self, &golden.input)?;
        for (index, (&expected, &actual)) in golden
            .probabilities
            .iter()
            .zip(&trace.probabilities)
            .enumerate()
        {
            if (expected - actual).abs() > GOLDEN_TOLERANCE || actual.is_nan() || expected.is_nan()
            {
                return Err(Error::GoldenMismatch {
                    index,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_labels(&self) -> &[ActionUnit] {
        &self.output_labels
    }

    pub fn golden(&self) -> Option<&Golden> {
        self.golden.as_ref()
    }

    /// Inferred output shape of every layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.output_shapes
    }

    pub fn layer_input_shape(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[layer - 1]
        }
    }

    pub fn label_index(&self, au: ActionUnit) -> Option<usize> {
        self.output_labels.iter().position(|&l| l == au)
    }

    /// For a batch-norm layer merged into its predecessor, the merged linear layer.
    pub fn folded_layer(&self, layer: usize) -> Option<&LayerSpec> {
        self.folded.get(layer).and_then(Option::as_ref)
    }

    /// Index of the first conv/dense layer (the pixel-facing layer).
    pub fn first_linear_layer(&self) -> Option<usize> {
        self.layers.iter().position(LayerSpec::is_linear)
    }

    /// Equivalent model with every foldable batch-norm merged into the
    /// preceding conv/dense layer and removed.
    pub fn fold_batchnorm(&self) -> Result<ModelSpec> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut new_index = vec![0usize; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(merged) = &self.folded[i] {
                // replaces the conv/dense pushed for layer i - 1
                *layers.last_mut().expect("folded layer has a predecessor") = merged.clone();
                new_index[i] = layers.len() - 1;
                continue;
            }
            let mut layer = layer.clone();
            if let LayerSpec::ResidualAdd(res) = &mut layer {
                res.skip_source = new_index[res.skip_source];
            }
            layers.push(layer);
            new_index[i] = layers.len() - 1;
        }
        let mut model = ModelSpec::new(
            format!("{}+folded", self.name),
            self.input_shape,
            layers,
            self.output_labels.clone(),
        )?;
        model.golden = self.golden.clone();
        Ok(model)
    }
}

/// Merges an inference-mode batch-norm into the conv or dense layer feeding it.
pub fn fold_into_linear(linear: &LayerSpec, bn: &BatchNorm) -> Result<LayerSpec> {
    let affine = bn.affine();
    match linear {
        LayerSpec::Conv2d(conv) => {
            let o = conv.kernels.shape()[0];
            if affine.len() != o {
                return Err(Error::Config(format!(
                    "batchnorm has {} channels, conv produces {o}",
                    affine.len()
                )));
            }
            let per_out = conv.kernels.len() / o;
            let kernels: Vec<f32> = conv
                .kernels
                .data()
                .iter()
                .enumerate()
                .map(|(i, &k)| (k as f64 * affine[i / per_out].0) as f32)
                .collect();
            let bias: Vec<f32> = conv
                .bias
                .data()
                .iter()
                .zip(&affine)
                .map(|(&b, &(s, t))| (b as f64 * s + t) as f32)
                .collect();
            Ok(LayerSpec::Conv2d(Conv2d {
                kernels: Tensor::new(conv.kernels.shape().to_vec(), kernels)?,
                bias: Tensor::vector(bias)?,
                stride: conv.stride,
                padding: conv.padding,
            }))
        }
        LayerSpec::Dense(dense) => {
            let m = dense.weights.shape()[1];
            if affine.len() != m {
                return Err(Error::Config(format!(
                    "batchnorm has {} channels, dense produces {m}",
                    affine.len()
                )));
            }
            let weights: Vec<f32> = dense
                .weights
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| (w as f64 * affine[i % m].0) as f32)
                .collect();
            let bias: Vec<f32> = dense
                .bias
                .data()
                .iter()
                .zip(&affine)
                .map(|(&b, &(s, t))| (b as f64 * s + t) as f32)
                .collect();
            Ok(LayerSpec::Dense(Dense {
                weights: Tensor::new(dense.weights.shape().to_vec(), weights)?,
                bias: Tensor::vector(bias)?,
            }))
        }
        other => Err(Error::Config(format!(
            "cannot fold batchnorm into a {} layer",
            other.kind()
        ))),
    }
}

fn fold_plan(layers: &[LayerSpec]) -> Result<Vec<Option<LayerSpec>>> {
    let skip_sources: BTreeSet<usize> = layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::ResidualAdd(r) => Some(r.skip_source),
            _ => None,
        })
        .collect();
    let mut plan = vec![None; layers.len()];
    for i in 1..layers.len() {
        if let LayerSpec::BatchNorm(bn) = &layers[i] {
            let prev = &layers[i - 1];
            // The pre-norm activation must not be consumed anywhere else.
            if prev.is_linear() && !skip_sources.contains(&(i - 1)) {
                plan[i] = Some(fold_into_linear(prev, bn)?);
            }
        }
    }
    Ok(plan)
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {:?}", self.name)?;
        writeln!(f, "input  {:?}", self.input_shape)?;
        let labels: Vec<String> = self.output_labels.iter().map(|l| l.to_string()).collect();
        writeln!(f, "labels {}", labels.join(", "))?;
        let mut total = 0;
        for (i, (layer, shape)) in self.layers.iter().zip(&self.output_shapes).enumerate() {
            let params = layer.parameter_count();
            total += params;
            let detail = match layer {
                LayerSpec::Conv2d(c) => format!(
                    "kernels {:?} stride {} padding {}",
                    c.kernels.shape(),
                    c.stride,
                    c.padding
                ),
                LayerSpec::Dense(d) => format!("weights {:?}", d.weights.shape()),
                LayerSpec::MaxPool { window, stride } => format!("window {window} stride {stride}"),
                LayerSpec::BatchNorm(bn) => {
                    let folded = if self.folded[i].is_some() {
                        " (folded)"
                    } else {
                        ""
                    };
                    format!("eps {}{folded}", bn.epsilon)
                }
                LayerSpec::ResidualAdd(r) => match &r.projection {
                    Some(p) => format!(
                        "skip {} via projection {:?} stride {}",
                        r.skip_source,
                        p.kernels.shape(),
                        p.stride
                    ),
                    None => format!("skip {}", r.skip_source),
                },
                _ => String::new(),
            };
            writeln!(
                f,
                "{i:>3}  {:<14} {:<16} {:>8}  {detail}",
                layer.kind(),
                format!("{shape:?}"),
                params
            )?;
        }
        write!(f, "total parameters {total}")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn dense(n: usize, m: usize, w: Vec<f32>, b: Vec<f32>) -> LayerSpec {
        LayerSpec::Dense(Dense {
            weights: Tensor::new(vec![n, m], w).unwrap(),
            bias: Tensor::vector(b).unwrap(),
        })
    }

    #[test]
    fn minimal_model_validates() {
        let m = ModelSpec::new(
            "min",
            [1, 2, 2],
            vec![dense(4, 1, vec![0.0; 4], vec![0.0]), LayerSpec::Sigmoid],
            vec![ActionUnit(4)],
        )
        .unwrap();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.output_shapes(), &[vec![1], vec![1]]);
    }

    #[test]
    fn rejects_missing_sigmoid_head() {
        let err = ModelSpec::new(
            "x",
            [1, 2, 2],
            vec![dense(4, 1, vec![0.0; 4], vec![0.0])],
            vec![ActionUnit(4)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeChain { layer: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let err = ModelSpec::new(
            "x",
            [1, 2, 2],
            vec![dense(4, 2, vec![0.0; 8], vec![0.0; 2]), LayerSpec::Sigmoid],
            vec![ActionUnit(4)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeChain { layer: 1, .. }), "{err}");
    }

    #[test]
    fn shape_chain_error_names_layer() {
        let conv = LayerSpec::Conv2d(Conv2d {
            kernels: Tensor::zeros(&[2, 3, 3, 3]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
            stride: 1,
            padding: 1,
        });
        let err = ModelSpec::new(
            "x",
            [1, 4, 4],
            vec![LayerSpec::Relu, conv, LayerSpec::Sigmoid],
            vec![ActionUnit(4)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeChain { layer: 1, .. }), "{err}");
    }

    #[test]
    fn residual_must_reference_earlier_layer_with_same_shape() {
        let flat = |skip| {
            ModelSpec::new(
                "x",
                [1, 2, 2],
                vec![
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::ResidualAdd(ResidualAdd {
                        skip_source: skip,
                        projection: None,
                    }),
                    dense(4, 1, vec![0.0; 4], vec![0.0]),
                    LayerSpec::Sigmoid,
                ],
                vec![ActionUnit(4)],
            )
        };
        assert!(matches!(flat(0), Err(Error::ShapeChain { layer: 2, .. })));
        assert!(flat(1).is_ok());
        assert!(matches!(flat(2), Err(Error::ShapeChain { layer: 2, .. })));
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(ModelSpec::new(
            "x",
            [1, 1, 2],
            vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2]), LayerSpec::Sigmoid],
            vec![ActionUnit(4), ActionUnit(4)],
        )
        .is_err());
    }

    #[test]
    fn folding_keeps_skip_sources_pointing_at_same_activation() {
        let conv = |o, c| {
            LayerSpec::Conv2d(Conv2d {
                kernels: Tensor::filled(&[o, c, 1, 1], 0.5).unwrap(),
                bias: Tensor::zeros(&[o]).unwrap(),
                stride: 1,
                padding: 0,
            })
        };
        let bn = LayerSpec::BatchNorm(BatchNorm {
            gamma: Tensor::filled(&[2], 2.0).unwrap(),
            beta: Tensor::filled(&[2], 0.1).unwrap(),
            running_mean: Tensor::filled(&[2], 0.3).unwrap(),
            running_var: Tensor::filled(&[2], 4.0).unwrap(),
            epsilon: 0.0,
        });
        let model = ModelSpec::new(
            "fold",
            [1, 2, 2],
            vec![
                conv(2, 1),
                bn.clone(),
                LayerSpec::Relu,
                conv(2, 2),
                bn,
                LayerSpec::ResidualAdd(ResidualAdd {
                    skip_source: 2,
                    projection: None,
                }),
                LayerSpec::GlobalAvgPool,
                dense(2, 1, vec![1.0, -1.0], vec![0.0]),
                LayerSpec::Sigmoid,
            ],
            vec![ActionUnit(6)],
        )
        .unwrap();
        assert!(model.folded_layer(1).is_some());
        assert!(model.folded_layer(4).is_some());
        let folded = model.fold_batchnorm().unwrap();
        assert_eq!(folded.layers().len(), 7);
        match &folded.layers()[3] {
            LayerSpec::ResidualAdd(r) => assert_eq!(r.skip_source, 1),
            other => panic!("unexpected {other:?}"),
        }
        match &folded.layers()[0] {
            // scale = 2 / sqrt(4) = 1, shift = 0.1 - 0.3
            LayerSpec::Conv2d(c) => {
                assert_eq!(c.kernels.data(), &[0.5, 0.5]);
                assert!((c.bias.data()[0] + 0.2).abs() < 1e-7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batchnorm_after_skip_source_is_not_folded() {
        let conv = LayerSpec::Conv2d(Conv2d {
            kernels: Tensor::filled(&[1, 1, 1, 1], 1.0).unwrap(),
            bias: Tensor::zeros(&[1]).unwrap(),
            stride: 1,
            padding: 0,
        });
        let bn = LayerSpec::BatchNorm(BatchNorm {
            gamma: Tensor::filled(&[1], 1.0).unwrap(),
            beta: Tensor::filled(&[1], 0.0).unwrap(),
            running_mean: Tensor::filled(&[1], 0.0).unwrap(),
            running_var: Tensor::filled(&[1], 1.0).unwrap(),
            epsilon: 0.0,
        });
        let model = ModelSpec::new(
            "nofold",
            [1, 2, 2],
            vec![
                conv,
                bn,
                LayerSpec::ResidualAdd(ResidualAdd {
                    skip_source: 0,
                    projection: None,
                }),
                LayerSpec::Flatten,
                dense(4, 1, vec![1.0; 4], vec![0.0]),
                LayerSpec::Sigmoid,
            ],
            vec![ActionUnit(4)],
        )
        .unwrap();
        assert!(model.folded_layer(1).is_none());
        assert_eq!(model.fold_batchnorm().unwrap().layers().len(), 6);
    }
}
