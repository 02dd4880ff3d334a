//! Layer-wise relevance propagation.
//!
//! Relevance starts at the target unit's logit and is pushed back through the
//! network one layer at a time until every input pixel carries a share.
//! Linear layers (conv, dense, and the batch-norms folded into them) use the
//! rule the [`RulePreset`] assigns to their category. Non-linear layers have
//! fixed treatments:
//!
//! * ReLU and flatten pass relevance through unchanged.
//! * Max-pool gives each window's relevance to its recorded winner.
//! * Global average pooling splits each channel's relevance in proportion to
//!   the activations.
//! * Residual adds split relevance between the two branches in proportion to
//!   their contributions, using the conv rule when it is epsilon or alpha-beta
//!   and the basic rule otherwise.
//! * A batch-norm that could not be folded is treated as a per-channel affine
//!   layer under the basic rule.
//!
//! Biases enter the denominators but never receive relevance, so only
//! bias-free networks conserve relevance exactly.

mod export;
mod rules;

pub use export::{
    read_relevance_sidecar, write_relevance_map, write_relevance_sidecar, RelevanceDescriptor,
};
pub use rules::{Rule, BASIC_STABILIZER};

use rules::{propagate, AvgConn, ConvConn, DenseConn, DiagConn, SumConn};
use serde::{Deserialize, Serialize};

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, Conv2d, Dense, LayerSpec, ModelSpec};
use crate::tensor::{ArgmaxIndices, Tensor};

/// Which rule each layer category uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePreset {
    pub name: String,
    /// The first conv/dense layer, the one that sees pixels.
    pub input_layer_rule: Rule,
    pub conv_rule: Rule,
    pub dense_rule: Rule,
}

/// Epsilon used for dense layers by the composite preset.
pub const COMPOSITE_DENSE_EPSILON: f64 = 0.25;

impl RulePreset {
    pub fn new(
        name: impl Into<String>,
        input_layer_rule: Rule,
        conv_rule: Rule,
        dense_rule: Rule,
    ) -> Result<Self> {
        for rule in [input_layer_rule, conv_rule, dense_rule] {
            rule.validate()?;
        }
        Ok(Self {
            name: name.into(),
            input_layer_rule,
            conv_rule,
            dense_rule,
        })
    }

    pub fn basic() -> Self {
        Self::uniform("basic", Rule::Basic)
    }

    /// z^B on `[0, 1]` pixels, alpha=1/beta=0 for convolutions, epsilon=0.25 for dense layers.
    pub fn composite() -> Self {
        Self {
            name: "composite".into(),
            input_layer_rule: Rule::ZB {
                low: 0.0,
                high: 1.0,
            },
            conv_rule: Rule::AlphaBeta {
                alpha: 1.0,
                beta: 0.0,
            },
            dense_rule: Rule::Epsilon {
                epsilon: COMPOSITE_DENSE_EPSILON,
            },
        }
    }

    fn uniform(name: &str, rule: Rule) -> Self {
        Self {
            name: name.into(),
            input_layer_rule: rule,
            conv_rule: rule,
            dense_rule: rule,
        }
    }

    /// Named presets: `basic`, `epsilon` (0.25 everywhere), `alphabeta`
    /// (alpha=2, beta=1), `alpha1beta0`, `flat`, `composite`.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "basic" => Self::basic(),
            "epsilon" => Self::uniform("epsilon", Rule::epsilon(COMPOSITE_DENSE_EPSILON)?),
            "alphabeta" => Self::uniform("alphabeta", Rule::alpha_beta(2.0, 1.0)?),
            "alpha1beta0" => Self::uniform("alpha1beta0", Rule::alpha_beta(1.0, 0.0)?),
            "flat" => Self::uniform("flat", Rule::Flat),
            "composite" => Self::composite(),
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown rule preset {other:?}"
                )))
            }
        })
    }

    /// Rule for the residual sum junction.
    pub fn junction_rule(&self) -> Rule {
        match self.conv_rule {
            r @ (Rule::Epsilon { .. } | Rule::AlphaBeta { .. }) => r,
            _ => Rule::Basic,
        }
    }
}

impl Default for RulePreset {
    fn default() -> Self {
        Self::composite()
    }
}

/// What the injected output relevance was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceSource {
    Logit,
}

/// Signed input relevance for one (image, target AU) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub target_au: ActionUnit,
    /// `C x H x W`, the model's input shape.
    pub values: Tensor,
    /// `H x W`, summed over channels.
    pub pixel_values: Tensor,
    /// Relevance injected at the output unit.
    pub output_relevance: f32,
    pub source: RelevanceSource,
}

impl RelevanceMap {
    /// Builds a map from channel-resolved values, deriving the pixel grid.
    pub fn from_values(
        target_au: ActionUnit,
        values: Tensor,
        output_relevance: f32,
    ) -> Result<Self> {
        let (c, h, w) = values.chw()?;
        let plane = h * w;
        let pixels = (0..plane)
            .map(|p| {
                (0..c)
                    .map(|ch| values.data()[ch * plane + p] as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        Ok(Self {
            target_au,
            pixel_values: Tensor::new(vec![h, w], pixels)?,
            values,
            output_relevance,
            source: RelevanceSource::Logit,
        })
    }

    pub fn height(&self) -> usize {
        self.pixel_values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixel_values.shape()[1]
    }
}

/// One-hot vector holding the target unit's logit.
pub fn init_relevance(trace: &ActivationTrace, target_au: ActionUnit) -> Result<Tensor> {
    let index = trace
        .labels
        .iter()
        .position(|&l| l == target_au)
        .ok_or_else(|| Error::UnknownAu(target_au.to_string()))?;
    let mut r = vec![0.0f32; trace.logits.len()];
    r[index] = trace.logits[index];
    Tensor::vector(r)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], values: &[f64]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), values.iter().map(|&v| v as f32).collect())
}

fn check_upper(op: &'static str, upper: &Tensor, expected: usize) -> Result<()> {
    if upper.len() != expected {
        return Err(Error::Dimension {
            op,
            left: upper.shape().to_vec(),
            right: vec![expected],
        });
    }
    Ok(())
}

fn dense_conn<'a>(x: &Tensor, w: &'a Tensor, bias: Option<&'a Tensor>) -> Result<DenseConn<'a>> {
    let (n, m) = match w.shape() {
        &[n, m] => (n, m),
        other => {
            return Err(Error::Dimension {
                op: "lrp_linear (weights must be in x out)",
                left: x.shape().to_vec(),
                right: other.to_vec(),
            })
        }
    };
    if x.len() != n {
        return Err(Error::Dimension {
            op: "lrp_linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        check_upper("lrp_linear bias", b, m)?;
    }
    Ok(DenseConn {
        weights: w.data(),
        bias: bias.map(Tensor::data),
        inputs: n,
        outputs: m,
    })
}

/// Any rule through a dense layer; returns relevance shaped like `x`.
pub fn lrp_linear(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    upper: &Tensor,
    rule: Rule,
) -> Result<Tensor> {
    rule.validate()?;
    let conn = dense_conn(x, w, bias)?;
    check_upper("lrp_linear relevance", upper, conn.outputs)?;
    to_tensor(x.shape(), &propagate(&conn, x.data(), &to_f64(upper), rule))
}

pub fn lrp_linear_basic(x: &Tensor, w: &Tensor, upper: &Tensor) -> Result<Tensor> {
    lrp_linear(x, w, None, upper, Rule::Basic)
}

pub fn lrp_linear_epsilon(x: &Tensor, w: &Tensor, upper: &Tensor, epsilon: f64) -> Result<Tensor> {
    lrp_linear(x, w, None, upper, Rule::epsilon(epsilon)?)
}

pub fn lrp_linear_alphabeta(
    x: &Tensor,
    w: &Tensor,
    upper: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    lrp_linear(x, w, None, upper, Rule::alpha_beta(alpha, beta)?)
}

pub fn lrp_input_zb(x: &Tensor, w: &Tensor, upper: &Tensor, low: f64, high: f64) -> Result<Tensor> {
    lrp_linear(x, w, None, upper, Rule::zb(low, high)?)
}

fn conv_conn<'a>(x: &Tensor, conv: &'a Conv2d) -> Result<ConvConn<'a>> {
    let (c, h, w) = x.chw()?;
    let (o, kc, kh, kw) = match conv.kernels.shape() {
        &[o, kc, kh, kw] => (o, kc, kh, kw),
        other => {
            return Err(Error::Dimension {
                op: "lrp_conv kernels",
                left: x.shape().to_vec(),
                right: other.to_vec(),
            })
        }
    };
    if kc != c {
        return Err(Error::Dimension {
            op: "lrp_conv channels",
            left: x.shape().to_vec(),
            right: conv.kernels.shape().to_vec(),
        });
    }
    let (oh, ow) = crate::tensor::conv2d_output_dims(h, w, kh, kw, conv.stride, conv.padding)?;
    Ok(ConvConn {
        kernels: conv.kernels.data(),
        bias: Some(conv.bias.data()),
        channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        out_h: oh,
        out_w: ow,
        stride: conv.stride,
        padding: conv.padding,
    })
}

/// Any rule through a convolution; returns relevance shaped like `x`.
pub fn lrp_conv(x: &Tensor, conv: &Conv2d, upper: &Tensor, rule: Rule) -> Result<Tensor> {
    rule.validate()?;
    let conn = conv_conn(x, conv)?;
    check_upper(
        "lrp_conv relevance",
        upper,
        conn.out_channels * conn.out_h * conn.out_w,
    )?;
    to_tensor(x.shape(), &propagate(&conn, x.data(), &to_f64(upper), rule))
}

pub fn lrp_relu(upper: &Tensor) -> Tensor {
    upper.clone()
}

pub fn lrp_flatten(upper: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    upper.clone().reshape(input_shape.to_vec())
}

fn maxpool_back(upper: &[f64], argmax: &ArgmaxIndices, input_len: usize) -> Result<Vec<f64>> {
    if upper.len() != argmax.0.len() {
        return Err(Error::Dimension {
            op: "lrp_maxpool",
            left: vec![upper.len()],
            right: vec![argmax.0.len()],
        });
    }
    let mut lower = vec![0.0; input_len];
    for (&r, &idx) in upper.iter().zip(&argmax.0) {
        if idx >= input_len {
            return Err(Error::TraceMismatch(format!(
                "argmax index {idx} outside pooled input of {input_len} values"
            )));
        }
        lower[idx] += r;
    }
    Ok(lower)
}

/// Winner-takes-all: each window's relevance goes to its recorded maximum.
pub fn lrp_maxpool(
    upper: &Tensor,
    argmax: &ArgmaxIndices,
    input_shape: &[usize],
) -> Result<Tensor> {
    let n = input_shape.iter().product();
    to_tensor(input_shape, &maxpool_back(&to_f64(upper), argmax, n)?)
}

/// Channel relevance split in proportion to the pooled activations.
pub fn lrp_global_avgpool(x: &Tensor, upper: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    check_upper("lrp_global_avgpool", upper, c)?;
    let conn = AvgConn {
        channels: c,
        plane: h * w,
    };
    to_tensor(
        x.shape(),
        &propagate(&conn, x.data(), &to_f64(upper), Rule::Basic),
    )
}

fn junction(
    x_main: &Tensor,
    x_skip: &Tensor,
    upper: &[f64],
    rule: Rule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_main.shape() != x_skip.shape() {
        return Err(Error::Dimension {
            op: "lrp_residual_add",
            left: x_main.shape().to_vec(),
            right: x_skip.shape().to_vec(),
        });
    }
    let n = x_main.len();
    if upper.len() != n {
        return Err(Error::Dimension {
            op: "lrp_residual_add relevance",
            left: vec![upper.len()],
            right: x_main.shape().to_vec(),
        });
    }
    let mut x = Vec::with_capacity(2 * n);
    x.extend_from_slice(x_main.data());
    x.extend_from_slice(x_skip.data());
    let mut lower = propagate(&SumConn { units: n }, &x, upper, rule);
    let skip = lower.split_off(n);
    Ok((lower, skip))
}

/// Splits relevance at a sum junction between the main and skip branches.
pub fn lrp_residual_add(
    x_main: &Tensor,
    x_skip: &Tensor,
    upper: &Tensor,
    rule: Rule,
) -> Result<(Tensor, Tensor)> {
    rule.validate()?;
    let (main, skip) = junction(x_main, x_skip, &to_f64(upper), rule)?;
    Ok((
        to_tensor(x_main.shape(), &main)?,
        to_tensor(x_skip.shape(), &skip)?,
    ))
}

/// Relevance entering and leaving one layer during propagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTransition {
    /// Index of the layer (for a folded conv/dense + batch-norm pair, the batch-norm).
    pub layer: usize,
    pub upper: f64,
    pub lower: f64,
}

/// Full record of one propagation: input relevance plus per-layer totals.
#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    /// Relevance at the model input, `C x H x W`, in `f64`.
    pub input: Vec<f64>,
    pub input_shape: [usize; 3],
    /// Relevance arriving at each layer's output (`None` for the sigmoid head
    /// and for conv/dense layers folded into a following batch-norm).
    pub layer_outputs: Vec<Option<Vec<f64>>>,
    pub transitions: Vec<LayerTransition>,
}

fn check_trace(model: &ModelSpec, trace: &ActivationTrace) -> Result<()> {
    if trace.layers.len() != model.layers().len() {
        return Err(Error::TraceMismatch(format!(
            "trace has {} layers, model has {}",
            trace.layers.len(),
            model.layers().len()
        )));
    }
    if trace.labels != model.output_labels() {
        return Err(Error::TraceMismatch("output labels differ".into()));
    }
    for (i, (lt, shape)) in trace.layers.iter().zip(model.output_shapes()).enumerate() {
        if lt.output.shape() != &shape[..] || lt.input.shape() != model.layer_input_shape(i) {
            return Err(Error::TraceMismatch(format!(
                "layer {i} shapes differ from the model"
            )));
        }
    }
    Ok(())
}

fn linear_back(layer: &LayerSpec, x: &Tensor, upper: &[f64], rule: Rule) -> Result<Vec<f64>> {
    match layer {
        LayerSpec::Conv2d(conv) => Ok(propagate(&conv_conn(x, conv)?, x.data(), upper, rule)),
        LayerSpec::Dense(Dense { weights, bias }) => {
            let conn = dense_conn(x, weights, Some(bias))?;
            Ok(propagate(&conn, x.data(), upper, rule))
        }
        other => Err(Error::Config(format!(
            "{} is not a linear layer",
            other.kind()
        ))),
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, values: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
        None => *slot = Some(values),
    }
}

/// Propagates an arbitrary output relevance vector (one value per label)
/// down to the input.
pub fn propagate_relevance(
    model: &ModelSpec,
    trace: &ActivationTrace,
    initial: &Tensor,
    preset: &RulePreset,
) -> Result<RelevanceTrace> {
    for rule in [preset.input_layer_rule, preset.conv_rule, preset.dense_rule] {
        rule.validate()?;
    }
    check_trace(model, trace)?;
    let labels = model.output_labels().len();
    check_upper("initial relevance", initial, labels)?;

    let layers = model.layers();
    let n = layers.len();
    let first_linear = model.first_linear_layer();
    let rule_for = |index: usize, layer: &LayerSpec| -> Rule {
        if Some(index) == first_linear {
            preset.input_layer_rule
        } else if matches!(layer, LayerSpec::Conv2d(_)) {
            preset.conv_rule
        } else {
            preset.dense_rule
        }
    };

    let mut pending: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut input_relevance: Option<Vec<f64>> = None;
    let mut transitions = Vec::with_capacity(n);
    pending[n - 2] = Some(to_f64(initial));
    let mut layer_outputs: Vec<Option<Vec<f64>>> = vec![None; n];

    let mut i = n - 1;
    while i > 0 {
        i -= 1;
        let upper = pending[i]
            .take()
            .unwrap_or_else(|| vec![0.0; model.output_shapes()[i].iter().product()]);
        let lt = &trace.layers[i];
        // Where the main-branch relevance lands: the output of `target - 1`, or the input.
        let mut target = i;
        let mut skip_part: Option<(usize, Vec<f64>)> = None;

        let lower = match &layers[i] {
            LayerSpec::BatchNorm(bn) => match model.folded_layer(i) {
                Some(merged) => {
                    target = i - 1;
                    let rule = rule_for(i - 1, &layers[i - 1]);
                    linear_back(merged, &trace.layers[i - 1].input, &upper, rule)?
                }
                None => {
                    let affine = bn.affine();
                    let conn = DiagConn {
                        per_channel: lt.input.len() / affine.len(),
                        affine: &affine,
                    };
                    propagate(&conn, lt.input.data(), &upper, Rule::Basic)
                }
            },
            layer @ (LayerSpec::Conv2d(_) | LayerSpec::Dense(_)) => {
                linear_back(layer, &lt.input, &upper, rule_for(i, layer))?
            }
            LayerSpec::Relu | LayerSpec::Flatten => upper.clone(),
            LayerSpec::MaxPool { .. } => {
                let argmax = lt.argmax.as_ref().ok_or_else(|| {
                    Error::TraceMismatch(format!("maxpool layer {i} has no argmax record"))
                })?;
                maxpool_back(&upper, argmax, lt.input.len())?
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = lt.input.chw()?;
                let conn = AvgConn {
                    channels: c,
                    plane: h * w,
                };
                propagate(&conn, lt.input.data(), &upper, Rule::Basic)
            }
            LayerSpec::ResidualAdd(res) => {
                let skip = lt.skip.as_ref().ok_or_else(|| {
                    Error::TraceMismatch(format!("residual layer {i} has no skip record"))
                })?;
                let (main, skip_rel) = junction(&lt.input, skip, &upper, preset.junction_rule())?;
                let source_out = &trace.layers[res.skip_source].output;
                let back = match &res.projection {
                    Some(p) => propagate(
                        &conv_conn(source_out, p)?,
                        source_out.data(),
                        &skip_rel,
                        preset.conv_rule,
                    ),
                    None => skip_rel,
                };
                skip_part = Some((res.skip_source, back));
                main
            }
            LayerSpec::Sigmoid => {
                return Err(Error::Config(format!(
                    "sigmoid at layer {i} is only supported as the head"
                )))
            }
        };

        let upper_sum: f64 = upper.iter().sum();
        let mut lower_sum: f64 = lower.iter().sum();
        if let Some((source, values)) = skip_part {
            lower_sum += values.iter().sum::<f64>();
            add_into(&mut pending[source], values);
        }
        transitions.push(LayerTransition {
            layer: i,
            upper: upper_sum,
            lower: lower_sum,
        });
        layer_outputs[i] = Some(upper);
        if target == 0 {
            add_into(&mut input_relevance, lower);
        } else {
            add_into(&mut pending[target - 1], lower);
        }
        i = target;
    }

    let input_shape = model.input_shape();
    let input = input_relevance.unwrap_or_else(|| vec![0.0; input_shape.iter().product()]);
    Ok(RelevanceTrace {
        input,
        input_shape,
        layer_outputs,
        transitions,
    })
}

/// Explains `target_au`: injects its logit and propagates to the pixels.
pub fn explain(
    model: &ModelSpec,
    trace: &ActivationTrace,
    target_au: ActionUnit,
    preset: &RulePreset,
) -> Result<RelevanceMap> {
    if model.label_index(target_au).is_none() {
        return Err(Error::UnknownAu(target_au.to_string()));
    }
    let initial = init_relevance(trace, target_au)?;
    let output_relevance = initial.data().iter().sum::<f32>();
    let rt = propagate_relevance(model, trace, &initial, preset)?;
    relevance_map_from_trace(target_au, &rt, output_relevance)
}

pub fn relevance_map_from_trace(
    target_au: ActionUnit,
    rt: &RelevanceTrace,
    output_relevance: f32,
) -> Result<RelevanceMap> {
    let [c, h, w] = rt.input_shape;
    let plane = h * w;
    let pixels = (0..plane)
        .map(|p| (0..c).map(|ch| rt.input[ch * plane + p]).sum::<f64>() as f32)
        .collect();
    Ok(RelevanceMap {
        target_au,
        values: to_tensor(&rt.input_shape, &rt.input)?,
        pixel_values: Tensor::new(vec![h, w], pixels)?,
        output_relevance,
        source: RelevanceSource::Logit,
    })
}
