//! Relevance redistribution through linear layers.
//!
//! Every linear layer (dense, convolution, the residual sum junction, average
//! pooling, a lone batch-norm) is a set of output units `k`, each a weighted
//! sum of some inputs `j`. A [`Connectivity`] enumerates those `(j, w_jk)`
//! pairs, and the rules below are written once against it. Relevance is
//! carried in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Implicit stabilizer added (with the sign of `z_k`) to every basic-rule denominator.
pub const BASIC_STABILIZER: f64 = 1e-9;

/// A decomposition rule for linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// `R_j = sum_k x_j w_jk / z_k * R_k`
    Basic,
    /// Basic rule with `z_k + epsilon * sign(z_k)` in the denominator.
    Epsilon { epsilon: f64 },
    /// Positive and negative contributions redistributed separately.
    AlphaBeta { alpha: f64, beta: f64 },
    /// Bounded-input rule for the pixel layer.
    #[serde(rename = "zb")]
    ZB { low: f64, high: f64 },
    /// Uniform redistribution over the receptive field.
    Flat,
}

impl Rule {
    pub fn epsilon(epsilon: f64) -> Result<Self> {
        let rule = Rule::Epsilon { epsilon };
        rule.validate()?;
        Ok(rule)
    }

    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        let rule = Rule::AlphaBeta { alpha, beta };
        rule.validate()?;
        Ok(rule)
    }

    pub fn zb(low: f64, high: f64) -> Result<Self> {
        let rule = Rule::ZB { low, high };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Rule::Basic | Rule::Flat => Ok(()),
            Rule::Epsilon { epsilon } => {
                if epsilon.is_finite() && epsilon >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "epsilon must be finite and >= 0, got {epsilon}"
                    )))
                }
            }
            Rule::AlphaBeta { alpha, beta } => {
                if !(alpha.is_finite() && beta.is_finite()) || alpha < 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "alpha-beta needs finite alpha >= 1, got alpha={alpha}"
                    )));
                }
                if (alpha - beta - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "alpha - beta must equal 1, got alpha={alpha} beta={beta}"
                    )));
                }
                Ok(())
            }
            Rule::ZB { low, high } => {
                if low.is_finite() && high.is_finite() && low <= 0.0 && 0.0 <= high {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "z^B bounds must satisfy low <= 0 <= high, got [{low}, {high}]"
                    )))
                }
            }
        }
    }
}

/// Sparse description of a linear map `z_k = sum_j x_j w_jk + b_k`.
pub(crate) trait Connectivity {
    fn inputs(&self) -> usize;
    fn outputs(&self) -> usize;
    fn bias(&self, k: usize) -> f64;
    /// Calls `f(j, w_jk)` for every input connected to unit `k`.
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, f: F);
}

fn sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Applies `rule` to one linear layer. `x` are the layer inputs, `upper` the
/// relevance of its outputs; returns the relevance of its inputs.
pub(crate) fn propagate<C: Connectivity>(
    conn: &C,
    x: &[f32],
    upper: &[f64],
    rule: Rule,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), conn.inputs());
    debug_assert_eq!(upper.len(), conn.outputs());
    let mut lower = vec![0.0f64; conn.inputs()];
    for (k, &r) in upper.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        match rule {
            Rule::Basic | Rule::Epsilon { .. } => {
                let eps = match rule {
                    Rule::Epsilon { epsilon } => epsilon,
                    _ => 0.0,
                };
                let mut z = conn.bias(k);
                conn.visit(k, |j, w| z += x[j] as f64 * w);
                let s = r / (z + sign(z) * (eps + BASIC_STABILIZER));
                conn.visit(k, |j, w| lower[j] += x[j] as f64 * w * s);
            }
            Rule::AlphaBeta { alpha, beta } => {
                let b = conn.bias(k);
                let (mut zp, mut zn) = (b.max(0.0), b.min(0.0));
                conn.visit(k, |j, w| {
                    let c = x[j] as f64 * w;
                    if c > 0.0 {
                        zp += c;
                    } else {
                        zn += c;
                    }
                });
                // An empty positive or negative part contributes nothing.
                let sp = if zp > 0.0 { alpha * r / zp } else { 0.0 };
                let sn = if zn < 0.0 && beta != 0.0 {
                    beta * r / zn
                } else {
                    0.0
                };
                conn.visit(k, |j, w| {
                    let c = x[j] as f64 * w;
                    if c > 0.0 {
                        lower[j] += c * sp;
                    } else if c < 0.0 {
                        lower[j] -= c * sn;
                    }
                });
            }
            Rule::ZB { low, high } => {
                let num = |j: usize, w: f64| x[j] as f64 * w - low * w.max(0.0) - high * w.min(0.0);
                let mut z = 0.0;
                conn.visit(k, |j, w| z += num(j, w));
                let s = r / (z + sign(z) * BASIC_STABILIZER);
                conn.visit(k, |j, w| lower[j] += num(j, w) * s);
            }
            Rule::Flat => {
                let mut n = 0usize;
                conn.visit(k, |_, _| n += 1);
                if n > 0 {
                    let s = r / n as f64;
                    conn.visit(k, |j, _| lower[j] += s);
                }
            }
        }
    }
    lower
}

/// Dense layer with `(in, out)` row-major weights.
pub(crate) struct DenseConn<'a> {
    pub weights: &'a [f32],
    pub bias: Option<&'a [f32]>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Connectivity for DenseConn<'_> {
    fn inputs(&self) -> usize {
        self.inputs
    }
    fn outputs(&self) -> usize {
        self.outputs
    }
    fn bias(&self, k: usize) -> f64 {
        self.bias.map_or(0.0, |b| b[k] as f64)
    }
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, mut f: F) {
        for j in 0..self.inputs {
            f(j, self.weights[j * self.outputs + k] as f64);
        }
    }
}

/// Zero-padded convolution; padded positions are not inputs and receive nothing.
pub(crate) struct ConvConn<'a> {
    pub kernels: &'a [f32],
    pub bias: Option<&'a [f32]>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Connectivity for ConvConn<'_> {
    fn inputs(&self) -> usize {
        self.channels * self.height * self.width
    }
    fn outputs(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
    fn bias(&self, k: usize) -> f64 {
        let oc = k / (self.out_h * self.out_w);
        self.bias.map_or(0.0, |b| b[oc] as f64)
    }
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, mut f: F) {
        let plane = self.out_h * self.out_w;
        let oc = k / plane;
        let oy = (k % plane) / self.out_w;
        let ox = k % self.out_w;
        for ic in 0..self.channels {
            for dy in 0..self.kernel_h {
                let iy = (oy * self.stride + dy) as isize - self.padding as isize;
                if iy < 0 || iy >= self.height as isize {
                    continue;
                }
                for dx in 0..self.kernel_w {
                    let ix = (ox * self.stride + dx) as isize - self.padding as isize;
                    if ix < 0 || ix >= self.width as isize {
                        continue;
                    }
                    let j = (ic * self.height + iy as usize) * self.width + ix as usize;
                    let w = self.kernels
                        [((oc * self.channels + ic) * self.kernel_h + dy) * self.kernel_w + dx];
                    f(j, w as f64);
                }
            }
        }
    }
}

/// Two-input sum junction: unit `k` adds input `k` (main) and input `n + k` (skip).
pub(crate) struct SumConn {
    pub units: usize,
}

impl Connectivity for SumConn {
    fn inputs(&self) -> usize {
        2 * self.units
    }
    fn outputs(&self) -> usize {
        self.units
    }
    fn bias(&self, _k: usize) -> f64 {
        0.0
    }
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, mut f: F) {
        f(k, 1.0);
        f(self.units + k, 1.0);
    }
}

/// Channel mean over `plane` positions.
pub(crate) struct AvgConn {
    pub channels: usize,
    pub plane: usize,
}

impl Connectivity for AvgConn {
    fn inputs(&self) -> usize {
        self.channels * self.plane
    }
    fn outputs(&self) -> usize {
        self.channels
    }
    fn bias(&self, _k: usize) -> f64 {
        0.0
    }
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, mut f: F) {
        let w = 1.0 / self.plane as f64;
        for j in k * self.plane..(k + 1) * self.plane {
            f(j, w);
        }
    }
}

/// Per-channel affine map `y = scale_c * x + shift_c`.
pub(crate) struct DiagConn<'a> {
    pub affine: &'a [(f64, f64)],
    pub per_channel: usize,
}

impl Connectivity for DiagConn<'_> {
    fn inputs(&self) -> usize {
        self.affine.len() * self.per_channel
    }
    fn outputs(&self) -> usize {
        self.inputs()
    }
    fn bias(&self, k: usize) -> f64 {
        self.affine[k / self.per_channel].1
    }
    fn visit<F: FnMut(usize, f64)>(&self, k: usize, mut f: F) {
        f(k, self.affine[k / self.per_channel].0);
    }
}
