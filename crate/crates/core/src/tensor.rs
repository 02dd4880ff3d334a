//! Dense row-major `f32` tensors of rank 1 to 4 and the forward kernels the
//! network and the relevance rules are built from.
//!
//! Layout is fixed: vectors are `[n]`, images `[C, H, W]`, convolution kernels
//! `[O, C, kH, kW]` and dense weights `[in, out]`. Dot products accumulate in
//! `f64` and round once on the way out.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::InvalidTensor(format!(
                "rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<f32> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidTensor(format!(
                "expected a C x H x W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Output spatial size of a convolution; errors unless the size is integral.
pub fn conv2d_output_dims(
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let dim = |n: usize, k: usize, axis: &str| -> Result<usize> {
        let padded = n + 2 * padding;
        if k > padded {
            return Err(Error::Config(format!(
                "kernel {axis} {k} exceeds padded input {padded}"
            )));
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "non-integral output {axis}: ({n} + 2*{padding} - {k}) / {stride}"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((
        dim(height, kernel_h, "height")?,
        dim(width, kernel_w, "width")?,
    ))
}

/// Output spatial size of a max-pool; trailing rows/columns that do not fill a
/// window are dropped.
pub fn pool_output_dims(
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(
            "pool window and stride must be positive".into(),
        ));
    }
    if window > height || window > width {
        return Err(Error::Config(format!(
            "pool window {window} exceeds input {height}x{width}"
        )));
    }
    Ok((
        (height - window) / stride + 1,
        (width - window) / stride + 1,
    ))
}

/// `out[k] = sum_j input[j] * weights[j, k] + bias[k]`. Inputs of any rank are
/// read as flat vectors.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = match weights.shape() {
        &[n, m] => (n, m),
        other => {
            return Err(Error::Dimension {
                op: "dense_forward (weights must be in x out)",
                left: input.shape().to_vec(),
                right: other.to_vec(),
            })
        }
    };
    if input.len() != n {
        return Err(Error::Dimension {
            op: "dense_forward",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    if bias.len() != m {
        return Err(Error::Dimension {
            op: "dense_forward bias",
            left: bias.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let w = weights.data();
    let x = input.data();
    let out = (0..m)
        .map(|k| {
            let acc: f64 = (0..n).map(|j| x[j] as f64 * w[j * m + k] as f64).sum();
            (acc + bias.data()[k] as f64) as f32
        })
        .collect();
    Tensor::vector(out)
}

/// Zero-padded cross-correlation of a `C x H x W` input with `O x C x kH x kW` kernels.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, kc, kh, kw) = match kernels.shape() {
        &[o, kc, kh, kw] => (o, kc, kh, kw),
        other => {
            return Err(Error::Dimension {
                op: "conv2d_forward (kernels must be O x C x kH x kW)",
                left: input.shape().to_vec(),
                right: other.to_vec(),
            })
        }
    };
    if kc != c {
        return Err(Error::Dimension {
            op: "conv2d_forward channels",
            left: input.shape().to_vec(),
            right: kernels.shape().to_vec(),
        });
    }
    if bias.len() != o {
        return Err(Error::Dimension {
            op: "conv2d_forward bias",
            left: bias.shape().to_vec(),
            right: kernels.shape().to_vec(),
        });
    }
    let (oh, ow) = conv2d_output_dims(h, w, kh, kw, stride, padding)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = Vec::with_capacity(o * oh * ow);
    for oc in 0..o {
        let b = bias.data()[oc] as f64;
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0f64;
                for ic in 0..c {
                    for dy in 0..kh {
                        let iy = (y * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (ic * h + iy as usize) * w;
                        let krow = ((oc * c + ic) * kh + dy) * kw;
                        for dx in 0..kw {
                            let ix = (xo * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] as f64 * k[krow + dx] as f64;
                        }
                    }
                }
                out.push((acc + b) as f32);
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    let v = v as f64;
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s as f32
}

/// For every pooled output element, the flat index into the pooled input of
/// the window maximum. Ties resolve to the lowest flat index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxIndices(pub Vec<usize>);

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgmaxIndices)> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = pool_output_dims(h, w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = usize::MAX;
                let mut best = f32::NEG_INFINITY;
                // Row-major scan visits flat indices in increasing order, so a
                // strict comparison keeps the lowest index on ties.
                for dy in 0..window {
                    let row = (ch * h + y * stride + dy) * w + xo * stride;
                    for dx in 0..window {
                        let idx = row + dx;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, ArgmaxIndices(arg)))
}

pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let plane = h * w;
    let out = input
        .data()
        .chunks(plane)
        .take(c)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::vector(out)
}
