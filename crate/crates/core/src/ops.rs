//! Forward kernels: convolution, fully-connected maps, pooling, softmax and
//! elementwise math. Reductions accumulate in `f64`.

use crate::exec::Exec;
use crate::tensor::{Result, Tensor, TensorError};

/// 2D cross-correlation of a `[C,H,W]` input with `[K,C,kh,kw]` weights.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_with(Exec::default(), input, weights, bias, stride, padding)
}

fn conv_extent(
    name: &'static str,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if kernel > padded || !(padded - kernel).is_multiple_of(stride) {
        return Err(TensorError::NonIntegralOutput {
            op: "conv2d",
            name,
            extent: padded,
            kernel,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv2d_with(
    exec: Exec,
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    input.expect_rank(OP, 3)?;
    weights.expect_rank(OP, 4)?;
    bias.expect_rank(OP, 1)?;
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            msg: "stride must be at least 1".into(),
        });
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (k, kh, kw) = (weights.dim(0), weights.dim(2), weights.dim(3));
    weights.expect_axis(OP, 1, "in_channels", c)?;
    bias.expect_axis(OP, 0, "out_channels", k)?;
    let oh = conv_extent("height", h, kh, stride, padding)?;
    let ow = conv_extent("width", w, kw, stride, padding)?;

    let x = input.data();
    let wt = weights.data();
    let b = bias.data();
    let plane = oh * ow;
    let mut out = vec![0f32; k * plane];
    exec.for_each_chunk(&mut out, plane, |ko, out_plane| {
        let mut acc = vec![b[ko] as f64; plane];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ky) * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    // Output columns whose input column lands inside the image.
                    let ox_lo = padding.saturating_sub(kx).div_ceil(stride);
                    let ox_hi = ((w + padding).saturating_sub(kx)).div_ceil(stride).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let acc_row = &mut acc[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let n = ox_hi - ox_lo;
                            for (a, &v) in acc_row[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *a += wv * v as f64;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - padding;
                                acc_row[ox] += wv * row[ix] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in out_plane.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    Tensor::new(&[k, oh, ow], out)
}

/// `output[m] = bias[m] + Σ_n weights[m,n]·input[n]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    linear_with(Exec::default(), input, weights, bias)
}

pub fn linear_with(exec: Exec, input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    input.expect_rank(OP, 1)?;
    weights.expect_rank(OP, 2)?;
    bias.expect_rank(OP, 1)?;
    let (m, n) = (weights.dim(0), weights.dim(1));
    weights.expect_axis(OP, 1, "in_features", input.dim(0))?;
    bias.expect_axis(OP, 0, "out_features", m)?;
    let x = input.data();
    let wt = weights.data();
    let b = bias.data();
    const ROWS: usize = 256;
    let mut out = vec![0f32; m];
    exec.for_each_chunk(&mut out, ROWS, |chunk, dst| {
        for (j, o) in dst.iter_mut().enumerate() {
            let row = chunk * ROWS + j;
            let wr = &wt[row * n..(row + 1) * n];
            let dot: f64 = wr.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum();
            *o = (b[row] as f64 + dot) as f32;
        }
    });
    Tensor::new(&[m], out)
}

/// Softmax along `axis`, shifted by each slice's maximum.
pub fn softmax_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(TensorError::Invalid {
            op: "softmax_axis",
            msg: format!("axis {axis} out of range for shape {:?}", input.shape()),
        });
    }
    let shape = input.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let x = input.data();
    let mut out = vec![0f32; x.len()];
    let mut exps = vec![0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0f64;
            for (k, e) in exps.iter_mut().enumerate() {
                *e = (x[idx(k)] as f64 - max).exp();
                sum += *e;
            }
            for (k, e) in exps.iter().enumerate() {
                out[idx(k)] = (e / sum) as f32;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Per-channel spatial mean of a `[C,H,W]` tensor.
pub fn reduce_pool_adaptive(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("reduce_pool_adaptive", 3)?;
    let c = input.dim(0);
    let plane = input.dim(1) * input.dim(2);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new(&[c], out)
}

/// Non-overlapping `factor`×`factor` block average over the last two axes.
pub fn block_average(input: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "block_average";
    if input.rank() < 2 || factor == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            msg: format!("factor {factor} on shape {:?}", input.shape()),
        });
    }
    let r = input.rank();
    let (h, w) = (input.dim(r - 2), input.dim(r - 1));
    for (axis, name, extent) in [(r - 2, "height", h), (r - 1, "width", w)] {
        if extent % factor != 0 {
            return Err(TensorError::Axis {
                op: OP,
                axis,
                name,
                expected: extent.next_multiple_of(factor),
                got: extent,
            });
        }
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let planes = input.len() / (h * w);
    let x = input.data();
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f64;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * w + ox * factor;
                    acc += src[row..row + factor].iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push((acc / norm) as f32);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

/// Nearest-neighbour 2× upsampling over the last two axes.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(TensorError::Invalid {
            op: "upsample_nearest2x",
            msg: format!("shape {:?}", input.shape()),
        });
    }
    let r = input.rank();
    let (h, w) = (input.dim(r - 2), input.dim(r - 1));
    let planes = input.len() / (h * w);
    let x = input.data();
    let mut out = Vec::with_capacity(input.len() * 4);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    Tensor::new(&shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Relu,
    Sigmoid,
    Hadamard,
    Add,
    ConcatChannels,
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

/// Unary (`relu`, `sigmoid`) or binary (`hadamard`, `add`, `concat_channels`)
/// elementwise operation. Hadamard broadcasts a `[1,...]` factor over the
/// leading (channel) axis of the other operand.
pub fn elementwise(a: &Tensor, b: Option<&Tensor>, kind: ElementwiseKind) -> Result<Tensor> {
    use ElementwiseKind::*;
    let need_b = |op: &'static str| {
        b.ok_or_else(|| TensorError::Invalid {
            op,
            msg: "second operand required".into(),
        })
    };
    match kind {
        Relu => Ok(a.map(|v| v.max(0.0))),
        Sigmoid => Ok(a.map(sigmoid_scalar)),
        Add => {
            let b = need_b("add")?;
            if a.shape() != b.shape() {
                return Err(incompatible("add", a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape(), data)
        }
        Hadamard => hadamard(a, need_b("hadamard")?),
        ConcatChannels => concat_channels(a, need_b("concat_channels")?),
    }
}

fn incompatible(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Incompatible {
        op,
        a: a.shape().to_vec(),
        b: b.shape().to_vec(),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Tensor::new(a.shape(), data);
    }
    // Broadcast the single-channel operand over the other's channels.
    let (full, single) = if b.rank() == a.rank() && b.dim(0) == 1 {
        (a, b)
    } else if a.rank() == b.rank() && a.dim(0) == 1 {
        (b, a)
    } else {
        return Err(incompatible("hadamard", a, b));
    };
    if full.shape()[1..] != single.shape()[1..] {
        return Err(incompatible("hadamard", a, b));
    }
    let plane = single.len();
    let s = single.data();
    let data = full
        .data()
        .chunks(plane)
        .flat_map(|c| c.iter().zip(s).map(|(x, y)| x * y))
        .collect();
    Tensor::new(full.shape(), data)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.rank() == 0 || a.shape()[1..] != b.shape()[1..] {
        return Err(incompatible("concat_channels", a, b));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let mut shape = a.shape().to_vec();
    shape[0] += b.dim(0);
    Tensor::new(&shape, data)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}
