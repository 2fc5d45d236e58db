//! Forward kernels for the operation set the model needs, each registered
//! on the tape with its exact vector-Jacobian product.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tape::{ConvGeo, GraphTape, OpRecord};
use crate::tensor::Tensor;

/// Spatial padding scheme for convolutions.
///
/// `Same` pads symmetrically with zeros so the output is `ceil(in/stride)`,
/// placing the extra pixel on the bottom/right when the total is odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

fn same_pad(in_len: usize, k: usize, stride: usize, dilation: usize) -> (usize, usize, usize) {
    let out = in_len.div_ceil(stride);
    let span = dilation * (k - 1) + 1;
    let total = ((out - 1) * stride + span).saturating_sub(in_len);
    let before = total / 2;
    (out, before, total)
}

pub fn conv2d(
    tape: &mut GraphTape,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but weight expects {} (input {:?}, weight {:?})",
                c_in, wc_in, input.shape(), weight.shape()),
        ));
    }
    if kh == 0 || kw == 0 || stride == 0 || dilation == 0 {
        return Err(Error::arg("conv2d", format!("kernel {}x{}, stride {}, dilation {} must all be >= 1", kh, kw, stride, dilation)));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{}]", b.shape(), c_out)));
        }
    }

    let (out_h, pad_top, out_w, pad_left) = match padding {
        Padding::Same => {
            let (oh, pt, _) = same_pad(h, kh, stride, dilation);
            let (ow, pl, _) = same_pad(w, kw, stride, dilation);
            (oh, pt, ow, pl)
        }
        Padding::Valid => {
            let span_h = dilation * (kh - 1) + 1;
            let span_w = dilation * (kw - 1) + 1;
            if h < span_h || w < span_w {
                return Err(Error::shape(
                    "conv2d",
                    format!("valid convolution of {}x{} input with effective {}x{} kernel has zero-size result", h, w, span_h, span_w),
                ));
            }
            ((h - span_h) / stride + 1, 0, (w - span_w) / stride + 1, 0)
        }
    };

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * c_out * out_h * out_w];
    for ni in 0..n {
        for co in 0..c_out {
            let b = bias.map_or(0.0, |b| b.data()[co]);
            let o_base = (ni * c_out + co) * out_h * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut sum = b;
                    for ci in 0..c_in {
                        let in_base = (ni * c_in + ci) * h * w;
                        let w_base = (co * c_in + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky * dilation) as isize - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let w_row = w_base + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx * dilation) as isize - pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                sum += x[in_row + ix as usize] * wt[w_row + kx];
                            }
                        }
                    }
                    out[o_base + oy * out_w + ox] = sum;
                }
            }
        }
    }

    let input_id = tape.ensure_node(input);
    let weight_id = tape.ensure_node(weight);
    let bias_id = bias.map(|b| tape.ensure_node(b));
    let geo = ConvGeo {
        n, c_in, h, w, c_out, kh, kw, stride, dilation,
        pad_top, pad_left, out_h, out_w,
    };
    let mut ids = vec![input_id, weight_id];
    ids.extend(bias_id);
    Ok(tape.emit(
        out,
        vec![n, c_out, out_h, out_w],
        &ids,
        OpRecord::Conv2d { input: input_id, weight: weight_id, bias: bias_id, geo },
    ))
}

/// Unpadded max pooling. Gradient routes to the first (row-major) position
/// achieving the window maximum.
pub fn max_pool2d(tape: &mut GraphTape, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::arg("max_pool2d", "k and stride must be >= 1".to_string()));
    }
    if k > h || k > w {
        return Err(Error::shape(
            "max_pool2d",
            format!("{0}x{0} window larger than padded input {1}x{2}", k, h, w),
        ));
    }
    let out_h = (h - k) / stride + 1;
    let out_w = (w - k) / stride + 1;

    let x = input.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    let mut argmax = vec![0usize; out.len()];
    for img in 0..n * c {
        let in_base = img * h * w;
        let o_base = img * out_h * out_w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = in_base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[o_base + oy * out_w + ox] = best;
                argmax[o_base + oy * out_w + ox] = best_idx;
            }
        }
    }

    let input_id = tape.ensure_node(input);
    Ok(tape.emit(
        out,
        vec![n, c, out_h, out_w],
        &[input_id],
        OpRecord::MaxPool2d { input: input_id, argmax: Arc::new(argmax) },
    ))
}

/// Align-corners bilinear interpolation to a not-smaller size.
pub fn bilinear_upsample(tape: &mut GraphTape, input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if out_h < h || out_w < w {
        return Err(Error::arg(
            "bilinear_upsample",
            format!("target {}x{} smaller than input {}x{}", out_h, out_w, h, w),
        ));
    }
    let x = input.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    let sy = if out_h > 1 { (h as f64 - 1.0) / (out_h as f64 - 1.0) } else { 0.0 };
    let sx = if out_w > 1 { (w as f64 - 1.0) / (out_w as f64 - 1.0) } else { 0.0 };
    for img in 0..n * c {
        let in_base = img * h * w;
        let o_base = img * out_h * out_w;
        for oy in 0..out_h {
            let fy = oy as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ox as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                out[o_base + oy * out_w + ox] = x[in_base + y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + x[in_base + y0 * w + x1] * (1.0 - wy) * wx
                    + x[in_base + y1 * w + x0] * wy * (1.0 - wx)
                    + x[in_base + y1 * w + x1] * wy * wx;
            }
        }
    }

    let input_id = tape.ensure_node(input);
    Ok(tape.emit(
        out,
        vec![n, c, out_h, out_w],
        &[input_id],
        OpRecord::BilinearUpsample { input: input_id, n, c, in_h: h, in_w: w, out_h, out_w },
    ))
}

fn binary(
    tape: &mut GraphTape,
    op_name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    rec: impl Fn(crate::tensor::NodeId, crate::tensor::NodeId) -> OpRecord,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op_name, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    let ai = tape.ensure_node(a);
    let bi = tape.ensure_node(b);
    Ok(tape.emit(out, a.shape().to_vec(), &[ai, bi], rec(ai, bi)))
}

pub fn add(tape: &mut GraphTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "add", a, b, |x, y| x + y, |a, b| OpRecord::Add { a, b })
}

pub fn sub(tape: &mut GraphTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "sub", a, b, |x, y| x - y, |a, b| OpRecord::Sub { a, b })
}

pub fn mul(tape: &mut GraphTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "mul", a, b, |x, y| x * y, |a, b| OpRecord::Mul { a, b })
}

fn unary(
    tape: &mut GraphTape,
    t: &Tensor,
    f: impl Fn(f64) -> f64,
    rec: impl Fn(crate::tensor::NodeId) -> OpRecord,
) -> Tensor {
    let out = t.data().iter().map(|x| f(*x)).collect();
    let id = tape.ensure_node(t);
    tape.emit(out, t.shape().to_vec(), &[id], rec(id))
}

pub fn sigmoid(tape: &mut GraphTape, t: &Tensor) -> Tensor {
    unary(tape, t, |x| 1.0 / (1.0 + (-x).exp()), |input| OpRecord::Sigmoid { input })
}

pub fn tanh(tape: &mut GraphTape, t: &Tensor) -> Tensor {
    unary(tape, t, f64::tanh, |input| OpRecord::Tanh { input })
}

pub fn relu(tape: &mut GraphTape, t: &Tensor) -> Tensor {
    unary(tape, t, |x| x.max(0.0), |input| OpRecord::Relu { input })
}

pub fn scale(tape: &mut GraphTape, t: &Tensor, factor: f64) -> Tensor {
    unary(tape, t, |x| x * factor, |input| OpRecord::Scale { input, factor })
}

/// Per-pixel softmax over the channel dimension of `[N,C,H,W]`.
pub fn softmax_channels(tape: &mut GraphTape, input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[(ni * c + ch) * hw + p]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (x[(ni * c + ch) * hw + p] - max).exp();
                out[(ni * c + ch) * hw + p] = e;
                denom += e;
            }
            for ch in 0..c {
                out[(ni * c + ch) * hw + p] /= denom;
            }
        }
    }
    let id = tape.ensure_node(input);
    Ok(tape.emit(out, input.shape().to_vec(), &[id], OpRecord::SoftmaxChannels { input: id, n, c, hw }))
}

/// Gradient-transparent reshape; element count must match.
pub fn reshape(tape: &mut GraphTape, input: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != input.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} ({} values) as {:?} ({})", input.shape(), input.numel(), shape, numel),
        ));
    }
    let id = tape.ensure_node(input);
    Ok(tape.emit(input.data().to_vec(), shape, &[id], OpRecord::Reshape { input: id }))
}

/// `[N,C,H,W]` -> `[N*H*W, C]`: one row of class scores per pixel sample.
pub fn flatten_samples(tape: &mut GraphTape, input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let in_base = (ni * c + ch) * hw;
            for p in 0..hw {
                out[(ni * hw + p) * c + ch] = x[in_base + p];
            }
        }
    }
    let id = tape.ensure_node(input);
    Ok(tape.emit(out, vec![n * hw, c], &[id], OpRecord::FlattenSamples { input: id, n, c, hw }))
}

/// Hadamard product with a `[C,H,W]` map, broadcast over the batch dimension.
pub fn mul_map(tape: &mut GraphTape, input: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if map.shape() != [c, h, w] {
        return Err(Error::shape(
            "mul_map",
            format!("map {:?} does not match input {:?} per-image extent", map.shape(), input.shape()),
        ));
    }
    let chw = c * h * w;
    let x = input.data();
    let m = map.data();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * chw;
        for j in 0..chw {
            out[base + j] = x[base + j] * m[j];
        }
    }
    let xi = tape.ensure_node(input);
    let mi = tape.ensure_node(map);
    Ok(tape.emit(out, input.shape().to_vec(), &[xi, mi], OpRecord::MulMap { input: xi, map: mi, n, chw }))
}

pub fn sum_all(tape: &mut GraphTape, input: &Tensor) -> Tensor {
    let s: f64 = input.data().iter().sum();
    let id = tape.ensure_node(input);
    tape.emit(vec![s], vec![1], &[id], OpRecord::SumAll { input: id })
}

pub fn mean_all(tape: &mut GraphTape, input: &Tensor) -> Tensor {
    let s: f64 = input.data().iter().sum();
    let mean = s / input.numel() as f64;
    let id = tape.ensure_node(input);
    tape.emit(vec![mean], vec![1], &[id], OpRecord::MeanAll { input: id })
}

/// Selects frame `t` from a `[B,T,...]` tensor.
pub fn time_slice(tape: &mut GraphTape, input: &Tensor, t: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::shape("time_slice", format!("expected [B,T,...], got {:?}", shape)));
    }
    let (b, t_total) = (shape[0], shape[1]);
    if t >= t_total {
        return Err(Error::arg("time_slice", format!("frame {} out of range 0..{}", t, t_total)));
    }
    let frame: usize = shape[2..].iter().product();
    let x = input.data();
    let mut out = vec![0.0; b * frame];
    for bi in 0..b {
        let src = (bi * t_total + t) * frame;
        out[bi * frame..(bi + 1) * frame].copy_from_slice(&x[src..src + frame]);
    }
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&shape[2..]);
    let id = tape.ensure_node(input);
    Ok(tape.emit(out, out_shape, &[id], OpRecord::TimeSlice { input: id, t, b, t_total, frame }))
}

/// Stacks T same-shape `[B,...]` tensors into `[B,T,...]`.
pub fn time_stack(tape: &mut GraphTape, frames: &[Tensor]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::arg("time_stack", "no frames given".to_string()));
    }
    let shape = frames[0].shape().to_vec();
    for f in frames {
        if f.shape() != shape {
            return Err(Error::shape(
                "time_stack",
                format!("frame shapes differ: {:?} vs {:?}", shape, f.shape()),
            ));
        }
    }
    let b = shape[0];
    let frame: usize = shape[1..].iter().product();
    let t_total = frames.len();
    let mut out = vec![0.0; b * t_total * frame];
    for (t, f) in frames.iter().enumerate() {
        let x = f.data();
        for bi in 0..b {
            let dst = (bi * t_total + t) * frame;
            out[dst..dst + frame].copy_from_slice(&x[bi * frame..(bi + 1) * frame]);
        }
    }
    let ids: Vec<_> = frames.iter().map(|f| tape.ensure_node(f)).collect();
    let mut out_shape = vec![b, t_total];
    out_shape.extend_from_slice(&shape[1..]);
    Ok(tape.emit(out, out_shape, &ids.clone(), OpRecord::TimeStack { inputs: ids, b, frame }))
}
