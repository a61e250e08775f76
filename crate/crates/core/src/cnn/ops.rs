//! Layer primitives on single samples laid out `[C, H, W]`, each with an
//! explicit backward pass.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const BCE_CLAMP: f32 = 1e-7;

/// Row-major `C = A·B + beta·C` for logical `A: [m, k]`, `B: [k, n]`;
/// `a_t` / `b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one valid-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        if height < kernel || width < kernel {
            return Err(Error::Shape(format!(
                "{height}x{width} input too small for a {kernel}x{kernel} kernel"
            )));
        }
        Ok(Self {
            in_channels,
            height,
            width,
            kernel,
            stride,
            out_h: (height - kernel) / stride + 1,
            out_w: (width - kernel) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `input` into `cols: [C·k·k, out_h·out_w]`.
pub(crate) fn im2col(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let p = g.out_pixels();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let src_row = (oy * g.stride + ki) * g.width + kj;
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        d.copy_from_slice(&plane[src_row..src_row + g.out_w]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = plane[src_row + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back, accumulating into `out: [C, H, W]`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let p = g.out_pixels();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let dst_row = (oy * g.stride + ki) * g.width + kj;
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in s.iter().enumerate() {
                        plane[dst_row + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `out[o] = W[o]·cols + b[o]`, given unfolded input.
pub(crate) fn conv_forward_cols(
    g: &ConvGeometry,
    cols: &[f32],
    weight: &[f32],
    bias: &[f32],
    out_channels: usize,
    out: &mut [f32],
) {
    let p = g.out_pixels();
    for (o, plane) in out.chunks_exact_mut(p).enumerate().take(out_channels) {
        plane.fill(bias[o]);
    }
    gemm(out_channels, g.patch_len(), p, weight, false, cols, false, out, 1.0);
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `grad_input` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_cols(
    g: &ConvGeometry,
    cols: &[f32],
    weight: &[f32],
    out_channels: usize,
    grad_out: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    grad_input: Option<(&mut [f32], &mut Vec<f32>)>,
) {
    let p = g.out_pixels();
    let kk = g.patch_len();
    for (o, gb) in grad_bias.iter_mut().enumerate().take(out_channels) {
        *gb += grad_out[o * p..(o + 1) * p].iter().sum::<f32>();
    }
    // dW[O, K] += dOut[O, P] · cols[K, P]^T
    gemm(out_channels, p, kk, grad_out, false, cols, true, grad_weight, 1.0);
    if let Some((grad_input, scratch)) = grad_input {
        // dCols[K, P] = W[O, K]^T · dOut[O, P]
        scratch.resize(kk * p, 0.0);
        gemm(kk, out_channels, p, weight, true, grad_out, false, scratch, 0.0);
        grad_input.fill(0.0);
        col2im(scratch, g, grad_input);
    }
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<(ConvGeometry, usize)> {
    let (c, h, w) = input.chw()?;
    let (o, wc, kh, kw) = match weight.shape()[..] {
        [o, wc, kh, kw] => (o, wc, kh, kw),
        _ => return Err(Error::Shape(format!("conv weight must be [O, C, k, k], got {:?}", weight.shape()))),
    };
    if wc != c || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Shape(format!("conv bias must be [{o}], got {:?}", bias.shape())));
    }
    Ok((ConvGeometry::new(c, h, w, kh, stride)?, o))
}

/// Valid-padding cross-correlation.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (g, o) = conv_geometry(input, weight, bias, stride)?;
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    im2col(input.values(), &g, &mut cols);
    let mut out = vec![0.0; o * g.out_pixels()];
    conv_forward_cols(&g, &cols, weight.values(), bias.values(), o, &mut out);
    Tensor::new(vec![o, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let (g, o) = conv_geometry(input, weight, bias, stride)?;
    if grad_out.shape() != [o, g.out_h, g.out_w] {
        return Err(Error::Shape(format!("conv output gradient has shape {:?}", grad_out.shape())));
    }
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    im2col(input.values(), &g, &mut cols);
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; o];
    let mut gi = vec![0.0; input.len()];
    let mut scratch = Vec::new();
    conv_backward_cols(
        &g,
        &cols,
        weight.values(),
        o,
        grad_out.values(),
        &mut gw,
        &mut gb,
        Some((&mut gi, &mut scratch)),
    );
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), gi)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let v = input.values().iter().map(|&x| x.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), v).expect("same shape")
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(input, grad_out)?;
    let v = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), v)
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// Returns the flat input index of each maximum; ties keep the first element
/// in row-major order.
pub(crate) fn maxpool_raw(input: &[f32], c: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.chw()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("cannot pool a {h}x{w} map")));
    }
    let n = c * (h / 2) * (w / 2);
    let mut out = vec![0.0; n];
    let mut argmax = vec![0u32; n];
    maxpool_raw(input.values(), c, h, w, &mut out, &mut argmax);
    Ok((Tensor::new(vec![c, h / 2, w / 2], out)?, argmax))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("pool indices do not match the output gradient".into()));
    }
    let mut g = Tensor::zeros(input_shape.to_vec());
    let gv = g.values_mut();
    for (&i, &d) in argmax.iter().zip(grad_out.values()) {
        gv[i as usize] += d;
    }
    Ok(g)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let hw = h * w;
    let v = input
        .values()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(vec![c], v)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("expected [C, H, W], got {input_shape:?}"))),
    };
    if grad_out.shape() != [c] {
        return Err(Error::Shape(format!("pool gradient has shape {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let mut v = Vec::with_capacity(c * hw);
    for &g in grad_out.values() {
        v.extend(std::iter::repeat(g / hw as f32).take(hw));
    }
    Tensor::new(input_shape.to_vec(), v)
}

/// `y = W·x + b` for `W: [O, I]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = dense_dims(input, weight, bias)?;
    let x = input.values();
    let v = (0..o)
        .map(|r| {
            let row = &weight.values()[r * i..(r + 1) * i];
            bias.values()[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    Tensor::new(vec![o], v)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, bias: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (o, i) = dense_dims(input, weight, bias)?;
    if grad_out.shape() != [o] {
        return Err(Error::Shape(format!("dense output gradient has shape {:?}", grad_out.shape())));
    }
    let x = input.values();
    let go = grad_out.values();
    let mut gw = Vec::with_capacity(o * i);
    for &g in go {
        gw.extend(x.iter().map(|&xv| g * xv));
    }
    let mut gi = vec![0.0; i];
    for (r, &g) in go.iter().enumerate() {
        for (d, &w) in gi.iter_mut().zip(&weight.values()[r * i..(r + 1) * i]) {
            *d += g * w;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![i], gi)?,
        weight: Tensor::new(vec![o, i], gw)?,
        bias: Tensor::new(vec![o], go.to_vec())?,
    })
}

fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (o, i) = match weight.shape()[..] {
        [o, i] => (o, i),
        _ => return Err(Error::Shape(format!("dense weight must be [O, I], got {:?}", weight.shape()))),
    };
    if input.len() != i || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "dense {:?} does not fit input {:?} / bias {:?}",
            weight.shape(),
            input.shape(),
            bias.shape()
        )));
    }
    Ok((o, i))
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let v = input.values().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::new(input.shape().to_vec(), v).expect("same shape")
}

/// Backward of the sigmoid given its output `y`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(output, grad_out)?;
    let v = output
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape().to_vec(), v)
}

fn check_labels(probabilities: &[f32], labels: &[f32]) -> Result<()> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn binary_cross_entropy(probabilities: &[f32], labels: &[f32]) -> Result<f32> {
    check_labels(probabilities, labels)?;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / labels.len() as f64) as f32)
}

/// d(loss)/d(p) at the clamped probabilities.
pub fn binary_cross_entropy_backward(probabilities: &[f32], labels: &[f32]) -> Result<Vec<f32>> {
    check_labels(probabilities, labels)?;
    let n = labels.len() as f32;
    Ok(probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
