//! Forward and backward kernels for the differentiable operations.
//!
//! Kernels are pure functions over flat slices; the compute graph and the
//! frozen-network forward path both dispatch here. Accumulation order inside
//! every kernel is fixed, so results are bit-identical regardless of the
//! rayon thread count (parallel loops only ever write disjoint output
//! regions).

use crate::error::{FcxError, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Resolved convolution geometry shared by forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent of a convolution axis; errors unless the division is exact.
pub fn conv_out_dim(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = extent + 2 * pad;
    if k > span {
        return Err(FcxError::InvalidGeometry(format!(
            "kernel {k} exceeds padded extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(FcxError::InvalidGeometry(format!(
            "non-integral output extent: ({extent} + 2*{pad} - {k}) not divisible by {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

impl ConvGeom {
    pub fn resolve(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || k_shape.len() != 4 {
            return Err(FcxError::InvalidShape(format!(
                "conv2d wants x[n,c,h,w] and K[co,ci,k,k], got {x_shape:?} and {k_shape:?}"
            )));
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != c_in {
            return Err(FcxError::ShapeMismatch {
                expected: vec![c_out, c_in, kh, kw],
                got: k_shape.to_vec(),
            });
        }
        if kh != kw {
            return Err(FcxError::InvalidShape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(FcxError::InvalidShape(format!("kernel extent must be odd, got {kh}")));
        }
        if stride == 0 {
            return Err(FcxError::InvalidGeometry("stride must be >= 1".into()));
        }
        let h_out = conv_out_dim(h, kh, stride, pad)?;
        let w_out = conv_out_dim(w, kw, stride, pad)?;
        Ok(ConvGeom { n, c_in, h, w, c_out, k: kh, stride, pad, h_out, w_out })
    }
}

pub fn conv2d_forward(x: &Tensor, kern: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    debug_assert_eq!(bias.len(), g.c_out);
    let xs = x.data();
    let ks = kern.data();
    let bs = bias.data();
    let out_shape = [g.n, g.c_out, g.h_out, g.w_out];
    let per_sample = g.c_out * g.h_out * g.w_out;
    let x_per_sample = g.c_in * g.h * g.w;
    let mut out = vec![0.0; g.n * per_sample];

    out.par_chunks_mut(per_sample).enumerate().for_each(|(ni, ys)| {
        let xb = &xs[ni * x_per_sample..(ni + 1) * x_per_sample];
        for co in 0..g.c_out {
            let yc = &mut ys[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
            yc.fill(bs[co]);
            for ci in 0..g.c_in {
                let xc = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                let kc = &ks[(co * g.c_in + ci) * g.k * g.k..(co * g.c_in + ci + 1) * g.k * g.k];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = kc[kh * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..g.h_out {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                            let yrow = &mut yc[oh * g.w_out..(oh + 1) * g.w_out];
                            for ow in 0..g.w_out {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                yrow[ow] += wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&out_shape, out).expect("conv output shape is valid")
}

/// Gradients of conv2d w.r.t. input, kernel, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kern: &Tensor,
    dy: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.data();
    let ks = kern.data();
    let dys = dy.data();
    let x_per_sample = g.c_in * g.h * g.w;
    let y_per_sample = g.c_out * g.h_out * g.w_out;

    // dx: parallel over samples, each sample's region is disjoint.
    let mut dx = vec![0.0; xs.len()];
    dx.par_chunks_mut(x_per_sample).enumerate().for_each(|(ni, dxb)| {
        let dyb = &dys[ni * y_per_sample..(ni + 1) * y_per_sample];
        for co in 0..g.c_out {
            let dyc = &dyb[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
            for ci in 0..g.c_in {
                let dxc = &mut dxb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                let kc = &ks[(co * g.c_in + ci) * g.k * g.k..(co * g.c_in + ci + 1) * g.k * g.k];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = kc[kh * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..g.h_out {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let drow = &dyc[oh * g.w_out..(oh + 1) * g.w_out];
                            let xrow = &mut dxc[ih as usize * g.w..(ih as usize + 1) * g.w];
                            for ow in 0..g.w_out {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                xrow[iw as usize] += wv * drow[ow];
                            }
                        }
                    }
                }
            }
        }
    });

    // dK: parallel over output channels, accumulation over samples is
    // sequential per channel so the sum order is fixed.
    let mut dk = vec![0.0; ks.len()];
    dk.par_chunks_mut(g.c_in * g.k * g.k).enumerate().for_each(|(co, dkc)| {
        for ni in 0..g.n {
            let xb = &xs[ni * x_per_sample..(ni + 1) * x_per_sample];
            let dyc = &dys
                [ni * y_per_sample + co * g.h_out * g.w_out..ni * y_per_sample + (co + 1) * g.h_out * g.w_out];
            for ci in 0..g.c_in {
                let xc = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let mut acc = 0.0;
                        for oh in 0..g.h_out {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let drow = &dyc[oh * g.w_out..(oh + 1) * g.w_out];
                            let xrow = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                            for ow in 0..g.w_out {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                acc += drow[ow] * xrow[iw as usize];
                            }
                        }
                        dkc[ci * g.k * g.k + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    });

    let mut db = vec![0.0; g.c_out];
    for ni in 0..g.n {
        for co in 0..g.c_out {
            let dyc = &dys
                [ni * y_per_sample + co * g.h_out * g.w_out..ni * y_per_sample + (co + 1) * g.h_out * g.w_out];
            db[co] += dyc.iter().sum::<f64>();
        }
    }

    (
        Tensor::from_vec(x.shape(), dx).expect("dx shape valid"),
        Tensor::from_vec(kern.shape(), dk).expect("dK shape valid"),
        Tensor::from_vec(&[g.c_out], db).expect("db shape valid"),
    )
}

pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(FcxError::InvalidShape(format!(
            "affine wants x[n,d_in] and W[d_in,d_out], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (wd_in, d_out) = (w.shape()[0], w.shape()[1]);
    if wd_in != d_in || b.shape() != [d_out] {
        return Err(FcxError::ShapeMismatch {
            expected: vec![d_in, d_out],
            got: w.shape().to_vec(),
        });
    }
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![0.0; n * d_out];
    out.par_chunks_mut(d_out).enumerate().for_each(|(i, yrow)| {
        yrow.copy_from_slice(bs);
        let xrow = &xs[i * d_in..(i + 1) * d_in];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &ws[k * d_out..(k + 1) * d_out];
            for j in 0..d_out {
                yrow[j] += xv * wrow[j];
            }
        }
    });
    Tensor::from_vec(&[n, d_out], out)
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[1];
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = vec![0.0; n * d_in];
    dx.par_chunks_mut(d_in).enumerate().for_each(|(i, dxrow)| {
        let dyrow = &dys[i * d_out..(i + 1) * d_out];
        for k in 0..d_in {
            let wrow = &ws[k * d_out..(k + 1) * d_out];
            let mut acc = 0.0;
            for j in 0..d_out {
                acc += dyrow[j] * wrow[j];
            }
            dxrow[k] = acc;
        }
    });

    let mut dw = vec![0.0; d_in * d_out];
    dw.par_chunks_mut(d_out).enumerate().for_each(|(k, dwrow)| {
        for i in 0..n {
            let xv = xs[i * d_in + k];
            if xv == 0.0 {
                continue;
            }
            let dyrow = &dys[i * d_out..(i + 1) * d_out];
            for j in 0..d_out {
                dwrow[j] += xv * dyrow[j];
            }
        }
    });

    let mut db = vec![0.0; d_out];
    for i in 0..n {
        let dyrow = &dys[i * d_out..(i + 1) * d_out];
        for j in 0..d_out {
            db[j] += dyrow[j];
        }
    }

    (
        Tensor::from_vec(x.shape(), dx).expect("dx shape valid"),
        Tensor::from_vec(w.shape(), dw).expect("dW shape valid"),
        Tensor::from_vec(&[d_out], db).expect("db shape valid"),
    )
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Zero-pads channels of `x[n,c_in,h,w]` up to `c_out`; identity path of a
/// widening residual block.
pub fn pad_channels_forward(x: &Tensor, c_out: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(FcxError::InvalidShape(format!("pad_channels wants [n,c,h,w], got {s:?}")));
    }
    let (n, c_in, h, w) = (s[0], s[1], s[2], s[3]);
    if c_out < c_in {
        return Err(FcxError::InvalidShape(format!(
            "cannot pad channels downward: {c_in} -> {c_out}"
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * c_out * hw];
    for ni in 0..n {
        let src = &x.data()[ni * c_in * hw..(ni + 1) * c_in * hw];
        let dst = &mut out[ni * c_out * hw..ni * c_out * hw + c_in * hw];
        dst.copy_from_slice(src);
    }
    Tensor::from_vec(&[n, c_out, h, w], out)
}

pub fn pad_channels_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let c_out = dy.shape()[1];
    let hw = h * w;
    let mut dx = vec![0.0; n * c_in * hw];
    for ni in 0..n {
        let src = &dy.data()[ni * c_out * hw..ni * c_out * hw + c_in * hw];
        dx[ni * c_in * hw..(ni + 1) * c_in * hw].copy_from_slice(src);
    }
    Tensor::from_vec(x_shape, dx).expect("dx shape valid")
}

/// Mean of elementwise squared differences.
pub fn mse_forward(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / n)
}

pub fn mse_backward(a: &Tensor, b: &Tensor, dloss: f64) -> (Tensor, Tensor) {
    let n = a.len() as f64;
    let c = 2.0 * dloss / n;
    let da: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| c * (x - y)).collect();
    let db: Vec<f64> = da.iter().map(|v| -v).collect();
    (
        Tensor::from_vec(a.shape(), da).expect("same shape"),
        Tensor::from_vec(b.shape(), db).expect("same shape"),
    )
}

/// Mean negative log-softmax of the true class, stabilized by max
/// subtraction. Returns the loss and the cached per-row softmax for the
/// backward pass.
pub fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(FcxError::InvalidShape(format!(
            "softmax_cross_entropy wants [n,C], got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(FcxError::ShapeMismatch { expected: vec![n], got: vec![labels.len()] });
    }
    for &l in labels {
        if l >= c {
            return Err(FcxError::InvalidLabel { label: l, classes: c });
        }
    }
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            probs[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            probs[i * c + j] /= z;
        }
        loss += z.ln() - (row[labels[i]] - m);
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, c], probs)?))
}

pub fn softmax_ce_backward(probs: &Tensor, labels: &[usize], dloss: f64) -> Tensor {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = dloss / n as f64;
    let mut dl = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        dl[i * c + l] -= 1.0;
    }
    for v in dl.iter_mut() {
        *v *= scale;
    }
    Tensor::from_vec(&[n, c], dl).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn conv_identity_one_by_one() {
        // 1x1 kernel acting as an identity channel map leaves x unchanged.
        let x = Tensor::new(&[1, 2, 3, 3], Init::Uniform(-1.0, 1.0), 1).unwrap();
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        k.data_mut()[0] = 1.0; // out0 <- in0
        k.data_mut()[3] = 1.0; // out1 <- in1
        let b = Tensor::zeros(&[2]);
        let g = ConvGeom::resolve(x.shape(), k.shape(), 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &b, &g);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::new(&[1, 1, 3, 3], Init::Constant(1.0), 0).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], Init::Constant(1.0), 0).unwrap();
        let b = Tensor::zeros(&[1]);
        let g = ConvGeom::resolve(x.shape(), k.shape(), 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &b, &g);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_rejects_non_integral_geometry() {
        // (16 + 2 - 3) = 15 is not divisible by stride 2.
        let err = ConvGeom::resolve(&[1, 1, 16, 16], &[4, 1, 3, 3], 2, 1);
        assert!(matches!(err, Err(FcxError::InvalidGeometry(_))));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let err = ConvGeom::resolve(&[1, 1, 8, 8], &[4, 1, 2, 2], 1, 0);
        assert!(matches!(err, Err(FcxError::InvalidShape(_))));
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn affine_dim_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(affine_forward(&x, &w, &b), Err(FcxError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        // gradient mask is indicator(x > 0)
        let dy = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&x, &dy).data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu_forward(&pos).data(), pos.data());
    }

    #[test]
    fn mse_cases() {
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        assert_eq!(mse_forward(&x, &x).unwrap(), 0.0);
        let a = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        assert_eq!(mse_forward(&a, &b).unwrap(), 4.0);
        let c = Tensor::zeros(&[3]);
        assert!(matches!(mse_forward(&a, &c), Err(FcxError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_ce_uniform_and_peaked() {
        let c = 5;
        let logits = Tensor::zeros(&[1, c]);
        let (loss, _) = softmax_ce_forward(&logits, &[3]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);

        let mut peaked = Tensor::zeros(&[1, 4]);
        peaked.data_mut()[2] = 50.0;
        let (loss, _) = softmax_ce_forward(&peaked, &[2]).unwrap();
        assert!(loss < 1e-20, "near-one-hot loss {loss}");

        assert!(matches!(
            softmax_ce_forward(&logits, &[7]),
            Err(FcxError::InvalidLabel { .. })
        ));
    }

    #[test]
    fn pad_channels_roundtrip() {
        let x = Tensor::new(&[2, 3, 2, 2], Init::Uniform(-1.0, 1.0), 9).unwrap();
        let y = pad_channels_forward(&x, 5).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        // padded region zero, original region preserved
        assert_eq!(&y.data()[0..12], &x.data()[0..12]);
        assert!(y.data()[12..20].iter().all(|&v| v == 0.0));
        let dx = pad_channels_backward(x.shape(), &y);
        assert_eq!(dx.data(), x.data());
    }
}
