//! Raw forward and backward kernels. The graph in `graph.rs` wires these
//! into the tape; they are also used directly for inference.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape,
        weight: Shape,
        bias: Shape,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [_, cin, h, w] = input.0;
        let [cout, wcin, kh, kw] = weight.0;
        if cin != wcin || kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", input.dims(), weight.dims()));
        }
        if bias.numel() != cout {
            return Err(Error::shape("conv2d bias", weight.dims(), bias.dims()));
        }
        if stride == 0 {
            return Err(Error::Domain {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::shape("conv2d output extents", input.dims(), weight.dims()));
        }
        Ok(ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: w,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1, unpadded kernel reads the input directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for ci in 0..g.in_channels {
        let src = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            drow[ix as usize] = drow[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation. `weight` is `(out, in, k, k)`, `bias` has
/// `out` elements in any 4-D arrangement.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let batch = x.shape().n();
    let plane = g.out_plane();
    let kdim = g.patch_len();
    let in_len = x.shape().item_len();
    let out_len = g.out_channels * plane;
    let mut out = Tensor::zeros([batch, g.out_channels, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    for n in 0..batch {
        let xi = &x.data()[n * in_len..(n + 1) * in_len];
        let yi = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (co, row) in yi.chunks_mut(plane).enumerate() {
            row.fill(bias.data()[co]);
        }
        let b: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(&g, xi, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            kdim,
            plane,
            T::one(),
            weight.data(),
            false,
            b,
            false,
            T::one(),
            yi,
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias_shape: Shape,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias_shape, stride, pad)?;
    let batch = x.shape().n();
    let plane = g.out_plane();
    let kdim = g.patch_len();
    let in_len = x.shape().item_len();
    let out_len = g.out_channels * plane;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(bias_shape);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); kdim * plane];
    let mut dcols = if need_input_grad && !g.is_pointwise() {
        vec![T::zero(); kdim * plane]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let xi = &x.data()[n * in_len..(n + 1) * in_len];
        let dyi = &dy.data()[n * out_len..(n + 1) * out_len];
        for (co, row) in dyi.chunks(plane).enumerate() {
            let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
            db.data_mut()[co] = db.data()[co] + s;
        }
        let b: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(&g, xi, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(
            g.out_channels,
            plane,
            kdim,
            T::one(),
            dyi,
            false,
            b,
            true,
            T::one(),
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                // dX = W^T * dY directly into the input gradient.
                T::gemm(
                    kdim,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    true,
                    dyi,
                    false,
                    T::zero(),
                    dxi,
                );
            } else {
                T::gemm(
                    kdim,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    true,
                    dyi,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&g, &dcols, dxi);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// 2x2 non-overlapping max pooling. Returns the output and, for each output
/// element, the flat input index of the selected element. Ties resolve to the
/// first element of the window in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Domain {
            op: "maxpool2",
            detail: format!("height and width must be even, got {h}x{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Source taps for one axis of half-pixel bilinear 2x upsampling
/// (align-corners = false). Output coordinate `o` maps to the source
/// coordinate `(o + 0.5) / 2 - 0.5`, clamped to `[0, len - 1]`.
pub fn bilinear_taps(len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h == 0 || w == 0 {
        return Err(Error::Domain {
            op: "upsample_bilinear2x",
            detail: "empty spatial extent".into(),
        });
    }
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                d[oy * ow + ox] = gy * (gx * s[y0 * w + x0] + fx * s[y0 * w + x1])
                    + fy * (gx * s[y1 * w + x0] + fx * s[y1 * w + x1]);
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.0;
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros(input);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let g = &src[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                let v = g[oy * ow + ox];
                d[y0 * w + x0] = d[y0 * w + x0] + gy * gx * v;
                d[y0 * w + x1] = d[y0 * w + x1] + gy * fx * v;
                d[y1 * w + x0] = d[y1 * w + x0] + fy * gx * v;
                d[y1 * w + x1] = d[y1 * w + x1] + fy * fx * v;
            }
        }
    }
    dx
}

/// Per-pixel softmax across channels with max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if c == 0 {
        return Err(Error::Domain {
            op: "softmax_channels",
            detail: "channel extent must be at least 1".into(),
        });
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(src[base + k * plane + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (src[base + k * plane + p] - max).exp();
                dst[base + k * plane + p] = e;
                sum = sum + e;
            }
            for k in 0..c {
                dst[base + k * plane + p] = dst[base + k * plane + p] / sum;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = y.shape().0;
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    let (ys, gs) = (y.data(), dy.data());
    let d = dx.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                let i = base + k * plane + p;
                dot = dot + ys[i] * gs[i];
            }
            for k in 0..c {
                let i = base + k * plane + p;
                d[i] = ys[i] * (gs[i] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones_three_by_three() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 4, 5], |i| (i[0] * 100 + i[2] * 7 + i[3]) as f64);
        let w = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_weights_give_zero() {
        let x = Tensor::<f32>::from_fn([1, 3, 6, 6], |i| (i[1] + i[2] * i[3]) as f32 - 4.0);
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 4, 1, 1]);
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_stride_two_extents() {
        let x = Tensor::<f32>::zeros([1, 2, 7, 7]);
        let w = Tensor::<f32>::zeros([3, 2, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 3, 1, 1]);
        let y = conv2d_forward(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 3, 3));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 1, 1, 1]);
        let err = conv2d_forward(&x, &w, &b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 1, 1, 1]);
        assert!(conv2d_forward(&x, &w, &b, 2, 0).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2_forward(&x).unwrap().0.data(), &[4.0]);
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![5.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(maxpool2_forward(&x).unwrap().0.data(), &[5.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let x = Tensor::<f32>::full([1, 1, 4, 4], 2.0);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::full(y.shape(), 1.0));
        let expect: Vec<f32> = (0..16)
            .map(|i| if [0, 2, 8, 10].contains(&i) { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(dx.data(), expect.as_slice());
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        assert!(maxpool2_forward(&Tensor::<f32>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample2x_forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.25, 0.75, 1.0]);

        let x = Tensor::<f64>::full([1, 1, 1, 1], 3.5);
        assert_eq!(upsample2x_forward(&x).unwrap().data(), &[3.5; 4]);

        let x = Tensor::<f64>::full([2, 3, 5, 3], -1.25);
        assert!(upsample2x_forward(&x).unwrap().data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_vec([1, 2, 1, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let y = softmax_channels(&x).unwrap();
        // pixel 0: (0, 0); pixel 1: (0, ln 3)
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 0.25).abs() < 1e-12);
        assert!((y.data()[3] - 0.75).abs() < 1e-12);
    }
}
