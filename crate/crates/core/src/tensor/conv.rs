use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D grouped convolution (cross-correlation, no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("conv2d", format!("{name} must be positive")));
            }
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "groups {} must divide in_channels {} and out_channels {}",
                    self.groups, self.in_channels, self.out_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |size: usize, k: usize, axis: &str| {
            let padded = size + 2 * self.padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {axis} (with padding)"),
                    format!(">= kernel {k}"),
                    padded,
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            out(h, self.kernel_h, "height")?,
            out(w, self.kernel_w, "width")?,
        ))
    }

    fn is_pointwise_dense(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_args<T: Real>(
        &self,
        input: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = input.dims4("conv2d")?;
        if c != self.in_channels {
            return Err(Error::shape("conv2d", "input channels", self.in_channels, c));
        }
        let ws = self.weight_shape();
        if weights.shape() != ws {
            return Err(Error::shape(
                "conv2d",
                "weights (C_out, C_in/groups, k_h, k_w)",
                format!("{ws:?}"),
                format!("{:?}", weights.shape()),
            ));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, h, w, oh, ow))
    }
}

/// Unfold one group of one sample into a `(C_g * k_h * k_w) x (oh * ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane = oh * ow;
    for c in 0..channels {
        let chan = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let line = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane = oh * ow;
    for c in 0..channels {
        let chan = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation plus per-channel bias.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = spec.check_args(input, weights)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            "bias",
            format!("[{}]", spec.out_channels),
            format!("{:?}", bias.shape()),
        ));
    }
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let k = cin_g * spec.kernel_h * spec.kernel_w;
    let plane = oh * ow;
    let in_item = spec.in_channels * h * w;
    let out_item = spec.out_channels * plane;
    let pointwise = spec.is_pointwise_dense();

    let mut out = Tensor::zeros([n, spec.out_channels, oh, ow]);
    out.data_mut()
        .par_chunks_mut(out_item.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &input.data()[b * in_item..(b + 1) * in_item];
            let mut col = if pointwise {
                Vec::new()
            } else {
                vec![T::ZERO; k * plane]
            };
            for gi in 0..g {
                let src_g = &src[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
                let col_ref = if pointwise {
                    src_g
                } else {
                    im2col(src_g, cin_g, h, w, spec, oh, ow, &mut col);
                    &col
                };
                let w_g = &weights.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                let dst_g = &mut dst[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                T::gemm(
                    cout_g,
                    k,
                    plane,
                    MatRef::rows(w_g, k),
                    MatRef::rows(col_ref, plane),
                    T::ZERO,
                    dst_g,
                );
            }
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = bias.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its three arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    conv2d_backward_with(grad_out, input, weights, spec, true)
}

/// Like [`conv2d_backward`] but optionally skips the input gradient, which
/// the first layer of a network never needs.
pub fn conv2d_backward_with<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, h, w, oh, ow) = spec.check_args(input, weights)?;
    grad_out.expect_shape("conv2d_backward", &[n, spec.out_channels, oh, ow])?;
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let k = cin_g * spec.kernel_h * spec.kernel_w;
    let plane = oh * ow;
    let in_item = spec.in_channels * h * w;
    let out_item = spec.out_channels * plane;
    let pointwise = spec.is_pointwise_dense();

    // Per-sample partials are reduced afterwards in batch order so the result
    // does not depend on how the batch was scheduled.
    let partials: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let src = &input.data()[b * in_item..(b + 1) * in_item];
            let gout = &grad_out.data()[b * out_item..(b + 1) * out_item];
            let mut gw = vec![T::ZERO; weights.len()];
            let gb: Vec<T> = gout
                .chunks(plane.max(1))
                .map(|c| c.iter().copied().sum())
                .collect();
            let mut gin = need_input.then(|| vec![T::ZERO; in_item]);
            let mut col = if pointwise {
                Vec::new()
            } else {
                vec![T::ZERO; k * plane]
            };
            let mut gcol = vec![T::ZERO; k * plane];
            for gi in 0..g {
                let src_g = &src[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
                let col_ref: &[T] = if pointwise {
                    src_g
                } else {
                    im2col(src_g, cin_g, h, w, spec, oh, ow, &mut col);
                    &col
                };
                let gout_g = &gout[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                T::gemm(
                    cout_g,
                    plane,
                    k,
                    MatRef::rows(gout_g, plane),
                    MatRef::transposed(col_ref, plane),
                    T::ZERO,
                    &mut gw[gi * cout_g * k..(gi + 1) * cout_g * k],
                );
                if let Some(gin) = gin.as_mut() {
                    let w_g = &weights.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                    let gin_g = &mut gin[gi * cin_g * h * w..(gi + 1) * cin_g * h * w];
                    if pointwise {
                        T::gemm(
                            k,
                            cout_g,
                            plane,
                            MatRef::transposed(w_g, k),
                            MatRef::rows(gout_g, plane),
                            T::ZERO,
                            gin_g,
                        );
                    } else {
                        T::gemm(
                            k,
                            cout_g,
                            plane,
                            MatRef::transposed(w_g, k),
                            MatRef::rows(gout_g, plane),
                            T::ZERO,
                            &mut gcol,
                        );
                        col2im(&gcol, cin_g, h, w, spec, oh, ow, gin_g);
                    }
                }
            }
            (gin, gw, gb)
        })
        .collect();

    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let mut grad_b = Tensor::zeros([spec.out_channels]);
    let mut grad_in = need_input.then(|| Tensor::zeros([n, spec.in_channels, h, w]));
    for (b, (gin, gw, gb)) in partials.into_iter().enumerate() {
        for (acc, v) in grad_w.data_mut().iter_mut().zip(gw) {
            *acc += v;
        }
        for (acc, v) in grad_b.data_mut().iter_mut().zip(gb) {
            *acc += v;
        }
        if let (Some(all), Some(gin)) = (grad_in.as_mut(), gin) {
            all.data_mut()[b * in_item..(b + 1) * in_item].copy_from_slice(&gin);
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_nine() {
        let x = Tensor::<f64>::full([1, 1, 4, 4], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let b = Tensor::zeros([1]);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn unit_pointwise_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 5], |i| i as f64 * 0.37 - 2.0);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1]);
        let spec = ConvSpec::same(1, 1, 1, 1);
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        assert_eq!(y, x);

        let g = Tensor::from_fn([2, 1, 3, 5], |i| (i as f64).sin());
        let grads = conv2d_backward(&g, &x, &w, &spec).unwrap();
        assert_eq!(grads.input.unwrap(), g);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec::same(4, 6, 3, 2);
        let x = Tensor::<f64>::from_fn([2, 4, 5, 5], |i| (i as f64 * 0.1).cos());
        let w = Tensor::from_fn(spec.weight_shape(), |i| i as f64 * 0.01);
        let g = Tensor::zeros([2, 6, 5, 5]);
        let grads = conv2d_backward(&g, &x, &w, &spec).unwrap();
        assert!(grads.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let spec = ConvSpec::same(3, 4, 3, 1);
        let x = Tensor::<f64>::zeros([1, 2, 8, 8]);
        let w = Tensor::zeros(spec.weight_shape());
        let b = Tensor::zeros([4]);
        let err = conv2d_forward(&x, &w, &b, &spec).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");

        let x = Tensor::<f64>::zeros([1, 3, 8, 8]);
        let bad_w = Tensor::zeros([4, 3, 3, 2]);
        let err = conv2d_forward(&x, &bad_w, &b, &spec).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");

        let bad_groups = ConvSpec::same(3, 4, 3, 2);
        assert!(bad_groups.validate().is_err());
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 5,
            stride: 2,
            padding: 1,
            groups: 1,
        };
        // floor((9 + 2 - 3)/2) + 1 = 5; floor((9 + 2 - 5)/2) + 1 = 4
        assert_eq!(spec.output_hw(9, 9).unwrap(), (5, 4));
    }
}
