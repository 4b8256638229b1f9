use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Separable binomial filter; the 2-D blur kernel is the outer product of
/// these taps with themselves (`[1,2,1] x [1,2,1] / 16`).
pub const BLUR_TAPS: [f64; 3] = [0.25, 0.5, 0.25];

/// Reflect-pad index mapping (`-1 -> 1`, `n -> n - 2`), clamped for tiny
/// extents. Reflection keeps constant inputs constant at the border.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

fn blur_out(size: usize, stride: usize) -> usize {
    // pad 1, kernel 3: floor((size + 2 - 3) / stride) + 1 == ceil(size / stride)
    size.div_ceil(stride)
}

/// Depthwise binomial blur with reflect padding 1, evaluated every `stride`
/// pixels. `stride == 1` gives the plain low-pass filter.
pub fn blur<T: Real>(input: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::invalid("blur", "stride must be positive"));
    }
    let (n, c, h, w) = input.dims4("blur")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("blur", "spatial extent", "> 0", format!("{h}x{w}")));
    }
    let (oh, ow) = (blur_out(h, stride), blur_out(w, stride));
    let taps = BLUR_TAPS.map(T::from_f64);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(input.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for oy in 0..oh {
                let cy = (oy * stride) as isize;
                let rows = [reflect(cy - 1, h), reflect(cy, h), reflect(cy + 1, h)];
                for ox in 0..ow {
                    let cx = (ox * stride) as isize;
                    let cols = [reflect(cx - 1, w), reflect(cx, w), reflect(cx + 1, w)];
                    let mut acc = T::ZERO;
                    for (ty, &ry) in taps.iter().zip(&rows) {
                        let line = &src[ry * w..(ry + 1) * w];
                        let mut row_acc = T::ZERO;
                        for (tx, &rx) in taps.iter().zip(&cols) {
                            row_acc += *tx * line[rx];
                        }
                        acc += *ty * row_acc;
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        });
    Ok(out)
}

pub fn blur_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape("blur_backward", "rank", 4, input_shape.len()));
    };
    let (oh, ow) = (blur_out(h, stride), blur_out(w, stride));
    grad_out.expect_shape("blur_backward", &[n, c, oh, ow])?;
    let taps = BLUR_TAPS.map(T::from_f64);
    let mut grad_in = Tensor::zeros([n, c, h, w]);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            for oy in 0..oh {
                let cy = (oy * stride) as isize;
                let rows = [reflect(cy - 1, h), reflect(cy, h), reflect(cy + 1, h)];
                for ox in 0..ow {
                    let cx = (ox * stride) as isize;
                    let cols = [reflect(cx - 1, w), reflect(cx, w), reflect(cx + 1, w)];
                    let gv = g[oy * ow + ox];
                    for (ty, &ry) in taps.iter().zip(&rows) {
                        for (tx, &rx) in taps.iter().zip(&cols) {
                            dst[ry * w + rx] += *ty * *tx * gv;
                        }
                    }
                }
            }
        });
    Ok(grad_in)
}

/// Anti-aliased downsampling: fixed binomial blur followed by subsampling.
/// The filter is constant and never learned.
pub fn blur_pool<T: Real>(input: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride < 2 {
        return Err(Error::invalid(
            "blur_pool",
            format!("stride must be >= 2 to downsample, got {stride}"),
        ));
    }
    blur(input, stride)
}

pub fn blur_pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
) -> Result<Tensor<T>> {
    if stride < 2 {
        return Err(Error::invalid(
            "blur_pool",
            format!("stride must be >= 2 to downsample, got {stride}"),
        ));
    }
    blur_backward(grad_out, input_shape, stride)
}

/// Max-pool output together with the flat input index chosen for every
/// output element.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Real> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

/// Unpadded max pooling.
pub fn max_pool<T: Real>(input: &Tensor<T>, k: usize, stride: usize) -> Result<MaxPoolOutput<T>> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max_pool", "kernel and stride must be positive"));
    }
    let (n, c, h, w) = input.dims4("max_pool")?;
    if h < k || w < k {
        return Err(Error::shape(
            "max_pool",
            "spatial extent",
            format!(">= kernel {k}"),
            format!("{h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut output = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    output
        .data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .zip(input.data().par_chunks(h * w))
        .for_each(|((dst, idx), src)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = (oy * stride + ky) * w + ox * stride + kx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    idx[oy * ow + ox] = best as u32;
                }
            }
        });
    Ok(MaxPoolOutput { output, argmax })
}

pub fn max_pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape("max_pool_backward", "rank", 4, input_shape.len()));
    };
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "max_pool_backward",
            "argmax length",
            grad_out.len(),
            argmax.len(),
        ));
    }
    let plane_out = grad_out.len() / (n * c).max(1);
    let mut grad_in = Tensor::zeros([n, c, h, w]);
    for (plane, (g, idx)) in grad_in
        .data_mut()
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(plane_out).zip(argmax.chunks(plane_out)))
    {
        for (&gv, &i) in g.iter().zip(idx) {
            plane[i as usize] += gv;
        }
    }
    Ok(grad_in)
}

pub fn nearest_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("nearest_upsample", "factor must be positive"));
    }
    let (n, c, h, w) = input.dims4("nearest_upsample")?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(input.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for y in 0..oh {
                let line = &src[(y / factor) * w..(y / factor + 1) * w];
                for (x, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *d = line[x / factor];
                }
            }
        });
    Ok(out)
}

pub fn nearest_upsample_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4("nearest_upsample_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::invalid(
            "nearest_upsample_backward",
            format!("{oh}x{ow} is not a multiple of factor {factor}"),
        ));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut grad_in = Tensor::zeros([n, c, h, w]);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            for y in 0..oh {
                for x in 0..ow {
                    dst[(y / factor) * w + x / factor] += g[y * ow + x];
                }
            }
        });
    Ok(grad_in)
}

/// Mean over the spatial axes: (N,C,H,W) -> (N,C).
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    if h * w == 0 {
        return Err(Error::shape("global_avg_pool", "spatial extent", "> 0", 0));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let data = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape("global_avg_pool_backward", "rank", 4, input_shape.len()));
    };
    grad_out.expect_shape("global_avg_pool_backward", &[n, c])?;
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut grad_in = Tensor::zeros([n, c, h, w]);
    for (plane, &g) in grad_in.data_mut().chunks_mut(h * w).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(grad_in)
}
