use super::{MatRef, Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of ReLU given its *output* (positive where the unit was active).
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("relu_backward", output.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::new(output.shape(), data)
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the logistic function given its output `s`: `g * s * (1 - s)`.
pub fn sigmoid_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("sigmoid_backward", output.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &s)| g * s * (T::ONE - s))
        .collect();
    Tensor::new(output.shape(), data)
}

/// Softmax over the class axis of an (N, C) tensor, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = logits.dims2("softmax")?;
    if c == 0 {
        return Err(Error::invalid("softmax", "empty class axis"));
    }
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut total = T::ZERO;
        for &z in row {
            let e = (z - m).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / total;
        }
    }
    Tensor::new([n, c], out)
}

/// Vector-Jacobian product of softmax: `p * (g - <g, p>)` per row.
pub fn softmax_backward<T: Real>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = probs.dims2("softmax_backward")?;
    grad_out.expect_shape("softmax_backward", probs.shape())?;
    let mut out = Vec::with_capacity(probs.len());
    for (g, p) in grad_out.data().chunks(c).zip(probs.data().chunks(c)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        out.extend(g.iter().zip(p).map(|(&gi, &pi)| pi * (gi - dot)));
    }
    Tensor::new(probs.shape(), out)
}

/// `y = x W^T + b` with `x: (N, F)`, `W: (O, F)`, `b: (O)`.
pub fn fully_connected<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2("fully_connected")?;
    let (o, wf) = w.dims2("fully_connected")?;
    if wf != f {
        return Err(Error::shape("fully_connected", "weight in_features", f, wf));
    }
    if b.shape() != [o] {
        return Err(Error::shape(
            "fully_connected",
            "bias",
            format!("[{o}]"),
            format!("{:?}", b.shape()),
        ));
    }
    let mut y = Tensor::zeros([n, o]);
    T::gemm(
        n,
        f,
        o,
        MatRef::rows(x.data(), f),
        MatRef::transposed(w.data(), f),
        T::ZERO,
        y.data_mut(),
    );
    for row in y.data_mut().chunks_mut(o) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct FcGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (n, f) = x.dims2("fully_connected_backward")?;
    let (o, wf) = w.dims2("fully_connected_backward")?;
    if wf != f {
        return Err(Error::shape("fully_connected_backward", "weight in_features", f, wf));
    }
    grad_out.expect_shape("fully_connected_backward", &[n, o])?;
    let mut gw = Tensor::zeros([o, f]);
    T::gemm(
        o,
        n,
        f,
        MatRef::transposed(grad_out.data(), o),
        MatRef::rows(x.data(), f),
        T::ZERO,
        gw.data_mut(),
    );
    let mut gx = Tensor::zeros([n, f]);
    T::gemm(
        n,
        o,
        f,
        MatRef::rows(grad_out.data(), o),
        MatRef::rows(w.data(), f),
        T::ZERO,
        gx.data_mut(),
    );
    let mut gb = Tensor::zeros([o]);
    for row in grad_out.data().chunks(o) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(FcGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_shape("mul", b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("concat_channels", "nothing to concatenate"));
    };
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut channels = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                "batch/spatial extent",
                format!("{n}x_x{h}x{w}"),
                format!("{pn}x_x{ph}x{pw}"),
            ));
        }
        channels += pc;
    }
    let mut data = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::new([n, channels, h, w], data)
}

/// Inverse of [`concat_channels`]: split a gradient by channel counts.
pub fn split_channels<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            "channel total",
            c,
            sizes.iter().sum::<usize>(),
        ));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let item = x.item(b);
        let mut offset = 0;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&item[offset * plane..(offset + s) * plane]);
            offset += s;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::new([n, s, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let z = Tensor::<f64>::new([1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&z).unwrap().data(), &[0.5, 0.5]);

        let z = Tensor::<f64>::new([2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.5, -3.0]).unwrap();
        let shifted = z.map(|v| v + 123.25);
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty_class_axis() {
        let z = Tensor::<f64>::zeros([3, 0]);
        assert!(softmax(&z).is_err());
    }

    #[test]
    fn sigmoid_handles_extremes() {
        let x = Tensor::<f32>::new([3], vec![-1000.0, 0.0, 1000.0]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data(), &[0.0, 0.5, 1.0]);
        assert!(s.all_finite());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = Tensor::<f64>::from_fn([2, 1, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| -(i as f64));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn fully_connected_matches_hand_product() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let b = Tensor::new([2], vec![0.5, 0.0]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 1.0]);
    }
}
