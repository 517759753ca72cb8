//! 1-D convolution and its adjoint (transposed convolution).
//!
//! Both operate on `[B, C, N]` arrays; rank-2 `[C, N]` inputs are treated as a
//! batch of one and keep their rank in the output. A tap `k` of output frame
//! `t` reads input frame `t * stride + k - padding` (convolution), and the
//! transposed convolution scatters along the same index map.

use std::ops::Range;

use crate::error::{Error, Result};

use super::array::NdArray;
use super::tape::{ConvGeometry, Op, Tape, Var};

/// Output length of a strided, zero-padded convolution.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution.
pub fn deconv_output_len(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || n == 0 {
        return None;
    }
    ((n - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
}

/// Short-axis indices `t` for which `t * stride + tap - padding` lands inside `0..long_len`.
fn valid_range(short_len: usize, long_len: usize, stride: usize, tap: usize, padding: usize) -> Range<usize> {
    let start = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    let end = if long_len + padding > tap {
        ((long_len - 1 + padding - tap) / stride + 1).min(short_len)
    } else {
        0
    };
    start..end.max(start)
}

struct Dims {
    batch: usize,
    c_in: usize,
    n_in: usize,
}

fn batch_dims(x: &NdArray) -> Result<Dims> {
    match *x.shape() {
        [c, n] => Ok(Dims { batch: 1, c_in: c, n_in: n }),
        [b, c, n] => Ok(Dims { batch: b, c_in: c, n_in: n }),
        _ => Err(Error::dim(format!(
            "convolution input must be [C, N] or [B, C, N], got {:?}",
            x.shape()
        ))),
    }
}

fn out_shape(rank: usize, batch: usize, c: usize, n: usize) -> Vec<usize> {
    if rank == 2 {
        vec![c, n]
    } else {
        vec![batch, c, n]
    }
}

impl Tape {
    /// Strided 1-D convolution: `input [C_in, N]` or `[B, C_in, N]`,
    /// `kernel [C_out, C_in, K]`, `bias [C_out]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let d = batch_dims(x)?;
        if w.rank() != 3 || w.shape()[1] != d.c_in {
            return Err(Error::dim(format!(
                "kernel {:?} does not match {} input channels",
                w.shape(),
                d.c_in
            )));
        }
        let (c_out, k_len) = (w.shape()[0], w.shape()[2]);
        if self.value(bias).shape() != [c_out] {
            return Err(Error::dim(format!("bias must be [{c_out}]")));
        }
        if stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        let n_out = conv_output_len(d.n_in, k_len, stride, padding).ok_or_else(|| {
            Error::dim(format!(
                "kernel of length {k_len} exceeds padded input length {}",
                d.n_in + 2 * padding
            ))
        })?;

        let b = self.value(bias).data();
        let mut out = vec![0.0; d.batch * c_out * n_out];
        for bi in 0..d.batch {
            for o in 0..c_out {
                let y = &mut out[(bi * c_out + o) * n_out..][..n_out];
                y.fill(b[o]);
                for c in 0..d.c_in {
                    let xs = &x.data()[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                    let taps = &w.data()[(o * d.c_in + c) * k_len..][..k_len];
                    for (k, &wk) in taps.iter().enumerate() {
                        let range = valid_range(n_out, d.n_in, stride, k, padding);
                        gather(y, xs, wk, range, stride, k, padding);
                    }
                }
            }
        }
        let value = NdArray::new(out_shape(x.rank(), d.batch, c_out, n_out), out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv1d(ConvGeometry {
                input,
                kernel,
                bias,
                stride,
                padding,
            }),
        ))
    }

    /// Transposed convolution: `input [C_in, N]` or `[B, C_in, N]`, `kernel [C_in, C_out, K]`.
    /// Output length is `(N - 1) * stride - 2 * padding + K`.
    pub fn deconv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.deconv1d_padded(input, kernel, bias, stride, padding, 0)
    }

    /// Transposed convolution with `output_padding` extra frames at the end, used
    /// to restore an exact target length after a strided convolution.
    pub fn deconv1d_padded(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let d = batch_dims(x)?;
        if w.rank() != 3 || w.shape()[0] != d.c_in {
            return Err(Error::dim(format!(
                "kernel {:?} does not match {} input channels",
                w.shape(),
                d.c_in
            )));
        }
        let (c_out, k_len) = (w.shape()[1], w.shape()[2]);
        if self.value(bias).shape() != [c_out] {
            return Err(Error::dim(format!("bias must be [{c_out}]")));
        }
        if stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        let n_out = deconv_output_len(d.n_in, k_len, stride, padding, output_padding)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::dim("transposed convolution output would be empty"))?;

        let b = self.value(bias).data();
        let mut out = vec![0.0; d.batch * c_out * n_out];
        for bi in 0..d.batch {
            for o in 0..c_out {
                out[(bi * c_out + o) * n_out..][..n_out].fill(b[o]);
            }
            for c in 0..d.c_in {
                let xs = &x.data()[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                for o in 0..c_out {
                    let y = &mut out[(bi * c_out + o) * n_out..][..n_out];
                    let taps = &w.data()[(c * c_out + o) * k_len..][..k_len];
                    for (k, &wk) in taps.iter().enumerate() {
                        let range = valid_range(d.n_in, n_out, stride, k, padding);
                        scatter(y, xs, wk, range, stride, k, padding);
                    }
                }
            }
        }
        let value = NdArray::new(out_shape(x.rank(), d.batch, c_out, n_out), out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Deconv1d(ConvGeometry {
                input,
                kernel,
                bias,
                stride,
                padding,
            }),
        ))
    }

    pub(super) fn conv1d_backward(
        &self,
        geo: &ConvGeometry,
        g: &NdArray,
        grads: &mut [Option<NdArray>],
    ) -> Result<()> {
        let x = self.value(geo.input);
        let w = self.value(geo.kernel);
        let d = batch_dims(x)?;
        let (c_out, k_len) = (w.shape()[0], w.shape()[2]);
        let n_out = g.len() / (d.batch * c_out);
        let (s, p) = (geo.stride, geo.padding);

        if self.requires_grad(geo.bias) {
            let mut gb = vec![0.0; c_out];
            for (row, gy) in g.data().chunks(n_out).enumerate() {
                gb[row % c_out] += gy.iter().sum::<f64>();
            }
            self.accumulate(grads, geo.bias, NdArray::new(vec![c_out], gb)?);
        }
        if self.requires_grad(geo.kernel) {
            let mut gw = vec![0.0; w.len()];
            for bi in 0..d.batch {
                for o in 0..c_out {
                    let gy = &g.data()[(bi * c_out + o) * n_out..][..n_out];
                    for c in 0..d.c_in {
                        let xs = &x.data()[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                        let dst = &mut gw[(o * d.c_in + c) * k_len..][..k_len];
                        for (k, slot) in dst.iter_mut().enumerate() {
                            let range = valid_range(n_out, d.n_in, s, k, p);
                            *slot += correlate(gy, xs, range, s, k, p);
                        }
                    }
                }
            }
            self.accumulate(grads, geo.kernel, NdArray::new(w.shape().to_vec(), gw)?);
        }
        if self.requires_grad(geo.input) {
            let mut gx = vec![0.0; x.len()];
            for bi in 0..d.batch {
                for c in 0..d.c_in {
                    let dst = &mut gx[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                    for o in 0..c_out {
                        let gy = &g.data()[(bi * c_out + o) * n_out..][..n_out];
                        let taps = &w.data()[(o * d.c_in + c) * k_len..][..k_len];
                        for (k, &wk) in taps.iter().enumerate() {
                            let range = valid_range(n_out, d.n_in, s, k, p);
                            scatter(dst, gy, wk, range, s, k, p);
                        }
                    }
                }
            }
            self.accumulate(grads, geo.input, NdArray::new(x.shape().to_vec(), gx)?);
        }
        Ok(())
    }

    pub(super) fn deconv1d_backward(
        &self,
        geo: &ConvGeometry,
        g: &NdArray,
        grads: &mut [Option<NdArray>],
    ) -> Result<()> {
        let x = self.value(geo.input);
        let w = self.value(geo.kernel);
        let d = batch_dims(x)?;
        let (c_out, k_len) = (w.shape()[1], w.shape()[2]);
        let n_out = g.len() / (d.batch * c_out);
        let (s, p) = (geo.stride, geo.padding);

        if self.requires_grad(geo.bias) {
            let mut gb = vec![0.0; c_out];
            for (row, gy) in g.data().chunks(n_out).enumerate() {
                gb[row % c_out] += gy.iter().sum::<f64>();
            }
            self.accumulate(grads, geo.bias, NdArray::new(vec![c_out], gb)?);
        }
        if self.requires_grad(geo.kernel) {
            let mut gw = vec![0.0; w.len()];
            for bi in 0..d.batch {
                for c in 0..d.c_in {
                    let xs = &x.data()[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                    for o in 0..c_out {
                        let gy = &g.data()[(bi * c_out + o) * n_out..][..n_out];
                        let dst = &mut gw[(c * c_out + o) * k_len..][..k_len];
                        for (k, slot) in dst.iter_mut().enumerate() {
                            let range = valid_range(d.n_in, n_out, s, k, p);
                            *slot += correlate(xs, gy, range, s, k, p);
                        }
                    }
                }
            }
            self.accumulate(grads, geo.kernel, NdArray::new(w.shape().to_vec(), gw)?);
        }
        if self.requires_grad(geo.input) {
            let mut gx = vec![0.0; x.len()];
            for bi in 0..d.batch {
                for c in 0..d.c_in {
                    let dst = &mut gx[(bi * d.c_in + c) * d.n_in..][..d.n_in];
                    for o in 0..c_out {
                        let gy = &g.data()[(bi * c_out + o) * n_out..][..n_out];
                        let taps = &w.data()[(c * c_out + o) * k_len..][..k_len];
                        for (k, &wk) in taps.iter().enumerate() {
                            let range = valid_range(d.n_in, n_out, s, k, p);
                            gather(dst, gy, wk, range, s, k, p);
                        }
                    }
                }
            }
            self.accumulate(grads, geo.input, NdArray::new(x.shape().to_vec(), gx)?);
        }
        Ok(())
    }
}

/// `short[t] += w * long[t * stride + tap - padding]` for `t` in `range`.
#[inline]
fn gather(short: &mut [f64], long: &[f64], w: f64, range: Range<usize>, stride: usize, tap: usize, padding: usize) {
    if range.is_empty() {
        return;
    }
    let offset = range.start * stride + tap - padding;
    if stride == 1 {
        let len = range.len();
        for (dst, &src) in short[range].iter_mut().zip(&long[offset..offset + len]) {
            *dst += w * src;
        }
    } else {
        for (i, dst) in short[range].iter_mut().enumerate() {
            *dst += w * long[offset + i * stride];
        }
    }
}

/// `long[t * stride + tap - padding] += w * short[t]` for `t` in `range`.
#[inline]
fn scatter(long: &mut [f64], short: &[f64], w: f64, range: Range<usize>, stride: usize, tap: usize, padding: usize) {
    if range.is_empty() {
        return;
    }
    let offset = range.start * stride + tap - padding;
    if stride == 1 {
        let len = range.len();
        for (dst, &src) in long[offset..offset + len].iter_mut().zip(&short[range]) {
            *dst += w * src;
        }
    } else {
        for (i, &src) in short[range].iter().enumerate() {
            long[offset + i * stride] += w * src;
        }
    }
}

/// `sum_t short[t] * long[t * stride + tap - padding]`.
#[inline]
fn correlate(short: &[f64], long: &[f64], range: Range<usize>, stride: usize, tap: usize, padding: usize) -> f64 {
    if range.is_empty() {
        return 0.0;
    }
    let offset = range.start * stride + tap - padding;
    if stride == 1 {
        let len = range.len();
        short[range].iter().zip(&long[offset..offset + len]).map(|(a, b)| a * b).sum()
    } else {
        short[range]
            .iter()
            .enumerate()
            .map(|(i, &a)| a * long[offset + i * stride])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_respects_padding() {
        // N=4, K=3, p=1, s=1 -> 4 outputs; tap 0 reads t-1, valid for t in 1..4
        assert_eq!(valid_range(4, 4, 1, 0, 1), 1..4);
        assert_eq!(valid_range(4, 4, 1, 2, 1), 0..3);
        assert_eq!(valid_range(2, 4, 2, 0, 0), 0..2);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(17, 5, 2, 2), Some(9));
        assert_eq!(conv_output_len(3, 5, 1, 0), None);
        assert_eq!(deconv_output_len(9, 5, 2, 2, 0), Some(17));
        assert_eq!(deconv_output_len(8, 5, 2, 2, 1), Some(16));
    }
}
