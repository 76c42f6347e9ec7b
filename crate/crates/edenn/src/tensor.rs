//! Dense row-major tensors and the raw numeric kernels the layer math needs.
//!
//! Axis order for 4-D volumes is (W, H, C, T): width, height, channel, time
//! bin, with T the fastest-varying axis. 3-D slices drop the time axis and
//! keep (W, H, C) with C fastest. Convolution kernels are (Kw, Kh, Cin, Cout)
//! with Cout fastest.
//!
//! Convolutions use cross-correlation semantics (no kernel flip), the common
//! deep-learning convention. `Same` padding zero-fills; the zero-pad border
//! bias of plain layers is deliberate — masked layers compensate for borders
//! through their scaling factor instead.

use crate::error::{Error, Result};

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output spatial size is `ceil(input / stride)`.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

impl Padding {
    /// Padding applied on each side for a kernel of size `k` (odd).
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output size along one spatial axis.
    pub fn out_dim(self, input: usize, k: usize, stride: usize) -> Result<usize> {
        let pad = self.amount(k);
        let padded = input + 2 * pad;
        if padded < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {k} exceeds padded input size {padded}"),
            ));
        }
        Ok((padded - k) / stride + 1)
    }
}

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized axis");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 1.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized axis");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn idx3(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (x * self.shape[1] + y) * self.shape[2] + c
    }

    #[inline]
    pub fn idx4(&self, x: usize, y: usize, c: usize, t: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((x * self.shape[1] + y) * self.shape[2] + c) * self.shape[3] + t
    }

    #[inline]
    pub fn at3(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx3(x, y, c)]
    }

    #[inline]
    pub fn at4(&self, x: usize, y: usize, c: usize, t: usize) -> f64 {
        self.data[self.idx4(x, y, c, t)]
    }

    #[inline]
    pub fn set3(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx3(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn set4(&mut self, x: usize, y: usize, c: usize, t: usize, v: f64) {
        let i = self.idx4(x, y, c, t);
        self.data[i] = v;
    }

    /// Extract the 3-D (W, H, C) slice at time bin `t` from a 4-D volume.
    pub fn time_slice(&self, t: usize) -> Tensor {
        assert_eq!(self.shape.len(), 4, "time_slice needs a 4-D volume");
        let (w, h, c, nt) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        assert!(t < nt);
        let mut out = Tensor::zeros(&[w, h, c]);
        for x in 0..w {
            for y in 0..h {
                for ch in 0..c {
                    out.set3(x, y, ch, self.at4(x, y, ch, t));
                }
            }
        }
        out
    }

    /// Write a 3-D (W, H, C) slice into time bin `t` of a 4-D volume.
    pub fn set_time_slice(&mut self, t: usize, slice: &Tensor) {
        assert_eq!(self.shape.len(), 4);
        assert_eq!(slice.shape(), &self.shape[..3]);
        let (w, h, c) = (self.shape[0], self.shape[1], self.shape[2]);
        for x in 0..w {
            for y in 0..h {
                for ch in 0..c {
                    self.set4(x, y, ch, t, slice.at3(x, y, ch));
                }
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 2-D cross-correlation of `input` (W, H, Cin) with `kernel`
/// (Kw, Kh, Cin, Cout). Out-of-bounds taps read zero under `Same` padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (w, h, cin) = dims3(input, "conv2d")?;
    let (kw, kh, kcin, cout) = dims4(kernel, "conv2d")?;
    if kw % 2 == 0 || kh % 2 == 0 {
        return Err(Error::arg(
            "conv2d",
            format!("kernel size {kw}x{kh} must be odd"),
        ));
    }
    if stride < 1 {
        return Err(Error::arg("conv2d", "stride must be >= 1"));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {kcin}"),
        ));
    }
    let wo = padding.out_dim(w, kw, stride)?;
    let ho = padding.out_dim(h, kh, stride)?;
    let (pw, ph) = (padding.amount(kw) as isize, padding.amount(kh) as isize);

    let mut out = Tensor::zeros(&[wo, ho, cout]);
    let kd = kernel.data();
    let id = input.data();
    for xo in 0..wo {
        for yo in 0..ho {
            let base = (xo * ho + yo) * cout;
            let acc = &mut out.data[base..base + cout];
            for kx in 0..kw {
                let xi = (xo * stride + kx) as isize - pw;
                if xi < 0 || xi >= w as isize {
                    continue;
                }
                for ky in 0..kh {
                    let yi = (yo * stride + ky) as isize - ph;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let ibase = ((xi as usize) * h + yi as usize) * cin;
                    let kbase = (kx * kh + ky) * cin * cout;
                    for ci in 0..cin {
                        let v = id[ibase + ci];
                        if v == 0.0 {
                            continue; // event volumes are sparse
                        }
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, k) in acc.iter_mut().zip(krow) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input and kernel, given the
/// gradient of the loss with respect to the output.
pub fn conv2d_grads(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> (Tensor, Tensor) {
    let (w, h, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kw, kh, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let (wo, ho) = (grad_out.shape()[0], grad_out.shape()[1]);
    let (pw, ph) = (padding.amount(kw) as isize, padding.amount(kh) as isize);

    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let gd = grad_out.data();
    let id = input.data();
    let kd = kernel.data();
    for xo in 0..wo {
        for yo in 0..ho {
            let gbase = (xo * ho + yo) * cout;
            let grow = &gd[gbase..gbase + cout];
            for kx in 0..kw {
                let xi = (xo * stride + kx) as isize - pw;
                if xi < 0 || xi >= w as isize {
                    continue;
                }
                for ky in 0..kh {
                    let yi = (yo * stride + ky) as isize - ph;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let ibase = ((xi as usize) * h + yi as usize) * cin;
                    let kbase = (kx * kh + ky) * cin * cout;
                    for ci in 0..cin {
                        let v = id[ibase + ci];
                        let koff = kbase + ci * cout;
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let g = grow[co];
                            acc += g * kd[koff + co];
                            gk.data[koff + co] += g * v;
                        }
                        gin.data[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Sum of `mask` (W, H) values over the kernel footprint feeding each output
/// cell. Out-of-bounds taps contribute nothing.
pub fn footprint_sum(
    mask: &Tensor,
    kw: usize,
    kh: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (w, h) = dims2(mask, "footprint_sum")?;
    let wo = padding.out_dim(w, kw, stride)?;
    let ho = padding.out_dim(h, kh, stride)?;
    let (pw, ph) = (padding.amount(kw) as isize, padding.amount(kh) as isize);
    let mut out = Tensor::zeros(&[wo, ho]);
    for xo in 0..wo {
        for yo in 0..ho {
            let mut s = 0.0;
            for kx in 0..kw {
                let xi = (xo * stride + kx) as isize - pw;
                if xi < 0 || xi >= w as isize {
                    continue;
                }
                for ky in 0..kh {
                    let yi = (yo * stride + ky) as isize - ph;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    s += mask.data[(xi as usize) * h + yi as usize];
                }
            }
            out.data[xo * ho + yo] = s;
        }
    }
    Ok(out)
}

/// Number of in-bounds kernel taps feeding each output cell. Equals the full
/// footprint size everywhere except near borders under `Same` padding.
pub fn footprint_count(
    w: usize,
    h: usize,
    kw: usize,
    kh: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    footprint_sum(&Tensor::ones(&[w, h]), kw, kh, stride, padding)
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(op, format!("expected 2-D tensor, got {s:?}"))),
    }
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, format!("expected 3-D tensor, got {s:?}"))),
    }
}

pub(crate) fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::shape(op, format!("expected 4-D tensor, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Independent quadruple-loop cross-correlation used as the oracle.
    fn conv2d_oracle(
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Tensor {
        let (w, h, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kw, kh, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
        let wo = padding.out_dim(w, kw, stride).unwrap();
        let ho = padding.out_dim(h, kh, stride).unwrap();
        let pw = padding.amount(kw) as isize;
        let ph = padding.amount(kh) as isize;
        let mut out = Tensor::zeros(&[wo, ho, cout]);
        for xo in 0..wo {
            for yo in 0..ho {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for kx in 0..kw {
                        for ky in 0..kh {
                            for ci in 0..cin {
                                let xi = (xo * stride + kx) as isize - pw;
                                let yi = (yo * stride + ky) as isize - ph;
                                if xi >= 0 && xi < w as isize && yi >= 0 && yi < h as isize {
                                    let iv = input.at3(xi as usize, yi as usize, ci);
                                    let kv = kernel.data()
                                        [((kx * kh + ky) * cin + ci) * cout + co];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out.set3(xo, yo, co, acc);
                }
            }
        }
        out
    }

    #[test]
    fn scalar_product_conv() {
        let input = Tensor::from_vec(&[1, 1, 1], vec![5.0]);
        let kernel = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]);
        let out = conv2d(&input, &kernel, 1, Padding::Valid).unwrap();
        assert_eq!(out.data(), &[15.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, &[5, 4, 3]);
        let kernel = Tensor::zeros(&[3, 3, 3, 2]);
        let out = conv2d(&input, &kernel, 1, Padding::Same).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle_fixed_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, &[6, 6, 2]);
        let kernel = random_tensor(&mut rng, &[3, 3, 2, 1]);
        let got = conv2d(&input, &kernel, 1, Padding::Valid).unwrap();
        let want = conv2d_oracle(&input, &kernel, 1, Padding::Valid);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv_matches_loop_oracle_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rng.random_range(1..=8usize);
            let h = rng.random_range(1..=8usize);
            let cin = rng.random_range(1..=4usize);
            let cout = rng.random_range(1..=4usize);
            let kw = *[1usize, 3, 5].get(rng.random_range(0..3usize)).unwrap();
            let kh = *[1usize, 3, 5].get(rng.random_range(0..3usize)).unwrap();
            let stride = rng.random_range(1..=2usize);
            let padding = if rng.random_range(0..2u32) == 0 {
                Padding::Same
            } else {
                Padding::Valid
            };
            if padding == Padding::Valid && (w < kw || h < kh) {
                continue;
            }
            let input = random_tensor(&mut rng, &[w, h, cin]);
            let kernel = random_tensor(&mut rng, &[kw, kh, cin, cout]);
            let got = conv2d(&input, &kernel, stride, padding).unwrap();
            let want = conv2d_oracle(&input, &kernel, stride, padding);
            assert_eq!(got.shape(), want.shape());
            assert!(
                got.max_abs_diff(&want) < 1e-12,
                "mismatch for {w}x{h}x{cin} k{kw}x{kh}->{cout} s{stride} {padding:?}"
            );
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = Tensor::zeros(&[4, 4, 2]);
        let kernel = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(conv2d(&input, &kernel, 1, Padding::Same).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let input = Tensor::zeros(&[4, 4, 1]);
        let kernel = Tensor::zeros(&[2, 2, 1, 1]);
        assert!(conv2d(&input, &kernel, 1, Padding::Same).is_err());
    }

    #[test]
    fn same_padding_output_size_is_ceil_div() {
        for (w, s) in [(6usize, 2usize), (5, 2), (7, 3), (1, 1), (9, 2)] {
            let out = Padding::Same.out_dim(w, 3, s).unwrap();
            assert_eq!(out, w.div_ceil(s));
        }
    }

    #[test]
    fn footprint_count_interior_is_full() {
        let cnt = footprint_count(6, 6, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!(cnt.data()[(2 * 6) + 2], 9.0); // interior
        assert_eq!(cnt.data()[0], 4.0); // corner
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, &[5, 4, 2]);
        let kernel = random_tensor(&mut rng, &[3, 3, 2, 2]);
        let stride = 2;
        let padding = Padding::Same;

        // loss = sum of outputs; grad_out = ones
        let out = conv2d(&input, &kernel, stride, padding).unwrap();
        let grad_out = Tensor::ones(out.shape());
        let (gin, gk) = conv2d_grads(&input, &kernel, &grad_out, stride, padding);

        let h = 1e-6;
        let loss = |inp: &Tensor, ker: &Tensor| -> f64 {
            conv2d(inp, ker, stride, padding).unwrap().data().iter().sum()
        };
        for i in 0..input.numel() {
            let mut p = input.clone();
            p.data_mut()[i] += h;
            let mut m = input.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p, &kernel) - loss(&m, &kernel)) / (2.0 * h);
            assert!((fd - gin.data()[i]).abs() < 1e-6, "input grad {i}");
        }
        for i in 0..kernel.numel() {
            let mut p = kernel.clone();
            p.data_mut()[i] += h;
            let mut m = kernel.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * h);
            assert!((fd - gk.data()[i]).abs() < 1e-6, "kernel grad {i}");
        }
    }
}
