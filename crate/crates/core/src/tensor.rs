//! Dense row-major tensors and the valid-correlation / full-convolution pair.
//!
//! Kernels are applied as cross-correlation (no flip). `convolve_full` is the
//! exact adjoint of `correlate_valid` for the same kernel, which is the only
//! relationship the rest of the crate relies on.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `[channels, height, width]`; rank-2 tensors are one channel.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((1, *h, *w)),
            [c, h, w] => Ok((*c, *h, *w)),
            s => dim_err(format!("expected a rank-2 or rank-3 tensor, got shape {s:?}")),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn l1(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: T, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(T::one(), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-T::one(), other)?;
        Ok(out)
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    /// One channel of a `[C, H, W]` tensor as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.shape[self.rank() - 2] * self.shape[self.rank() - 1];
        &self.data[c * plane..(c + 1) * plane]
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy_slice<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Population statistics of a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats<T> {
    pub mean: T,
    pub variance: T,
    pub l1: T,
    pub l2sq: T,
}

pub fn reduce_stats<T: Scalar>(t: &Tensor<T>) -> Result<Stats<T>> {
    if t.is_empty() {
        return dim_err("statistics of an empty tensor");
    }
    let n = T::lit(t.len() as f64);
    let mean = t.data().iter().copied().sum::<T>() / n;
    let variance = t.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Ok(Stats {
        mean,
        variance,
        l1: t.l1(),
        l2sq: t.norm_sq(),
    })
}

/// `out[i,j] = sum_c sum_{a,b} input[c,i+a,j+b] * kernel[c,a,b]`.
///
/// Accepts `[H, W]` / `[h, w]` or `[C, H, W]` / `[C, h, w]`; returns `[H-h+1, W-w+1]`.
pub fn correlate_valid<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (kc, kh, kw) = kernel.dims3()?;
    if kc != c {
        return dim_err(format!("input has {c} channels, kernel has {kc}"));
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return dim_err(format!("kernel {kh}x{kw} does not fit input {h}x{w}"));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); oh * ow];
    corr_plane_acc(&mut out, input.data(), kernel.data(), c, h, w, kh, kw);
    Tensor::from_vec(&[oh, ow], out)
}

/// Adjoint of [`correlate_valid`]: scatters an `[Ho, Wo]` map through the kernel into
/// `[C, Ho+h-1, Wo+w-1]` (or rank 2 when the kernel is rank 2).
pub fn convolve_full<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (ic, oh, ow) = input.dims3()?;
    if ic != 1 {
        return dim_err("convolve_full takes a single map");
    }
    let (kc, kh, kw) = kernel.dims3()?;
    if kh == 0 || kw == 0 || oh == 0 || ow == 0 {
        return dim_err("empty kernel or input");
    }
    let (h, w) = (oh + kh - 1, ow + kw - 1);
    let mut out = vec![T::zero(); kc * h * w];
    full_plane_acc(&mut out, input.data(), kernel.data(), kc, h, w, kh, kw);
    let shape: Vec<usize> = if kernel.rank() == 2 {
        vec![h, w]
    } else {
        vec![kc, h, w]
    };
    Tensor::from_vec(&shape, out)
}

// out[i,j] += sum_c sum_{a,b} x[c,i+a,j+b] k[c,a,b]
#[allow(clippy::too_many_arguments)]
#[inline]
fn corr_plane_acc<T: Scalar>(
    out: &mut [T],
    x: &[T],
    k: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for ci in 0..c {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let kv = k[(ci * kh + a) * kw + b];
                if kv.is_zero() {
                    continue;
                }
                for i in 0..oh {
                    let src = &xp[(i + a) * w + b..(i + a) * w + b + ow];
                    axpy_slice(&mut out[i * ow..(i + 1) * ow], kv, src);
                }
            }
        }
    }
}

// out[c,i+a,j+b] += z[i,j] k[c,a,b]
#[allow(clippy::too_many_arguments)]
#[inline]
fn full_plane_acc<T: Scalar>(
    out: &mut [T],
    z: &[T],
    k: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for ci in 0..c {
        let op = &mut out[ci * h * w..(ci + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let kv = k[(ci * kh + a) * kw + b];
                if kv.is_zero() {
                    continue;
                }
                for i in 0..oh {
                    let dst = &mut op[(i + a) * w + b..(i + a) * w + b + ow];
                    axpy_slice(dst, kv, &z[i * ow..(i + 1) * ow]);
                }
            }
        }
    }
}

fn bank_dims<T: Scalar>(bank: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match bank.shape() {
        [o, c, h, w] => Ok((*o, *c, *h, *w)),
        s => dim_err(format!("filter bank must be [out, in, h, w], got {s:?}")),
    }
}

/// Multi-map valid correlation: `[Cin, H, W]` with `[Cout, Cin, h, w]` gives `[Cout, Ho, Wo]`.
pub fn correlate_bank<T: Scalar>(x: &Tensor<T>, bank: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (o, kc, kh, kw) = bank_dims(bank)?;
    if kc != c {
        return dim_err(format!("input has {c} maps, bank expects {kc}"));
    }
    if kh > h || kw > w {
        return dim_err(format!("kernel {kh}x{kw} does not fit input {h}x{w}"));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); o * oh * ow];
    let ksz = c * kh * kw;
    for (oi, plane) in out.chunks_mut(oh * ow).enumerate() {
        corr_plane_acc(plane, x.data(), &bank.data()[oi * ksz..(oi + 1) * ksz], c, h, w, kh, kw);
    }
    Ok(Tensor { shape: vec![o, oh, ow], data: out })
}

/// Adjoint of [`correlate_bank`]: `[Cout, Ho, Wo]` to `[Cin, Ho+h-1, Wo+w-1]`.
pub fn convolve_bank_full<T: Scalar>(z: &Tensor<T>, bank: &Tensor<T>) -> Result<Tensor<T>> {
    let (zc, oh, ow) = z.dims3()?;
    let (o, c, kh, kw) = bank_dims(bank)?;
    if zc != o {
        return dim_err(format!("code has {zc} maps, bank produces {o}"));
    }
    let (h, w) = (oh + kh - 1, ow + kw - 1);
    let mut out = vec![T::zero(); c * h * w];
    let ksz = c * kh * kw;
    for oi in 0..o {
        full_plane_acc(
            &mut out,
            &z.data()[oi * oh * ow..(oi + 1) * oh * ow],
            &bank.data()[oi * ksz..(oi + 1) * ksz],
            c,
            h,
            w,
            kh,
            kw,
        );
    }
    Ok(Tensor { shape: vec![c, h, w], data: out })
}

/// Gradient of `<correlate_bank(x, F), g>` with respect to `F`:
/// `dF[o,c,a,b] = sum_{i,j} g[o,i,j] x[c,i+a,j+b]`.
pub fn filter_gradient<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    kh: usize,
    kw: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (o, oh, ow) = g.dims3()?;
    if kh > h || kw > w || oh != h - kh + 1 || ow != w - kw + 1 {
        return dim_err(format!(
            "gradient map {oh}x{ow} inconsistent with input {h}x{w} and kernel {kh}x{kw}"
        ));
    }
    let mut out = vec![T::zero(); o * c * kh * kw];
    for oi in 0..o {
        let gp = &g.data()[oi * oh * ow..(oi + 1) * oh * ow];
        for ci in 0..c {
            let xp = &x.data()[ci * h * w..(ci + 1) * h * w];
            for a in 0..kh {
                for b in 0..kw {
                    let mut acc = T::zero();
                    for i in 0..oh {
                        acc += dot(&gp[i * ow..(i + 1) * ow], &xp[(i + a) * w + b..(i + a) * w + b + ow]);
                    }
                    out[((oi * c + ci) * kh + a) * kw + b] = acc;
                }
            }
        }
    }
    Ok(Tensor { shape: vec![o, c, kh, kw], data: out })
}
