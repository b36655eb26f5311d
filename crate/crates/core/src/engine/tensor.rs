use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types the engine runs on. Training uses `f32`; `f64` exists for
/// gradient checking.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// All strides and extents must address memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Real>(a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: extents checked above; c is row-major and exactly sized.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.f64()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Views a rank-2 `[C, L]` tensor as `[C, 1, L]`; rank 3 passes through.
    pub(crate) fn as_cbl(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, l] => Ok((c, 1, l)),
            [c, b, l] => Ok((c, b, l)),
            _ => Err(Error::Shape(format!(
                "expected [C, L] or [C, B, L], got {:?}",
                self.shape
            ))),
        }
    }
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub batch: usize,
    pub len: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub dilation: usize,
    pub len_out: usize,
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
) -> Result<ConvDims> {
    let (c_in, batch, len) = input.as_cbl()?;
    let [c_out, kc, ksize] = kernel.shape()[..] else {
        return Err(Error::Shape(format!(
            "kernel must be [C_out, C_in, k], got {:?}",
            kernel.shape()
        )));
    };
    if kc != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if dilation == 0 {
        return Err(Error::Shape("dilation must be positive".into()));
    }
    let span = (ksize - 1) * dilation;
    if len < span + 1 {
        return Err(Error::Shape(format!(
            "input length {len} shorter than receptive field {}",
            span + 1
        )));
    }
    Ok(ConvDims {
        c_in,
        batch,
        len,
        c_out,
        ksize,
        dilation,
        len_out: len - span,
    })
}

/// `cols[(c * k + i), b * len_out + t] = x[c, b, t + i * d]`
fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let n = d.batch * d.len_out;
    let mut cols = vec![T::zero(); d.c_in * d.ksize * n];
    for c in 0..d.c_in {
        for i in 0..d.ksize {
            let row = &mut cols[(c * d.ksize + i) * n..(c * d.ksize + i + 1) * n];
            for b in 0..d.batch {
                let src = &x[(c * d.batch + b) * d.len + i * d.dilation..][..d.len_out];
                row[b * d.len_out..(b + 1) * d.len_out].copy_from_slice(src);
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let n = d.batch * d.len_out;
    let mut x = vec![T::zero(); d.c_in * d.batch * d.len];
    for c in 0..d.c_in {
        for i in 0..d.ksize {
            let row = &cols[(c * d.ksize + i) * n..(c * d.ksize + i + 1) * n];
            for b in 0..d.batch {
                let dst = &mut x[(c * d.batch + b) * d.len + i * d.dilation..][..d.len_out];
                for (o, v) in dst.iter_mut().zip(&row[b * d.len_out..(b + 1) * d.len_out]) {
                    *o = *o + *v;
                }
            }
        }
    }
    x
}

pub(crate) fn conv_forward<T: Real>(x: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let n = d.batch * d.len_out;
    let mut out = vec![T::zero(); d.c_out * n];
    let kmat = MatRef::row_major(kernel, d.c_out, d.c_in * d.ksize);
    if d.ksize == 1 {
        gemm(kmat, MatRef::row_major(x, d.c_in, n), T::zero(), &mut out);
    } else {
        let cols = im2col(x, d);
        gemm(kmat, MatRef::row_major(&cols, d.c_in * d.ksize, n), T::zero(), &mut out);
    }
    out
}

/// Returns `(d input, d kernel)`; the input gradient is skipped when not needed.
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = d.batch * d.len_out;
    let rows = d.c_in * d.ksize;
    let dy_mat = MatRef::row_major(dy, d.c_out, n);
    let cols_owned;
    let cols: &[T] = if d.ksize == 1 {
        x
    } else {
        cols_owned = im2col(x, d);
        &cols_owned
    };
    let dk = need_dk.then(|| {
        let mut dk = vec![T::zero(); d.c_out * rows];
        gemm(dy_mat, MatRef::row_major(cols, rows, n).t(), T::zero(), &mut dk);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * n];
        gemm(
            MatRef::row_major(kernel, d.c_out, rows).t(),
            dy_mat,
            T::zero(),
            &mut dcols,
        );
        if d.ksize == 1 {
            dcols
        } else {
            col2im(&dcols, d)
        }
    });
    (dx, dk)
}

/// Valid (unpadded) dilated 1-D convolution.
///
/// `input` is `[C_in, L]` or batched channel-major `[C_in, B, L]`; `kernel` is
/// `[C_out, C_in, k]`. The output has `L - (k - 1) * dilation` columns and
/// `out[o, t] = sum_{c, i} kernel[o, c, i] * input[c, t + i * dilation]`.
pub fn conv1d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, dilation)?;
    let out = conv_forward(input.data(), kernel.data(), &d);
    let shape = if input.shape().len() == 2 {
        vec![d.c_out, d.len_out]
    } else {
        vec![d.c_out, d.batch, d.len_out]
    };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, d: usize) -> Vec<f64> {
        let (c_in, b, l) = x.as_cbl().unwrap();
        let (c_out, ks) = (k.shape()[0], k.shape()[2]);
        let lo = l - (ks - 1) * d;
        let mut out = vec![0.0; c_out * b * lo];
        for o in 0..c_out {
            for bb in 0..b {
                for t in 0..lo {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for i in 0..ks {
                            acc += k.data()[(o * c_in + c) * ks + i]
                                * x.data()[(c * b + bb) * l + t + i * d];
                        }
                    }
                    out[(o * b + bb) * lo + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 9], &mut rng);
        let mut k = Tensor::<f64>::zeros(&[4, 4, 1]);
        for c in 0..4 {
            k.data_mut()[c * 4 + c] = 1.0;
        }
        assert_eq!(conv1d(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn output_length() {
        let x = Tensor::<f32>::zeros(&[2, 51]);
        let k = Tensor::<f32>::zeros(&[3, 2, 3]);
        assert_eq!(conv1d(&x, &k, 4).unwrap().shape(), &[3, 43]);
        let short = Tensor::<f32>::zeros(&[2, 8]);
        assert!(matches!(conv1d(&short, &k, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c_in, c_out, b, l, ks, d) in
            &[(3, 5, 1, 12, 3, 2), (4, 2, 3, 20, 3, 4), (6, 3, 2, 7, 1, 1), (2, 2, 2, 9, 3, 1)]
        {
            let x = random(&[c_in, b, l], &mut rng);
            let k = random(&[c_out, c_in, ks], &mut rng);
            let got = conv1d(&x, &k, d).unwrap();
            for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, d)) {
                assert!((g - e).abs() < 1e-6);
            }
            // f32 path agrees too
            let got32 = conv1d(&x.cast::<f32>(), &k.cast::<f32>(), d).unwrap();
            for (g, e) in got32.data().iter().zip(got.data()) {
                assert!((*g as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_in_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 2, 15], &mut rng);
        let y = random(&[3, 2, 15], &mut rng);
        let k = random(&[4, 3, 3], &mut rng);
        let j = random(&[4, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = |p: &Tensor<f64>, q: &Tensor<f64>| {
            Tensor::new(
                p.shape().to_vec(),
                p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect(),
            )
            .unwrap()
        };
        let lhs = conv1d(&mix(&x, &y), &k, 2).unwrap();
        let (cx, cy) = (conv1d(&x, &k, 2).unwrap(), conv1d(&y, &k, 2).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
        let lhs = conv1d(&x, &mix(&k, &j), 2).unwrap();
        let (ck, cj) = (conv1d(&x, &k, 2).unwrap(), conv1d(&x, &j, 2).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(ck.data()).zip(cj.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }
}
