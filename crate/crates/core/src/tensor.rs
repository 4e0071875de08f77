//! Dense real and complex arrays plus the orthonormal 2D FFT used everywhere.
//!
//! Layout is row-major (`[row][column]`) for images and slice-major
//! (`[slice][row][column]`) for volumes, which is also the byte order of every
//! array written by [`crate::io`].
//!
//! The FFT pair is unitary: both directions scale by `1/sqrt(width*height)`, so
//! `ifft2` is exactly the adjoint of `fft2` and no scale factors appear in
//! adjoint tests.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// 2D complex image (usually a spectrum).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Array2<Complex64>);

impl ComplexImage {
    /// Builds an image from row-major data; rejects length mismatches and non-finite entries.
    pub fn new(width: usize, height: usize, data: Vec<Complex64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::dims("ComplexImage::new", width * height, data.len()));
        }
        let arr = Array2::from_shape_vec((height, width), data)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Self::from_array(arr)
    }

    pub fn from_array(arr: Array2<Complex64>) -> Result<Self> {
        if arr.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("ComplexImage"));
        }
        Ok(Self(arr.as_standard_layout().into_owned()))
    }

    pub(crate) fn from_array_unchecked(arr: Array2<Complex64>) -> Self {
        Self(arr)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn from_real(img: ArrayView2<f64>) -> Self {
        Self(img.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, Complex64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn into_array(self) -> Array2<Complex64> {
        self.0
    }

    pub fn real_part(&self) -> Array2<f64> {
        self.0.mapv(|c| c.re)
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Complex inner product `<self, other> = sum conj(self) * other`.
    pub fn inner(&self, other: &ComplexImage) -> Complex64 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(Complex64::new(0.0, 0.0), |acc, a, b| acc + a.conj() * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, c| m.max(c.norm()))
    }
}

/// Real 3D field stored slice-major as `[slice][row][column]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume(Array3<f64>);

impl RealVolume {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealVolume"));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn from_vec(slices: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if slices * height * width != data.len() {
            return Err(Error::dims("RealVolume::from_vec", slices * height * width, data.len()));
        }
        let arr = Array3::from_shape_vec((slices, height, width), data)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Self::new(arr)
    }

    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(slices: usize, height: usize, width: usize) -> Self {
        Self(Array3::zeros((slices, height, width)))
    }

    pub fn from_slices(slices: &[Array2<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidParameter("volume needs at least one slice".into()))?;
        let (h, w) = first.dim();
        let mut out = Array3::zeros((slices.len(), h, w));
        for (j, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::dims("RealVolume::from_slices", format!("{h}x{w}"), format!("{:?}", s.dim())));
            }
            out.index_axis_mut(Axis(0), j).assign(s);
        }
        Self::new(out)
    }

    /// `(slices, height, width)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn slices(&self) -> usize {
        self.0.len_of(Axis(0))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slice(&self, j: usize) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), j)
    }

    pub fn slice_mut(&mut self, j: usize) -> ArrayViewMut2<'_, f64> {
        self.0.index_axis_mut(Axis(0), j)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &RealVolume) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &RealVolume) {
        self.0.scaled_add(alpha, &other.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.mapv_inplace(|v| v * alpha);
    }

    pub fn add_scalar(&mut self, c: f64) {
        self.0.mapv_inplace(|v| v + c);
    }

    pub fn max_abs_diff(&self, other: &RealVolume) -> f64 {
        Zip::from(&self.0).and(&other.0).fold(0.0_f64, |m, a, b| m.max((a - b).abs()))
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place unitary 2D transform of a standard-layout array.
pub(crate) fn fft2_in_place(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    if h == 0 || w == 0 {
        return;
    }
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];

    let buf = data.as_slice_mut().expect("standard layout");
    row_fft.process_with_scratch(buf, &mut scratch);

    let mut transposed = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            transposed[c * h + r] = buf[r * w + c];
        }
    }
    col_fft.process_with_scratch(&mut transposed, &mut scratch);

    let norm = 1.0 / ((h * w) as f64).sqrt();
    for c in 0..w {
        for r in 0..h {
            buf[r * w + c] = transposed[c * h + r] * norm;
        }
    }
}

pub(crate) fn fft2_real_unchecked(img: ArrayView2<f64>) -> ComplexImage {
    let mut data = img.mapv(|v| Complex64::new(v, 0.0));
    fft2_in_place(&mut data, false);
    ComplexImage(data)
}

pub(crate) fn ifft2_unchecked(spec: &ComplexImage) -> ComplexImage {
    let mut data = spec.0.clone();
    fft2_in_place(&mut data, true);
    ComplexImage(data)
}

pub(crate) fn ifft2_real_part_unchecked(spec: Array2<Complex64>) -> Array2<f64> {
    let mut data = spec;
    fft2_in_place(&mut data, true);
    data.mapv(|c| c.re)
}

/// Unitary forward 2D DFT.
pub fn fft2(img: &ComplexImage) -> Result<ComplexImage> {
    check_spectrum(img)?;
    let mut data = img.0.clone();
    fft2_in_place(&mut data, false);
    Ok(ComplexImage(data))
}

/// Unitary forward 2D DFT of a real image.
pub fn fft2_real(img: ArrayView2<f64>) -> Result<ComplexImage> {
    if img.is_empty() {
        return Err(Error::InvalidParameter("fft2 needs at least a 1x1 image".into()));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft2 input"));
    }
    Ok(fft2_real_unchecked(img))
}

/// Unitary inverse 2D DFT; the exact adjoint of [`fft2`].
pub fn ifft2(spec: &ComplexImage) -> Result<ComplexImage> {
    check_spectrum(spec)?;
    Ok(ifft2_unchecked(spec))
}

fn check_spectrum(img: &ComplexImage) -> Result<()> {
    if img.0.is_empty() {
        return Err(Error::InvalidParameter("fft2 needs at least a 1x1 image".into()));
    }
    if img.0.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("fft2 input"));
    }
    Ok(())
}

/// Signed integer frequency index of DFT bin `k` on an axis of length `n`.
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Bin holding the negated frequency of bin `k`.
pub fn mirror_bin(k: usize, n: usize) -> usize {
    (n - k) % n
}
