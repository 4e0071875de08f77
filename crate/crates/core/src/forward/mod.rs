//! Linearized IDT measurement operators.
//!
//! Illumination `i` maps a contrast volume to an intensity image through
//! per-slice transfer functions applied in the Fourier domain:
//!
//! ```text
//! A_i x = Re{ F^H sum_j ( hRe[i][j] * F x.re[j] + hIm[i][j] * F x.im[j] ) }
//! ```
//!
//! The real part is kept at the output so predicted measurements are real,
//! like the background-subtracted images they are compared against. Stacks
//! tagged [`ForwardConvention::RealPartDropped`] instead compare the complex
//! prediction directly against the real measurement.

mod synth;
mod tikhonov;

pub use synth::{sunflower_illumination, synth_tf, SynthParams};
pub use tikhonov::{tikhonov_reconstruct, TikhonovMethod, TikhonovOptions, TikhonovResult};

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{fft2_in_place, fft2_real_unchecked, ComplexImage, RealVolume};

/// Whether the real part of the modelled intensity is taken before comparing with data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardConvention {
    #[default]
    RealPartKept,
    RealPartDropped,
}

impl ForwardConvention {
    pub fn code(self) -> u8 {
        match self {
            ForwardConvention::RealPartKept => 0,
            ForwardConvention::RealPartDropped => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ForwardConvention::RealPartKept),
            1 => Some(ForwardConvention::RealPartDropped),
            _ => None,
        }
    }
}

/// Optical acquisition parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acquisition {
    /// Wavelength of the LED light, micrometres.
    pub wavelength_um: f64,
    /// Refractive index of the background medium.
    pub background_index: f64,
    /// Axial position of the LED array, millimetres.
    pub z_led_mm: f64,
    /// Axial position of the sample focal plane, micrometres.
    pub sample_z_um: f64,
    /// Microscope objective magnification.
    pub magnification: f64,
    /// Objective numerical aperture.
    pub na: f64,
    /// Effective pixel size at the sample, micrometres.
    pub pixel_size_um: f64,
}

impl Acquisition {
    /// Parameters of the simulated acquisition (630 nm, 1.33, LEDs at -70 mm, 40x / NA 0.65).
    pub fn simulation() -> Self {
        let wavelength_um = 0.63;
        let na = 0.65;
        Self {
            wavelength_um,
            background_index: 1.33,
            z_led_mm: -70.0,
            sample_z_um: 0.0,
            magnification: 40.0,
            na,
            pixel_size_um: wavelength_um / (4.0 * na),
        }
    }

    /// Parameters of the experimental acquisition (630 nm, 1.33, LEDs at -79 mm, 10x / NA 0.25).
    pub fn experiment() -> Self {
        let wavelength_um = 0.63;
        let na = 0.25;
        Self {
            wavelength_um,
            background_index: 1.33,
            z_led_mm: -79.0,
            sample_z_um: 40.0,
            magnification: 10.0,
            na,
            pixel_size_um: wavelength_um / (4.0 * na),
        }
    }
}

impl Default for Acquisition {
    fn default() -> Self {
        Self::simulation()
    }
}

/// Complex permittivity contrast stored as two real volumes: `re` (phase) and `im` (absorption).
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastVolume {
    pub re: RealVolume,
    pub im: RealVolume,
}

impl ContrastVolume {
    pub fn new(re: RealVolume, im: RealVolume) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::dims("ContrastVolume", format!("{:?}", re.dim()), format!("{:?}", im.dim())));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(slices: usize, height: usize, width: usize) -> Self {
        Self {
            re: RealVolume::zeros(slices, height, width),
            im: RealVolume::zeros(slices, height, width),
        }
    }

    pub fn zeros_like(other: &ContrastVolume) -> Self {
        let (s, h, w) = other.dim();
        Self::zeros(s, h, w)
    }

    /// `(slices, height, width)` of each part.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.re.dim()
    }

    /// Total number of real unknowns.
    pub fn len(&self) -> usize {
        2 * self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn dot(&self, other: &ContrastVolume) -> f64 {
        self.re.dot(&other.re) + self.im.dot(&other.im)
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.norm_sq() + self.im.norm_sq()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ContrastVolume) {
        self.re.axpy(alpha, &other.re);
        self.im.axpy(alpha, &other.im);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.re.scale(alpha);
        self.im.scale(alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self - other`
    pub fn sub(&self, other: &ContrastVolume) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &ContrastVolume) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// Flattened `[re..., im...]` copy, used by dense oracles.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.re.as_slice().to_vec();
        v.extend_from_slice(self.im.as_slice());
        v
    }

    pub fn from_flat(slices: usize, height: usize, width: usize, flat: &[f64]) -> Result<Self> {
        let n = slices * height * width;
        if flat.len() != 2 * n {
            return Err(Error::dims("ContrastVolume::from_flat", 2 * n, flat.len()));
        }
        Ok(Self {
            re: RealVolume::from_vec(slices, height, width, flat[..n].to_vec())?,
            im: RealVolume::from_vec(slices, height, width, flat[n..].to_vec())?,
        })
    }
}

/// Per-illumination, per-slice phase and absorption transfer functions.
#[derive(Clone, Debug)]
pub struct TransferFunctionStack {
    illuminations: usize,
    slices: usize,
    height: usize,
    width: usize,
    h_re: Vec<ComplexImage>,
    h_im: Vec<ComplexImage>,
    pub slice_spacing_um: f64,
    pub acquisition: Acquisition,
    pub convention: ForwardConvention,
    /// Set when every `(i, j)` transfer function is a pointwise Fourier multiplier that the
    /// per-frequency Tikhonov solve may rely on.
    pub frequency_diagonal: bool,
}

impl TransferFunctionStack {
    /// `h_re` and `h_im` are indexed `[i * slices + j]`.
    pub fn new(
        illuminations: usize,
        slices: usize,
        h_re: Vec<ComplexImage>,
        h_im: Vec<ComplexImage>,
        slice_spacing_um: f64,
        acquisition: Acquisition,
    ) -> Result<Self> {
        if illuminations == 0 || slices == 0 {
            return Err(Error::InvalidParameter("transfer-function stack needs I >= 1 and J+1 >= 1".into()));
        }
        let expected = illuminations * slices;
        if h_re.len() != expected || h_im.len() != expected {
            return Err(Error::dims(
                "TransferFunctionStack::new",
                format!("{expected} hRe/hIm pairs"),
                format!("{}/{}", h_re.len(), h_im.len()),
            ));
        }
        let (height, width) = h_re[0].dim();
        for h in h_re.iter().chain(h_im.iter()) {
            if h.dim() != (height, width) {
                return Err(Error::dims(
                    "TransferFunctionStack::new",
                    format!("{height}x{width}"),
                    format!("{:?}", h.dim()),
                ));
            }
            if h.view().iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::NonFinite("transfer function"));
            }
        }
        if !slice_spacing_um.is_finite() {
            return Err(Error::NonFinite("slice spacing"));
        }
        Ok(Self {
            illuminations,
            slices,
            height,
            width,
            h_re,
            h_im,
            slice_spacing_um,
            acquisition,
            convention: ForwardConvention::RealPartKept,
            frequency_diagonal: false,
        })
    }

    pub fn illuminations(&self) -> usize {
        self.illuminations
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn h_re(&self, i: usize, j: usize) -> &ComplexImage {
        &self.h_re[i * self.slices + j]
    }

    pub fn h_im(&self, i: usize, j: usize) -> &ComplexImage {
        &self.h_im[i * self.slices + j]
    }

    pub fn h_re_all(&self) -> &[ComplexImage] {
        &self.h_re
    }

    pub fn h_im_all(&self) -> &[ComplexImage] {
        &self.h_im
    }

    /// Same stack with every transfer function multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |v: &Vec<ComplexImage>| {
            v.iter()
                .map(|h| ComplexImage::from_array_unchecked(h.view().mapv(|c| c * factor)))
                .collect()
        };
        Self {
            h_re: scale(&self.h_re),
            h_im: scale(&self.h_im),
            ..self.clone()
        }
    }

    /// Bytes held by the operator and measurement for one illumination.
    pub fn bytes_per_illumination(&self) -> usize {
        let pixels = self.height * self.width;
        2 * self.slices * pixels * std::mem::size_of::<Complex64>() + pixels * std::mem::size_of::<f64>()
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.illuminations {
            return Err(Error::IndexOutOfRange {
                index: i,
                count: self.illuminations,
            });
        }
        Ok(())
    }

    pub fn check_volume(&self, x: &ContrastVolume) -> Result<()> {
        let expected = (self.slices, self.height, self.width);
        if x.dim() != expected || x.im.dim() != expected {
            return Err(Error::dims("contrast volume", format!("{expected:?}"), format!("{:?}", x.dim())));
        }
        Ok(())
    }

    pub fn check_image(&self, dim: (usize, usize)) -> Result<()> {
        if dim != (self.height, self.width) {
            return Err(Error::dims(
                "measurement image",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", dim.0, dim.1),
            ));
        }
        Ok(())
    }
}

/// Background-subtracted intensity images, one per illumination.
#[derive(Clone, Debug)]
pub struct MeasurementSet {
    pub images: Vec<Array2<f64>>,
    pub ground_truth: Option<ContrastVolume>,
    pub acquisition: Acquisition,
    pub convention: ForwardConvention,
    pub seed: u64,
    /// Input SNR used for simulation; `None` means noiseless.
    pub input_snr_db: Option<f64>,
}

impl MeasurementSet {
    pub fn new(images: Vec<Array2<f64>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidParameter("measurement set needs at least one image".into()));
        }
        let dim = images[0].dim();
        for img in &images {
            if img.dim() != dim {
                return Err(Error::dims("MeasurementSet::new", format!("{dim:?}"), format!("{:?}", img.dim())));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("measurement image"));
            }
        }
        Ok(Self {
            images,
            ground_truth: None,
            acquisition: Acquisition::default(),
            convention: ForwardConvention::RealPartKept,
            seed: 0,
            input_snr_db: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks count, image size and convention against a transfer-function stack.
    pub fn check_against(&self, tf: &TransferFunctionStack) -> Result<()> {
        if self.images.len() != tf.illuminations() {
            return Err(Error::dims("measurement count", tf.illuminations(), self.images.len()));
        }
        tf.check_image(self.images[0].dim())?;
        if self.convention != tf.convention {
            return Err(Error::InvalidParameter(format!(
                "measurements were produced under {:?} but the transfer functions use {:?}",
                self.convention, tf.convention
            )));
        }
        if let Some(gt) = &self.ground_truth {
            tf.check_volume(gt)?;
        }
        Ok(())
    }

    /// Keeps only the listed illuminations (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            ..self.clone()
        }
    }
}

impl TransferFunctionStack {
    /// Keeps only the listed illuminations (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<ComplexImage>| {
            indices
                .iter()
                .flat_map(|&i| (0..self.slices).map(move |j| i * self.slices + j))
                .map(|k| v[k].clone())
                .collect::<Vec<_>>()
        };
        Self {
            illuminations: indices.len(),
            h_re: pick(&self.h_re),
            h_im: pick(&self.h_im),
            ..self.clone()
        }
    }
}

/// Per-slice spectra of both parts of a contrast volume.
#[derive(Clone, Debug)]
pub struct VolumeSpectra {
    pub re: Vec<Array2<Complex64>>,
    pub im: Vec<Array2<Complex64>>,
}

impl VolumeSpectra {
    pub fn of(x: &ContrastVolume) -> Self {
        let tr = |v: &RealVolume| {
            (0..v.slices())
                .map(|j| fft2_real_unchecked(v.slice(j)).into_array())
                .collect()
        };
        Self {
            re: tr(&x.re),
            im: tr(&x.im),
        }
    }

    pub fn zeros(slices: usize, height: usize, width: usize) -> Self {
        Self {
            re: vec![Array2::zeros((height, width)); slices],
            im: vec![Array2::zeros((height, width)); slices],
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &VolumeSpectra) {
        for (a, b) in self.re.iter_mut().zip(&other.re).chain(self.im.iter_mut().zip(&other.im)) {
            Zip::from(a).and(b).for_each(|a, &b| *a += b * alpha);
        }
    }

    /// Real part of the inverse transform of every slice.
    pub fn into_volume(self) -> ContrastVolume {
        let back = |v: Vec<Array2<Complex64>>| {
            let slices: Vec<Array2<f64>> = v.into_iter().map(crate::tensor::ifft2_real_part_unchecked).collect();
            let (h, w) = slices[0].dim();
            let mut out = ndarray::Array3::zeros((slices.len(), h, w));
            for (j, s) in slices.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(0), j).assign(s);
            }
            RealVolume::from_array_unchecked(out)
        };
        ContrastVolume {
            re: back(self.re),
            im: back(self.im),
        }
    }
}

/// `sum_j hRe[i][j] * Xre_j + hIm[i][j] * Xim_j`
pub(crate) fn predicted_spectrum(tf: &TransferFunctionStack, spectra: &VolumeSpectra, i: usize) -> Array2<Complex64> {
    let mut acc = Array2::<Complex64>::zeros((tf.height, tf.width));
    for j in 0..tf.slices {
        Zip::from(&mut acc)
            .and(tf.h_re(i, j).view())
            .and(&spectra.re[j])
            .and(tf.h_im(i, j).view())
            .and(&spectra.im[j])
            .for_each(|a, &hr, &xr, &hi, &xi| *a += hr * xr + hi * xi);
    }
    acc
}

/// `acc += weight * A_i^H` applied to a residual spectrum, kept in the Fourier domain.
pub(crate) fn accumulate_adjoint(
    acc: &mut VolumeSpectra,
    tf: &TransferFunctionStack,
    i: usize,
    residual_spectrum: &Array2<Complex64>,
    weight: f64,
) {
    for j in 0..tf.slices {
        Zip::from(&mut acc.re[j])
            .and(tf.h_re(i, j).view())
            .and(residual_spectrum)
            .for_each(|a, &h, &r| *a += h.conj() * r * weight);
        Zip::from(&mut acc.im[j])
            .and(tf.h_im(i, j).view())
            .and(residual_spectrum)
            .for_each(|a, &h, &r| *a += h.conj() * r * weight);
    }
}

/// Predicted intensity image for illumination `i` (real part kept).
pub fn apply_forward(x: &ContrastVolume, tf: &TransferFunctionStack, i: usize) -> Result<Array2<f64>> {
    tf.check_index(i)?;
    tf.check_volume(x)?;
    let spectra = VolumeSpectra::of(x);
    Ok(crate::tensor::ifft2_real_part_unchecked(predicted_spectrum(tf, &spectra, i)))
}

/// Complex prediction `F^H sum_j H_ij F x_j` without taking the real part.
pub fn apply_forward_complex(x: &ContrastVolume, tf: &TransferFunctionStack, i: usize) -> Result<ComplexImage> {
    tf.check_index(i)?;
    tf.check_volume(x)?;
    let spectra = VolumeSpectra::of(x);
    let mut p = predicted_spectrum(tf, &spectra, i);
    fft2_in_place(&mut p, true);
    Ok(ComplexImage::from_array_unchecked(p))
}

/// Adjoint of [`apply_forward`] under the real inner product.
pub fn apply_adjoint(r: ArrayView2<f64>, tf: &TransferFunctionStack, i: usize) -> Result<ContrastVolume> {
    tf.check_index(i)?;
    tf.check_image(r.dim())?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adjoint input"));
    }
    let spectrum = fft2_real_unchecked(r).into_array();
    let mut acc = VolumeSpectra::zeros(tf.slices, tf.height, tf.width);
    accumulate_adjoint(&mut acc, tf, i, &spectrum, 1.0);
    Ok(acc.into_volume())
}

/// Adjoint of [`apply_forward_complex`] under the real inner product `Re <u, v>`.
pub fn apply_adjoint_complex(r: &ComplexImage, tf: &TransferFunctionStack, i: usize) -> Result<ContrastVolume> {
    tf.check_index(i)?;
    tf.check_image(r.dim())?;
    let mut spectrum = r.view().to_owned();
    fft2_in_place(&mut spectrum, false);
    let mut acc = VolumeSpectra::zeros(tf.slices, tf.height, tf.width);
    accumulate_adjoint(&mut acc, tf, i, &spectrum, 1.0);
    Ok(acc.into_volume())
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Unstructured random stack (no Hermitian symmetry, no pupil).
    pub fn random_tf(illuminations: usize, slices: usize, h: usize, w: usize, seed: u64) -> TransferFunctionStack {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut draw = || {
            let data = (0..h * w)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            ComplexImage::new(w, h, data).unwrap()
        };
        let n = illuminations * slices;
        let h_re = (0..n).map(|_| draw()).collect();
        let h_im = (0..n).map(|_| draw()).collect();
        TransferFunctionStack::new(illuminations, slices, h_re, h_im, 1.0, Acquisition::default()).unwrap()
    }

    /// hRe = 1, hIm = 0 for every pair.
    pub fn identity_tf(illuminations: usize, slices: usize, h: usize, w: usize) -> TransferFunctionStack {
        let one = ComplexImage::from_array_unchecked(Array2::from_elem((h, w), Complex64::new(1.0, 0.0)));
        let zero = ComplexImage::zeros(h, w);
        let n = illuminations * slices;
        TransferFunctionStack::new(illuminations, slices, vec![one; n], vec![zero; n], 1.0, Acquisition::default())
            .unwrap()
    }

    pub fn random_volume(slices: usize, h: usize, w: usize, seed: u64) -> ContrastVolume {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = slices * h * w;
        let flat: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ContrastVolume::from_flat(slices, h, w, &flat).unwrap()
    }

    pub fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
    }
}
