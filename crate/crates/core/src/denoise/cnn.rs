//! Inference for the residual denoising CNN: `N-1` blocks of 3x3 convolution + ReLU,
//! then one 3x3 convolution back to a single channel.
//!
//! Convolutions are cross-correlations with zero padding ("same" output size), the
//! convention of common training frameworks. Weights are stored in `f32` and
//! evaluated in `f64`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const HIDDEN_CHANNELS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Row-major `[out][in][kh][kw]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h: 3,
            kernel_w: 3,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnWeights {
    pub layers: Vec<ConvLayer>,
    /// When set the network predicts the noise and the output is `input - net(input)`.
    pub residual: bool,
    /// Noise level the network was trained for (8-bit units).
    pub sigma: f64,
    /// Optional per-layer upper bounds on the convolution operator norms.
    pub spectral_norms: Option<Vec<f64>>,
    /// Free-form provenance text written by the trainer.
    pub metadata: String,
}

/// Channel plan `(in, out)` for a depth-`n` network.
pub fn channel_plan(n: usize) -> Vec<(usize, usize)> {
    match n {
        0 => Vec::new(),
        1 => vec![(1, 1)],
        _ => (0..n)
            .map(|k| {
                let cin = if k == 0 { 1 } else { HIDDEN_CHANNELS };
                let cout = if k + 1 == n { 1 } else { HIDDEN_CHANNELS };
                (cin, cout)
            })
            .collect(),
    }
}

impl CnnWeights {
    /// All-zero network of depth `n`.
    pub fn zeros(n: usize, residual: bool) -> Self {
        Self {
            layers: channel_plan(n).into_iter().map(|(i, o)| ConvLayer::zeros(o, i)).collect(),
            residual,
            sigma: 0.0,
            spectral_norms: None,
            metadata: String::new(),
        }
    }

    /// Seeded weights uniform in `[-scale, scale)`, biases in `[-scale/10, scale/10)`.
    pub fn random(n: usize, residual: bool, scale: f32, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut w = Self::zeros(n, residual);
        for layer in &mut w.layers {
            for v in &mut layer.weight {
                *v = rng.random_range(-scale..scale);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-scale / 10.0..scale / 10.0);
            }
        }
        w
    }

    /// Checks the architecture invariants, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::InvalidWeights("network has no layers".into()));
        }
        let plan = channel_plan(n);
        for (k, (layer, &(cin, cout))) in self.layers.iter().zip(&plan).enumerate() {
            if layer.kernel_h != 3 || layer.kernel_w != 3 {
                return Err(Error::InvalidWeights(format!(
                    "layer {k}: kernels must be 3x3, found {}x{}",
                    layer.kernel_h, layer.kernel_w
                )));
            }
            if layer.in_channels != cin || layer.out_channels != cout {
                return Err(Error::InvalidWeights(format!(
                    "layer {k}: expected {cin}->{cout} channels, found {}->{}",
                    layer.in_channels, layer.out_channels
                )));
            }
            if layer.weight.len() != cout * cin * 9 {
                return Err(Error::InvalidWeights(format!(
                    "layer {k}: weight holds {} values, expected {}",
                    layer.weight.len(),
                    cout * cin * 9
                )));
            }
            if layer.bias.len() != cout {
                return Err(Error::InvalidWeights(format!(
                    "layer {k}: bias holds {} values, expected {cout}",
                    layer.bias.len()
                )));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidWeights(format!("layer {k}: non-finite parameter")));
            }
        }
        if let Some(norms) = &self.spectral_norms {
            if norms.len() != n {
                return Err(Error::InvalidWeights(format!(
                    "{} spectral-norm certificates for {n} layers",
                    norms.len()
                )));
            }
            if norms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidWeights("spectral-norm certificates must be finite and >= 0".into()));
            }
        }
        if !self.sigma.is_finite() {
            return Err(Error::InvalidWeights("sigma tag is not finite".into()));
        }
        Ok(())
    }

    /// Upper bound on the Lipschitz constant of the full map, if certificates exist.
    ///
    /// ReLU is 1-Lipschitz and biases do not affect it, so the network part is bounded
    /// by the product of layer norms; the residual form adds the identity.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        let product: f64 = self.spectral_norms.as_ref()?.iter().product();
        Some(if self.residual { 1.0 + product } else { product })
    }

    pub fn certified_nonexpansive(&self) -> bool {
        self.lipschitz_bound().is_some_and(|l| l <= 1.0)
    }
}

/// Same-size zero-padded 3x3 cross-correlation of a `cin x h x w` stack.
fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, layer: &ConvLayer, relu: bool) -> Vec<f64> {
    let cout = layer.out_channels;
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(layer.bias[o] as f64);
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            let kernel = &layer.weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = kernel[ky * 3 + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        for x in x0..x1 {
                            drow[x] += wv * srow[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        if relu {
            for v in dst.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    out
}

pub fn cnn_infer(w: &CnnWeights, img: ArrayView2<f64>) -> Result<Array2<f64>> {
    w.validate()?;
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cnn input"));
    }
    let (h, wd) = img.dim();
    let mut act: Vec<f64> = img.iter().cloned().collect();
    let mut channels = 1;
    let n = w.layers.len();
    for (k, layer) in w.layers.iter().enumerate() {
        act = conv3x3(&act, channels, h, wd, layer, k + 1 < n);
        channels = layer.out_channels;
    }
    let net = Array2::from_shape_vec((h, wd), act).expect("single output channel");
    let out = if w.residual { &img - &net } else { net };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cnn output"));
    }
    Ok(out)
}
