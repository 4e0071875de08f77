//! Isotropic total-variation denoising, `argmin_u 0.5 ||u - f||^2 + weight * TV(u)`,
//! solved by projected gradient on the dual field `p` with `|p| <= 1` per pixel.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvOptions {
    pub weight: f64,
    /// Inner dual iterations cap.
    pub max_iter: usize,
    /// Stop once no dual component moves by more than this.
    pub tol: f64,
}

impl TvOptions {
    pub fn new(weight: f64) -> Self {
        Self {
            weight,
            max_iter: 200,
            tol: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidParameter(format!("TV weight must be non-negative, got {}", self.weight)));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("TV needs a positive iteration cap and tolerance".into()));
        }
        Ok(())
    }
}

/// Dual step, below `1 / ||grad||^2 = 1/8` times two.
const STEP: f64 = 0.24;

fn gradient(u: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = u.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| if x + 1 < w { u[[y, x + 1]] - u[[y, x]] } else { 0.0 });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| if y + 1 < h { u[[y + 1, x]] - u[[y, x]] } else { 0.0 });
    (gx, gy)
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &Array2<f64>, py: &Array2<f64>) -> Array2<f64> {
    let (h, w) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = if x + 1 < w { px[[y, x]] } else { 0.0 } - if x > 0 { px[[y, x - 1]] } else { 0.0 };
        let dy = if y + 1 < h { py[[y, x]] } else { 0.0 } - if y > 0 { py[[y - 1, x]] } else { 0.0 };
        dx + dy
    })
}

pub fn tv_denoise(f: ArrayView2<f64>, opts: &TvOptions) -> Array2<f64> {
    if opts.weight == 0.0 {
        return f.to_owned();
    }
    let lambda = opts.weight;
    let f_scaled = f.mapv(|v| v / lambda);
    let (h, w) = f.dim();
    let mut px = Array2::<f64>::zeros((h, w));
    let mut py = Array2::<f64>::zeros((h, w));
    for _ in 0..opts.max_iter {
        let g = divergence(&px, &py) - &f_scaled;
        let (gx, gy) = gradient(&g);
        let mut change = 0.0_f64;
        Zip::from(&mut px)
            .and(&mut py)
            .and(&gx)
            .and(&gy)
            .for_each(|px, py, &gx, &gy| {
                let (nx, ny) = (*px + STEP * gx, *py + STEP * gy);
                let scale = (nx * nx + ny * ny).sqrt().max(1.0);
                let (nx, ny) = (nx / scale, ny / scale);
                change = change.max((nx - *px).abs()).max((ny - *py).abs());
                *px = nx;
                *py = ny;
            });
        if change < opts.tol {
            break;
        }
    }
    &f - &(divergence(&px, &py) * lambda)
}
