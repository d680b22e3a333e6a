//! The known HR→LR degradation: Gaussian smoothing followed by block averaging.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Normalized isotropic Gaussian correlation kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianKernel {
    /// Builds a `size × size` kernel with weights ∝ exp(−(i²+j²)/(2σ²)),
    /// offsets measured from the center tap, normalized to unit sum.
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "kernel sigma must be positive, got {sigma}"
            )));
        }
        let half = (size / 2) as i64;
        let denom = 2.0 * sigma * sigma;
        let mut weights = Vec::with_capacity(size * size);
        for i in -half..=half {
            for j in -half..=half {
                weights.push((-((i * i + j * j) as f64) / denom).exp());
            }
        }
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let kernel = GaussianKernel {
            size,
            sigma,
            weights,
        };
        debug_assert!(kernel.is_symmetric());
        Ok(kernel)
    }

    /// The default kernel for a scale factor: σ = s/2, size = 2·⌈2σ⌉ + 1.
    pub fn for_scale(scale_factor: usize) -> Result<Self> {
        let sigma = scale_factor as f64 / 2.0;
        Self::new(default_size(sigma), sigma)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// Horizontal, vertical and diagonal reflection symmetry.
    pub fn is_symmetric(&self) -> bool {
        let n = self.size;
        (0..n).all(|r| {
            (0..n).all(|c| {
                let w = self.weight(r, c);
                w == self.weight(n - 1 - r, c)
                    && w == self.weight(r, n - 1 - c)
                    && w == self.weight(c, r)
            })
        })
    }
}

/// Kernel size used when only sigma is configured.
pub fn default_size(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil() as usize + 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Mirror about the pixel edge, repeating the border sample (`dcba|abcd|dcba`).
    #[default]
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub scale_factor: usize,
    pub kernel: GaussianKernel,
    #[serde(default)]
    pub boundary_mode: BoundaryMode,
}

impl DegradeConfig {
    pub fn new(scale_factor: usize, kernel: GaussianKernel) -> Result<Self> {
        if scale_factor < 2 {
            return Err(Error::invalid(format!(
                "scale factor must be at least 2, got {scale_factor}"
            )));
        }
        Ok(DegradeConfig {
            scale_factor,
            kernel,
            boundary_mode: BoundaryMode::Reflect,
        })
    }

    /// Default kernel for the given per-axis factor.
    pub fn with_scale(scale_factor: usize) -> Result<Self> {
        Self::new(scale_factor, GaussianKernel::for_scale(scale_factor)?)
    }

    /// Non-fatal configuration issues worth reporting to the user.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kernel.size < self.scale_factor {
            out.push(format!(
                "kernel size {} is smaller than scale factor {}; expect aliasing",
                self.kernel.size, self.scale_factor
            ));
        }
        out
    }

    /// Stable hex digest identifying this degradation.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "scale={};size={};sigma={:e};boundary={:?}",
            self.scale_factor, self.kernel.size, self.kernel.sigma, self.boundary_mode
        );
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

/// Maps any integer index into `[0, n)` by half-sample symmetric reflection.
#[inline]
fn reflect(index: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = index.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// 2-D correlation of `image` with `kernel`, same-size output.
pub fn smooth(image: &Grid, kernel: &GaussianKernel, boundary: BoundaryMode) -> Result<Grid> {
    let (h, w) = image.shape();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot smooth an empty image"));
    }
    let BoundaryMode::Reflect = boundary;
    let k = kernel.size();
    let half = (k / 2) as i64;
    if k == 1 {
        return Ok(image.clone());
    }
    // Precompute reflected column indices per output column.
    let col_index: Vec<Vec<usize>> = (0..w as i64)
        .map(|c| (-half..=half).map(|dc| reflect(c + dc, w)).collect())
        .collect();
    let src = image.as_slice();
    let mut out = Grid::zeros(h, w);
    let dst = out.as_mut_slice();
    for r in 0..h as i64 {
        let rows: Vec<usize> = (-half..=half).map(|dr| reflect(r + dr, h)).collect();
        for (c, cols) in col_index.iter().enumerate() {
            let mut acc = 0.0;
            for (kr, &sr) in rows.iter().enumerate() {
                let row = &src[sr * w..(sr + 1) * w];
                let krow = &kernel.weights()[kr * k..(kr + 1) * k];
                for (kw, &sc) in krow.iter().zip(cols) {
                    acc += kw * row[sc];
                }
            }
            dst[r as usize * w + c] = acc;
        }
    }
    Ok(out)
}

/// Mean of each non-overlapping `factor × factor` block.
pub fn block_average(image: &Grid, factor: usize) -> Result<Grid> {
    let (h, w) = image.shape();
    if factor == 0 {
        return Err(Error::invalid("block factor must be positive"));
    }
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {factor}x{factor} blocks"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let mut out = Grid::zeros(lh, lw);
    let src = image.as_slice();
    {
        let dst = out.as_mut_slice();
        for r in 0..h {
            let lr = r / factor;
            for c in 0..w {
                dst[lr * lw + c / factor] += src[r * w + c];
            }
        }
    }
    let area = (factor * factor) as f64;
    out.as_mut_slice().iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// `block_average(smooth(image))` under the given configuration.
pub fn degrade(image: &Grid, config: &DegradeConfig) -> Result<Grid> {
    let s = config.scale_factor;
    if image.height() % s != 0 || image.width() % s != 0 {
        return Err(Error::invalid(format!(
            "image {:?} not divisible by scale factor {s}",
            image.shape()
        )));
    }
    let smoothed = smooth(image, &config.kernel, config.boundary_mode)?;
    block_average(&smoothed, s)
}
