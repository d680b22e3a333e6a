use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Magnetogram, Source};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derive_labeled, rng_from};

/// Additive noise floor in Gauss for the proportional model.
pub const NOISE_FLOOR_GAUSS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Proportional,
}

/// Recipe for a desk-scale stand-in dataset of blob-like active regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub hr_size: usize,
    /// Inclusive range of blobs per image.
    pub active_region_count_range: (usize, usize),
    pub field_amplitude: f64,
    /// Inclusive range of blob widths in HR pixels.
    pub blob_sigma_range: (f64, f64),
    pub noise_model: NoiseModel,
    pub noise_coefficient: f64,
    pub seed: u64,
    /// Images are stamped month by month starting in January of this year.
    pub start_year: i32,
    pub span_years: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 200,
            hr_size: 32,
            active_region_count_range: (1, 4),
            field_amplitude: 1000.0,
            blob_sigma_range: (4.0, 8.0),
            noise_model: NoiseModel::Proportional,
            noise_coefficient: 0.05,
            seed: 0,
            start_year: 2010,
            span_years: 10,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.active_region_count_range;
        let (slo, shi) = self.blob_sigma_range;
        let problem = if self.count == 0 {
            Some("count must be positive")
        } else if self.hr_size == 0 {
            Some("hr_size must be positive")
        } else if lo > hi {
            Some("active region range is empty")
        } else if !(self.field_amplitude > 0.0) {
            Some("field_amplitude must be positive")
        } else if !(slo > 0.0) || slo > shi {
            Some("blob sigma range must be positive and ordered")
        } else if !(self.noise_coefficient >= 0.0) {
            Some("noise_coefficient must be non-negative")
        } else if self.span_years == 0 {
            Some("span_years must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::invalid(p)),
            None => Ok(()),
        }
    }

    /// Checks the spec against a degradation scale factor as well.
    pub fn validate_for(&self, scale_factor: usize) -> Result<()> {
        self.validate()?;
        if self.hr_size % scale_factor != 0 {
            return Err(Error::invalid(format!(
                "hr_size {} not divisible by scale factor {scale_factor}",
                self.hr_size
            )));
        }
        Ok(())
    }

    fn timestamp(&self, index: usize) -> chrono::NaiveDateTime {
        let months = self.span_years * 12;
        let m = index % months;
        let day = 1 + (index / months) % 28;
        NaiveDate::from_ymd_opt(self.start_year + (m / 12) as i32, (m % 12) as u32 + 1, day as u32)
            .expect("valid calendar date")
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
    }
}

/// Per-pixel noise standard deviation σ = k·|B| + 1 G.
pub fn noise_std(clean: &Grid, coefficient: f64) -> Grid {
    clean.map(|b| coefficient * b.abs() + NOISE_FLOOR_GAUSS)
}

/// Sums of signed Gaussian blobs on a zero background, optionally with
/// proportional noise. The clean field is always retained.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Magnetogram>> {
    spec.validate()?;
    let n = spec.hr_size;
    let (lo, hi) = spec.active_region_count_range;
    let (slo, shi) = spec.blob_sigma_range;
    let width = (spec.count.max(2) - 1).to_string().len().max(4);
    (0..spec.count)
        .map(|i| {
            let mut rng = rng_from(derive_labeled(spec.seed, "synthetic", i as u64));
            let blobs = rng.random_range(lo..=hi);
            let mut clean = Grid::zeros(n, n);
            for _ in 0..blobs {
                let cy = rng.random::<f64>() * n as f64;
                let cx = rng.random::<f64>() * n as f64;
                let sigma = slo + rng.random::<f64>() * (shi - slo);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let amp = sign * spec.field_amplitude * (0.3 + 0.7 * rng.random::<f64>());
                let denom = 2.0 * sigma * sigma;
                for r in 0..n {
                    for c in 0..n {
                        let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                        clean[(r, c)] += amp * (-d2 / denom).exp();
                    }
                }
            }
            let pixels = match spec.noise_model {
                NoiseModel::None => clean.clone(),
                NoiseModel::Proportional => {
                    let mut noisy = clean.clone();
                    for v in noisy.as_mut_slice() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += z * (spec.noise_coefficient * v.abs() + NOISE_FLOOR_GAUSS);
                    }
                    noisy
                }
            };
            Ok(Magnetogram {
                id: format!("synth_{i:0width$}"),
                pixels,
                timestamp: Some(spec.timestamp(i)),
                source: Source::Synthetic,
                cleaned_count: 0,
                clean: Some(clean),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn superposition_bound_without_noise() {
        let spec = SyntheticSpec {
            count: 20,
            noise_model: NoiseModel::None,
            ..Default::default()
        };
        let maps = generate_synthetic(&spec).unwrap();
        for m in &maps {
            assert!(m.pixels.max_abs() <= 1000.0 * spec.active_region_count_range.1 as f64);
            assert_eq!(Some(&m.pixels), m.clean.as_ref());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec {
            count: 5,
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
    }

    #[test]
    fn floor_only_noise_has_unit_std() {
        let spec = SyntheticSpec {
            count: 10,
            noise_coefficient: 0.0,
            ..Default::default()
        };
        let maps = generate_synthetic(&spec).unwrap();
        let resid: Vec<f64> = maps
            .iter()
            .flat_map(|m| {
                let clean = m.clean.as_ref().unwrap();
                m.pixels
                    .as_slice()
                    .iter()
                    .zip(clean.as_slice())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.05, "{std}");
        assert!(noise_std(&maps[0].clean.clone().unwrap(), 0.0).as_slice().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn months_cycle_through_span() {
        let spec = SyntheticSpec {
            count: 130,
            ..Default::default()
        };
        let maps = generate_synthetic(&spec).unwrap();
        let months = super::super::available_months(&maps);
        assert_eq!(months.len(), 10);
        assert!(months.values().all(|m| m.len() == 12));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { count: 0, ..Default::default() },
            SyntheticSpec { active_region_count_range: (3, 1), ..Default::default() },
            SyntheticSpec { field_amplitude: 0.0, ..Default::default() },
            SyntheticSpec { noise_coefficient: -1.0, ..Default::default() },
        ] {
            assert!(generate_synthetic(&spec).is_err());
        }
        assert!(SyntheticSpec { hr_size: 30, ..Default::default() }.validate_for(4).is_err());
    }
}
