//! Magnetogram ingestion, temporal splits, patch extraction and synthetic data.

pub mod dataset;
mod split;
mod synthetic;

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, DegradeConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{container, fits};

pub use split::{available_months, make_temporal_split, Partition, SplitAssignment, YearMonth};
pub use synthetic::{generate_synthetic, noise_std, NoiseModel, SyntheticSpec};

/// Where a magnetogram came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "HMI")]
    Hmi,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Hmi => "HMI",
            Source::Synthetic => "SYNTHETIC",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HMI" => Ok(Source::Hmi),
            "SYNTHETIC" => Ok(Source::Synthetic),
            other => Err(Error::Schema(format!("unknown source {other:?}"))),
        }
    }
}

/// Line-of-sight field map in Gauss.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnetogram {
    pub id: String,
    pub pixels: Grid,
    pub timestamp: Option<NaiveDateTime>,
    pub source: Source,
    /// Non-finite pixels replaced by 0 G during ingestion.
    pub cleaned_count: usize,
    /// Noise-free field, retained for synthetic data.
    pub clean: Option<Grid>,
}

impl Magnetogram {
    pub fn year_month(&self) -> Option<YearMonth> {
        self.timestamp.map(YearMonth::of)
    }
}

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses ISO-like observation times (`2014-03-01T00:00:04.70Z`,
/// `2014-03-01 00:00:00`, `2014-03-01`) and HMI `T_REC` style
/// (`2014.03.01_00:00:00_TAI`).
pub fn parse_timestamp(raw: &str) -> Result<NaiveDateTime> {
    let s = raw.trim().trim_end_matches('Z').trim_end_matches("_TAI");
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y.%m.%d_%H:%M:%S%.f",
        "%Y.%m.%d_%H:%M:%S",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight"));
    }
    Err(Error::Schema(format!("unparseable timestamp {raw:?}")))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn clean_non_finite(grid: &mut Grid) -> usize {
    let mut n = 0;
    for v in grid.as_mut_slice() {
        if !v.is_finite() {
            *v = 0.0;
            n += 1;
        }
    }
    n
}

fn is_fits(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "fits" || e == "fit" || e == "fts"
    )
}

/// Loads a magnetogram from a FITS file or an array container.
///
/// Non-finite pixels become 0 G and are counted in `cleaned_count`. A
/// container with a `<stem>.clean` sibling gets that field attached.
pub fn ingest(path: impl AsRef<Path>) -> Result<Magnetogram> {
    let path = path.as_ref();
    let (mut pixels, timestamp, source, id, clean) = if is_fits(path) {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, grid) = fits::read_first_image(&bytes)?;
        let text = |k: &str| header.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let stamp = text("DATE-OBS").or_else(|| text("T_OBS")).or_else(|| text("DATE_OBS"));
        let origin = [text("INSTRUME"), text("TELESCOP"), text("ORIGIN")]
            .into_iter()
            .flatten()
            .collect::<Vec<_>>()
            .join(" ");
        let source = if origin.to_ascii_uppercase().contains("SYNTH") {
            Source::Synthetic
        } else {
            Source::Hmi
        };
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("fits").to_string();
        (grid, stamp, source, id, None)
    } else {
        let (sidecar, grid) = container::read(path)?;
        let source = Source::parse(&sidecar.source)?;
        let (raw, side) = container::paths_for(path);
        let stem = side.with_extension("");
        let id = sidecar.id.clone().unwrap_or_else(|| {
            stem.file_name().and_then(|s| s.to_str()).unwrap_or("array").to_string()
        });
        let clean_stem = {
            let mut s = stem.into_os_string();
            s.push(".clean");
            std::path::PathBuf::from(s)
        };
        let clean = if container::paths_for(&clean_stem).1.exists() && raw != clean_stem {
            Some(container::read(&clean_stem)?.1)
        } else {
            None
        };
        (grid, sidecar.timestamp, source, id, clean)
    };
    let timestamp = match timestamp {
        Some(raw) => Some(parse_timestamp(&raw)?),
        None if source == Source::Hmi => {
            return Err(Error::Schema(format!(
                "{}: HMI magnetogram without an observation timestamp",
                path.display()
            )))
        }
        None => None,
    };
    if pixels.is_empty() {
        return Err(Error::Schema(format!("{}: empty image", path.display())));
    }
    let cleaned_count = clean_non_finite(&mut pixels);
    Ok(Magnetogram {
        id,
        pixels,
        timestamp,
        source,
        cleaned_count,
        clean,
    })
}

/// Central `patch_size × patch_size` window; offset ⌊(dim − patch)/2⌋ per axis.
pub fn center_crop(image: &Grid, patch_size: usize) -> Result<Grid> {
    let (h, w) = image.shape();
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::invalid(format!(
            "patch {patch_size} does not fit in {h}x{w} image"
        )));
    }
    let (top, left) = center_offset(h, w, patch_size);
    image.window(top, left, patch_size, patch_size)
}

pub fn center_offset(h: usize, w: usize, patch_size: usize) -> (usize, usize) {
    ((h - patch_size) / 2, (w - patch_size) / 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub source_id: String,
    pub top: usize,
    pub left: usize,
    pub cleaned_count: usize,
}

/// Aligned (LR input, HR target) patches with `lr = degrade(hr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Grid,
    pub hr: Grid,
    /// Noise-free HR patch when the source retained one.
    pub hr_clean: Option<Grid>,
    pub provenance: PairProvenance,
    pub degrade_config_hash: String,
}

impl PatchPair {
    /// Builds a pair from an HR patch, deriving the LR input.
    pub fn from_hr(hr: Grid, config: &DegradeConfig, provenance: PairProvenance) -> Result<Self> {
        let lr = degrade(&hr, config)?;
        Ok(PatchPair {
            lr,
            hr,
            hr_clean: None,
            provenance,
            degrade_config_hash: config.fingerprint(),
        })
    }

    /// Largest |lr − degrade(hr)|; zero for a freshly built pair.
    pub fn consistency_error(&self, config: &DegradeConfig) -> Result<f64> {
        let again = degrade(&self.hr, config)?;
        Ok(again
            .as_slice()
            .iter()
            .zip(self.lr.as_slice())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn scale_factor(&self) -> usize {
        self.hr.height() / self.lr.height().max(1)
    }
}

/// Center-crops every magnetogram and degrades the crop, preserving order.
pub fn make_pairs(
    magnetograms: &[Magnetogram],
    patch_size: usize,
    config: &DegradeConfig,
) -> Result<Vec<PatchPair>> {
    if patch_size % config.scale_factor != 0 {
        return Err(Error::invalid(format!(
            "patch size {patch_size} not divisible by scale factor {}",
            config.scale_factor
        )));
    }
    magnetograms
        .iter()
        .map(|m| {
            let (h, w) = m.pixels.shape();
            let hr = center_crop(&m.pixels, patch_size)?;
            let (top, left) = center_offset(h, w, patch_size);
            let mut pair = PatchPair::from_hr(
                hr,
                config,
                PairProvenance {
                    source_id: m.id.clone(),
                    top,
                    left,
                    cleaned_count: m.cleaned_count,
                },
            )?;
            pair.hr_clean = m.clean.as_ref().map(|c| center_crop(c, patch_size)).transpose()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_offsets() {
        assert_eq!(center_offset(4096, 4096, 128), (1984, 1984));
        let g = Grid::from_fn(5, 5, |r, c| (r * 5 + c) as f64);
        let p = center_crop(&g, 3).unwrap();
        assert_eq!(p.as_slice()[0], 6.0);
        assert_eq!(p.as_slice()[8], 18.0);
        assert_eq!(center_crop(&g, 5).unwrap(), g);
        assert!(center_crop(&g, 6).is_err());
    }

    #[test]
    fn large_crop_shape() {
        let g = Grid::from_fn(4096, 4096, |r, c| (r + c) as f64);
        let p = center_crop(&g, 128).unwrap();
        assert_eq!(p.shape(), (128, 128));
        assert_eq!(p[(0, 0)], 1984.0 * 2.0);
    }

    #[test]
    fn pairs_from_constant_map() {
        let cfg = DegradeConfig::with_scale(2).unwrap();
        let m = Magnetogram {
            id: "c".into(),
            pixels: Grid::filled(40, 36, -7.25),
            timestamp: None,
            source: Source::Synthetic,
            cleaned_count: 0,
            clean: None,
        };
        let pairs = make_pairs(std::slice::from_ref(&m), 16, &cfg).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].hr.shape(), (16, 16));
        assert_eq!(pairs[0].lr.shape(), (8, 8));
        assert!(pairs[0].lr.as_slice().iter().all(|v| (v + 7.25).abs() < 1e-12));
        assert_eq!(pairs[0].provenance.top, 12);
        assert!(make_pairs(&[], 16, &cfg).unwrap().is_empty());
        assert!(make_pairs(&[m], 15, &cfg).is_err());
    }

    #[test]
    fn timestamps() {
        let t = parse_timestamp("2014-03-01T00:00:04.70Z").unwrap();
        assert_eq!(YearMonth::of(t), YearMonth { year: 2014, month: 3 });
        assert!(parse_timestamp("2019.12.31_23:59:59_TAI").is_ok());
        assert!(parse_timestamp("2011-05-02").is_ok());
        assert!(matches!(parse_timestamp("yesterday"), Err(Error::Schema(_))));
    }
}
