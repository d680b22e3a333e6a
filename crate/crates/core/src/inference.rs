//! MC-dropout sampling and the epistemic/aleatoric variance decomposition.
//!
//! For T stochastic passes with means fₜ and predicted variances σₜ²:
//!
//! ```text
//! epistemic = (1/T)·Σ fₜ² − ((1/T)·Σ fₜ)²      (population variance of the means)
//! aleatoric = (1/T)·Σ σₜ²
//! ```
//!
//! The epistemic term is evaluated with a two-pass (materialized) or
//! Welford (streaming) recurrence rather than the raw moment difference,
//! which cancels catastrophically for fields of ±1500 G.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{container, fits};
use crate::model::{predicted_variance, Model};
use crate::rng::derive_seed;

/// Values this far below zero are rounding noise and clamp to 0.
pub const EPISTEMIC_CLAMP_TOLERANCE: f64 = 1e-9;

/// Seed of MC sample `t` under `base_seed`.
pub fn sample_seed(base_seed: u64, t: usize) -> u64 {
    derive_seed(base_seed, t as u64)
}

/// T stochastic forward passes of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    means: Vec<Grid>,
    variances: Vec<Grid>,
    seeds: Vec<u64>,
}

impl SampleSet {
    pub fn new(means: Vec<Grid>, variances: Vec<Grid>, seeds: Vec<u64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::invalid("a sample set needs at least one sample"));
        }
        if means.len() != variances.len() || means.len() != seeds.len() {
            return Err(Error::invalid("means, variances and seeds differ in length"));
        }
        let shape = means[0].shape();
        for g in means.iter().chain(&variances) {
            if g.shape() != shape {
                return Err(Error::invalid("sample grids differ in shape"));
            }
        }
        for v in &variances {
            if let Some(bad) = v.as_slice().iter().find(|x| !(**x > 0.0)) {
                return Err(Error::Domain(format!("non-positive sample variance {bad}")));
            }
        }
        Ok(SampleSet {
            means,
            variances,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Grid] {
        &self.means
    }

    pub fn variances(&self) -> &[Grid] {
        &self.variances
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn shape(&self) -> (usize, usize) {
        self.means[0].shape()
    }
}

/// Runs `samples` stochastic passes; pass `t` uses [`sample_seed`]`(base_seed, t)`.
///
/// Passes are spread over the available cores; each is keyed by its index,
/// so the result does not depend on scheduling.
pub fn sample(model: &Model, lr: &Grid, samples: usize, base_seed: u64) -> Result<SampleSet> {
    if !model.config().has_logvar() {
        return Err(Error::State(
            "MC sampling needs a model with a log-variance head".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::invalid("number of samples must be positive"));
    }
    model.check_input(lr)?;
    let seeds: Vec<u64> = (0..samples).map(|t| sample_seed(base_seed, t)).collect();
    let run = |seed: u64| -> Result<(Grid, Grid)> {
        let out = model.forward(lr, true, seed)?;
        let var = predicted_variance(&out, model.config())?;
        Ok((out.mean, var))
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples);
    let results: Vec<Result<(Grid, Grid)>> = if workers <= 1 {
        seeds.iter().map(|&s| run(s)).collect()
    } else {
        let chunk = samples.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&s| run(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sampling thread panicked"))
                .collect()
        })
    };
    let mut means = Vec::with_capacity(samples);
    let mut variances = Vec::with_capacity(samples);
    for r in results {
        let (m, v) = r?;
        means.push(m);
        variances.push(v);
    }
    SampleSet::new(means, variances, seeds)
}

/// Per-pixel predictive mean and variance components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMaps {
    pub predictive_mean: Grid,
    pub epistemic: Grid,
    pub aleatoric: Grid,
    pub total: Grid,
    pub samples: usize,
}

fn clamp_epistemic(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -EPISTEMIC_CLAMP_TOLERANCE {
        Ok(0.0)
    } else {
        Err(Error::Domain(format!("negative epistemic variance {v}")))
    }
}

fn assemble(predictive_mean: Grid, epistemic: Grid, aleatoric: Grid, samples: usize) -> UncertaintyMaps {
    let total = Grid::from_vec(
        epistemic.height(),
        epistemic.width(),
        epistemic
            .as_slice()
            .iter()
            .zip(aleatoric.as_slice())
            .map(|(e, a)| e + a)
            .collect(),
    )
    .expect("matching shapes");
    UncertaintyMaps {
        predictive_mean,
        epistemic,
        aleatoric,
        total,
        samples,
    }
}

/// Two-pass decomposition of a materialized sample set.
pub fn decompose(samples: &SampleSet) -> Result<UncertaintyMaps> {
    let (h, w) = samples.shape();
    let t = samples.len() as f64;
    let n = h * w;
    // Deviations are taken from the first pass so identical passes give an
    // exactly zero spread and an exactly reproduced mean.
    let origin = samples.means[0].as_slice();
    let mut shift = vec![0.0; n];
    let mut ale = vec![0.0; n];
    for (m, v) in samples.means.iter().zip(&samples.variances) {
        for i in 0..n {
            shift[i] += m.as_slice()[i] - origin[i];
            ale[i] += v.as_slice()[i];
        }
    }
    shift.iter_mut().for_each(|x| *x /= t);
    ale.iter_mut().for_each(|x| *x /= t);
    let mut epi = vec![0.0; n];
    for m in &samples.means {
        for i in 0..n {
            let d = m.as_slice()[i] - origin[i] - shift[i];
            epi[i] += d * d;
        }
    }
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s).collect();
    for e in &mut epi {
        *e = clamp_epistemic(*e / t)?;
    }
    Ok(assemble(
        Grid::from_vec(h, w, mean)?,
        Grid::from_vec(h, w, epi)?,
        Grid::from_vec(h, w, ale)?,
        samples.len(),
    ))
}

/// Welford accumulator: memory independent of the number of samples.
#[derive(Clone, Debug)]
pub struct StreamingDecomposer {
    shape: Option<(usize, usize)>,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    var_sum: Vec<f64>,
}

impl Default for StreamingDecomposer {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamingDecomposer {
    pub fn new() -> Self {
        StreamingDecomposer {
            shape: None,
            count: 0,
            mean: Vec::new(),
            m2: Vec::new(),
            var_sum: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, mean: &Grid, variance: &Grid) -> Result<()> {
        mean.ensure_same_shape(variance)?;
        match self.shape {
            None => {
                let n = mean.len();
                self.shape = Some(mean.shape());
                self.mean = vec![0.0; n];
                self.m2 = vec![0.0; n];
                self.var_sum = vec![0.0; n];
            }
            Some(s) if s != mean.shape() => {
                return Err(Error::invalid(format!(
                    "sample shape {:?} differs from {s:?}",
                    mean.shape()
                )))
            }
            Some(_) => {}
        }
        if let Some(bad) = variance.as_slice().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain(format!("non-positive sample variance {bad}")));
        }
        self.count += 1;
        let k = self.count as f64;
        for (i, (&x, &v)) in mean.as_slice().iter().zip(variance.as_slice()).enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / k;
            self.m2[i] += delta * (x - self.mean[i]);
            self.var_sum[i] += v;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<UncertaintyMaps> {
        let (h, w) = self
            .shape
            .ok_or_else(|| Error::invalid("no samples were streamed"))?;
        let t = self.count as f64;
        let epi = self
            .m2
            .iter()
            .map(|m| clamp_epistemic(m / t))
            .collect::<Result<Vec<_>>>()?;
        let ale = self.var_sum.iter().map(|s| s / t).collect();
        Ok(assemble(
            Grid::from_vec(h, w, self.mean)?,
            Grid::from_vec(h, w, epi)?,
            Grid::from_vec(h, w, ale)?,
            self.count,
        ))
    }
}

/// Decomposes a stream of (mean, variance) samples without storing them.
pub fn streaming_decompose<I>(source: I) -> Result<UncertaintyMaps>
where
    I: IntoIterator<Item = (Grid, Grid)>,
{
    let mut acc = StreamingDecomposer::new();
    for (m, v) in source {
        acc.push(&m, &v)?;
    }
    acc.finish()
}

/// Sample-and-decompose without materializing the passes.
pub fn streaming_infer(model: &Model, lr: &Grid, samples: usize, base_seed: u64) -> Result<UncertaintyMaps> {
    if !model.config().has_logvar() {
        return Err(Error::State(
            "MC sampling needs a model with a log-variance head".into(),
        ));
    }
    let mut acc = StreamingDecomposer::new();
    for t in 0..samples {
        let out = model.forward(lr, true, sample_seed(base_seed, t))?;
        let var = predicted_variance(&out, model.config())?;
        acc.push(&out.mean, &var)?;
    }
    acc.finish()
}

/// Metadata stored next to serialized maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsManifest {
    pub format_version: String,
    #[serde(rename = "T")]
    pub samples: usize,
    pub base_seed: u64,
    pub model_snapshot_hash: String,
    #[serde(default)]
    pub input_hash: Option<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub files: Vec<String>,
}

pub const MAP_EXTENSIONS: [&str; 4] = ["MEAN", "EPISTEMIC", "ALEATORIC", "TOTAL"];

/// Compact JSON with every non-ASCII character escaped.
pub fn ascii_json(value: &serde_json::Value) -> String {
    let mut out = String::new();
    for c in value.to_string().chars() {
        if c.is_ascii() {
            out.push(c);
        } else {
            let mut buf = [0u16; 2];
            for unit in c.encode_utf16(&mut buf) {
                out.push_str(&format!("\\u{unit:04x}"));
            }
        }
    }
    out
}

impl UncertaintyMaps {
    pub fn layers(&self) -> [(&'static str, &Grid); 4] {
        [
            (MAP_EXTENSIONS[0], &self.predictive_mean),
            (MAP_EXTENSIONS[1], &self.epistemic),
            (MAP_EXTENSIONS[2], &self.aleatoric),
            (MAP_EXTENSIONS[3], &self.total),
        ]
    }

    /// Multi-extension FITS with `MEAN`, `EPISTEMIC`, `ALEATORIC`, `TOTAL`.
    /// The manifest's config is stored in the primary header as `PROVnnnn`
    /// cards, with its sha256 in `PROVSHA`.
    pub fn to_fits(&self, manifest: &MapsManifest) -> Vec<u8> {
        use fits::{Header, HeaderValue};
        let mut h = Header::default();
        h.set("NSAMPLES", HeaderValue::Int(self.samples as i64));
        h.set("BASESEED", HeaderValue::Str(manifest.base_seed.to_string()));
        h.set("MODELSHA", HeaderValue::Str(manifest.model_snapshot_hash[..16.min(manifest.model_snapshot_hash.len())].into()));
        h.set("BUNIT", HeaderValue::Str("Gauss".into()));
        if !manifest.config.is_null() {
            let json = ascii_json(&manifest.config);
            h.set("PROVSHA", HeaderValue::Str(crate::provenance::sha256_hex(json.as_bytes())));
            h.set_long_string("PROV", &json).expect("ASCII JSON fits in cards");
        }
        fits::write_images(&h, &self.layers(), true)
    }

    pub fn from_fits(bytes: &[u8]) -> Result<Self> {
        let hdus = fits::read_hdus(bytes)?;
        let find = |name: &str| {
            hdus.iter()
                .find(|h| h.name() == Some(name))
                .and_then(|h| h.data.clone())
                .ok_or_else(|| Error::Schema(format!("missing {name} extension")))
        };
        let samples = hdus[0]
            .header
            .get("NSAMPLES")
            .and_then(|v| v.as_i64())
            .ok_or_else(|| Error::Schema("missing NSAMPLES".into()))? as usize;
        Ok(UncertaintyMaps {
            predictive_mean: find("MEAN")?,
            epistemic: find("EPISTEMIC")?,
            aleatoric: find("ALEATORIC")?,
            total: find("TOTAL")?,
            samples,
        })
    }

    /// Four array containers (`mean`, `epistemic`, `aleatoric`, `total`)
    /// plus `maps_manifest.json` in `dir`.
    pub fn save_containers(&self, dir: &Path, manifest: &MapsManifest) -> Result<MapsManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = manifest.clone();
        manifest.files.clear();
        for (name, grid) in self.layers() {
            let stem = name.to_ascii_lowercase();
            let side = container::Sidecar {
                height: grid.height(),
                width: grid.width(),
                unit: if name == "MEAN" { "Gauss" } else { "Gauss^2" }.into(),
                timestamp: None,
                source: "SYNTHETIC".into(),
                id: Some(stem.clone()),
            };
            container::write(&dir.join(&stem), grid, &side)?;
            manifest.files.push(format!("{stem}.f32"));
        }
        let path = dir.join("maps_manifest.json");
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pixel(means: &[f64], vars: &[f64]) -> SampleSet {
        SampleSet::new(
            means.iter().map(|&m| Grid::filled(1, 1, m)).collect(),
            vars.iter().map(|&v| Grid::filled(1, 1, v)).collect(),
            (0..means.len() as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_sample_arithmetic() {
        let maps = decompose(&one_pixel(&[0.0, 2.0], &[1.0, 3.0])).unwrap();
        assert_eq!(maps.predictive_mean.as_slice(), &[1.0]);
        assert_eq!(maps.epistemic.as_slice(), &[1.0]);
        assert_eq!(maps.aleatoric.as_slice(), &[2.0]);
        assert_eq!(maps.total.as_slice(), &[3.0]);
    }

    #[test]
    fn zero_spread() {
        let maps = decompose(&one_pixel(&[1400.5; 7], &[3.0; 7])).unwrap();
        assert_eq!(maps.epistemic.as_slice(), &[0.0]);
        assert_eq!(maps.aleatoric.as_slice(), &[3.0]);
        assert_eq!(maps.predictive_mean.as_slice(), &[1400.5]);
        let single = decompose(&one_pixel(&[-3.0], &[0.5])).unwrap();
        assert_eq!(single.epistemic.as_slice(), &[0.0]);
    }

    #[test]
    fn invalid_sample_sets() {
        assert!(SampleSet::new(vec![], vec![], vec![]).is_err());
        let r = SampleSet::new(vec![Grid::zeros(1, 1)], vec![Grid::zeros(1, 1)], vec![0]);
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = SampleSet::new(
            vec![Grid::zeros(1, 1), Grid::zeros(1, 2)],
            vec![Grid::filled(1, 1, 1.0), Grid::filled(1, 2, 1.0)],
            vec![0, 1],
        );
        assert!(r.is_err());
    }

    #[test]
    fn streaming_edge_cases() {
        assert!(matches!(
            streaming_decompose(std::iter::empty()),
            Err(Error::InvalidArgument(_))
        ));
        let s = streaming_decompose([(Grid::filled(2, 2, 5.0), Grid::filled(2, 2, 1.0))]).unwrap();
        assert!(s.epistemic.as_slice().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn large_offset_stays_accurate() {
        // Raw moments would lose the 1e-3 spread entirely at this offset.
        let means: Vec<f64> = (0..10).map(|i| 1.0e6 + if i % 2 == 0 { 1e-3 } else { -1e-3 }).collect();
        let maps = decompose(&one_pixel(&means, &[1.0; 10])).unwrap();
        assert!((maps.epistemic.as_slice()[0] - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn fits_round_trip() {
        let maps = decompose(&one_pixel(&[0.0, 2.0], &[1.0, 3.0])).unwrap();
        let manifest = MapsManifest {
            format_version: "1".into(),
            samples: 2,
            base_seed: 9,
            model_snapshot_hash: "ab".repeat(32),
            input_hash: None,
            config: serde_json::Value::Null,
            files: vec![],
        };
        let back = UncertaintyMaps::from_fits(&maps.to_fits(&manifest)).unwrap();
        assert_eq!(back, maps);
    }

    #[test]
    fn fits_maps_carry_provenance() {
        let set = one_pixel(&[1.0, 3.0], &[1.0, 1.0]);
        let maps = decompose(&set).unwrap();
        let config = serde_json::json!({"config": {"infer.input": "d\u{e9}j\u{e0}/x.fits"}});
        let manifest = MapsManifest {
            format_version: "1".into(),
            samples: 2,
            base_seed: 0,
            model_snapshot_hash: "ab".repeat(32),
            input_hash: None,
            config: config.clone(),
            files: Vec::new(),
        };
        let bytes = maps.to_fits(&manifest);
        let (header, _) = fits::read_first_image(&bytes).unwrap();
        let json = header.long_string("PROV").unwrap();
        assert!(json.is_ascii());
        assert_eq!(serde_json::from_str::<serde_json::Value>(&json).unwrap(), config);
        assert_eq!(UncertaintyMaps::from_fits(&bytes).unwrap(), maps);
    }

}
