//! Run configuration: flat `key = value` files with dotted namespaces.
//!
//! Every key has a registered type and default. Files and command-line
//! overrides are merged over the defaults, unknown keys are rejected, and
//! the resolved table is embedded in every artifact a run writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::data::{NoiseModel, SyntheticSpec};
use crate::degrade::{default_size, DegradeConfig, GaussianKernel};
use crate::error::{Error, Result};
use crate::model::train::{TrainConfig, Variant};
use crate::model::{Heads, ModelConfig};

pub const CONFIG_FORMAT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Uint,
    Int,
    Float,
    Text,
    Path,
    Choice(&'static [&'static str]),
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    /// `None` marks an optional key that stays unset unless supplied.
    default: Option<&'static str>,
    help: &'static str,
}

const fn key(key: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        kind,
        default,
        help,
    }
}

const VARIANTS: &[&str] = &["baseline", "epistemic", "aleatoric", "both"];

const KEYS: &[KeySpec] = &[
    key("format_version", Kind::Text, Some(CONFIG_FORMAT_VERSION), "config format version"),
    key("seed", Kind::Uint, Some("0"), "base seed for every stochastic step"),
    key("data.dataset", Kind::Path, None, "dataset directory written by `synth`"),
    key("data.split", Kind::Path, None, "split JSON written by `split`; computed from `seed` when unset"),
    key("data.patch_size", Kind::Uint, Some("32"), "HR center-crop size in pixels"),
    key("synth.count", Kind::Uint, Some("200"), "number of synthetic magnetograms"),
    key("synth.hr_size", Kind::Uint, Some("32"), "synthetic image side in pixels"),
    key("synth.regions_min", Kind::Uint, Some("1"), "fewest active regions per image"),
    key("synth.regions_max", Kind::Uint, Some("4"), "most active regions per image"),
    key("synth.amplitude", Kind::Float, Some("1000"), "peak active-region field in Gauss"),
    key("synth.blob_sigma_min", Kind::Float, Some("4"), "smallest active-region width in pixels"),
    key("synth.blob_sigma_max", Kind::Float, Some("8"), "largest active-region width in pixels"),
    key("synth.noise_model", Kind::Choice(&["none", "proportional"]), Some("proportional"), "injected noise law"),
    key("synth.noise_coefficient", Kind::Float, Some("0.05"), "noise std per Gauss of clean field"),
    key("synth.start_year", Kind::Int, Some("2010"), "first year of synthetic timestamps"),
    key("synth.span_years", Kind::Uint, Some("10"), "number of years covered"),
    key("degrade.scale_factor", Kind::Uint, Some("2"), "per-axis downscale factor"),
    key("degrade.kernel_sigma", Kind::Float, None, "Gaussian sigma in HR pixels; scale_factor/2 when unset"),
    key("degrade.kernel_size", Kind::Uint, None, "odd kernel size; 2*ceil(2*sigma)+1 when unset"),
    key("model.base_channels", Kind::Uint, Some("32"), "channels at the finest level"),
    key("model.depth", Kind::Uint, Some("3"), "number of resolution levels"),
    key("model.dropout_p", Kind::Float, Some("0.2"), "dropout rate for dropout variants"),
    key("model.field_scale", Kind::Float, Some("1000"), "Gauss per network unit"),
    key("train.variant", Kind::Choice(VARIANTS), Some("both"), "which variant `train` fits"),
    key("train.epochs", Kind::Uint, Some("20"), "epochs per training stage"),
    key("train.batch_size", Kind::Uint, Some("8"), "pairs per optimizer step"),
    key("train.learning_rate", Kind::Float, Some("0.001"), "Adam step size"),
    key("train.grad_clip", Kind::Float, Some("10"), "global gradient-norm clip; 0 disables"),
    key("infer.snapshot", Kind::Path, None, "weight snapshot for `infer`"),
    key("infer.input", Kind::Path, None, "magnetogram file (FITS or container) for `infer`"),
    key("infer.input_kind", Kind::Choice(&["hr", "lr"]), Some("hr"), "hr: crop and degrade first; lr: use as given"),
    key("infer.samples", Kind::Uint, Some("50"), "MC-dropout passes T"),
    key("infer.base_seed", Kind::Uint, None, "seed for MC passes; `seed` when unset"),
    key("infer.plot_range", Kind::Float, Some("1500"), "symmetric field range of the plot in Gauss"),
    key("eval.bin_width", Kind::Float, Some("50"), "LR bin width in Gauss"),
    key("eval.min_bin_count", Kind::Uint, Some("30"), "bins below this count are excluded from trend tests"),
    key("eval.consistency_samples", Kind::Uint, Some("20"), "MC passes for the consistency check"),
    key("eval.mc_samples", Kind::Uint, Some("20"), "MC passes for the MC-mean MSE column; 0 disables"),
];

fn spec(name: &str) -> Result<&'static KeySpec> {
    KEYS.iter()
        .find(|k| k.key == name)
        .ok_or_else(|| Error::invalid(format!("unknown config key `{name}`")))
}

fn parse_value(spec: &KeySpec, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::invalid(format!("config key `{}`: {raw:?} is not {what}", spec.key));
    Ok(match spec.kind {
        Kind::Uint => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Kind::Int => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Kind::Float => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            Value::from(v)
        }
        Kind::Text | Kind::Path => {
            if raw.is_empty() {
                return Err(bad("a non-empty value"));
            }
            Value::from(raw)
        }
        Kind::Choice(options) => {
            if !options.contains(&raw) {
                return Err(bad(&format!("one of {}", options.join(", "))));
            }
            Value::from(raw)
        }
    })
}

/// Parses `key = value` lines. `#` starts a comment; values may be quoted.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected `key = value`", n + 1)))?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((k.trim().to_string(), v.to_string()));
    }
    Ok(out)
}

/// Resolved configuration: every registered key with a value or unset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|k| {
                let v = k
                    .default
                    .map_or(Value::Null, |d| parse_value(k, d).expect("registered defaults parse"));
                (k.key, v)
            })
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    /// Defaults, then the file at `path` (if any), then `overrides` in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let spec = spec(key)?;
        let value = parse_value(spec, raw)?;
        if spec.key == "format_version" && value != Value::from(CONFIG_FORMAT_VERSION) {
            return Err(Error::Schema(format!(
                "config format version {raw:?}, expected {CONFIG_FORMAT_VERSION:?}"
            )));
        }
        self.values.insert(spec.key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key).filter(|v| !v.is_null())
    }

    fn required(&self, key: &str) -> Result<&Value> {
        spec(key)?;
        self.get(key)
            .ok_or_else(|| Error::invalid(format!("config key `{key}` must be set")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        Ok(self.required(key)?.as_u64().expect("registered as unsigned"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.u64(key)?).map_err(|_| Error::invalid(format!("config key `{key}` is too large")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        Ok(self.required(key)?.as_f64().expect("registered as numeric"))
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        Ok(self.required(key)?.as_str().expect("registered as text"))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.str(key).map(PathBuf::from)
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).and_then(Value::as_str).map(PathBuf::from)
    }

    /// All keys (unset ones as `null`) in sorted order.
    pub fn to_json(&self) -> Value {
        let map: Map<String, Value> = self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        Value::Object(map)
    }

    /// Set keys in the file format; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            match v {
                Value::Null => {}
                Value::String(s) => writeln!(out, "{k} = {s}").expect("write to String"),
                other => writeln!(out, "{k} = {other}").expect("write to String"),
            }
        }
        out
    }

    /// `key  default  help` lines for `--help` style listings.
    pub fn describe_keys() -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "  {:<26} {:<14} {}", k.key, k.default.unwrap_or("(unset)"), k.help)
                .expect("write to String");
        }
        out
    }

    pub fn degrade_config(&self) -> Result<DegradeConfig> {
        let scale = self.usize("degrade.scale_factor")?;
        let sigma = match self.get("degrade.kernel_sigma") {
            Some(v) => v.as_f64().expect("numeric"),
            None => scale as f64 / 2.0,
        };
        let size = match self.get("degrade.kernel_size") {
            Some(_) => self.usize("degrade.kernel_size")?,
            None => default_size(sigma),
        };
        DegradeConfig::new(scale, GaussianKernel::new(size, sigma)?)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            count: self.usize("synth.count")?,
            hr_size: self.usize("synth.hr_size")?,
            active_region_count_range: (self.usize("synth.regions_min")?, self.usize("synth.regions_max")?),
            field_amplitude: self.f64("synth.amplitude")?,
            blob_sigma_range: (self.f64("synth.blob_sigma_min")?, self.f64("synth.blob_sigma_max")?),
            noise_model: match self.str("synth.noise_model")? {
                "none" => NoiseModel::None,
                _ => NoiseModel::Proportional,
            },
            noise_coefficient: self.f64("synth.noise_coefficient")?,
            seed: self.u64("seed")?,
            start_year: i32::try_from(self.required("synth.start_year")?.as_i64().expect("integer"))
                .map_err(|_| Error::invalid("synth.start_year out of range"))?,
            span_years: self.usize("synth.span_years")?,
        };
        spec.validate_for(self.usize("degrade.scale_factor")?)?;
        Ok(spec)
    }

    /// Shared mean-only config; variants adjust heads, dropout and floor.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            scale_factor: self.usize("degrade.scale_factor")?,
            base_channels: self.usize("model.base_channels")?,
            depth: self.usize("model.depth")?,
            dropout_p: self.f64("model.dropout_p")?,
            variance_floor: 0.0,
            heads: Heads::MeanOnly,
            field_scale: self.f64("model.field_scale")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip = self.f64("train.grad_clip")?;
        let cfg = TrainConfig {
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            learning_rate: self.f64("train.learning_rate")?,
            seed: self.u64("seed")?,
            grad_clip: (clip > 0.0).then_some(clip),
        };
        if cfg.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be positive"));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate must be positive"));
        }
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.str("train.variant")?.parse()
    }

    pub fn infer_base_seed(&self) -> Result<u64> {
        match self.get("infer.base_seed") {
            Some(_) => self.u64("infer.base_seed"),
            None => self.u64("seed"),
        }
    }

    /// Checks that the patch size suits the degradation and the network.
    pub fn check_patch_size(&self) -> Result<usize> {
        let patch = self.usize("data.patch_size")?;
        let model = self.model_config()?;
        let multiple = model.scale_factor * model.input_multiple();
        if patch == 0 || patch % multiple != 0 {
            return Err(Error::invalid(format!(
                "data.patch_size {patch} must be a positive multiple of {multiple} (scale factor × network stride)"
            )));
        }
        Ok(patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_components() {
        let cfg = RunConfig::default();
        let d = cfg.degrade_config().unwrap();
        assert_eq!(d.scale_factor, 2);
        assert_eq!(d.kernel.size(), 5);
        assert_eq!(cfg.model_config().unwrap(), ModelConfig::default());
        cfg.synthetic_spec().unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.variant().unwrap(), Variant::Both);
        assert_eq!(cfg.check_patch_size().unwrap(), 32);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\nseed = 7\n\ntrain.variant = \"baseline\"  # trailing\ndegrade.scale_factor=4\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, text).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 9);
        assert_eq!(cfg.variant().unwrap(), Variant::Baseline);
        assert_eq!(cfg.degrade_config().unwrap().kernel.sigma(), 2.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("train.epoch", "3").unwrap_err().to_string();
        assert!(err.contains("train.epoch"), "{err}");
        assert!(cfg.set("train.epochs", "-1").is_err());
        assert!(cfg.set("model.dropout_p", "nan").is_err());
        assert!(cfg.set("train.variant", "all").is_err());
        assert!(matches!(cfg.set("format_version", "2"), Err(Error::Schema(_))));
        assert!(parse_text("no equals sign").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("infer.snapshot", "out/model.snap").unwrap();
        cfg.set("model.dropout_p", "0.1").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in parse_text(&cfg.to_text()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_json()["infer.snapshot"], "out/model.snap");
        assert!(cfg.to_json()["data.split"].is_null());
    }

    #[test]
    fn missing_required_path_is_reported() {
        let err = RunConfig::default().path("infer.snapshot").unwrap_err().to_string();
        assert!(err.contains("infer.snapshot"), "{err}");
    }

    #[test]
    fn patch_size_must_fit_network() {
        let mut cfg = RunConfig::default();
        cfg.set("data.patch_size", "30").unwrap();
        assert!(cfg.check_patch_size().is_err());
    }
}
