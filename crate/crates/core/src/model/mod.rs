//! Dropout-instrumented encoder-decoder with mean and log-variance heads.
//!
//! Layout for `depth = D`, `base_channels = C`, scale factor `s`:
//!
//! ```text
//! LR → stem conv → res block ─┬→ stride-2 conv → res block ─┬→ … (D−1 times)
//!                             skip                          skip
//!   … → [×2 upsample → conv → + skip] (D−1 times) → conv(C·s²) → pixel shuffle
//!   → mean head (+ nearest-upsampled input) / log-variance head
//! ```
//!
//! Every hidden convolution is followed by dropout; the two heads are not.
//! Internally the network works on fields divided by `field_scale`.

mod graph;
pub mod snapshot;
pub mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::rng_from;

pub(crate) use graph::{DropoutMode, NodeId, Tape, Tensor};
pub use graph::LayerSpec;

/// Log-variance outputs are clamped to this normalized range.
const LOGVAR_MIN: f64 = -40.0;
const LOGVAR_MAX: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    MeanOnly,
    MeanAndLogvar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale_factor: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_p: f64,
    /// σ̄² in Gauss², added to exp(log-variance).
    pub variance_floor: f64,
    pub heads: Heads,
    /// Gauss per internal unit.
    pub field_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale_factor: 2,
            base_channels: 32,
            depth: 3,
            dropout_p: 0.2,
            variance_floor: 0.0,
            heads: Heads::MeanOnly,
            field_scale: 1000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor < 1 {
            return Err(Error::invalid("scale_factor must be positive"));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::invalid("base_channels and depth must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.variance_floor >= 0.0) || !self.variance_floor.is_finite() {
            return Err(Error::invalid("variance_floor must be finite and non-negative"));
        }
        if self.heads == Heads::MeanAndLogvar && self.variance_floor <= 0.0 {
            return Err(Error::invalid(
                "variance_floor must be positive for a mean_and_logvar model",
            ));
        }
        if !(self.field_scale > 0.0) || !self.field_scale.is_finite() {
            return Err(Error::invalid("field_scale must be positive"));
        }
        Ok(())
    }

    /// LR height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn has_logvar(&self) -> bool {
        self.heads == Heads::MeanAndLogvar
    }
}

/// One forward pass, in Gauss.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub mean: Grid,
    /// ln σ̃² in ln Gauss²; present iff the model has a log-variance head.
    pub log_variance: Option<Grid>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub loss: Option<crate::loss::LossKind>,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    pub metadata: TrainingMetadata,
}

/// Indices of each role within the layer table.
struct Roles {
    stem: usize,
    res: Vec<(usize, usize)>,
    down: Vec<usize>,
    up: Vec<usize>,
    shuffle: usize,
    head_mean: usize,
    head_logvar: Option<usize>,
}

fn layer_table(config: &ModelConfig) -> (Vec<LayerSpec>, Roles) {
    let c = config.base_channels;
    let s = config.scale_factor;
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, cin: usize, cout: usize, stride: usize| {
        let spec = LayerSpec {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            weight_offset: offset,
            bias_offset: offset + cout * cin * 9,
        };
        offset = spec.bias_offset + cout;
        layers.push(spec);
        layers.len() - 1
    };
    let stem = add("stem".into(), 1, c, 1);
    let mut res = Vec::new();
    let mut down = Vec::new();
    for level in 0..config.depth {
        if level > 0 {
            down.push(add(format!("down{level}"), c, c, 2));
        }
        let a = add(format!("res{level}a"), c, c, 1);
        let b = add(format!("res{level}b"), c, c, 1);
        res.push((a, b));
    }
    let mut up = Vec::new();
    for level in (1..config.depth).rev() {
        up.push(add(format!("up{level}"), c, c, 1));
    }
    let shuffle = add("shuffle".into(), c, c * s * s, 1);
    let head_mean = add("head_mean".into(), c, 1, 1);
    let head_logvar = config
        .has_logvar()
        .then(|| add("head_logvar".into(), c, 1, 1));
    (
        layers,
        Roles {
            stem,
            res,
            down,
            up,
            shuffle,
            head_mean,
            head_logvar,
        },
    )
}

/// Number of trainable scalars for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let (layers, _) = layer_table(config);
    layers.last().map_or(0, |l| l.bias_offset + l.out_channels)
}

/// Builds a freshly initialized model.
///
/// Hidden weights use He-normal initialization, biases start at zero. The
/// head weights are shrunk so the untrained mean is close to the
/// nearest-neighbour enlargement of the input, and the log-variance bias
/// starts at ln σ̄².
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let (layers, roles) = layer_table(&config);
    let total = parameter_count(&config);
    let mut params = vec![0.0; total];
    let mut rng = rng_from(seed);
    for (i, spec) in layers.iter().enumerate() {
        let fan_in = spec.patch_len() as f64;
        let mut std = (2.0 / fan_in).sqrt();
        if i == roles.head_mean || Some(i) == roles.head_logvar {
            std *= 0.1;
        }
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut params[spec.weight_offset..spec.weight_offset + spec.weight_len()] {
            *w = normal.sample(&mut rng);
        }
    }
    if let Some(lv) = roles.head_logvar {
        let floor_n = config.variance_floor / (config.field_scale * config.field_scale);
        params[layers[lv].bias_offset] = floor_n.ln().clamp(LOGVAR_MIN, LOGVAR_MAX);
    }
    Ok(Model {
        config,
        layers,
        params,
        metadata: TrainingMetadata {
            seed,
            ..Default::default()
        },
    })
}

/// Output node handles of a recorded pass.
pub(crate) struct Trace<'a> {
    pub tape: Tape<'a>,
    pub mean: NodeId,
    pub logvar: Option<NodeId>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<f64>,
        metadata: TrainingMetadata,
    ) -> Result<Self> {
        config.validate()?;
        let (layers, _) = layer_table(&config);
        if params.len() != parameter_count(&config) {
            return Err(Error::Schema(format!(
                "parameter blob has {} values, configuration needs {}",
                params.len(),
                parameter_count(&config)
            )));
        }
        Ok(Model {
            config,
            layers,
            params,
            metadata,
        })
    }

    /// Copy of this model with a different dropout rate or variance floor.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        let (l1, _) = layer_table(&config);
        if l1 != self.layers {
            return Err(Error::invalid("configuration changes the layer layout"));
        }
        config.validate()?;
        Ok(Model {
            config,
            ..self.clone()
        })
    }

    pub fn check_input(&self, lr: &Grid) -> Result<()> {
        let m = self.config.input_multiple();
        let (h, w) = lr.shape();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "LR input {h}x{w} must be non-empty with sides divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Runs the network on the internal (scaled) input and returns the tape.
    pub(crate) fn trace(&self, lr: &Grid, dropout: DropoutMode, record: bool) -> Result<Trace<'_>> {
        self.check_input(lr)?;
        let (_, roles) = layer_table(&self.config);
        let inv = 1.0 / self.config.field_scale;
        let mut t = Tape::new(&self.layers, &self.params, record, dropout);
        let x = t.leaf(Tensor::from_data(
            1,
            lr.height(),
            lr.width(),
            lr.as_slice().iter().map(|v| v * inv).collect(),
        ));
        let hidden = |t: &mut Tape, layer: usize, input: NodeId| {
            let y = t.conv(layer, input);
            let y = t.relu(y);
            t.dropout(y)
        };
        let res_block = |t: &mut Tape, (a, b): (usize, usize), input: NodeId| {
            let r = hidden(t, a, input);
            let r = t.conv(b, r);
            let r = t.dropout(r);
            t.add(input, r)
        };

        let mut a = hidden(&mut t, roles.stem, x);
        a = res_block(&mut t, roles.res[0], a);
        let mut skips = Vec::new();
        for (level, &down) in roles.down.iter().enumerate() {
            skips.push(a);
            a = hidden(&mut t, down, a);
            a = res_block(&mut t, roles.res[level + 1], a);
        }
        for &up in &roles.up {
            let u = t.upsample2(a);
            let u = hidden(&mut t, up, u);
            a = t.add(u, skips.pop().expect("one skip per level"));
        }
        let s = self.config.scale_factor;
        let sh = t.conv(roles.shuffle, a);
        let sh = t.pixel_shuffle(sh, s);
        let sh = t.relu(sh);
        let feat = t.dropout(sh);

        let mean_res = t.conv(roles.head_mean, feat);
        let base = {
            let xv = t.value(x);
            let g = Grid::from_vec(xv.h, xv.w, xv.data.clone())?.upsample_nearest(s);
            t.leaf(Tensor::from_data(1, g.height(), g.width(), g.into_vec()))
        };
        let mean = t.add(mean_res, base);
        let logvar = roles.head_logvar.map(|lv| t.conv(lv, feat));
        Ok(Trace {
            tape: t,
            mean,
            logvar,
        })
    }

    /// Forward pass in Gauss.
    ///
    /// With `stochastic` set, a fresh Bernoulli keep-mask (probability
    /// 1 − p) is drawn per activation from `seed`; otherwise dropout is the
    /// identity, which equals the mask expectation under inverted scaling.
    pub fn forward(&self, lr: &Grid, stochastic: bool, seed: u64) -> Result<ModelOutput> {
        let dropout = if stochastic {
            DropoutMode::Sample {
                p: self.config.dropout_p,
                rng: rng_from(seed),
            }
        } else {
            DropoutMode::Off
        };
        let trace = self.trace(lr, dropout, false)?;
        Ok(self.output_from(&trace))
    }

    pub(crate) fn output_from(&self, trace: &Trace<'_>) -> ModelOutput {
        let scale = self.config.field_scale;
        let m = trace.tape.value(trace.mean);
        let mean = Grid::from_vec(m.h, m.w, m.data.iter().map(|v| v * scale).collect())
            .expect("consistent tensor shape");
        let shift = 2.0 * scale.ln();
        let log_variance = trace.logvar.map(|id| {
            let l = trace.tape.value(id);
            Grid::from_vec(
                l.h,
                l.w,
                l.data.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX) + shift).collect(),
            )
            .expect("consistent tensor shape")
        });
        ModelOutput { mean, log_variance }
    }

    /// Deterministic mean prediction.
    pub fn predict_mean(&self, lr: &Grid) -> Result<Grid> {
        Ok(self.forward(lr, false, 0)?.mean)
    }
}

/// σ² = exp(log-variance) + σ̄², elementwise.
pub fn predicted_variance(output: &ModelOutput, config: &ModelConfig) -> Result<Grid> {
    let lv = output
        .log_variance
        .as_ref()
        .ok_or_else(|| Error::State("model has no log-variance head".into()))?;
    let floor = config.variance_floor;
    Ok(lv.map(|l| l.exp() + floor))
}

/// Uniform random LR patch for smoke tests and benchmarks.
pub fn random_input(h: usize, w: usize, amplitude: f64, seed: u64) -> Grid {
    let mut rng = rng_from(seed);
    Grid::from_fn(h, w, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * amplitude)
}

pub(crate) fn logvar_bounds() -> (f64, f64) {
    (LOGVAR_MIN, LOGVAR_MAX)
}
