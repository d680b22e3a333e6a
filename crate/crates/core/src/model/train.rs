//! Minibatch Adam training and the two-stage heteroskedastic procedure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_model, logvar_bounds, DropoutMode, Heads, Model, ModelConfig};
use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{heteroskedastic_nll, mse_loss, LossKind};
use crate::rng::{derive_labeled, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            grad_clip: Some(10.0),
        }
    }
}

/// One row of the training log. Losses are in physical units: Gauss² for
/// MSE, and the NLL evaluated on fields in Gauss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (stochastic when dropout is on).
    pub running_loss: Option<f64>,
    /// Deterministic-pass loss over the full training set.
    pub eval_loss: Option<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Loss of one item in internal units, accumulating parameter gradients
/// scaled by `weight`.
pub(crate) fn item_loss_and_grad(
    model: &Model,
    pair: &PatchPair,
    loss: LossKind,
    dropout_seed: Option<u64>,
    weight: f64,
    grads: &mut [f64],
) -> Result<f64> {
    let cfg = model.config();
    let dropout = match dropout_seed {
        Some(seed) if cfg.dropout_p > 0.0 => DropoutMode::Sample {
            p: cfg.dropout_p,
            rng: rng_from(seed),
        },
        _ => DropoutMode::Off,
    };
    let trace = model.trace(&pair.lr, dropout, true)?;
    let mean = &trace.tape.value(trace.mean).data;
    if mean.len() != pair.hr.len() {
        return Err(Error::invalid(format!(
            "model output {} pixels, target {:?}",
            mean.len(),
            pair.hr.shape()
        )));
    }
    let inv = 1.0 / cfg.field_scale;
    let n = mean.len() as f64;
    let target = pair.hr.as_slice();
    match loss {
        LossKind::Mse => {
            let mut seed = Vec::with_capacity(mean.len());
            let mut total = 0.0;
            for (f, y) in mean.iter().zip(target) {
                let r = f - y * inv;
                total += r * r;
                seed.push(2.0 * r / n * weight);
            }
            trace.tape.backward(vec![(trace.mean, seed)], grads);
            Ok(total / n)
        }
        LossKind::Heteroskedastic => {
            let lv_id = trace
                .logvar
                .ok_or_else(|| Error::State("heteroskedastic loss needs a log-variance head".into()))?;
            let lv = &trace.tape.value(lv_id).data;
            let floor_n = cfg.variance_floor * inv * inv;
            let (lo, hi) = logvar_bounds();
            let mut d_mean = Vec::with_capacity(mean.len());
            let mut d_lv = Vec::with_capacity(mean.len());
            let mut total = 0.0;
            for ((f, y), l) in mean.iter().zip(target).zip(lv) {
                let lc = l.clamp(lo, hi);
                let e = lc.exp();
                let v = e + floor_n;
                let r = y * inv - f;
                total += r * r / (2.0 * v) + 0.5 * v.ln();
                d_mean.push(-r / v / n * weight);
                let dv = 0.5 / v - r * r / (2.0 * v * v);
                d_lv.push(if *l > lo && *l < hi { dv * e / n * weight } else { 0.0 });
            }
            trace.tape.backward(vec![(trace.mean, d_mean), (lv_id, d_lv)], grads);
            Ok(total / n)
        }
    }
}

fn to_physical(loss: LossKind, internal: f64, field_scale: f64) -> f64 {
    match loss {
        LossKind::Mse => internal * field_scale * field_scale,
        LossKind::Heteroskedastic => internal + field_scale.ln(),
    }
}

/// Deterministic-pass objective over `pairs`, in physical units.
pub fn objective(model: &Model, pairs: &[PatchPair], loss: LossKind) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut means = Vec::with_capacity(pairs.len());
    let mut vars = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.forward(&p.lr, false, 0)?;
        if loss == LossKind::Heteroskedastic {
            vars.push(super::predicted_variance(&out, model.config())?);
        }
        means.push(out.mean);
    }
    let targets: Vec<Grid> = pairs.iter().map(|p| p.hr.clone()).collect();
    match loss {
        LossKind::Mse => mse_loss(&means, &targets),
        LossKind::Heteroskedastic => Ok(heteroskedastic_nll(&means, &vars, &targets)?.total),
    }
}

/// Deterministic-pass MSE of the mean head over `pairs`, Gauss².
pub fn deterministic_mse(model: &Model, pairs: &[PatchPair]) -> Result<f64> {
    objective(model, pairs, LossKind::Mse)
}

/// Trains `model` in place with minibatch Adam.
///
/// Each epoch visits the pairs in an order drawn from (seed, epoch); each
/// item gets its own dropout stream keyed by its global step. Row 0 of the
/// returned log is the objective before any update; the last row carries
/// the objective after training.
pub fn train(
    model: &mut Model,
    pairs: &[PatchPair],
    loss: LossKind,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<Vec<EpochRecord>> {
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("batch_size and learning_rate must be positive"));
    }
    if loss == LossKind::Heteroskedastic && model.config().heads != Heads::MeanAndLogvar {
        return Err(Error::State("heteroskedastic loss needs a log-variance head".into()));
    }
    let scale = model.config().field_scale;
    let mut log = vec![EpochRecord {
        stage: stage.into(),
        epoch: 0,
        running_loss: None,
        eval_loss: Some(objective(model, pairs, loss)?),
    }];
    let n_params = model.params().len();
    let mut adam = Adam::new(n_params, cfg.learning_rate);
    let mut grads = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_from(derive_labeled(cfg.seed, "shuffle", epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let seed = derive_labeled(cfg.seed, "dropout", step);
                step += 1;
                let l = item_loss_and_grad(model, &pairs[i], loss, Some(seed), weight, &mut grads)?;
                epoch_loss += l;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let k = clip / norm;
                    grads.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam.step(model.params_mut(), &grads);
        }
        let running = to_physical(loss, epoch_loss / pairs.len() as f64, scale);
        if !running.is_finite() {
            return Err(Error::Domain(format!("training diverged at epoch {epoch}")));
        }
        log.push(EpochRecord {
            stage: stage.into(),
            epoch,
            running_loss: Some(running),
            eval_loss: None,
        });
    }
    if let Some(last) = log.last_mut().filter(|r| r.epoch > 0) {
        last.eval_loss = Some(objective(model, pairs, loss)?);
    }
    model.metadata.loss = Some(loss);
    model.metadata.epochs += cfg.epochs;
    model.metadata.seed = cfg.seed;
    Ok(log)
}

/// The four training regimes compared in the MSE table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// MSE loss, no dropout.
    Baseline,
    /// MSE loss with dropout.
    Epistemic,
    /// Heteroskedastic loss, no dropout.
    Aleatoric,
    /// Heteroskedastic loss with dropout.
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Epistemic,
        Variant::Aleatoric,
        Variant::Both,
    ];

    pub fn uses_dropout(self) -> bool {
        matches!(self, Variant::Epistemic | Variant::Both)
    }

    pub fn heteroskedastic(self) -> bool {
        matches!(self, Variant::Aleatoric | Variant::Both)
    }

    /// The mean-only variant that serves as this one's first stage.
    pub fn homoskedastic_counterpart(self) -> Variant {
        if self.uses_dropout() {
            Variant::Epistemic
        } else {
            Variant::Baseline
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Epistemic => "epistemic",
            Variant::Aleatoric => "aleatoric",
            Variant::Both => "both",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline (MSE)",
            Variant::Epistemic => "+ Epistemic",
            Variant::Aleatoric => "+ Aleatoric",
            Variant::Both => "+ Epistemic & Aleatoric",
        }
    }

    /// Model configuration for this variant, derived from a shared base.
    /// `variance_floor` is only used by heteroskedastic variants.
    pub fn model_config(self, base: &ModelConfig, variance_floor: f64) -> ModelConfig {
        ModelConfig {
            dropout_p: if self.uses_dropout() { base.dropout_p } else { 0.0 },
            heads: if self.heteroskedastic() {
                Heads::MeanAndLogvar
            } else {
                Heads::MeanOnly
            },
            variance_floor: if self.heteroskedastic() { variance_floor } else { 0.0 },
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Result of training one variant end to end.
#[derive(Clone, Debug)]
pub struct TrainedVariant {
    pub variant: Variant,
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// σ̄² used by a heteroskedastic variant; the first stage's training MSE.
    pub variance_floor: Option<f64>,
}

/// Trains a mean-only variant directly.
fn train_homoskedastic(
    variant: Variant,
    base: &ModelConfig,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainedVariant> {
    let mut model = build_model(variant.homoskedastic_counterpart().model_config(base, 0.0), cfg.seed)?;
    let log = train(&mut model, pairs, LossKind::Mse, cfg, stage)?;
    Ok(TrainedVariant {
        variant: variant.homoskedastic_counterpart(),
        model,
        log,
        variance_floor: None,
    })
}

/// Second stage of a heteroskedastic variant, given its trained
/// mean-only counterpart: σ̄² is that model's deterministic MSE on the
/// training pairs.
pub fn train_heteroskedastic_stage(
    variant: Variant,
    base: &ModelConfig,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
    first_stage: &TrainedVariant,
) -> Result<TrainedVariant> {
    if !variant.heteroskedastic() {
        return Err(Error::invalid(format!("{} is not heteroskedastic", variant.as_str())));
    }
    if first_stage.variant != variant.homoskedastic_counterpart() {
        return Err(Error::invalid("first stage does not match the variant's dropout setting"));
    }
    let floor = deterministic_mse(&first_stage.model, pairs)?;
    if !(floor > 0.0) {
        return Err(Error::Domain(format!("homoskedastic MSE {floor} is not positive")));
    }
    let mut model = build_model(variant.model_config(base, floor), cfg.seed)?;
    let mut log = first_stage.log.clone();
    log.push(EpochRecord {
        stage: "variance_floor".into(),
        epoch: first_stage.log.last().map_or(0, |r| r.epoch),
        running_loss: None,
        eval_loss: Some(floor),
    });
    log.extend(train(&mut model, pairs, LossKind::Heteroskedastic, cfg, "heteroskedastic")?);
    Ok(TrainedVariant {
        variant,
        model,
        log,
        variance_floor: Some(floor),
    })
}

/// Trains any variant; heteroskedastic ones run both stages.
pub fn train_variant(
    variant: Variant,
    base: &ModelConfig,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<TrainedVariant> {
    if variant.heteroskedastic() {
        let first = train_homoskedastic(variant, base, pairs, cfg, "homoskedastic")?;
        train_heteroskedastic_stage(variant, base, pairs, cfg, &first)
    } else {
        train_homoskedastic(variant, base, pairs, cfg, "mse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairProvenance, PatchPair};
    use crate::degrade::DegradeConfig;
    use crate::model::random_input;

    fn tiny_config(heads: Heads, p: f64, floor: f64) -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            depth: 2,
            dropout_p: p,
            variance_floor: floor,
            heads,
            field_scale: 100.0,
            ..Default::default()
        }
    }

    fn pair(seed: u64) -> PatchPair {
        let cfg = DegradeConfig::with_scale(2).unwrap();
        let hr = random_input(8, 8, 150.0, seed);
        PatchPair::from_hr(
            hr,
            &cfg,
            PairProvenance {
                source_id: "t".into(),
                top: 0,
                left: 0,
                cleaned_count: 0,
            },
        )
        .unwrap()
    }

    /// Central differences of the item loss against tape gradients, over
    /// every parameter of a tiny network.
    fn check_gradients(model: &Model, loss: LossKind, dropout_seed: Option<u64>) {
        let p = pair(1);
        let mut grads = vec![0.0; model.params().len()];
        item_loss_and_grad(model, &p, loss, dropout_seed, 1.0, &mut grads).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..model.params().len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[i] += delta;
                let mut scratch = vec![0.0; grads.len()];
                item_loss_and_grad(&m, &p, loss, dropout_seed, 1.0, &mut scratch).unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (fd - grads[i]).abs() / (1e-4 + fd.abs().max(grads[i].abs()));
            worst = worst.max(err);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn network_gradients_mse() {
        let m = build_model(tiny_config(Heads::MeanOnly, 0.0, 0.0), 3).unwrap();
        check_gradients(&m, LossKind::Mse, None);
    }

    #[test]
    fn network_gradients_nll_with_dropout() {
        let m = build_model(tiny_config(Heads::MeanAndLogvar, 0.2, 50.0), 4).unwrap();
        check_gradients(&m, LossKind::Heteroskedastic, Some(17));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let pairs: Vec<_> = (0..6).map(pair).collect();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 3,
            learning_rate: 3e-3,
            seed: 5,
            grad_clip: Some(10.0),
        };
        let base = tiny_config(Heads::MeanOnly, 0.2, 0.0);
        let a = train_variant(Variant::Epistemic, &base, &pairs, &cfg).unwrap();
        let first = a.log.first().unwrap().eval_loss.unwrap();
        let last = a.log.last().unwrap().eval_loss.unwrap();
        assert!(last < first, "{last} !< {first}");
        let b = train_variant(Variant::Epistemic, &base, &pairs, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn two_stage_floor_equals_stage_one_mse() {
        let pairs: Vec<_> = (0..4).map(pair).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let base = tiny_config(Heads::MeanOnly, 0.2, 0.0);
        let t = train_variant(Variant::Both, &base, &pairs, &cfg).unwrap();
        let floor = t.variance_floor.unwrap();
        assert!(floor > 0.0);
        assert_eq!(t.model.config().variance_floor, floor);
        assert!(t.log.iter().any(|r| r.stage == "variance_floor" && r.eval_loss == Some(floor)));
    }

    #[test]
    fn nll_on_mean_only_model_is_state_error() {
        let mut m = build_model(tiny_config(Heads::MeanOnly, 0.0, 0.0), 0).unwrap();
        let r = train(&mut m, &[pair(0)], LossKind::Heteroskedastic, &TrainConfig::default(), "x");
        assert!(matches!(r, Err(Error::State(_))));
    }
}
