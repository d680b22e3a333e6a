//! Evaluation: the four-variant MSE table, degraded consistency of MC
//! samples, and conditional HR statistics given the LR field.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PatchPair;
use crate::degrade::{degrade, DegradeConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::inference::{sample_seed, SampleSet};
use crate::loss::mse_loss;
use crate::model::train::{
    train_heteroskedastic_stage, train_variant, TrainConfig, TrainedVariant, Variant,
};
use crate::model::{Model, ModelConfig};
use crate::provenance::sha256_hex;

/// Full-corpus MSEs (Gauss²) published for 400,000 HMI magnetograms with
/// 128×128 patches. Reference only: not reproducible at desk scale and
/// never asserted.
pub const REFERENCE_TABLE_MSE: [(Variant, f64); 4] = [
    (Variant::Baseline, 88.45),
    (Variant::Epistemic, 90.00),
    (Variant::Aleatoric, 90.47),
    (Variant::Both, 98.10),
];

/// Anything that produces a deterministic HR mean from an LR patch.
pub trait MeanPredictor {
    fn predict_mean(&self, lr: &Grid) -> Result<Grid>;

    /// Identifies the predictor's configuration in reports.
    fn config_hash(&self) -> String;

    /// Gauss per normalized unit, for the normalized MSE column.
    fn field_scale(&self) -> f64 {
        1.0
    }
}

impl MeanPredictor for Model {
    fn predict_mean(&self, lr: &Grid) -> Result<Grid> {
        Model::predict_mean(self, lr)
    }

    fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self.config()).expect("config serializes"))
    }

    fn field_scale(&self) -> f64 {
        self.config().field_scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    /// Deterministic-pass MSE against HR targets, Gauss².
    pub test_mse: f64,
    /// `test_mse` divided by the squared field scale.
    pub normalized_mse: f64,
    /// MSE of the mean of MC-dropout passes, for dropout variants.
    pub mc_mean_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub n_patches: usize,
    pub config_hash: String,
}

/// Mean of all-zero predictions: mean of y² over the pairs.
pub fn zero_predictor_mse(pairs: &[PatchPair]) -> Result<f64> {
    let zeros: Vec<Grid> = pairs.iter().map(|p| Grid::zeros(p.hr.height(), p.hr.width())).collect();
    let targets: Vec<Grid> = pairs.iter().map(|p| p.hr.clone()).collect();
    mse_loss(&zeros, &targets)
}

fn predictor_mse(predictor: &dyn MeanPredictor, pairs: &[PatchPair]) -> Result<f64> {
    let preds = pairs
        .iter()
        .map(|p| predictor.predict_mean(&p.lr))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Grid> = pairs.iter().map(|p| p.hr.clone()).collect();
    mse_loss(&preds, &targets)
}

/// Deterministic-pass MSE of `predictor` over `test_pairs`.
pub fn evaluate_variant(
    predictor: &dyn MeanPredictor,
    variant: Variant,
    test_pairs: &[PatchPair],
) -> Result<VariantReport> {
    if test_pairs.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let test_mse = predictor_mse(predictor, test_pairs)?;
    let scale = predictor.field_scale();
    Ok(VariantReport {
        variant,
        test_mse,
        normalized_mse: test_mse / (scale * scale),
        mc_mean_mse: None,
        val_mse: None,
        n_patches: test_pairs.len(),
        config_hash: predictor.config_hash(),
    })
}

/// Average of `samples` stochastic mean-head passes.
pub fn mc_mean(model: &Model, lr: &Grid, samples: usize, base_seed: u64) -> Result<Grid> {
    if samples == 0 {
        return Err(Error::invalid("number of samples must be positive"));
    }
    let mut acc: Option<Grid> = None;
    for t in 0..samples {
        let m = model.forward(lr, true, sample_seed(base_seed, t))?.mean;
        acc = Some(match acc {
            None => m,
            Some(a) => a.zip_map(&m, |x, y| x + y)?,
        });
    }
    let k = samples as f64;
    Ok(acc.expect("at least one sample").map(|v| v / k))
}

fn mc_mean_mse(model: &Model, pairs: &[PatchPair], samples: usize, base_seed: u64) -> Result<f64> {
    let preds = pairs
        .iter()
        .map(|p| mc_mean(model, &p.lr, samples, base_seed))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Grid> = pairs.iter().map(|p| p.hr.clone()).collect();
    mse_loss(&preds, &targets)
}

/// Spread of MC samples before and after re-degrading them to LR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean over sample pairs of the RMS difference of HR means.
    pub hr_spread: f64,
    /// Same statistic after degrading every sample mean.
    pub lr_spread: f64,
    /// `lr_spread / hr_spread`, or 0 when the HR spread is 0.
    pub ratio: f64,
}

fn mean_pairwise_rms(grids: &[Grid]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            let a = grids[i].as_slice();
            let b = grids[j].as_slice();
            let ms = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
            total += ms.sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// How much of the disagreement between MC samples survives degradation.
pub fn consistency_check(
    samples: &SampleSet,
    lr_input: &Grid,
    config: &DegradeConfig,
) -> Result<ConsistencyReport> {
    if samples.len() < 2 {
        return Err(Error::invalid("consistency check needs at least two samples"));
    }
    let degraded = samples
        .means()
        .iter()
        .map(|m| degrade(m, config))
        .collect::<Result<Vec<_>>>()?;
    if degraded[0].shape() != lr_input.shape() {
        return Err(Error::invalid(format!(
            "degraded samples are {:?}, LR input is {:?}",
            degraded[0].shape(),
            lr_input.shape()
        )));
    }
    let hr_spread = mean_pairwise_rms(samples.means());
    let lr_spread = mean_pairwise_rms(&degraded);
    let ratio = if hr_spread > 0.0 { lr_spread / hr_spread } else { 0.0 };
    Ok(ConsistencyReport {
        hr_spread,
        lr_spread,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub hr_mean: f64,
    /// Population variance of the HR pixels in the bin.
    pub hr_variance: f64,
}

impl BinStats {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// HR statistics conditional on the LR value of the source block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalStats {
    pub bin_width: f64,
    /// `bins.len() + 1` monotone edges covering the observed LR range.
    pub bin_edges: Vec<f64>,
    pub bins: Vec<BinStats>,
}

impl ConditionalStats {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn non_empty(&self) -> impl Iterator<Item = &BinStats> {
        self.bins.iter().filter(|b| b.count > 0)
    }

    /// `bin_center,count,hr_mean,hr_variance`, one row per non-empty bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,count,hr_mean,hr_variance\n");
        for b in self.non_empty() {
            writeln!(out, "{},{},{},{}", b.center(), b.count, b.hr_mean, b.hr_variance)
                .expect("writing to a String");
        }
        out
    }

    /// Spearman correlation between |bin center| and HR variance over bins
    /// holding at least `min_count` HR pixels.
    pub fn variance_trend(&self, min_count: usize) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .bins
            .iter()
            .filter(|b| b.count >= min_count)
            .map(|b| (b.center().abs(), b.hr_variance))
            .unzip();
        spearman(&x, &y)
    }
}

/// Bins every LR pixel by value (bins aligned to multiples of `bin_width`)
/// and pools the `s × s` HR pixels of its source block into that bin.
pub fn conditional_mapping(pairs: &[PatchPair], bin_width: f64) -> Result<ConditionalStats> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to map"));
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::invalid("bin width must be positive"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pairs {
        let s = p.scale_factor();
        if p.lr.height() * s != p.hr.height() || p.lr.width() * s != p.hr.width() {
            return Err(Error::invalid("pair LR/HR shapes are not related by an integer factor"));
        }
        for &v in p.lr.as_slice() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let origin = (lo / bin_width).floor() * bin_width;
    let n_bins = (((hi - origin) / bin_width).floor() as usize + 1).max(1);
    let index = |v: f64| (((v - origin) / bin_width).floor() as usize).min(n_bins - 1);
    let visit = |f: &mut dyn FnMut(usize, f64)| {
        for p in pairs {
            let s = p.scale_factor();
            for r in 0..p.hr.height() {
                for c in 0..p.hr.width() {
                    f(index(p.lr[(r / s, c / s)]), p.hr[(r, c)]);
                }
            }
        }
    };
    let mut count = vec![0usize; n_bins];
    let mut sum = vec![0.0; n_bins];
    visit(&mut |b, v| {
        count[b] += 1;
        sum[b] += v;
    });
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; n_bins];
    visit(&mut |b, v| sq[b] += (v - mean[b]) * (v - mean[b]));
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| origin + i as f64 * bin_width).collect();
    let bins = (0..n_bins)
        .map(|b| BinStats {
            lo: bin_edges[b],
            hi: bin_edges[b + 1],
            count: count[b],
            hr_mean: mean[b],
            hr_variance: if count[b] > 0 { sq[b] / count[b] as f64 } else { 0.0 },
        })
        .collect();
    Ok(ConditionalStats {
        bin_width,
        bin_edges,
        bins,
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Options for [`run_table1`] beyond the shared model config and budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Options {
    /// MC passes for the supplementary MC-mean column (0 disables it).
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for Table1Options {
    fn default() -> Self {
        Table1Options {
            mc_samples: 20,
            mc_seed: 0,
        }
    }
}

/// Reports plus the trained models, in [`Variant::ALL`] order.
#[derive(Clone, Debug)]
pub struct Table1Run {
    pub reports: Vec<VariantReport>,
    pub trained: Vec<TrainedVariant>,
    pub zero_predictor_mse: f64,
}

impl Table1Run {
    pub fn model(&self, variant: Variant) -> Option<&TrainedVariant> {
        self.trained.iter().find(|t| t.variant == variant)
    }
}

/// Trains and evaluates all four variants with one seed, dataset and budget.
///
/// The mean-only variants are trained first and double as the first stage
/// of their heteroskedastic counterparts, whose σ̄² is the mean-only
/// model's training MSE.
pub fn run_table1(
    train: &[PatchPair],
    val: &[PatchPair],
    test: &[PatchPair],
    base: &ModelConfig,
    budget: &TrainConfig,
    options: &Table1Options,
) -> Result<Table1Run> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let baseline = train_variant(Variant::Baseline, base, train, budget)?;
    let epistemic = train_variant(Variant::Epistemic, base, train, budget)?;
    let aleatoric = train_heteroskedastic_stage(Variant::Aleatoric, base, train, budget, &baseline)?;
    let both = train_heteroskedastic_stage(Variant::Both, base, train, budget, &epistemic)?;
    let trained = vec![baseline, epistemic, aleatoric, both];
    let mut reports = Vec::with_capacity(4);
    for t in &trained {
        let mut report = evaluate_variant(&t.model, t.variant, test)?;
        if !val.is_empty() {
            report.val_mse = Some(predictor_mse(&t.model, val)?);
        }
        if t.variant.uses_dropout() && options.mc_samples > 0 {
            report.mc_mean_mse = Some(mc_mean_mse(&t.model, test, options.mc_samples, options.mc_seed)?);
        }
        reports.push(report);
    }
    Ok(Table1Run {
        reports,
        trained,
        zero_predictor_mse: zero_predictor_mse(test)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text table in the layout of the published comparison.
pub fn render_table(reports: &[VariantReport], zero_predictor_mse: f64) -> String {
    let mut out = String::new();
    writeln!(out, "{:<26} {:>12} {:>12} {:>12} {:>14}", "Models", "MSE", "MC-mean MSE", "Val MSE", "Normalized MSE").unwrap();
    writeln!(out, "{}", "-".repeat(80)).unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<26} {:>12.2} {:>12} {:>12} {:>14.6e}",
            r.variant.label(),
            r.test_mse,
            fmt_opt(r.mc_mean_mse),
            fmt_opt(r.val_mse),
            r.normalized_mse
        )
        .unwrap();
    }
    writeln!(out, "{}", "-".repeat(80)).unwrap();
    writeln!(out, "{:<26} {:>12.2}", "Zero predictor", zero_predictor_mse).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "Full-corpus reference (HMI, 128x128 patches; not reproduced at desk scale):").unwrap();
    for (v, mse) in REFERENCE_TABLE_MSE {
        writeln!(out, "{:<26} {:>12.2}", v.label(), mse).unwrap();
    }
    out
}
