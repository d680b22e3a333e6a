//! The `magsr` command line: `synth`, `split`, `train`, `infer`, `eval`.
//!
//! Each command resolves a [`RunConfig`], writes its outputs into a staging
//! directory next to `--out`, and moves it into place only once every
//! output is written and checked. A failed run leaves no output behind.
//! Every output directory holds `run.json`, which records the resolved
//! config, the hashes of the inputs, and the hashes of the outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, CONFIG_FORMAT_VERSION};
use crate::data::dataset::{read_dataset, write_dataset};
use crate::data::{
    available_months, center_crop, generate_synthetic, ingest, make_pairs, make_temporal_split, Partition,
    PatchPair, SplitAssignment,
};
use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::eval::{conditional_mapping, consistency_check, render_table, run_table1, Table1Options, REFERENCE_TABLE_MSE};
use crate::inference::{decompose, sample, MapsManifest};
use crate::model::snapshot::{load_snapshot, save_snapshot_with};
use crate::model::train::{train_variant, EpochRecord, Variant};
use crate::plot::uncertainty_figure;
use crate::provenance::{dataset_hash, sha256_file};

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Parser)]
#[command(
    name = "magsr",
    version,
    about = "Uncertainty-aware super-resolution of solar magnetograms",
    after_help = "Any config key can be overridden as `--<key> <value>` or `--<key>=<value>`, \
                  e.g. `--train.epochs 5`. Run `magsr keys` for the list."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic magnetogram dataset.
    Synth(Common),
    /// Assign each month to train, val or test.
    Split(Common),
    /// Train one variant and write its weight snapshot.
    Train(Common),
    /// Run MC-dropout inference and write uncertainty maps.
    Infer(Common),
    /// Train all four variants and write the evaluation reports.
    Eval(Common),
    /// List every config key with its default.
    Keys,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Splits `--a.b value` / `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')))
            .map(str::to_string);
        match dotted {
            Some(flag) => match flag.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let value = it
                        .next()
                        .and_then(|v| v.into_string().ok())
                        .ok_or_else(|| Error::invalid(format!("--{flag} needs a value")))?;
                    overrides.push((flag, value));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("magsr: error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("magsr: error: {e}");
            1
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::Keys => {
            print!("{}", RunConfig::describe_keys());
            return Ok(());
        }
        Command::Synth(c) => ("synth", c),
        Command::Split(c) => ("split", c),
        Command::Train(c) => ("train", c),
        Command::Infer(c) => ("infer", c),
        Command::Eval(c) => ("eval", c),
    };
    let mut overrides = overrides.to_vec();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let config = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    let mut run = Run::start(name, config, &common.out, common.force)?;
    match name {
        "synth" => cmd_synth(&mut run)?,
        "split" => cmd_split(&mut run)?,
        "train" => cmd_train(&mut run)?,
        "infer" => cmd_infer(&mut run)?,
        _ => cmd_eval(&mut run)?,
    }
    run.commit()
}

/// `run.json`: what ran, with which config, on which inputs, producing what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: String,
    pub command: String,
    pub config: Value,
    /// Input name → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file → sha256.
    pub outputs: BTreeMap<String, String>,
}

/// One command invocation writing into a staging directory.
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    out: PathBuf,
    staging: PathBuf,
    force: bool,
    committed: bool,
}

impl Run {
    /// Validates `out` and creates an empty staging directory beside it.
    pub fn start(command: &'static str, config: RunConfig, out: &Path, force: bool) -> Result<Self> {
        if out.exists() {
            if !force {
                return Err(Error::invalid(format!(
                    "output directory {} already exists; pass --force to replace it",
                    out.display()
                )));
            }
            let empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
            if !empty && !out.join(RUN_RECORD).is_file() {
                return Err(Error::invalid(format!(
                    "refusing to replace {}: it holds no {RUN_RECORD}, so it was not written by magsr",
                    out.display()
                )));
            }
        }
        let name = out
            .file_name()
            .ok_or_else(|| Error::invalid(format!("output path {} has no directory name", out.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Run {
            command,
            config,
            inputs: BTreeMap::new(),
            out: out.to_path_buf(),
            staging,
            force,
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    /// Config and input hashes, embedded in every artifact.
    pub fn provenance(&self) -> Value {
        json!({
            "format_version": CONFIG_FORMAT_VERSION,
            "command": self.command,
            "config": self.config.to_json(),
            "inputs": self.inputs,
        })
    }

    pub fn write(&self, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(file, &bytes)
    }

    /// `#`-prefixed provenance line for CSV outputs.
    pub fn csv_preamble(&self) -> String {
        format!("# provenance: {}\n", self.provenance())
    }

    fn commit(mut self) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for entry in fs::read_dir(&self.staging).map_err(|e| Error::io(&self.staging, e))? {
            let entry = entry.map_err(|e| Error::io(&self.staging, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            outputs.insert(name, sha256_file(&entry.path())?);
        }
        let record = RunRecord {
            format_version: CONFIG_FORMAT_VERSION.into(),
            command: self.command.into(),
            config: self.config.to_json(),
            inputs: self.inputs.clone(),
            outputs,
        };
        self.write_json(RUN_RECORD, &record)?;
        if self.out.exists() && self.force {
            fs::remove_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        }
        fs::rename(&self.staging, &self.out).map_err(|e| Error::io(&self.out, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

pub fn cmd_synth(run: &mut Run) -> Result<()> {
    let spec = run.config.synthetic_spec()?;
    let maps = generate_synthetic(&spec)?;
    write_dataset(&run.staging, &maps, run.provenance())?;
    Ok(())
}

/// `split.json`: the assignment plus the provenance of the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub format_version: String,
    #[serde(flatten)]
    pub split: SplitAssignment,
    pub provenance: Value,
}

pub fn load_split(path: &Path) -> Result<SplitAssignment> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn cmd_split(run: &mut Run) -> Result<()> {
    let dir = run.config.path("data.dataset")?;
    let (_, maps) = read_dataset(&dir)?;
    run.inputs.insert("dataset".into(), dataset_hash(&dir)?);
    let split = make_temporal_split(&available_months(&maps), run.config.u64("seed")?)?;
    let file = SplitFile {
        format_version: CONFIG_FORMAT_VERSION.into(),
        split,
        provenance: run.provenance(),
    };
    run.write_json("split.json", &file)
}

/// Train, val and test pairs from the dataset and split named in the config.
pub struct Partitions {
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
}

impl Partitions {
    pub fn all(&self) -> impl Iterator<Item = &PatchPair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn load_partitions(run: &mut Run) -> Result<Partitions> {
    let cfg = &run.config;
    let patch = cfg.check_patch_size()?;
    let degrade_cfg = cfg.degrade_config()?;
    let dir = cfg.path("data.dataset")?;
    let split_path = cfg.optional_path("data.split");
    let seed = cfg.u64("seed")?;
    let (_, maps) = read_dataset(&dir)?;
    run.inputs.insert("dataset".into(), dataset_hash(&dir)?);
    let split = match split_path {
        Some(path) => {
            run.inputs.insert("split".into(), sha256_file(&path)?);
            load_split(&path)?
        }
        None => make_temporal_split(&available_months(&maps), seed)?,
    };
    if let Some(m) = maps.iter().find(|m| m.year_month().and_then(|ym| split.partition_of(ym)).is_none()) {
        return Err(Error::invalid(format!("magnetogram {} falls in no split partition", m.id)));
    }
    let pairs = |part| -> Result<Vec<PatchPair>> {
        let selected: Vec<_> = split.select(&maps, part).into_iter().cloned().collect();
        make_pairs(&selected, patch, &degrade_cfg)
    };
    let parts = Partitions {
        train: pairs(Partition::Train)?,
        val: pairs(Partition::Val)?,
        test: pairs(Partition::Test)?,
    };
    if parts.train.is_empty() {
        return Err(Error::invalid("training partition is empty"));
    }
    Ok(parts)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn log_csv(preamble: &str, log: &[EpochRecord]) -> String {
    let mut out = String::from(preamble);
    out.push_str("stage,epoch,running_loss,eval_loss\n");
    for r in log {
        writeln!(out, "{},{},{},{}", r.stage, r.epoch, fmt_opt(r.running_loss), fmt_opt(r.eval_loss))
            .expect("write to String");
    }
    out
}

fn ensure_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} is not finite ({v})")))
    }
}

pub fn cmd_train(run: &mut Run) -> Result<()> {
    let variant = run.config.variant()?;
    let base = run.config.model_config()?;
    let budget = run.config.train_config()?;
    let parts = load_partitions(run)?;
    let trained = train_variant(variant, &base, &parts.train, &budget)?;
    for r in &trained.log {
        for v in r.running_loss.iter().chain(&r.eval_loss) {
            ensure_finite(&format!("{} loss at epoch {}", r.stage, r.epoch), *v)?;
        }
    }
    let header = save_snapshot_with(&trained.model, run.path("model.snap"), run.provenance())?;
    run.write("train_log.csv", log_csv(&run.csv_preamble(), &trained.log).as_bytes())?;
    let val_mse = if parts.val.is_empty() {
        None
    } else {
        Some(crate::model::train::deterministic_mse(&trained.model, &parts.val)?)
    };
    let summary = json!({
        "format_version": CONFIG_FORMAT_VERSION,
        "provenance": run.provenance(),
        "variant": variant,
        "param_count": header.param_count,
        "payload_sha256": header.payload_sha256,
        "variance_floor": trained.variance_floor,
        "train_pairs": parts.train.len(),
        "val_pairs": parts.val.len(),
        "val_mse": val_mse,
    });
    run.write_json("train_summary.json", &summary)
}

pub fn cmd_infer(run: &mut Run) -> Result<()> {
    let snapshot = run.config.path("infer.snapshot")?;
    let input = run.config.path("infer.input")?;
    let samples = run.config.usize("infer.samples")?;
    let base_seed = run.config.infer_base_seed()?;
    let range = run.config.f64("infer.plot_range")?;
    let degrade_cfg = run.config.degrade_config()?;
    if samples == 0 {
        return Err(Error::invalid("infer.samples must be positive"));
    }
    if !snapshot.is_file() {
        return Err(Error::invalid(format!("infer.snapshot: no snapshot file at {}", snapshot.display())));
    }
    let model = load_snapshot(&snapshot)?;
    if model.config().scale_factor != degrade_cfg.scale_factor {
        return Err(Error::invalid(format!(
            "snapshot was trained for scale factor {}, config has {}",
            model.config().scale_factor,
            degrade_cfg.scale_factor
        )));
    }
    let snapshot_hash = sha256_file(&snapshot)?;
    let input_hash = sha256_file(&input)?;
    run.inputs.insert("snapshot".into(), snapshot_hash.clone());
    run.inputs.insert("input".into(), input_hash.clone());
    let magnetogram = ingest(&input)?;
    let (lr, target) = match run.config.str("infer.input_kind")? {
        "hr" => {
            let hr = center_crop(&magnetogram.pixels, run.config.check_patch_size()?)?;
            (degrade(&hr, &degrade_cfg)?, Some(hr))
        }
        _ => (magnetogram.pixels.clone(), None),
    };
    let maps = decompose(&sample(&model, &lr, samples, base_seed)?)?;
    for (name, grid) in maps.layers() {
        if !grid.is_finite() {
            return Err(Error::Domain(format!("{name} map has non-finite values")));
        }
    }
    let manifest = MapsManifest {
        format_version: CONFIG_FORMAT_VERSION.into(),
        samples,
        base_seed,
        model_snapshot_hash: snapshot_hash,
        input_hash: Some(input_hash),
        config: run.provenance(),
        files: Vec::new(),
    };
    run.write("maps.fits", &maps.to_fits(&manifest))?;
    maps.save_containers(&run.staging, &manifest)?;
    let figure = uncertainty_figure(target.as_ref(), &maps, range)?;
    let provenance = run.provenance().to_string();
    run.write("uncertainty.png", &figure.encode_png(&[("magsr-provenance", &provenance)])?)
}

/// Consistency of MC samples with the LR input, per test pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub samples: usize,
    pub mean_ratio: f64,
    pub per_pair: Vec<(String, crate::eval::ConsistencyReport)>,
}

pub fn cmd_eval(run: &mut Run) -> Result<()> {
    let base = run.config.model_config()?;
    let budget = run.config.train_config()?;
    let bin_width = run.config.f64("eval.bin_width")?;
    let min_count = run.config.usize("eval.min_bin_count")?;
    let consistency_samples = run.config.usize("eval.consistency_samples")?;
    let options = Table1Options {
        mc_samples: run.config.usize("eval.mc_samples")?,
        mc_seed: run.config.u64("seed")?,
    };
    let degrade_cfg = run.config.degrade_config()?;
    if consistency_samples < 2 {
        return Err(Error::invalid("eval.consistency_samples must be at least 2"));
    }
    let parts = load_partitions(run)?;
    if parts.test.is_empty() {
        return Err(Error::invalid("test partition is empty"));
    }
    let table = run_table1(&parts.train, &parts.val, &parts.test, &base, &budget, &options)?;
    for r in &table.reports {
        ensure_finite(&format!("{} test MSE", r.variant.as_str()), r.test_mse)?;
    }
    let reference: BTreeMap<&str, f64> = REFERENCE_TABLE_MSE.iter().map(|(v, m)| (v.as_str(), *m)).collect();
    run.write_json(
        "table1.json",
        &json!({
            "format_version": CONFIG_FORMAT_VERSION,
            "provenance": run.provenance(),
            "zero_predictor_mse": table.zero_predictor_mse,
            "reports": table.reports,
            "full_corpus_reference_mse": reference,
        }),
    )?;
    run.write("table1.txt", render_table(&table.reports, table.zero_predictor_mse).as_bytes())?;

    let all: Vec<PatchPair> = parts.all().cloned().collect();
    let stats = conditional_mapping(&all, bin_width)?;
    run.write("conditional_stats.csv", format!("{}{}", run.csv_preamble(), stats.to_csv()).as_bytes())?;
    run.write_json(
        "conditional_stats.json",
        &json!({
            "format_version": CONFIG_FORMAT_VERSION,
            "provenance": run.provenance(),
            "min_bin_count": min_count,
            "variance_trend_spearman": stats.variance_trend(min_count),
            "stats": stats,
        }),
    )?;

    let both = &table.model(Variant::Both).expect("run_table1 trains every variant").model;
    let seed = run.config.u64("seed")?;
    let mut per_pair = Vec::with_capacity(parts.test.len());
    for p in &parts.test {
        let set = sample(both, &p.lr, consistency_samples, seed)?;
        let report = consistency_check(&set, &p.lr, &degrade_cfg)?;
        ensure_finite("consistency ratio", report.ratio)?;
        per_pair.push((p.provenance.source_id.clone(), report));
    }
    let mean_ratio = per_pair.iter().map(|(_, r)| r.ratio).sum::<f64>() / per_pair.len() as f64;
    run.write_json(
        "consistency.json",
        &json!({
            "format_version": CONFIG_FORMAT_VERSION,
            "provenance": run.provenance(),
            "variant": Variant::Both,
            "consistency": ConsistencySummary {
                samples: consistency_samples,
                mean_ratio,
                per_pair,
            },
        }),
    )
}


#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(os(&[
            "magsr", "train", "--out", "x", "--train.epochs", "3", "--model.depth=2", "--force",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["magsr", "train", "--out", "x", "--force"]));
        assert_eq!(
            ov,
            vec![("train.epochs".into(), "3".into()), ("model.depth".into(), "2".into())]
        );
        assert!(split_overrides(os(&["magsr", "--train.epochs"])).is_err());
    }

    #[test]
    fn existing_output_needs_force_and_a_run_record() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("keep.txt"), "x").unwrap();
        assert!(Run::start("synth", RunConfig::default(), &out, false).is_err());
        assert!(Run::start("synth", RunConfig::default(), &out, true).is_err());
        assert!(out.join("keep.txt").exists());
        fs::write(out.join(RUN_RECORD), "{}").unwrap();
        let run = Run::start("synth", RunConfig::default(), &out, true).unwrap();
        run.write("a.txt", b"a").unwrap();
        run.commit().unwrap();
        assert!(out.join("a.txt").exists());
        assert!(!out.join("keep.txt").exists());
    }

    #[test]
    fn failed_run_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        {
            let run = Run::start("synth", RunConfig::default(), &out, false).unwrap();
            run.write("a.txt", b"a").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
