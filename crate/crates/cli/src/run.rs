//! Runs: single quantizations, factor sweeps, evaluation and the rounding
//! oracle.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gptq_core::calib::make_dataset_with_shift;
use gptq_core::intsim::{exhaustive_rounding_oracle, offset_candidates, OracleResult};
use gptq_core::reconstruct::UnitReport;
use gptq_core::tensor::{accuracy, load_dataset, load_network, save_network};
use gptq_core::{make_dataset, quantize_network, CalibrationSet, DatasetKind, NetworkRecord, QuantReport};

use crate::config::{echo, validate, ExperimentConfig};
use crate::report::{self, header, Resolved, RunSummary};

/// Output directory guard: removes what the run created unless disarmed.
struct OutDir {
    path: PathBuf,
    created: bool,
    armed: bool,
}

impl OutDir {
    fn create(path: &Path) -> Result<Self> {
        let created = !path.exists();
        if !created {
            let mut entries = fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?;
            if entries.next().is_some() {
                bail!("output directory {} is not empty", path.display());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            created,
            armed: true,
        })
    }

    fn keep(mut self) {
        self.armed = false;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        if self.created {
            let _ = fs::remove_dir_all(&self.path);
        } else if let Ok(entries) = fs::read_dir(&self.path) {
            for e in entries.flatten() {
                let p = e.path();
                let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            }
        }
    }
}

/// Model, calibration data and optional evaluation data of one run.
pub struct Inputs {
    pub net: NetworkRecord,
    pub calib: CalibrationSet,
    pub eval: Option<CalibrationSet>,
    pub resolved: Resolved,
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    validate(cfg)?;
    let net = load_network(&cfg.model).with_context(|| format!("loading model {}", cfg.model.display()))?;
    let world = net.meta.data.clone();
    let (calib, calib_seed) = match &cfg.calib.path {
        Some(p) => (
            load_dataset(p).with_context(|| format!("loading calibration data {}", p.display()))?,
            None,
        ),
        None => {
            let world = world.as_ref().ok_or_else(|| {
                anyhow!("model carries no data description; pass calibration data with --calib")
            })?;
            let seed = cfg.calib.seed.unwrap_or(world.seed);
            let set = make_dataset_with_shift(world, cfg.calib.kind, cfg.gptq.calib_size, seed, cfg.calib.shift)?;
            (set, Some(seed))
        }
    };
    check_shape(&net, &calib)?;
    let (eval, eval_seed) = match (&cfg.eval.path, &world) {
        (Some(p), _) => (
            Some(load_dataset(p).with_context(|| format!("loading evaluation data {}", p.display()))?),
            None,
        ),
        (None, Some(w)) if net.meta.classes.is_some() => {
            let seed = cfg.eval.seed.unwrap_or(w.seed);
            (Some(make_dataset(w, DatasetKind::TestSplit, cfg.eval.size, seed)?), Some(seed))
        }
        _ => (None, None),
    };
    if let Some(e) = &eval {
        check_shape(&net, e)?;
    }
    let resolved = Resolved {
        calib_seed,
        calib_samples: calib.len().min(cfg.gptq.calib_size),
        eval_seed,
        eval_samples: eval.as_ref().map(CalibrationSet::len),
    };
    Ok(Inputs {
        net,
        calib,
        eval,
        resolved,
    })
}

fn check_shape(net: &NetworkRecord, set: &CalibrationSet) -> Result<()> {
    let want = &net.meta.input_shape;
    if !want.is_empty() && set.sample_shape() != want.as_slice() {
        bail!(
            "data samples have shape {:?} but the model expects {:?}",
            set.sample_shape(),
            want
        );
    }
    Ok(())
}

pub struct RunOutcome {
    pub quantized: NetworkRecord,
    pub report: QuantReport,
    pub fp_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Quantizes the configured model without touching the filesystem beyond
/// reading inputs.
pub fn quantize(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<RunOutcome> {
    let (quantized, report) = quantize_network(&inputs.net, &inputs.calib, &cfg.gptq)?;
    let (fp_accuracy, acc) = match &inputs.eval {
        Some(e) => (Some(accuracy(&inputs.net, e)?), Some(accuracy(&quantized, e)?)),
        None => (None, None),
    };
    Ok(RunOutcome {
        quantized,
        report,
        fp_accuracy,
        accuracy: acc,
    })
}

/// Quantizes and writes `out/model`, the report, traces, timings, the
/// allocation table (mixed precision only) and the replayable config.
/// On failure nothing is left behind.
pub fn run_quantize(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let inputs = load_inputs(cfg)?;
    let guard = OutDir::create(out)?;
    let outcome = quantize(cfg, &inputs)?;
    write_outcome(cfg, &inputs, &outcome, out)?;
    guard.keep();
    Ok(outcome)
}

fn write_outcome(cfg: &ExperimentConfig, inputs: &Inputs, o: &RunOutcome, out: &Path) -> Result<()> {
    save_network(&o.quantized, &out.join("model"))?;
    report::write_run(
        out,
        &RunSummary {
            cfg,
            resolved: inputs.resolved.clone(),
            report: &o.report,
            fp_accuracy: o.fp_accuracy,
            accuracy: o.accuracy,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Loss,
    Optimizer,
    Mask,
    BiasAlpha,
    EpsDomain,
    Scheme,
    CalibKind,
    Augmentation,
}

impl Factor {
    pub const ALL: [Factor; 8] = [
        Factor::Loss,
        Factor::Optimizer,
        Factor::Mask,
        Factor::BiasAlpha,
        Factor::EpsDomain,
        Factor::Scheme,
        Factor::CalibKind,
        Factor::Augmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Loss => "loss",
            Factor::Optimizer => "optimizer",
            Factor::Mask => "mask",
            Factor::BiasAlpha => "bias_alpha",
            Factor::EpsDomain => "eps_domain",
            Factor::Scheme => "scheme",
            Factor::CalibKind => "calib_kind",
            Factor::Augmentation => "augmentation",
        }
    }

    /// Echo keys a level of this factor may change.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Factor::Loss => &["gptq.loss"],
            Factor::Optimizer => &["gptq.optimizer"],
            Factor::Mask => &["gptq.mask"],
            Factor::BiasAlpha => &["gptq.bias_alpha"],
            Factor::EpsDomain => &["gptq.domain"],
            Factor::Scheme => &["gptq.scheme"],
            Factor::CalibKind => &["calib.kind", "calib.path"],
            Factor::Augmentation => &["gptq.augment"],
        }
    }

    pub fn apply(self, level: &str, cfg: &mut ExperimentConfig) -> Result<()> {
        let g = &mut cfg.gptq;
        match self {
            Factor::Loss => g.loss = level.parse()?,
            Factor::Optimizer => g.optimizer = level.parse()?,
            Factor::Mask => g.mask = level.parse()?,
            Factor::BiasAlpha => g.bias_alpha = level.parse().with_context(|| format!("bad bias_alpha `{level}`"))?,
            Factor::EpsDomain => g.domain = level.parse()?,
            Factor::Scheme => g.scheme = level.parse()?,
            Factor::CalibKind => {
                let kind: DatasetKind = level.parse()?;
                if kind == DatasetKind::External {
                    bail!("calib_kind levels must be generated kinds");
                }
                cfg.calib.kind = kind;
                cfg.calib.path = None;
            }
            Factor::Augmentation => {
                g.augment = if level == "none" { None } else { Some(level.parse()?) };
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Factor {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL.iter().copied().find(|f| f.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Factor::ALL.iter().map(|f| f.name()).collect();
            anyhow!("unknown sweep factor `{s}`; valid factors: {}", valid.join(", "))
        })
    }
}

/// Echo keys on which two configurations differ.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    echo(a)
        .into_iter()
        .zip(echo(b))
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub level: String,
    /// One entry per seed, in seed order.
    pub accuracies: Vec<Option<f64>>,
    pub units: Vec<Vec<UnitReport>>,
    pub dirs: Vec<PathBuf>,
}

/// Configuration of one sweep cell.
pub fn level_config(base: &ExperimentConfig, factor: Factor, level: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.gptq.seed = seed;
    factor.apply(level, &mut cfg)?;
    let mut reference = base.clone();
    reference.gptq.seed = seed;
    let stray: Vec<String> = config_diff(&reference, &cfg)
        .into_iter()
        .filter(|k| !factor.keys().contains(&k.as_str()))
        .collect();
    if !stray.is_empty() {
        bail!("level `{level}` of {factor} also changes {}", stray.join(", "));
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// One quantization per (level, seed). Each cell is written as a full run
/// under `out/runs/`, and `out/sweep.csv` holds one row per level with a
/// column per seed; `out/units.csv` lists per-unit losses of every cell.
pub fn run_sweep(base: &ExperimentConfig, factor: Factor, levels: &[String], seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>> {
    if levels.is_empty() || seeds.is_empty() {
        bail!("a sweep needs at least one level and one seed");
    }
    let cells: Vec<Vec<ExperimentConfig>> = levels
        .iter()
        .map(|l| seeds.iter().map(|&s| level_config(base, factor, l, s)).collect())
        .collect::<Result<_>>()?;
    // fail on unreadable inputs before creating anything
    let _ = load_inputs(&cells[0][0])?;
    let guard = OutDir::create(out)?;
    let mut rows = Vec::new();
    for (li, (level, cfgs)) in levels.iter().zip(&cells).enumerate() {
        let mut row = SweepRow {
            level: level.clone(),
            accuracies: Vec::new(),
            units: Vec::new(),
            dirs: Vec::new(),
        };
        for cfg in cfgs {
            let dir = out.join("runs").join(format!("level{li}-seed{}", cfg.gptq.seed));
            let o = run_quantize(cfg, &dir).with_context(|| format!("{factor} = {level}, seed {}", cfg.gptq.seed))?;
            row.accuracies.push(o.accuracy);
            row.units.push(o.report.units);
            row.dirs.push(dir);
        }
        rows.push(row);
    }
    write_sweep(base, factor, seeds, &rows, out)?;
    guard.keep();
    Ok(rows)
}

fn write_sweep(base: &ExperimentConfig, factor: Factor, seeds: &[u64], rows: &[SweepRow], out: &Path) -> Result<()> {
    let acc = |v: Option<f64>| v.map_or("none".into(), |v| v.to_string());
    let mut pairs = vec![
        ("report".to_string(), "sweep".to_string()),
        ("factor".into(), factor.to_string()),
        (
            "levels".into(),
            rows.iter().map(|r| r.level.as_str()).collect::<Vec<_>>().join(" "),
        ),
        (
            "seeds".into(),
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
        ),
    ];
    pairs.extend(echo(base).into_iter().map(|(k, v)| (format!("base.{k}"), v)));

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["level".to_string()];
    head.extend(seeds.iter().map(|s| format!("accuracy_seed{s}")));
    head.push("mean_accuracy".into());
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.level.clone()];
        rec.extend(r.accuracies.iter().map(|&a| acc(a)));
        let mean = if r.accuracies.iter().all(Option::is_some) {
            Some(r.accuracies.iter().flatten().sum::<f64>() / r.accuracies.len() as f64)
        } else {
            None
        };
        rec.push(acc(mean));
        w.write_record(&rec)?;
    }
    let mut text = header(&pairs);
    text.push_str(std::str::from_utf8(&w.into_inner()?)?);
    report::write(out, "sweep.csv", &text)?;

    let mut u = csv::Writer::from_writer(Vec::new());
    u.write_record(["level", "seed", "unit", "start", "end", "nearest_l2", "final_l2", "fallback"])?;
    for r in rows {
        for (seed, units) in seeds.iter().zip(&r.units) {
            for x in units {
                u.write_record([
                    r.level.clone(),
                    seed.to_string(),
                    x.index.to_string(),
                    x.start.to_string(),
                    x.end.to_string(),
                    x.nearest_l2.to_string(),
                    x.final_l2.to_string(),
                    x.fallback.to_string(),
                ])?;
            }
        }
    }
    fs::write(out.join("units.csv"), u.into_inner()?).context("writing units.csv")?;
    Ok(())
}

/// Top-1 accuracy of a stored model on a stored labelled dataset.
pub fn run_eval(model: &Path, data: &Path) -> Result<f64> {
    let net = load_network(model).with_context(|| format!("loading model {}", model.display()))?;
    let set = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    check_shape(&net, &set)?;
    Ok(accuracy(&net, &set)?)
}

/// Exhaustive search over `floor(w) + offset` assignments.
pub fn run_oracle(weights: &[f64], inputs: &[f64], target: f64, offsets: &[i64]) -> Result<OracleResult> {
    let candidates = offset_candidates(weights, offsets);
    Ok(exhaustive_rounding_oracle(weights, inputs, &candidates, target)?)
}
