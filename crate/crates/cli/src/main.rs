use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gptq_cli::config::{resolve, Defaults, Overrides, Preset};
use gptq_cli::report::{self, render_table};
use gptq_cli::{build_fixture, run_eval, run_oracle, run_quantize, run_sweep, write_fixture, Factor, FixtureSpec};
use gptq_core::intsim::oracle_csv;
use gptq_core::reconstruct::MaskStrategy;
use gptq_core::tensor::ToyArch;
use gptq_core::{AugmentSpec, DatasetKind, EpsDomain, Granularity, LossKind, OptimizerKind, Scheme};

#[derive(Parser)]
#[command(name = "gptq-lab", version, about = "Gradient-based post-training quantization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a seeded toy classifier and write model, train and test data.
    TrainToy(TrainArgs),
    /// Quantize a model and write the quantized model plus reports.
    Quantize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize once per level of one factor and seed.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// One of loss, optimizer, mask, bias_alpha, eps_domain, scheme,
        /// calib_kind, augmentation.
        #[arg(long)]
        factor: String,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<String>,
        /// Seed set shared by every level; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a model on a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print a run or sweep report as aligned tables.
    Report { dir: PathBuf },
    /// Exhaustive search for the integer weights whose dot product with the
    /// inputs lands closest to a target.
    Oracle {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        inputs: Vec<f64>,
        #[arg(long, allow_hyphen_values = true)]
        target: f64,
        /// Offsets added to the floor of each weight.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,0,1,2")]
        offsets: Vec<i64>,
        /// Also write the result as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Cnn,
    Mlp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "cnn")]
    arch: Arch,
    #[arg(long, default_value_t = FixtureSpec::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = FixtureSpec::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = FixtureSpec::default().train_size)]
    train_size: usize,
    #[arg(long, default_value_t = FixtureSpec::default().test_size)]
    test_size: usize,
    #[arg(long, default_value_t = FixtureSpec::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-scale defaults (10000 iterations, 1024 calibration samples).
    #[arg(long)]
    paper_defaults: bool,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Stored calibration dataset.
    #[arg(long, conflicts_with = "calib_kind")]
    calib: Option<PathBuf>,
    /// Generate calibration data of this kind from the model's data description.
    #[arg(long)]
    calib_kind: Option<DatasetKind>,
    #[arg(long)]
    calib_seed: Option<u64>,
    #[arg(long)]
    calib_size: Option<usize>,
    /// Stored evaluation dataset.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    act_bits: Option<u32>,
    #[arg(long)]
    edge_bits: Option<u32>,
    #[arg(long)]
    eps_domain: Option<EpsDomain>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    mask: Option<MaskStrategy>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    bias_alpha: Option<f64>,
    #[arg(long)]
    no_bias_correction: bool,
    /// `dropout`, `mixup`, `cutout` or `noise`, optionally `:magnitude`.
    #[arg(long)]
    augment: Option<AugmentSpec>,
    #[arg(long)]
    mixed_precision: bool,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<gptq_cli::ExperimentConfig> {
        let overrides = Overrides {
            model: self.model.clone(),
            calib: self.calib.clone(),
            calib_kind: self.calib_kind,
            calib_seed: self.calib_seed,
            eval: self.eval.clone(),
            scheme: self.scheme.clone(),
            bits: self.bits,
            act_bits: self.act_bits,
            edge_bits: self.edge_bits,
            domain: self.eps_domain,
            beta: self.beta,
            optimizer: self.optimizer,
            lr: self.lr,
            loss: self.loss,
            mask: self.mask,
            mask_fraction: self.mask_fraction,
            bias_alpha: self.bias_alpha,
            bias_correction: self.no_bias_correction.then_some(false),
            augment: self.augment,
            mixed_precision: self.mixed_precision,
            granularity: self.granularity,
            iterations: self.iters,
            batch_size: self.batch,
            calib_size: self.calib_size,
            seed: self.seed,
        };
        let defaults = if self.paper_defaults { Defaults::Full } else { Defaults::Desk };
        resolve(defaults, self.preset, self.config.as_deref(), &overrides)
    }
}

fn train_toy(a: &TrainArgs) -> Result<()> {
    if a.out.exists() {
        bail!("output directory {} already exists", a.out.display());
    }
    let spec = FixtureSpec {
        arch: match a.arch {
            Arch::Cnn => ToyArch::Cnn,
            Arch::Mlp => ToyArch::Mlp,
        },
        classes: a.classes,
        noise: a.noise,
        train_size: a.train_size,
        test_size: a.test_size,
        epochs: a.epochs,
        seed: a.seed,
    };
    let f = build_fixture(&spec)?;
    if let Err(e) = write_fixture(&f, &a.out) {
        let _ = std::fs::remove_dir_all(&a.out);
        return Err(e);
    }
    println!("train accuracy {:.4}", f.train_accuracy);
    println!("test accuracy  {:.4}", f.test_accuracy);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_report(dir: &Path) -> Result<()> {
    for (name, with_header) in [(report::REPORT, true), ("sweep.csv", true), (report::TIMING, false)] {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let (pairs, body) = report::parse(&text);
        if with_header {
            let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in &pairs {
                println!("{k:<width$}  {v}");
            }
            println!();
        }
        print!("{}", render_table(&body)?);
        println!();
    }
    if !dir.join(report::REPORT).exists() && !dir.join("sweep.csv").exists() {
        bail!("{} holds neither a run report nor a sweep table", dir.display());
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    match Cli::parse().command {
        Command::TrainToy(a) => train_toy(&a),
        Command::Quantize { run, out } => {
            let cfg = run.resolve()?;
            let o = run_quantize(&cfg, &out)?;
            for u in &o.report.units {
                println!(
                    "unit {} [{}, {}): nearest l2 {:.6e} final l2 {:.6e}{}",
                    u.index,
                    u.start,
                    u.end,
                    u.nearest_l2,
                    u.final_l2,
                    if u.fallback { " (fallback)" } else { "" }
                );
            }
            if let (Some(fp), Some(q)) = (o.fp_accuracy, o.accuracy) {
                println!("accuracy: full precision {fp:.4}, quantized {q:.4}");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Sweep {
            run,
            factor,
            levels,
            seeds,
            out,
        } => {
            let factor: Factor = factor.parse()?;
            let cfg = run.resolve()?;
            let seeds = if seeds.is_empty() { vec![cfg.gptq.seed] } else { seeds };
            let rows = run_sweep(&cfg, factor, &levels, &seeds, &out)?;
            for r in &rows {
                let accs: Vec<String> = r
                    .accuracies
                    .iter()
                    .map(|a| a.map_or("n/a".into(), |a| format!("{a:.4}")))
                    .collect();
                println!("{factor} = {}: {}", r.level, accs.join(" "));
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { model, data } => {
            println!("{}", run_eval(&model, &data)?);
            Ok(())
        }
        Command::Report { dir } => print_report(&dir),
        Command::Oracle {
            weights,
            inputs,
            target,
            offsets,
            out,
        } => {
            let r = run_oracle(&weights, &inputs, target, &offsets)?;
            let text = oracle_csv(std::slice::from_ref(&r))?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
