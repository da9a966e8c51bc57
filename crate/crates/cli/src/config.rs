//! Experiment configuration.
//!
//! Settings are layered in a fixed order, later layers winning:
//!
//! 1. built-in defaults (desk scale, or the full-scale defaults with
//!    `--paper-defaults`),
//! 2. a named preset (`--preset best-practice`),
//! 3. the TOML file given with `--config`,
//! 4. individual command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gptq_core::calib::DEFAULT_SHIFT;
use gptq_core::reconstruct::MaskStrategy;
use gptq_core::{DatasetKind, EpsDomain, GptqConfig, LossKind, MaskSpec, OptimizerKind};
use serde::{Deserialize, Serialize};

/// Where calibration samples come from. Without `path` they are generated
/// from the data description stored in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub kind: DatasetKind,
    /// Generator seed; the model's data seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub shift: f64,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            path: None,
            kind: DatasetKind::TrainSplit,
            seed: None,
            shift: DEFAULT_SHIFT,
        }
    }
}

/// Held-out data used to report accuracy. Without `path` a test split of
/// `size` samples is generated from the model's data description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            path: None,
            size: 4096,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub calib: CalibSpec,
    pub eval: EvalSpec,
    pub gptq: GptqConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defaults {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    BestPractice,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-practice" | "best_practice" => Ok(Preset::BestPractice),
            _ => bail!("unknown preset `{s}`; valid presets: best-practice"),
        }
    }
}

impl Preset {
    pub fn apply(self, cfg: &mut GptqConfig) {
        match self {
            Preset::BestPractice => {
                cfg.loss = LossKind::L2;
                cfg.mask = MaskSpec::none();
                cfg.bias_alpha = 0.0;
                cfg.optimizer = OptimizerKind::Adamax;
                cfg.domain = EpsDomain::Real;
                cfg.mixed_precision = true;
            }
        }
    }
}

pub fn base_gptq(defaults: Defaults) -> GptqConfig {
    match defaults {
        Defaults::Full => GptqConfig::default(),
        Defaults::Desk => GptqConfig {
            iterations: 2000,
            calib_size: 256,
            batch_size: 32,
            ..GptqConfig::default()
        },
    }
}

/// Individual flag overrides; `None` leaves the layered value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub calib_kind: Option<DatasetKind>,
    pub calib_seed: Option<u64>,
    pub eval: Option<PathBuf>,
    pub scheme: Option<gptq_core::Scheme>,
    pub bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub edge_bits: Option<u32>,
    pub domain: Option<EpsDomain>,
    pub beta: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub loss: Option<LossKind>,
    pub mask: Option<MaskStrategy>,
    pub mask_fraction: Option<f64>,
    pub bias_alpha: Option<f64>,
    pub bias_correction: Option<bool>,
    pub augment: Option<gptq_core::AugmentSpec>,
    pub mixed_precision: bool,
    pub granularity: Option<gptq_core::Granularity>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub calib_size: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let g = &mut cfg.gptq;
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = &self.calib {
            cfg.calib.path = Some(v.clone());
        }
        if let Some(v) = self.calib_kind {
            cfg.calib.kind = v;
            cfg.calib.path = None;
        }
        if let Some(v) = self.calib_seed {
            cfg.calib.seed = Some(v);
        }
        if let Some(v) = &self.eval {
            cfg.eval.path = Some(v.clone());
        }
        if let Some(v) = &self.scheme {
            g.scheme = v.clone();
        }
        macro_rules! set {
            ($($field:ident <- $src:ident),+) => {
                $(if let Some(v) = self.$src { g.$field = v; })+
            };
        }
        set!(bits <- bits, act_bits <- act_bits, edge_bits <- edge_bits, domain <- domain,
             optimizer <- optimizer, loss <- loss, bias_alpha <- bias_alpha,
             bias_correction <- bias_correction, granularity <- granularity,
             iterations <- iterations, batch_size <- batch_size, calib_size <- calib_size, seed <- seed);
        if self.beta.is_some() {
            g.beta = self.beta;
        }
        if self.lr.is_some() {
            g.lr = self.lr;
        }
        if let Some(s) = self.mask {
            g.mask.strategy = s;
        }
        if let Some(f) = self.mask_fraction {
            g.mask.fraction = f;
        }
        if self.augment.is_some() {
            g.augment = self.augment;
        }
        if self.mixed_precision {
            g.mixed_precision = true;
        }
    }
}

/// Deep-merges `patch` into `base`; tables merge key by key, anything else
/// is replaced.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves the layered configuration.
pub fn resolve(
    defaults: Defaults,
    preset: Option<Preset>,
    file: Option<&Path>,
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let mut gptq = base_gptq(defaults);
    if let Some(p) = preset {
        p.apply(&mut gptq);
    }
    let mut cfg = ExperimentConfig {
        model: PathBuf::new(),
        calib: CalibSpec::default(),
        eval: EvalSpec::default(),
        gptq,
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg = apply_toml(&cfg, &text).with_context(|| format!("parsing config {}", path.display()))?;
    }
    overrides.apply(&mut cfg);
    validate(&cfg)?;
    Ok(cfg)
}

/// Layers TOML text over `base`, rejecting unknown keys.
pub fn apply_toml(base: &ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let patch: toml::Table = toml::from_str(text)?;
    let mut table = toml::Table::try_from(base)?;
    merge(&mut table, patch);
    Ok(table.try_into()?)
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.model.as_os_str().is_empty() {
        bail!("no model given (use --model or `model` in the config file)");
    }
    if cfg.calib.path.is_some() && cfg.calib.kind != DatasetKind::TrainSplit && cfg.calib.kind != DatasetKind::External
    {
        bail!("calibration `path` and a generated `kind` ({}) are mutually exclusive", cfg.calib.kind);
    }
    if cfg.calib.path.is_none() && cfg.calib.kind == DatasetKind::External {
        bail!("calibration kind `external` needs a `path`");
    }
    if cfg.eval.size == 0 {
        bail!("eval size must be positive");
    }
    cfg.gptq.validate()?;
    Ok(())
}

/// Serializes a resolved configuration so it can be replayed with `--config`.
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}

/// Every configuration field as `(key, value)` text, in a fixed order.
pub fn echo(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
    let num = |v: Option<u64>| v.map_or("none".into(), |v| v.to_string());
    let mut out = vec![
        ("model".to_string(), cfg.model.display().to_string()),
        ("calib.path".into(), path(&cfg.calib.path)),
        ("calib.kind".into(), cfg.calib.kind.to_string()),
        ("calib.seed".into(), num(cfg.calib.seed)),
        ("calib.shift".into(), cfg.calib.shift.to_string()),
        ("eval.path".into(), path(&cfg.eval.path)),
        ("eval.size".into(), cfg.eval.size.to_string()),
        ("eval.seed".into(), num(cfg.eval.seed)),
    ];
    out.extend(cfg.gptq.echo().into_iter().map(|(k, v)| (format!("gptq.{k}"), v)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_model() -> Overrides {
        Overrides {
            model: Some("m".into()),
            ..Default::default()
        }
    }

    #[test]
    fn desk_and_full_defaults() {
        let d = resolve(Defaults::Desk, None, None, &with_model()).unwrap();
        assert_eq!((d.gptq.iterations, d.gptq.calib_size, d.gptq.batch_size), (2000, 256, 32));
        let p = resolve(Defaults::Full, None, None, &with_model()).unwrap();
        assert_eq!((p.gptq.iterations, p.gptq.calib_size, p.gptq.batch_size), (10_000, 1024, 32));
    }

    #[test]
    fn preset_binds_the_combined_pipeline() {
        let c = resolve(Defaults::Desk, Some(Preset::BestPractice), None, &with_model()).unwrap();
        assert_eq!(c.gptq.loss, LossKind::L2);
        assert_eq!(c.gptq.mask, MaskSpec::none());
        assert_eq!(c.gptq.bias_alpha, 0.0);
        assert_eq!(c.gptq.optimizer, OptimizerKind::Adamax);
        assert_eq!(c.gptq.domain, EpsDomain::Real);
        assert!(c.gptq.mixed_precision);
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "model = \"a\"\n[gptq]\noptimizer = \"sgd\"\nbits = 3\n").unwrap();
        let c = resolve(Defaults::Desk, Some(Preset::BestPractice), Some(&f), &Overrides::default()).unwrap();
        assert_eq!(c.gptq.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.gptq.bits, 3);
        assert_eq!(c.model, PathBuf::from("a"));
        let o = Overrides {
            bits: Some(5),
            ..Default::default()
        };
        let c = resolve(Defaults::Desk, None, Some(&f), &o).unwrap();
        assert_eq!(c.gptq.bits, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let base = resolve(Defaults::Desk, None, None, &with_model()).unwrap();
        assert!(apply_toml(&base, "[gptq]\nbitz = 3\n").is_err());
        assert!(apply_toml(&base, "extra = 1\n").is_err());
        assert!(apply_toml(&base, "[calib]\nsize = 3\n").is_err());
    }

    #[test]
    fn serialized_config_replays_exactly() {
        let o = Overrides {
            model: Some("m".into()),
            beta: Some(12.5),
            augment: Some("mixup:0.3".parse().unwrap()),
            mask: Some(MaskStrategy::MagnitudeLow),
            mask_fraction: Some(0.25),
            ..Default::default()
        };
        let c = resolve(Defaults::Desk, Some(Preset::BestPractice), None, &o).unwrap();
        let text = to_toml(&c).unwrap();
        let fresh = resolve(Defaults::Full, None, None, &with_model()).unwrap();
        assert_eq!(apply_toml(&fresh, &text).unwrap(), c);
    }

    #[test]
    fn missing_model_rejected() {
        assert!(resolve(Defaults::Desk, None, None, &Overrides::default()).is_err());
    }

    #[test]
    fn echo_covers_every_gptq_field() {
        let c = resolve(Defaults::Desk, None, None, &with_model()).unwrap();
        let keys: Vec<String> = echo(&c).into_iter().map(|(k, _)| k).collect();
        let table = toml::Table::try_from(&GptqConfig {
            lr: Some(1.0),
            beta: Some(1.0),
            augment: Some("noise".parse().unwrap()),
            ..c.gptq.clone()
        })
        .unwrap();
        for k in table.keys() {
            assert!(keys.contains(&format!("gptq.{k}")), "{k} missing from echo");
        }
    }
}
