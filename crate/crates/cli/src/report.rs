//! CSV outputs. Each report starts with a block of `# key: value` lines
//! followed by an ordinary CSV table.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gptq_core::codec::FloatLayout;
use gptq_core::mixedprec::{allocation_rows, write_allocation_csv};
use gptq_core::optim::Hyper;
use gptq_core::reconstruct::UnitReport;
use gptq_core::{QuantReport, Scheme};

use crate::config::{echo, ExperimentConfig};

pub const REPORT: &str = "report.csv";
pub const TRACES: &str = "traces.csv";
pub const TIMING: &str = "timing.csv";
pub const ALLOCATION: &str = "allocation.csv";
pub const CONFIG: &str = "config.toml";

/// Values the run derived from defaults rather than read from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub calib_seed: Option<u64>,
    pub calib_samples: usize,
    pub eval_seed: Option<u64>,
    pub eval_samples: Option<usize>,
}

pub fn header(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    s
}

fn derived_pairs(cfg: &ExperimentConfig, r: &Resolved) -> Vec<(String, String)> {
    let g = &cfg.gptq;
    let mut h = Hyper::defaults(g.optimizer);
    if let Some(lr) = g.lr {
        h.lr = lr;
    }
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    let mut out = vec![
        ("resolved.beta".to_string(), g.beta().to_string()),
        ("resolved.optimizer.lr".into(), h.lr.to_string()),
        ("resolved.optimizer.beta1".into(), h.beta1.to_string()),
        ("resolved.optimizer.beta2".into(), h.beta2.to_string()),
        ("resolved.optimizer.eps".into(), h.eps.to_string()),
        ("resolved.optimizer.momentum".into(), h.momentum.to_string()),
        ("resolved.optimizer.weight_decay".into(), h.weight_decay.to_string()),
        ("resolved.optimizer.alpha".into(), h.alpha.to_string()),
        ("resolved.optimizer.rho".into(), h.rho.to_string()),
        ("resolved.calib.seed".into(), opt(r.calib_seed.map(|v| v.to_string()))),
        ("resolved.calib.samples".into(), r.calib_samples.to_string()),
        ("resolved.eval.seed".into(), opt(r.eval_seed.map(|v| v.to_string()))),
        ("resolved.eval.samples".into(), opt(r.eval_samples.map(|v| v.to_string()))),
    ];
    if let Scheme::Float(layout) = &g.scheme {
        let l = layout.unwrap_or_else(|| FloatLayout::for_bits(g.bits));
        out.push((
            "resolved.float_layout".into(),
            format!("e{}m{}", l.exponent_bits, l.mantissa_bits),
        ));
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

/// Everything a run writes besides the model directory.
pub struct RunSummary<'a> {
    pub cfg: &'a ExperimentConfig,
    pub resolved: Resolved,
    pub report: &'a QuantReport,
    pub fp_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn write_run(dir: &Path, s: &RunSummary) -> Result<()> {
    let mut pairs = vec![("report".to_string(), "quantize".to_string())];
    pairs.extend(echo(s.cfg));
    pairs.extend(derived_pairs(s.cfg, &s.resolved));
    let zero: Vec<String> = s
        .report
        .zero_scale_channels
        .iter()
        .map(|(l, c)| format!("{l}/{c}"))
        .collect();
    pairs.push((
        "zero_scale_channels".into(),
        if zero.is_empty() { "none".into() } else { zero.join(" ") },
    ));
    pairs.push(("fp_accuracy".into(), fmt_opt(s.fp_accuracy)));
    pairs.push(("quantized_accuracy".into(), fmt_opt(s.accuracy)));
    if let Some(a) = &s.report.allocation {
        pairs.push(("allocation.target_bits".into(), a.allocation.target.to_string()));
        pairs.push(("allocation.mean_bits".into(), a.allocation.mean().to_string()));
        pairs.push(("allocation.feasible".into(), a.allocation.feasible.to_string()));
        pairs.push(("allocation.sensitivity_mean".into(), a.stats.mean.to_string()));
        pairs.push(("allocation.sensitivity_std".into(), a.stats.std.to_string()));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "unit",
        "start",
        "end",
        "nearest_l2",
        "final_l2",
        "corrected_l2",
        "fallback",
        "best_step",
        "skipped_steps",
        "boundary_inits",
        "diagnostic",
    ])?;
    for u in &s.report.units {
        w.write_record([
            u.index.to_string(),
            u.start.to_string(),
            u.end.to_string(),
            u.nearest_l2.to_string(),
            u.final_l2.to_string(),
            u.corrected_l2.to_string(),
            u.fallback.to_string(),
            u.best_step.to_string(),
            u.skipped_steps.to_string(),
            u.boundary_inits.to_string(),
            u.diagnostic.clone().unwrap_or_default(),
        ])?;
    }
    let mut text = header(&pairs);
    text.push_str(std::str::from_utf8(&w.into_inner()?)?);
    write(dir, REPORT, &text)?;

    write(dir, TRACES, &traces_csv(&s.report.units)?)?;

    let mut t = csv::Writer::from_writer(Vec::new());
    t.write_record(["unit", "elapsed_secs"])?;
    for u in &s.report.units {
        t.write_record([u.index.to_string(), format!("{:.6}", u.elapsed_secs)])?;
    }
    fs::write(dir.join(TIMING), t.into_inner()?).context("writing timing")?;

    if let Some(a) = &s.report.allocation {
        let mut buf = Vec::new();
        write_allocation_csv(&allocation_rows(&a.stats, &a.allocation), &mut buf)?;
        fs::write(dir.join(ALLOCATION), buf).context("writing allocation")?;
    }
    write(dir, CONFIG, &crate::config::to_toml(s.cfg)?)?;
    Ok(())
}

fn traces_csv(units: &[UnitReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["unit", "step", "train_loss", "val_loss"])?;
    for u in units {
        for p in &u.trace {
            w.write_record([
                u.index.to_string(),
                p.step.to_string(),
                p.train_loss.to_string(),
                p.val_loss.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Splits a report into its header pairs and CSV body.
pub fn parse(text: &str) -> (Vec<(String, String)>, String) {
    let mut pairs = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        match line.strip_prefix("# ") {
            Some(rest) => {
                let (k, v) = rest.split_once(": ").unwrap_or((rest, ""));
                pairs.push((k.to_string(), v.to_string()));
            }
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    (pairs, body)
}

/// Renders CSV text as an aligned plain-text table.
pub fn render_table(csv_text: &str) -> Result<String> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips() {
        let pairs = vec![("a".to_string(), "1".to_string()), ("b.c".into(), "x: y".into())];
        let text = format!("{}h1,h2\n1,2\n", header(&pairs));
        let (back, body) = parse(&text);
        assert_eq!(back, pairs);
        assert_eq!(body, "h1,h2\n1,2\n");
    }

    #[test]
    fn table_aligns_columns() {
        let t = render_table("a,bbb\ncccc,d\n").unwrap();
        assert_eq!(t, "a     bbb\ncccc  d\n");
    }
}
