//! Model selection over (alpha, beta) grids and one-parameter ablations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::config::TrainConfig;
use super::train;
use crate::data::DomainDataset;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Source pretext weight of every active task.
    Alpha,
    Beta,
    /// Jigsaw label-space size.
    Permutations,
    GridN,
    /// Target pretext weight of every active task.
    AlphaT,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Permutations => "permutations",
            SweepParam::GridN => "grid_n",
            SweepParam::AlphaT => "alpha_t",
        }
    }

    /// Copy of `config` with the parameter set to `value`.
    pub fn apply(self, config: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = config.clone();
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                invalid(format!("{} takes integer values, got {v}", self.name()))
            }
        };
        match self {
            SweepParam::Alpha => c.set_alpha(value, false),
            SweepParam::AlphaT => c.set_alpha(value, true),
            SweepParam::Beta => c.scenario.beta = value,
            SweepParam::Permutations => c.tasks.permutations = count(value)?,
            SweepParam::GridN => c.tasks.grid_n = count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "permutations" | "P" => Ok(SweepParam::Permutations),
            "grid_n" => Ok(SweepParam::GridN),
            "alpha_t" => Ok(SweepParam::AlphaT),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter {s:?} (expected alpha, beta, permutations, grid_n or alpha_t)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Final-epoch target accuracy, or source validation accuracy without an eval set.
fn final_accuracy(
    config: &TrainConfig,
    sources: &[DomainDataset],
    target: Option<&DomainDataset>,
    eval: Option<&DomainDataset>,
) -> Result<f64> {
    let out = train(config, sources, target, eval)?;
    let last = out.history.last().expect("at least one epoch");
    Ok(last.target_acc.unwrap_or(last.val_acc))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One full run per value and seed; the seed replaces `scenario.seed`.
pub fn ablation_sweep(
    param: SweepParam,
    values: &[f64],
    config: &TrainConfig,
    seeds: &[u64],
    sources: &[DomainDataset],
    target: Option<&DomainDataset>,
    eval: Option<&DomainDataset>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return invalid("sweep needs at least one value and one seed");
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = param.apply(config, value)?;
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            c.scenario.seed = seed;
            accuracies.push(final_accuracy(&c, sources, target, eval)?);
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(SweepRow { value, mean, std, accuracies });
    }
    Ok(rows)
}

/// Picks the (alpha, beta) pair with the best final source-validation
/// accuracy; ties go to the smaller alpha, then the larger beta. Returns the
/// pair and the validation accuracy of every grid point.
pub fn model_select(
    grid: &[(f64, f64)],
    template: &TrainConfig,
    sources: &[DomainDataset],
    target: Option<&DomainDataset>,
) -> Result<((f64, f64), Vec<f64>)> {
    if grid.is_empty() {
        return invalid("empty model-selection grid");
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &(alpha, beta) in grid {
        let mut c = SweepParam::Alpha.apply(template, alpha)?;
        c.scenario.beta = beta;
        c.validate()?;
        let out = train(&c, sources, target, None)?;
        let acc = out.history.last().expect("at least one epoch").val_acc;
        scores.push(acc);
        let better = match best {
            None => true,
            Some((a, b, s)) => acc > s || (acc == s && (alpha < a || (alpha == a && beta > b))),
        };
        if better {
            best = Some((alpha, beta, acc));
        }
    }
    let (a, b, _) = best.expect("non-empty grid");
    Ok(((a, b), scores))
}

const SWEEP_HEADER: &str = "param,value,mean_acc,std_acc,n_seeds,accuracies";

pub fn write_sweep(param: SweepParam, rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        out.push_str(&format!("{param},{},{},{},{},{}\n", r.value, r.mean, r.std, r.accuracies.len(), accs.join(";")));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<(SweepParam, Vec<SweepRow>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Format { line: 0, message: "missing or unexpected sweep header".into() });
    }
    let mut param = None;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |m: &str| Error::Format { line: i + 1, message: m.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let p: SweepParam = f[0].parse().map_err(|_| bad("unknown parameter"))?;
        if param.is_some_and(|q| q != p) {
            return Err(bad("mixed parameters in one sweep file"));
        }
        param = Some(p);
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(SweepRow {
            value: num(f[1])?,
            mean: num(f[2])?,
            std: num(f[3])?,
            accuracies: f[5].split(';').map(num).collect::<Result<_>>()?,
        });
    }
    match param {
        Some(p) => Ok((p, rows)),
        None => Err(Error::Format { line: 1, message: "sweep file has no rows".into() }),
    }
}
