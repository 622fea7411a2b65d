//! Per-epoch metrics and their CSV form.
//!
//! Every file has the same columns; values that do not apply to a run are
//! left empty. `gamma` joins the class weights with `;`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transforms::TaskKind;

pub const METRICS_COLUMNS: [&str; 16] = [
    "epoch",
    "config_hash",
    "lr",
    "lambda",
    "object_loss",
    "pretext_loss_jigsaw",
    "pretext_loss_rotation",
    "entropy",
    "target_pretext_loss_jigsaw",
    "target_pretext_loss_rotation",
    "adversarial",
    "val_acc",
    "target_acc",
    "pretext_acc_jigsaw",
    "pretext_acc_rotation",
    "gamma",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub config_hash: String,
    pub lr: f64,
    pub lambda: f64,
    pub object_loss: f64,
    pub pretext_loss: BTreeMap<TaskKind, f64>,
    pub entropy: Option<f64>,
    pub target_pretext_loss: BTreeMap<TaskKind, f64>,
    pub adversarial: Option<f64>,
    pub val_acc: f64,
    pub target_acc: Option<f64>,
    pub pretext_acc: BTreeMap<TaskKind, f64>,
    pub gamma: Option<Vec<f64>>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, line: usize, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Format { line, message: format!("bad {column} value {field:?}") })
}

fn task_map(j: Option<f64>, r: Option<f64>) -> BTreeMap<TaskKind, f64> {
    [(TaskKind::Jigsaw, j), (TaskKind::Rotation, r)].into_iter().filter_map(|(t, v)| v.map(|v| (t, v))).collect()
}

impl MetricsRecord {
    fn to_row(&self) -> String {
        let task = |m: &BTreeMap<TaskKind, f64>, t| opt(m.get(&t).copied());
        [
            self.epoch.to_string(),
            self.config_hash.clone(),
            self.lr.to_string(),
            self.lambda.to_string(),
            self.object_loss.to_string(),
            task(&self.pretext_loss, TaskKind::Jigsaw),
            task(&self.pretext_loss, TaskKind::Rotation),
            opt(self.entropy),
            task(&self.target_pretext_loss, TaskKind::Jigsaw),
            task(&self.target_pretext_loss, TaskKind::Rotation),
            opt(self.adversarial),
            self.val_acc.to_string(),
            opt(self.target_acc),
            task(&self.pretext_acc, TaskKind::Jigsaw),
            task(&self.pretext_acc, TaskKind::Rotation),
            self.gamma
                .as_ref()
                .map(|g| g.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
        ]
        .join(",")
    }

    fn from_row(row: &str, line: usize) -> Result<Self> {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != METRICS_COLUMNS.len() {
            return Err(Error::Format { line, message: format!("expected {} fields, got {}", METRICS_COLUMNS.len(), f.len()) });
        }
        let num = |i: usize| parse_opt(f[i], line, METRICS_COLUMNS[i]);
        let req = |i: usize| {
            num(i)?.ok_or_else(|| Error::Format { line, message: format!("missing {}", METRICS_COLUMNS[i]) })
        };
        let gamma = if f[15].is_empty() {
            None
        } else {
            Some(
                f[15]
                    .split(';')
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Format { line, message: format!("bad gamma entry {v:?}") }))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| Error::Format { line, message: format!("bad epoch {:?}", f[0]) })?,
            config_hash: f[1].to_string(),
            lr: req(2)?,
            lambda: req(3)?,
            object_loss: req(4)?,
            pretext_loss: task_map(num(5)?, num(6)?),
            entropy: num(7)?,
            target_pretext_loss: task_map(num(8)?, num(9)?),
            adversarial: num(10)?,
            val_acc: req(11)?,
            target_acc: num(12)?,
            pretext_acc: task_map(num(13)?, num(14)?),
            gamma,
        })
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, metrics_to_csv(records))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_COLUMNS.join(",") => {}
        _ => return Err(Error::Format { line: 0, message: "missing or unexpected metrics header".into() }),
    }
    let records: Vec<MetricsRecord> =
        lines.enumerate().map(|(i, l)| MetricsRecord::from_row(l, i + 1)).collect::<Result<_>>()?;
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].epoch <= pair[0].epoch {
            return Err(Error::Format { line: i + 2, message: "epoch index is not increasing".into() });
        }
    }
    Ok(records)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path)?)
}
