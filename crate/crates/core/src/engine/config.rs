//! Training configuration, grouped in the sections of the run config file.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::{BackboneSpec, ModelSpec};
use crate::objectives::LossWeights;
use crate::transforms::{TaskKind, DEFAULT_GRAY_TILE_PROB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Labeled sources only; the target is unseen until test time.
    Dg,
    /// Labeled sources plus the unlabeled target.
    Da,
    /// Like `Da`, with a target label space strictly inside the source one.
    Pda,
    /// One labeled source plus unlabeled auxiliary domains.
    Prda,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Dg => "dg",
            Scenario::Da => "da",
            Scenario::Pda => "pda",
            Scenario::Prda => "prda",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Scenario::Dg
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dg" => Ok(Scenario::Dg),
            "da" => Ok(Scenario::Da),
            "pda" => Ok(Scenario::Pda),
            "prda" => Ok(Scenario::Prda),
            _ => Err(Error::Config(format!("unknown scenario {s:?} (expected dg, da, pda or prda)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: Scenario,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each batch left untransformed.
    pub beta: f64,
    pub seed: u64,
    /// Share of the pooled sources held out for model selection.
    pub validation_fraction: f64,
    /// Random crop, resize and flip on training images.
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    pub active: Vec<TaskKind>,
    pub grid_n: usize,
    /// Jigsaw label-space size `P`.
    pub permutations: usize,
    pub gray_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub alpha_s_jigsaw: f64,
    pub alpha_s_rotation: f64,
    pub alpha_t_jigsaw: f64,
    pub alpha_t_rotation: f64,
    pub eta: f64,
    pub lambda_max: f64,
    pub schedule_steepness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Learning rate of the `object_head` parameter group; `lr` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which every rate is multiplied by 0.1.
    pub lr_step: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// conv-pool-conv-pool-fc-fc
    Reference,
    /// conv-pool-conv-global average, for class activation maps.
    Cam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub discriminator_hidden1: usize,
    pub discriminator_hidden2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scenario: ScenarioSection,
    pub tasks: TasksSection,
    pub weights: WeightsSection,
    pub optimizer: OptimizerSection,
    pub model: ModelSection,
}

impl TrainConfig {
    /// Schedule defaults for each scenario (30/24/6 epochs, SGD or Adam).
    pub fn preset(kind: Scenario) -> Self {
        let mut c = TrainConfig {
            scenario: ScenarioSection {
                kind,
                epochs: 30,
                batch_size: 128,
                beta: 0.6,
                seed: 0,
                validation_fraction: 0.1,
                augment: true,
            },
            tasks: TasksSection {
                active: vec![TaskKind::Jigsaw],
                grid_n: 3,
                permutations: 30,
                gray_prob: DEFAULT_GRAY_TILE_PROB,
            },
            weights: WeightsSection {
                alpha_s_jigsaw: 0.7,
                alpha_s_rotation: 0.0,
                alpha_t_jigsaw: 0.0,
                alpha_t_rotation: 0.0,
                eta: 0.0,
                lambda_max: 0.0,
                schedule_steepness: 10.0,
            },
            optimizer: OptimizerSection {
                kind: OptimizerKind::Sgd,
                lr: 0.001,
                head_lr: None,
                momentum: 0.9,
                weight_decay: 0.0005,
                lr_step: 0.8,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
            },
            model: ModelSection {
                backbone: BackboneKind::Reference,
                conv1: 32,
                conv2: 64,
                fc1: 1024,
                fc2: 128,
                discriminator_hidden1: 1024,
                discriminator_hidden2: 1024,
            },
        };
        match kind {
            Scenario::Dg => {}
            Scenario::Da => {
                c.weights.alpha_t_jigsaw = 0.7;
                c.weights.eta = 0.1;
            }
            Scenario::Pda => {
                c.scenario.epochs = 24;
                c.scenario.batch_size = 64;
                c.optimizer.lr = 0.0005;
                c.weights.alpha_s_jigsaw = 0.0;
                c.weights.alpha_t_jigsaw = 1.0;
                c.weights.eta = 0.2;
                c.weights.lambda_max = 0.1;
            }
            Scenario::Prda => {
                c.scenario.epochs = 6;
                c.scenario.batch_size = 16;
                c.optimizer.kind = OptimizerKind::Adam;
                c.optimizer.lr = 1e-4;
                c.optimizer.head_lr = Some(1e-3);
                c.optimizer.weight_decay = 1e-6;
                c.optimizer.lr_step = 4.0 / 6.0;
                c.weights.alpha_s_jigsaw = 0.5;
                c.weights.alpha_t_jigsaw = 0.5;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if s.epochs == 0 || s.batch_size == 0 {
            return invalid("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&s.beta) {
            return invalid(format!("beta {} outside [0, 1]", s.beta));
        }
        if !(s.validation_fraction > 0.0 && s.validation_fraction < 1.0) {
            return invalid(format!("validation_fraction {} outside (0, 1)", s.validation_fraction));
        }
        let t = &self.tasks;
        for (i, task) in t.active.iter().enumerate() {
            if t.active[..i].contains(task) {
                return invalid(format!("task {task} listed twice"));
            }
        }
        if t.active.contains(&TaskKind::Jigsaw) && (t.grid_n < 2 || t.permutations < 2) {
            return invalid("jigsaw needs grid_n >= 2 and permutations >= 2");
        }
        if !(0.0..=1.0).contains(&t.gray_prob) {
            return invalid(format!("gray_prob {} outside [0, 1]", t.gray_prob));
        }
        self.loss_weights().validate()?;
        let o = &self.optimizer;
        for (name, v) in [("lr", o.lr), ("head_lr", o.head_lr.unwrap_or(o.lr)), ("weight_decay", o.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("optimizer {name} {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.adam_beta1) || !(0.0..1.0).contains(&o.adam_beta2) {
            return invalid("momentum coefficients must lie in [0, 1)");
        }
        if !(o.adam_eps > 0.0) {
            return invalid("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&o.lr_step) {
            return invalid(format!("lr_step {} outside [0, 1]", o.lr_step));
        }
        let m = &self.model;
        if [m.conv1, m.conv2].contains(&0)
            || (m.backbone == BackboneKind::Reference && [m.fc1, m.fc2].contains(&0))
            || (self.scenario.kind == Scenario::Pda && [m.discriminator_hidden1, m.discriminator_hidden2].contains(&0))
        {
            return invalid("layer widths must be positive");
        }
        Ok(())
    }

    /// Weights restricted to the active tasks.
    pub fn loss_weights(&self) -> LossWeights {
        let w = &self.weights;
        let active = |t: TaskKind, v: f64| self.tasks.active.contains(&t).then_some((t, v));
        let alpha_s: BTreeMap<TaskKind, f64> =
            [active(TaskKind::Jigsaw, w.alpha_s_jigsaw), active(TaskKind::Rotation, w.alpha_s_rotation)]
                .into_iter()
                .flatten()
                .collect();
        let alpha_t: BTreeMap<TaskKind, f64> =
            [active(TaskKind::Jigsaw, w.alpha_t_jigsaw), active(TaskKind::Rotation, w.alpha_t_rotation)]
                .into_iter()
                .flatten()
                .collect();
        LossWeights {
            alpha_s,
            alpha_t,
            eta: w.eta,
            lambda_max: w.lambda_max,
            schedule_steepness: w.schedule_steepness,
        }
    }

    /// Sets the source (or target) pretext weight of every active task.
    pub fn set_alpha(&mut self, value: f64, target: bool) {
        for t in &self.tasks.active {
            match (t, target) {
                (TaskKind::Jigsaw, false) => self.weights.alpha_s_jigsaw = value,
                (TaskKind::Rotation, false) => self.weights.alpha_s_rotation = value,
                (TaskKind::Jigsaw, true) => self.weights.alpha_t_jigsaw = value,
                (TaskKind::Rotation, true) => self.weights.alpha_t_rotation = value,
            }
        }
    }

    pub fn backbone_spec(&self, input: [usize; 3]) -> BackboneSpec {
        let m = &self.model;
        match m.backbone {
            BackboneKind::Reference => BackboneSpec::reference_with_widths(input, [m.conv1, m.conv2], [m.fc1, m.fc2]),
            BackboneKind::Cam => BackboneSpec::cam_ready(input, [m.conv1, m.conv2]),
        }
    }

    pub fn model_spec(&self, input: [usize; 3], num_classes: usize) -> ModelSpec {
        let pretext = self
            .tasks
            .active
            .iter()
            .map(|&t| match t {
                TaskKind::Jigsaw => (t, self.tasks.permutations),
                TaskKind::Rotation => (t, 4),
            })
            .collect();
        ModelSpec {
            backbone: self.backbone_spec(input),
            num_classes,
            pretext,
            discriminator_hidden: (self.scenario.kind == Scenario::Pda)
                .then_some([self.model.discriminator_hidden1, self.model.discriminator_hidden2]),
        }
    }

    /// Learning-rate multiplier at `epoch`: 1 before the step, 0.1 after.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let step = (self.optimizer.lr_step * self.scenario.epochs as f64 - 1e-9).ceil().max(0.0) as usize;
        if epoch < step {
            1.0
        } else {
            0.1
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
