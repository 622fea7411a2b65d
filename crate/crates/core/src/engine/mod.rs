//! Scenario trainers, evaluators, model selection, ablation sweeps and class
//! activation maps.

mod cam;
pub mod config;
mod metrics;
mod optim;
mod sweep;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::data::{make_batch, split_validation, Batch, DomainDataset, EpochSampler, Provenance, Sample};
use crate::error::{invalid, Error, Result};
use crate::model::{images_to_array, init_parameters, Checkpoint, ModelBundle};
use crate::objectives::{
    da_objective_unchecked, dg_objective_unchecked, estimate_class_weights, lambda_schedule,
    pda_objective_unchecked, softmax_rows, ClassWeights, LossTerms, Objective,
};
use crate::permutations::{generate_permutation_set, PermutationSet};
use crate::seeding::{self, tag};
use crate::transforms::{apply_pretext, resize_bilinear, PretextTask, TaskKind};

pub use cam::{cam_map, cam_raw};
pub use config::{
    BackboneKind, ModelSection, OptimizerKind, OptimizerSection, Scenario, ScenarioSection, TasksSection, TrainConfig,
    WeightsSection,
};
pub use metrics::{read_metrics, write_metrics, MetricsRecord, METRICS_COLUMNS};
pub use optim::Optimizer;
pub use sweep::{ablation_sweep, model_select, read_sweep, write_sweep, SweepParam, SweepRow};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricsRecord>,
    /// Jigsaw label space, when the task is active.
    pub permutations: Option<Arc<PermutationSet>>,
}

/// Builds the pretext transformations of the active tasks.
pub fn pretext_tasks(config: &TrainConfig) -> Result<(Vec<PretextTask>, Option<Arc<PermutationSet>>)> {
    let mut tasks = Vec::new();
    let mut perms = None;
    for &t in &config.tasks.active {
        tasks.push(match t {
            TaskKind::Rotation => PretextTask::Rotation,
            TaskKind::Jigsaw => {
                let g = config.tasks.grid_n;
                let set = Arc::new(generate_permutation_set(g * g, config.tasks.permutations, config.scenario.seed)?);
                perms = Some(set.clone());
                PretextTask::jigsaw(g, set)?.with_gray_prob(config.tasks.gray_prob)
            }
        });
    }
    Ok((tasks, perms))
}

fn check_inputs(config: &TrainConfig, sources: &[DomainDataset], target: Option<&DomainDataset>) -> Result<usize> {
    let kind = config.scenario.kind;
    let mismatch = |m: String| Err(Error::ScenarioMismatch(m));
    if sources.is_empty() {
        return mismatch(format!("{kind} needs at least one labeled source"));
    }
    if let Some(s) = sources.iter().find(|s| !s.is_labeled() || s.is_empty()) {
        return mismatch(format!("source {:?} is empty or unlabeled", s.domain().unwrap_or("?")));
    }
    let num_classes = sources[0].num_classes();
    if sources.iter().any(|s| s.num_classes() != num_classes) {
        return mismatch("sources disagree on the number of classes".into());
    }
    match (kind.uses_target(), target) {
        (false, Some(_)) => return mismatch("dg trains without target data".into()),
        (true, None) => return mismatch(format!("{kind} needs an unlabeled target pool")),
        (true, Some(t)) if t.is_empty() || t.is_labeled() => {
            return mismatch("target pool must be non-empty and unlabeled".into())
        }
        _ => {}
    }
    if kind == Scenario::Prda && sources.len() != 1 {
        return mismatch(format!("prda takes exactly one labeled source, got {}", sources.len()));
    }
    if kind == Scenario::Pda && config.loss_weights().alpha_s.values().any(|&a| a != 0.0) {
        return mismatch("pda requires alpha_s = 0 for every task".into());
    }
    Ok(num_classes)
}

fn image_shape(ds: &DomainDataset) -> [usize; 3] {
    let img = &ds.samples()[0].image;
    [img.channels(), img.height(), img.width()]
}

/// Tasks whose weight is nonzero; the others would only add dead items.
fn weighted_tasks(tasks: &[PretextTask], weight: impl Fn(TaskKind) -> f64) -> Vec<PretextTask> {
    tasks.iter().filter(|t| weight(t.kind()) != 0.0).cloned().collect()
}

#[derive(Default)]
struct RunningTerms {
    steps: usize,
    object: f64,
    pretext: BTreeMap<TaskKind, (f64, usize)>,
    entropy: (f64, usize),
    target_pretext: BTreeMap<TaskKind, (f64, usize)>,
    adversarial: (f64, usize),
}

impl RunningTerms {
    fn add(&mut self, t: &LossTerms) {
        self.steps += 1;
        self.object += t.object;
        for (k, v) in &t.pretext {
            let e = self.pretext.entry(*k).or_default();
            e.0 += v;
            e.1 += 1;
        }
        for (k, v) in &t.target_pretext {
            let e = self.target_pretext.entry(*k).or_default();
            e.0 += v;
            e.1 += 1;
        }
        if let Some(h) = t.entropy {
            self.entropy.0 += h;
            self.entropy.1 += 1;
        }
        if let Some(a) = t.adversarial {
            self.adversarial.0 += a;
            self.adversarial.1 += 1;
        }
    }

    fn means(m: &BTreeMap<TaskKind, (f64, usize)>) -> BTreeMap<TaskKind, f64> {
        m.iter().map(|(k, (s, n))| (*k, s / *n as f64)).collect()
    }

    fn mean((s, n): (f64, usize)) -> Option<f64> {
        (n > 0).then(|| s / n as f64)
    }
}

/// Trains one model for the configured scenario.
///
/// Sources are pooled without domain labels and a stratified validation
/// share is held out. `target` is the unlabeled pool of the adaptive
/// scenarios (the auxiliary domains for `prda`); `eval`, when given, is
/// scored after every epoch as the target accuracy.
pub fn train(
    config: &TrainConfig,
    sources: &[DomainDataset],
    target: Option<&DomainDataset>,
    eval: Option<&DomainDataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let num_classes = check_inputs(config, sources, target)?;
    let kind = config.scenario.kind;
    let seed = config.scenario.seed;
    let config_hash = config.hash();
    let weights = config.loss_weights();

    let pool = DomainDataset::pooled(&sources.iter().collect::<Vec<_>>())?;
    let (train_set, val_set) =
        split_validation(&pool, config.scenario.validation_fraction, seeding::derive_seed(seed, &[tag("split")]))?;
    if train_set.is_empty() || val_set.is_empty() {
        return invalid("source pool too small for a train/validation split");
    }
    let (tasks, permutations) = pretext_tasks(config)?;
    let source_tasks = weighted_tasks(&tasks, |t| weights.alpha_s(t));
    let target_tasks = weighted_tasks(&tasks, |t| weights.alpha_t(t));
    let source_beta = if source_tasks.is_empty() { 1.0 } else { config.scenario.beta };
    let target_beta = if target_tasks.is_empty() { 1.0 } else { config.scenario.beta };
    let draws_target = kind == Scenario::Pda || (kind.uses_target() && weights.eta + weights.alpha_t.values().sum::<f64>() != 0.0);

    let spec = config.model_spec(image_shape(&train_set), num_classes);
    let mut model = init_parameters(&spec, seed)?;
    let mut optimizer = Optimizer::new(&config.optimizer, &model);
    let mut source_sampler = EpochSampler::new(train_set.len(), seeding::derive_seed(seed, &[tag("source-sampler")]))?;
    let mut target_sampler = match target {
        Some(t) => Some(EpochSampler::new(t.len(), seeding::derive_seed(seed, &[tag("target-sampler")]))?),
        None => None,
    };
    let mut gamma = ClassWeights::uniform(num_classes);
    let bs = config.scenario.batch_size;
    let mut history = Vec::with_capacity(config.scenario.epochs);

    for epoch in 0..config.scenario.epochs {
        let lr_factor = config.lr_factor(epoch);
        let progress = if config.scenario.epochs > 1 { epoch as f64 / (config.scenario.epochs - 1) as f64 } else { 0.0 };
        let lambda = if kind == Scenario::Pda {
            lambda_schedule(progress, weights.lambda_max, weights.schedule_steepness)
        } else {
            0.0
        };
        let mut running = RunningTerms::default();
        let mut seen = 0;
        let mut step = 0u64;
        while seen < train_set.len() {
            let idx = source_sampler.next_chunk(bs);
            seen += idx.len();
            let draw: Vec<&Sample> = idx.iter().map(|&i| &train_set.samples()[i]).collect();
            let mut rng = seeding::stream(seed, &[tag("source-batch"), epoch as u64, step]);
            let source =
                make_batch(&draw, Provenance::Source, source_beta, &source_tasks, config.scenario.augment, &mut rng)?;
            let target_batch = match (draws_target, target, target_sampler.as_mut()) {
                (true, Some(t), Some(sampler)) => {
                    let tdraw: Vec<&Sample> = sampler.next_indices(bs).into_iter().map(|i| &t.samples()[i]).collect();
                    let mut rng = seeding::stream(seed, &[tag("target-batch"), epoch as u64, step]);
                    Some(make_batch(&tdraw, Provenance::Target, target_beta, &target_tasks, config.scenario.augment, &mut rng)?)
                }
                _ => None,
            };
            let obj = objective(kind, &source, target_batch.as_ref(), &model, config, &gamma, lambda)?;
            if !obj.loss.is_finite() {
                let term = obj.terms.first_non_finite().unwrap_or_else(|| "total".into());
                return Err(Error::NonFinite { term, epoch: epoch + 1, step: step as usize });
            }
            if !obj.grads.is_finite() {
                return Err(Error::NonFinite { term: "gradient".into(), epoch: epoch + 1, step: step as usize });
            }
            optimizer.step(&mut model, &obj.grads, lr_factor);
            running.add(&obj.terms);
            step += 1;
        }

        let gamma_record = if kind == Scenario::Pda {
            let probs = predict_probs(&model, target.expect("checked"))?;
            gamma = estimate_class_weights(probs.view())?;
            Some(gamma.gamma.clone())
        } else {
            None
        };
        let mut pretext_acc = BTreeMap::new();
        for task in &tasks {
            let mut rng = seeding::stream(seed, &[tag("eval-pretext"), tag(task.kind().name())]);
            pretext_acc.insert(task.kind(), evaluate_pretext(&model, &val_set, task, &mut rng)?);
        }
        let record = MetricsRecord {
            epoch: epoch + 1,
            config_hash: config_hash.clone(),
            lr: config.optimizer.lr * lr_factor,
            lambda,
            object_loss: running.object / running.steps as f64,
            pretext_loss: RunningTerms::means(&running.pretext),
            entropy: RunningTerms::mean(running.entropy),
            target_pretext_loss: RunningTerms::means(&running.target_pretext),
            adversarial: RunningTerms::mean(running.adversarial),
            val_acc: evaluate_classifier(&model, &val_set)?,
            target_acc: eval.map(|e| evaluate_classifier(&model, e)).transpose()?,
            pretext_acc,
            gamma: gamma_record,
        };
        log::info!(
            "epoch {} object_loss {:.4} val_acc {:.4} target_acc {}",
            record.epoch,
            record.object_loss,
            record.val_acc,
            record.target_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        history.push(record);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { model, config_hash }, history, permutations })
}

fn objective(
    kind: Scenario,
    source: &Batch,
    target: Option<&Batch>,
    model: &ModelBundle,
    config: &TrainConfig,
    gamma: &ClassWeights,
    lambda: f64,
) -> Result<Objective> {
    let weights = config.loss_weights();
    match (kind, target) {
        (Scenario::Pda, Some(t)) => pda_objective_unchecked(source, t, model, &weights, gamma, lambda),
        (Scenario::Pda, None) => unreachable!("pda always draws target batches"),
        (_, Some(t)) => da_objective_unchecked(source, t, model, &weights),
        (_, None) => dg_objective_unchecked(source, model, &weights),
    }
}

/// Object-head softmax for every sample, in dataset order.
pub fn predict_probs(model: &ModelBundle, dataset: &DomainDataset) -> Result<Array2<f64>> {
    if dataset.is_empty() {
        return invalid("empty dataset");
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(EVAL_CHUNK) {
        let x = images_to_array(chunk.iter().map(|s| &s.image))?;
        let logits = model.classify(model.forward_features(&x)?.view())?;
        rows.push(softmax_rows(logits.view()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose highest object logit is the label. Images are
/// used as stored, without augmentation.
pub fn evaluate_classifier(model: &ModelBundle, dataset: &DomainDataset) -> Result<f64> {
    if !dataset.is_labeled() {
        return invalid("classifier evaluation needs labels");
    }
    let probs = predict_probs(model, dataset)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(dataset.samples())
        .filter(|(row, s)| Some(argmax(*row)) == s.label)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Accuracy of the task head on images transformed with uniformly drawn
/// nonzero labels. Tile grayscale jitter is disabled.
pub fn evaluate_pretext<R: Rng + ?Sized>(
    model: &ModelBundle,
    dataset: &DomainDataset,
    task: &PretextTask,
    rng: &mut R,
) -> Result<f64> {
    if dataset.is_empty() {
        return invalid("empty dataset");
    }
    let head = model.pretext_head(task.kind())?;
    if head.outputs() != task.cardinality() {
        return invalid(format!(
            "{} head has {} outputs but the task has {} labels",
            task.kind(),
            head.outputs(),
            task.cardinality()
        ));
    }
    let task = task.clone().with_gray_prob(0.0);
    let mut hits = 0;
    for chunk in dataset.samples().chunks(EVAL_CHUNK) {
        let mut labels = Vec::with_capacity(chunk.len());
        let mut images = Vec::with_capacity(chunk.len());
        for s in chunk {
            let label = rng.random_range(1..task.cardinality());
            let t = apply_pretext(&s.image, &task, label, rng)?;
            images.push(resize_bilinear(&t.image, s.image.height(), s.image.width()));
            labels.push(label);
        }
        let x = images_to_array(images.iter())?;
        let logits = head.forward(model.forward_features(&x)?.view())?;
        hits += logits.rows().into_iter().zip(&labels).filter(|(r, &l)| argmax(*r) == l).count();
    }
    Ok(hits as f64 / dataset.len() as f64)
}
