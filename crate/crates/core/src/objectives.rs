//! Losses and their scenario compositions, with analytic gradients.
//!
//! Every composite objective returns its scalar value, the individual terms,
//! and the parameter gradients of the value. Dataset-level averages are
//! realized as means over the corresponding part of the minibatch.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Provenance};
use crate::error::{invalid, Result};
use crate::model::{images_to_array, BackboneTrace, Gradients, ModelBundle};
use crate::transforms::TaskKind;

/// Floor applied inside logarithms of probability inputs.
pub const LOG_EPS: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Source pretext weights.
    #[serde(default)]
    pub alpha_s: BTreeMap<TaskKind, f64>,
    /// Target pretext weights.
    #[serde(default)]
    pub alpha_t: BTreeMap<TaskKind, f64>,
    /// Target entropy weight.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub lambda_max: f64,
    /// Steepness of the adversarial weight ramp.
    #[serde(default = "default_steepness")]
    pub schedule_steepness: f64,
}

fn default_steepness() -> f64 {
    10.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: BTreeMap::new(),
            alpha_t: BTreeMap::new(),
            eta: 0.0,
            lambda_max: 0.0,
            schedule_steepness: default_steepness(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = self
            .alpha_s
            .iter()
            .map(|(t, v)| (format!("alpha_s.{t}"), *v))
            .chain(self.alpha_t.iter().map(|(t, v)| (format!("alpha_t.{t}"), *v)))
            .chain([("eta".to_string(), self.eta), ("lambda_max".to_string(), self.lambda_max)]);
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("weight {name} = {v} must be finite and non-negative"));
            }
        }
        if !self.schedule_steepness.is_finite() {
            return invalid("schedule steepness must be finite");
        }
        Ok(())
    }

    pub fn alpha_s(&self, task: TaskKind) -> f64 {
        self.alpha_s.get(&task).copied().unwrap_or(0.0)
    }

    pub fn alpha_t(&self, task: TaskKind) -> f64 {
        self.alpha_t.get(&task).copied().unwrap_or(0.0)
    }

    fn uses_target(&self) -> bool {
        self.eta != 0.0 || self.alpha_t.values().any(|&a| a != 0.0)
    }
}

/// Per-source-class weights, normalized so the largest entry is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub gamma: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self { gamma: vec![1.0; num_classes] }
    }

    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return invalid("empty class weights");
        }
        if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return invalid("class weights must lie in [0, 1]");
        }
        Ok(Self { gamma })
    }

    pub fn max(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Individual objective terms before weighting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    /// Source object cross-entropy (class-weighted in the partial setting).
    pub object: f64,
    pub pretext: BTreeMap<TaskKind, f64>,
    pub entropy: Option<f64>,
    pub target_pretext: BTreeMap<TaskKind, f64>,
    /// Domain discriminator binary cross-entropy.
    pub adversarial: Option<f64>,
}

impl LossTerms {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.object.is_finite() {
            return Some("object".into());
        }
        for (t, v) in &self.pretext {
            if !v.is_finite() {
                return Some(format!("pretext.{t}"));
            }
        }
        if self.entropy.is_some_and(|v| !v.is_finite()) {
            return Some("entropy".into());
        }
        for (t, v) in &self.target_pretext {
            if !v.is_finite() {
                return Some(format!("target_pretext.{t}"));
            }
        }
        if self.adversarial.is_some_and(|v| !v.is_finite()) {
            return Some("adversarial".into());
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub terms: LossTerms,
    pub grads: Gradients,
}

fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv_into(f64::exp)
}

/// Mean over rows of `-log softmax(logits)[true class]`.
pub fn cross_entropy(logits: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<f64> {
    if logits.nrows() == 0 {
        return invalid("cross-entropy of an empty batch");
    }
    if logits.dim() != onehot.dim() {
        return invalid(format!("logits {:?} and labels {:?} differ in shape", logits.dim(), onehot.dim()));
    }
    for (i, row) in onehot.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return invalid(format!("label row {i} is not one-hot"));
        }
    }
    let logp = log_softmax_rows(logits);
    Ok(-(&logp * &onehot).sum() / logits.nrows() as f64)
}

/// Mean Shannon entropy of probability rows, with `0 log 0 = 0`.
pub fn entropy(probabilities: ArrayView2<f64>) -> Result<f64> {
    if probabilities.nrows() == 0 {
        return invalid("entropy of an empty batch");
    }
    let mut total = 0.0;
    for (i, row) in probabilities.rows().into_iter().enumerate() {
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.sum() - 1.0).abs() > ROW_SUM_TOL {
            return invalid(format!("row {i} is not a probability distribution"));
        }
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.max(LOG_EPS).ln()).sum::<f64>();
    }
    Ok(total / probabilities.nrows() as f64)
}

/// Entrywise mean of target posteriors divided by its maximum.
pub fn estimate_class_weights(target_object_probs: ArrayView2<f64>) -> Result<ClassWeights> {
    if target_object_probs.nrows() == 0 {
        return invalid("class weights need at least one target row");
    }
    if target_object_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return invalid("target posteriors must be finite and non-negative");
    }
    let mean = target_object_probs.mean_axis(Axis(0)).expect("non-empty");
    let max = mean.fold(0.0f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return invalid("target posteriors are all zero");
    }
    Ok(ClassWeights { gamma: mean.iter().map(|&v| v / max).collect() })
}

/// Adversarial weight at training progress `p`:
/// `lambda_max * (2 / (1 + exp(-steepness * p)) - 1)`.
pub fn lambda_schedule(p: f64, lambda_max: f64, steepness: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&p) {
        p
    } else {
        let c = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        log::warn!("training progress {p} outside [0, 1], clamped to {c}");
        c
    };
    lambda_max * (2.0 / (1.0 + (-steepness * p).exp()) - 1.0)
}

/// Weighted softmax cross-entropy: `sum_i w_i CE_i / n` and its logit gradient.
fn weighted_ce(logits: ArrayView2<f64>, labels: &[usize], weights: Option<&[f64]>) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, (&y, mut g)) in labels.iter().zip(grad.rows_mut()).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        loss -= w * logp[[i, y]];
        g[y] -= 1.0;
        g.mapv_inplace(|v| v * w / n);
    }
    (loss / n, grad)
}

/// Mean softmax entropy of logit rows and its logit gradient
/// `dH/dz_k = -p_k (log p_k + H_row) / n`.
fn entropy_of_logits(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (lp, mut g) in logp.rows().into_iter().zip(grad.rows_mut()) {
        let h = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        total += h;
        for (gk, &l) in g.iter_mut().zip(lp) {
            *gk = -l.exp() * (l + h) / n;
        }
    }
    (total / n, grad)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One backbone pass over a batch, with a feature-gradient accumulator.
struct Pass<'a> {
    batch: &'a Batch,
    features: Array2<f64>,
    trace: BackboneTrace,
    dfeat: Array2<f64>,
}

impl<'a> Pass<'a> {
    fn new(bundle: &ModelBundle, batch: &'a Batch) -> Result<Self> {
        let (features, trace) = bundle.forward_features_traced(&images_to_array(batch.images())?)?;
        let dfeat = Array2::zeros(features.dim());
        Ok(Self { batch, features, trace, dfeat })
    }

    fn n_ordered(&self) -> usize {
        self.batch.ordered.len()
    }

    fn ordered_features(&self) -> ArrayView2<'_, f64> {
        self.features.slice(ndarray::s![..self.n_ordered(), ..])
    }

    /// Rows seen by `task`'s head: every ordered item (label 0) and the items
    /// transformed by `task`.
    fn pretext_rows(&self, task: TaskKind) -> (Vec<usize>, Vec<usize>) {
        let n_o = self.n_ordered();
        let mut rows: Vec<usize> = (0..n_o).collect();
        let mut labels = vec![0; n_o];
        for (i, t) in self.batch.transformed.iter().enumerate() {
            if t.task == task {
                rows.push(n_o + i);
                labels.push(t.pretext_label);
            }
        }
        (rows, labels)
    }

    fn add_rows(&mut self, rows: &[usize], d: &Array2<f64>) {
        for (&r, drow) in rows.iter().zip(d.rows()) {
            let mut dst = self.dfeat.row_mut(r);
            dst += &drow;
        }
    }

    /// Object head on ordered rows: weighted cross-entropy, returns the loss.
    fn object_ce(&mut self, bundle: &ModelBundle, grads: &mut Gradients, weights: Option<&[f64]>, scale: f64) -> Result<f64> {
        let labels: Vec<usize> = self
            .batch
            .ordered
            .iter()
            .map(|o| o.class.ok_or_else(|| crate::Error::InvalidArgument("source item without a label".into())))
            .collect::<Result<_>>()?;
        let x = self.ordered_features().to_owned();
        let logits = bundle.classify(x.view())?;
        let (loss, mut dlogits) = weighted_ce(logits.view(), &labels, weights);
        dlogits *= scale;
        let dx = bundle.object_head.backward(x.view(), dlogits.view(), &mut grads.object_head);
        let rows: Vec<usize> = (0..labels.len()).collect();
        self.add_rows(&rows, &dx);
        Ok(loss)
    }

    /// Pretext cross-entropy per active task; gradient enters only where the
    /// task weight is nonzero.
    fn pretext_ce(
        &mut self,
        bundle: &ModelBundle,
        grads: &mut Gradients,
        weight: impl Fn(TaskKind) -> f64,
    ) -> Result<BTreeMap<TaskKind, f64>> {
        let mut out = BTreeMap::new();
        for &task in &self.batch.tasks.clone() {
            let (rows, labels) = self.pretext_rows(task);
            if rows.is_empty() {
                continue;
            }
            let head = bundle.pretext_head(task)?;
            let x = self.features.select(Axis(0), &rows);
            let logits = head.forward(x.view())?;
            let (loss, mut dlogits) = weighted_ce(logits.view(), &labels, None);
            out.insert(task, loss);
            let a = weight(task);
            if a != 0.0 {
                dlogits *= a;
                let g = grads.pretext_heads.get_mut(&task).expect("gradient layout mirrors the model");
                let dx = head.backward(x.view(), dlogits.view(), g);
                self.add_rows(&rows, &dx);
            }
        }
        Ok(out)
    }

    /// Object-softmax entropy over ordered rows, gradient scaled by `eta`.
    fn entropy(&mut self, bundle: &ModelBundle, grads: &mut Gradients, eta: f64) -> Result<Option<f64>> {
        if self.n_ordered() == 0 {
            return Ok(None);
        }
        let x = self.ordered_features().to_owned();
        let logits = bundle.classify(x.view())?;
        let (h, mut dlogits) = entropy_of_logits(logits.view());
        if eta != 0.0 {
            dlogits *= eta;
            let dx = bundle.object_head.backward(x.view(), dlogits.view(), &mut grads.object_head);
            let rows: Vec<usize> = (0..self.n_ordered()).collect();
            self.add_rows(&rows, &dx);
        }
        Ok(Some(h))
    }

    fn backward(self, bundle: &ModelBundle, grads: &mut Gradients) {
        bundle.backbone.backward(&self.trace, self.dfeat, &mut grads.backbone);
    }
}

fn check_provenance(batch: &Batch, expected: Provenance) -> Result<()> {
    if batch.provenance != expected {
        return invalid(format!("expected a {expected:?} batch, got {:?}", batch.provenance));
    }
    match expected {
        Provenance::Source if batch.ordered.iter().any(|o| o.class.is_none()) => {
            invalid("source batch contains unlabeled items")
        }
        Provenance::Target if batch.ordered.iter().any(|o| o.class.is_some()) => {
            invalid("target batch must be unlabeled")
        }
        _ => Ok(()),
    }
}

/// Source part shared by all scenarios. With no ordered items the object
/// term is zero, which the trainer relies on for fully transformed batches.
fn source_objective(batch: &Batch, bundle: &ModelBundle, weights: &LossWeights, grads: &mut Gradients) -> Result<(f64, LossTerms)> {
    check_provenance(batch, Provenance::Source)?;
    let mut pass = Pass::new(bundle, batch)?;
    let object = if pass.n_ordered() > 0 { pass.object_ce(bundle, grads, None, 1.0)? } else { 0.0 };
    let pretext = pass.pretext_ce(bundle, grads, |t| weights.alpha_s(t))?;
    pass.backward(bundle, grads);
    let mut loss = object;
    for (t, v) in &pretext {
        let a = weights.alpha_s(*t);
        if a != 0.0 {
            loss += a * v;
        }
    }
    Ok((loss, LossTerms { object, pretext, ..Default::default() }))
}

/// Entropy and pretext terms of a target batch; adds into `terms`.
fn target_objective(
    batch: &Batch,
    bundle: &ModelBundle,
    weights: &LossWeights,
    grads: &mut Gradients,
    terms: &mut LossTerms,
) -> Result<f64> {
    check_provenance(batch, Provenance::Target)?;
    let mut pass = Pass::new(bundle, batch)?;
    let entropy = pass.entropy(bundle, grads, weights.eta)?;
    let target_pretext = pass.pretext_ce(bundle, grads, |t| weights.alpha_t(t))?;
    pass.backward(bundle, grads);
    let mut loss = 0.0;
    if let Some(h) = entropy {
        if weights.eta != 0.0 {
            loss += weights.eta * h;
        }
    }
    for (t, v) in &target_pretext {
        let a = weights.alpha_t(*t);
        if a != 0.0 {
            loss += a * v;
        }
    }
    terms.entropy = entropy;
    terms.target_pretext = target_pretext;
    Ok(loss)
}

pub(crate) fn dg_objective_unchecked(batch: &Batch, bundle: &ModelBundle, weights: &LossWeights) -> Result<Objective> {
    weights.validate()?;
    let mut grads = bundle.zeros_like();
    let (loss, terms) = source_objective(batch, bundle, weights, &mut grads)?;
    Ok(Objective { loss, terms, grads })
}

/// Object cross-entropy over ordered source items plus the `alpha_s`-weighted
/// pretext cross-entropy of every active task.
pub fn dg_objective(batch: &Batch, bundle: &ModelBundle, weights: &LossWeights) -> Result<Objective> {
    if batch.ordered.is_empty() {
        return invalid("batch has no ordered items; the object loss is undefined");
    }
    dg_objective_unchecked(batch, bundle, weights)
}

pub(crate) fn da_objective_unchecked(
    source: &Batch,
    target: &Batch,
    bundle: &ModelBundle,
    weights: &LossWeights,
) -> Result<Objective> {
    let mut obj = dg_objective_unchecked(source, bundle, weights)?;
    if weights.uses_target() {
        obj.loss += target_objective(target, bundle, weights, &mut obj.grads, &mut obj.terms)?;
    }
    Ok(obj)
}

/// [`dg_objective`] on the source batch plus `eta`-weighted target entropy
/// and `alpha_t`-weighted target pretext cross-entropy. The target pass is
/// skipped when both weights vanish.
pub fn da_objective(source: &Batch, target: &Batch, bundle: &ModelBundle, weights: &LossWeights) -> Result<Objective> {
    if source.ordered.is_empty() {
        return invalid("source batch has no ordered items; the object loss is undefined");
    }
    da_objective_unchecked(source, target, bundle, weights)
}

pub(crate) fn pda_objective_unchecked(
    source: &Batch,
    target: &Batch,
    bundle: &ModelBundle,
    weights: &LossWeights,
    gamma: &ClassWeights,
    lambda: f64,
) -> Result<Objective> {
    weights.validate()?;
    if let Some((t, _)) = weights.alpha_s.iter().find(|(_, &a)| a != 0.0) {
        return invalid(format!("partial adaptation requires alpha_s = 0 (alpha_s.{t} is nonzero)"));
    }
    if gamma.gamma.len() != bundle.spec.num_classes {
        return invalid(format!(
            "{} class weights for {} source classes",
            gamma.gamma.len(),
            bundle.spec.num_classes
        ));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return invalid(format!("lambda {lambda} must be finite and non-negative"));
    }
    check_provenance(source, Provenance::Source)?;
    check_provenance(target, Provenance::Target)?;
    let disc = bundle.discriminator()?;
    let mut grads = bundle.zeros_like();
    let mut terms = LossTerms::default();

    let mut src = Pass::new(bundle, source)?;
    let n_s = src.n_ordered();
    let row_gamma: Vec<f64> = source.ordered.iter().map(|o| gamma.gamma[o.class.expect("checked labeled")]).collect();
    terms.object = if n_s > 0 { src.object_ce(bundle, &mut grads, Some(&row_gamma), 1.0)? } else { 0.0 };
    terms.pretext = src.pretext_ce(bundle, &mut grads, |_| 0.0)?;

    let mut tgt = Pass::new(bundle, target)?;
    let n_t = tgt.n_ordered();
    terms.entropy = tgt.entropy(bundle, &mut grads, weights.eta)?;
    terms.target_pretext = tgt.pretext_ce(bundle, &mut grads, |t| weights.alpha_t(t))?;

    // Discriminator cross-entropy: source rows labelled 1 with weight gamma_y,
    // target rows labelled 0.
    let mut bce = 0.0;
    if n_s > 0 {
        let x = src.ordered_features().to_owned();
        let (z, trace) = disc.logits(x.view())?;
        let mut dz = Array1::zeros(n_s);
        for i in 0..n_s {
            let w = row_gamma[i] / n_s as f64;
            bce += w * softplus(-z[i]);
            dz[i] = w * (crate::model::sigmoid(z[i]) - 1.0);
        }
        let dx = bundle.discriminator_backward(&trace, &dz, lambda, &mut grads)?;
        let rows: Vec<usize> = (0..n_s).collect();
        src.add_rows(&rows, &dx);
    }
    if n_t > 0 {
        let x = tgt.ordered_features().to_owned();
        let (z, trace) = disc.logits(x.view())?;
        let mut dz = Array1::zeros(n_t);
        for j in 0..n_t {
            bce += softplus(z[j]) / n_t as f64;
            dz[j] = crate::model::sigmoid(z[j]) / n_t as f64;
        }
        let dx = bundle.discriminator_backward(&trace, &dz, lambda, &mut grads)?;
        let rows: Vec<usize> = (0..n_t).collect();
        tgt.add_rows(&rows, &dx);
    }
    terms.adversarial = Some(bce);
    src.backward(bundle, &mut grads);
    tgt.backward(bundle, &mut grads);

    let mut loss = terms.object;
    if let Some(h) = terms.entropy {
        if weights.eta != 0.0 {
            loss += weights.eta * h;
        }
    }
    for (t, v) in &terms.target_pretext {
        let a = weights.alpha_t(*t);
        if a != 0.0 {
            loss += a * v;
        }
    }
    loss -= lambda * bce;
    Ok(Objective { loss, terms, grads })
}

/// Class-weighted object loss, target entropy and pretext terms, and the
/// domain-confusion term.
///
/// `loss` is `rest - lambda * bce`, the value minimized by the feature
/// extractor and the heads. The discriminator parameters in `grads` carry the
/// plain gradient of `bce`, so a descent step on all parameters minimizes the
/// discriminator loss while the features ascend it.
pub fn pda_objective(
    source: &Batch,
    target: &Batch,
    bundle: &ModelBundle,
    weights: &LossWeights,
    gamma: &ClassWeights,
    lambda: f64,
) -> Result<Objective> {
    if source.ordered.is_empty() {
        return invalid("source batch has no ordered items; the object loss is undefined");
    }
    pda_objective_unchecked(source, target, bundle, weights, gamma, lambda)
}
