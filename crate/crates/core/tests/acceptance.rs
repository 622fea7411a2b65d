//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{array, Array2};
use xdomain_core::data::{pda_filter, synth_domains, DomainDataset, Provenance, Style, SynthSpec};
use xdomain_core::engine::{train, write_metrics, MetricsRecord, Scenario, TrainConfig, TrainOutcome};
use xdomain_core::model::{init_parameters, reverse_gradient, save_checkpoint};
use xdomain_core::objectives::{
    cross_entropy, da_objective, dg_objective, entropy, estimate_class_weights, pda_objective, LossWeights,
};
use xdomain_core::permutations::{generate_permutation_set, min_pairwise_distance};
use xdomain_core::transforms::TaskKind::{self, Jigsaw, Rotation};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs() < limit_secs, format!("{what} took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

// ---------------------------------------------------------------- exact suites

fn permutation_oracle() -> Check {
    for p in 2..=6 {
        let set = generate_permutation_set(4, p, 0).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<usize>> = set.iter().map(|q| q.mapping().to_vec()).collect();
        ensure(rows == greedy_oracle(4, p), format!("n=4 P={p} differs from the oracle"))?;
    }
    let start = Instant::now();
    let set = generate_permutation_set(9, 30, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within(elapsed, 300, "9-tile generation")?;
    let oracle = greedy_oracle(9, 30);
    let d = min_pairwise_distance(&set).map_err(|e| e.to_string())?;
    ensure(d == oracle_min_distance(&oracle) && d == 7, format!("min distance {d}"))?;
    Ok(format!("n=4 P=2..6 identical; n=9 P=30 min distance {d} in {:.2}s", elapsed.as_secs_f64()))
}

fn transform_algebra() -> Check {
    let cases = 1000;
    for seed in 0..cases {
        transform_algebra_case(seed)?;
    }
    Ok(format!("{cases} seeded cases exact"))
}

fn loss_identities() -> Check {
    for c in [2usize, 3, 10, 65] {
        let uniform = Array2::from_elem((3, c), 1.0 / c as f64);
        let h = entropy(uniform.view()).map_err(|e| e.to_string())?;
        ensure((h - (c as f64).ln()).abs() <= 1e-9, format!("entropy of uniform over {c}: {h}"))?;
        let onehot = Array2::from_shape_fn((3, c), |(i, k)| f64::from(u8::from(k == i % c)));
        let h = entropy(onehot.view()).map_err(|e| e.to_string())?;
        ensure(h.abs() <= 1e-9, format!("entropy of one-hot over {c}: {h}"))?;
    }
    let model = init_parameters(&tiny_spec(3, vec![(Jigsaw, 4), (Rotation, 4)], false), 2).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    let b = batch(&mut r, Provenance::Source, &[Jigsaw, Rotation], &[Some(0), Some(2), Some(1)], &[(Jigsaw, 3), (Rotation, 1)]);
    let w = LossWeights { alpha_s: BTreeMap::from([(Jigsaw, 0.0), (Rotation, 0.0)]), ..Default::default() };
    let obj = dg_objective(&b, &model, &w).map_err(|e| e.to_string())?;
    let feats = model.forward_features(&xdomain_core::model::images_to_array(b.ordered.iter().map(|o| &o.image)).unwrap()).unwrap();
    let logits = model.classify(feats.view()).unwrap();
    let y = Array2::from_shape_fn((3, 3), |(i, k)| f64::from(u8::from(b.ordered[i].class == Some(k))));
    let ce = cross_entropy(logits.view(), y.view()).map_err(|e| e.to_string())?;
    ensure((obj.loss - ce).abs() <= 1e-12, format!("alpha=0 objective {} vs cross-entropy {ce}", obj.loss))?;
    let mut r = rng(4);
    for _ in 0..200 {
        let probs = Array2::from_shape_fn((5, 7), |_| rand::Rng::random::<f64>(&mut r));
        let probs = &probs / &probs.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let g = estimate_class_weights(probs.view()).map_err(|e| e.to_string())?;
        ensure(g.max() == 1.0, format!("gamma max {}", g.max()))?;
    }
    Ok("entropy uniform/one-hot, alpha=0 reduction, gamma max = 1".into())
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let g = array![[1.0, -2.5, 0.25], [3.0, 0.0, -1e-3]];
    for lambda in [0.0, 0.1, 0.7, 2.0] {
        let out = reverse_gradient(&g, lambda);
        let err = (&out + &g.mapv(|v| lambda * v)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(err <= 1e-9, format!("reversal error {err} at lambda {lambda}"))?;
    }

    let tasks = vec![(Jigsaw, 5), (Rotation, 4)];
    let mut r = rng(21);
    let s = batch(&mut r, Provenance::Source, &[Jigsaw, Rotation], &[Some(0), Some(2), Some(1)], &[(Jigsaw, 3), (Rotation, 2), (Jigsaw, 1)]);
    let t = batch(&mut r, Provenance::Target, &[Jigsaw, Rotation], &[None, None], &[(Rotation, 1), (Jigsaw, 4)]);
    let mut worst = 0.0f64;
    let mut check = |name: &str, rep: FdReport| -> std::result::Result<(), String> {
        worst = worst.max(rep.max_rel_error);
        ensure(rep.checked >= 50 && rep.max_rel_error <= 1e-4, format!("{name}: {rep:?}"))
    };

    let model = init_parameters(&tiny_spec(3, tasks.clone(), false), 31).unwrap();
    let w = LossWeights { alpha_s: BTreeMap::from([(Jigsaw, 0.7), (Rotation, 0.4)]), ..Default::default() };
    let obj = dg_objective(&s, &model, &w).unwrap();
    check("dg", finite_difference_check(&model, &obj.grads, |_| true, |m| dg_objective(&s, m, &w).unwrap().loss, 4, 60, 3))?;

    let w_da = LossWeights { eta: 0.1, alpha_t: BTreeMap::from([(Jigsaw, 0.5), (Rotation, 0.9)]), ..w.clone() };
    let obj = da_objective(&s, &t, &model, &w_da).unwrap();
    check("da", finite_difference_check(&model, &obj.grads, |_| true, |m| da_objective(&s, &t, m, &w_da).unwrap().loss, 4, 60, 4))?;

    let pda_model = init_parameters(&tiny_spec(3, tasks, true), 32).unwrap();
    let w_pda = LossWeights { eta: 0.2, alpha_t: BTreeMap::from([(Jigsaw, 1.0), (Rotation, 1.0)]), lambda_max: 1.0, ..Default::default() };
    let gamma = estimate_class_weights(array![[0.6, 0.3, 0.1], [0.5, 0.4, 0.1]].view()).unwrap();
    let lambda = 0.4;
    let obj = pda_objective(&s, &t, &pda_model, &w_pda, &gamma, lambda).unwrap();
    check(
        "pda features",
        finite_difference_check(&pda_model, &obj.grads, |n| !n.starts_with("discriminator"), |m| {
            pda_objective(&s, &t, m, &w_pda, &gamma, lambda).unwrap().loss
        }, 4, 60, 5),
    )?;
    check(
        "pda discriminator",
        finite_difference_check(&pda_model, &obj.grads, |n| n.starts_with("discriminator"), |m| {
            pda_objective(&s, &t, m, &w_pda, &gamma, lambda).unwrap().terms.adversarial.unwrap()
        }, 8, 50, 6),
    )?;
    let elapsed = start.elapsed();
    within(elapsed, 120, "gradient checks")?;
    Ok(format!("reversal exact to 1e-9; max relative FD error {worst:.2e} in {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- desk scale

const SEEDS: [u64; 3] = [0, 1, 2];
/// Held-out style of the DG and DA runs (inverted).
const HELD_OUT: usize = 1;
/// Held-out style of the PDA run (colored).
const PDA_HELD_OUT: usize = 2;

/// Four-style glyph domains: plain, inverted, colored, textured.
struct Desk {
    domains: Vec<DomainDataset>,
}

impl Desk {
    fn new() -> Self {
        let styles = vec![Style::Plain, Style::Inverted, Style::Colored, Style::Textured];
        let spec = SynthSpec { num_classes: 10, per_domain_count: 500, image_size: 32, styles };
        Self { domains: synth_domains(&spec, 0).expect("synthetic domains") }
    }

    fn sources(&self) -> Vec<DomainDataset> {
        self.sources_without(HELD_OUT)
    }

    fn sources_without(&self, held_out: usize) -> Vec<DomainDataset> {
        (0..self.domains.len()).filter(|&i| i != held_out).map(|i| self.domains[i].clone()).collect()
    }

    fn target(&self) -> &DomainDataset {
        &self.domains[HELD_OUT]
    }

    /// Reference backbone trained from scratch for six epochs.
    fn config(kind: Scenario, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::preset(kind);
        c.scenario.epochs = 6;
        c.scenario.batch_size = 32;
        c.scenario.seed = seed;
        c.optimizer.lr = 0.01;
        c
    }

    fn dg(tasks: &[TaskKind], alpha: f64, beta: f64, seed: u64) -> TrainConfig {
        let mut c = Self::config(Scenario::Dg, seed);
        c.tasks.active = tasks.to_vec();
        c.weights.alpha_s_jigsaw = if tasks.contains(&Jigsaw) { alpha } else { 0.0 };
        c.weights.alpha_s_rotation = if tasks.contains(&Rotation) { alpha } else { 0.0 };
        c.scenario.beta = beta;
        c
    }

    fn run_dg(&self, c: &TrainConfig) -> TrainOutcome {
        train(c, &self.sources(), None, Some(self.target())).expect("training run")
    }

    fn run_da(&self, c: &TrainConfig) -> TrainOutcome {
        train(c, &self.sources(), Some(&self.target().unlabeled()), Some(self.target())).expect("training run")
    }
}

fn final_target(out: &TrainOutcome) -> f64 {
    out.history.last().and_then(|r| r.target_acc).expect("target accuracy recorded")
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn list(v: &[f64]) -> String {
    v.iter().map(|&a| pct(a)).collect::<Vec<_>>().join(" ")
}

/// Runs shared by the DG gain, failure-regime and pretext-curve criteria.
struct DgRuns {
    deepall: Vec<f64>,
    jigsaw: Vec<f64>,
    rotation: Vec<f64>,
    jigsaw_history: Vec<MetricsRecord>,
    rotation_history: Vec<MetricsRecord>,
    elapsed: Duration,
}

fn dg_runs(desk: &Desk) -> DgRuns {
    let start = Instant::now();
    let mut runs = DgRuns {
        deepall: vec![],
        jigsaw: vec![],
        rotation: vec![],
        jigsaw_history: vec![],
        rotation_history: vec![],
        elapsed: Duration::ZERO,
    };
    for seed in SEEDS {
        runs.deepall.push(final_target(&desk.run_dg(&Desk::dg(&[], 0.0, 1.0, seed))));
        let j = desk.run_dg(&Desk::dg(&[Jigsaw], 0.7, 0.6, seed));
        runs.jigsaw.push(final_target(&j));
        let r = desk.run_dg(&Desk::dg(&[Rotation], 0.4, 0.4, seed));
        runs.rotation.push(final_target(&r));
        if seed == SEEDS[0] {
            runs.jigsaw_history = j.history;
            runs.rotation_history = r.history;
        }
    }
    runs.elapsed = start.elapsed();
    runs
}

fn dg_gain(runs: &DgRuns) -> Check {
    let (base, jig, rot) = (mean_of(&runs.deepall), mean_of(&runs.jigsaw), mean_of(&runs.rotation));
    let detail = format!(
        "DeepAll {} [{}], Jigsaw {} [{}], Rotation {} [{}], {:.0}s",
        pct(base),
        list(&runs.deepall),
        pct(jig),
        list(&runs.jigsaw),
        pct(rot),
        list(&runs.rotation),
        runs.elapsed.as_secs_f64()
    );
    ensure(jig >= base - 0.005 && rot >= base - 0.005, format!("a method falls below DeepAll: {detail}"))?;
    ensure(jig.max(rot) >= base + 0.01, format!("no method gains a point: {detail}"))?;
    within(runs.elapsed, 900, "DG runs")?;
    Ok(detail)
}

fn failure_regime(desk: &Desk, runs: &DgRuns) -> Check {
    let zero = final_target(&desk.run_dg(&Desk::dg(&[Jigsaw], 0.7, 0.0, SEEDS[0])));
    let full: Vec<f64> = SEEDS.iter().map(|&s| final_target(&desk.run_dg(&Desk::dg(&[Jigsaw], 0.9, 1.0, s)))).collect();
    let base = mean_of(&runs.deepall);
    let detail = format!(
        "beta=0: {}; beta=1 alpha=0.9: {} [{}] vs DeepAll {} [{}]",
        pct(zero),
        pct(mean_of(&full)),
        list(&full),
        pct(base),
        list(&runs.deepall)
    );
    ensure(zero <= 0.30, format!("beta=0 too accurate: {detail}"))?;
    ensure(mean_of(&full) <= base + 0.005, format!("beta=1 beats DeepAll: {detail}"))?;
    Ok(detail)
}

fn da_ablation(desk: &Desk) -> Check {
    let variant = |alpha_t: f64, eta: f64| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut c = Desk::config(Scenario::Da, seed);
                c.tasks.active = vec![Jigsaw];
                c.weights.alpha_s_jigsaw = 0.7;
                c.weights.alpha_t_jigsaw = alpha_t;
                c.weights.eta = eta;
                final_target(&desk.run_da(&c))
            })
            .collect()
    };
    let full = variant(0.7, 0.1);
    let none = variant(0.0, 0.0);
    let alpha_only = variant(0.7, 0.0);
    let eta_only = variant(0.0, 0.1);
    let [f, n, a, e] = [&full, &none, &alpha_only, &eta_only].map(|v| mean_of(v));
    let detail = format!(
        "full {} [{}], alpha_t=0 eta=0 {} [{}], alpha_t only {} [{}], eta only {} [{}]",
        pct(f),
        list(&full),
        pct(n),
        list(&none),
        pct(a),
        list(&alpha_only),
        pct(e),
        list(&eta_only)
    );
    ensure(f >= n, format!("full DA below the non-adaptive run: {detail}"))?;
    // Contributions are gains over the non-adaptive run.
    ensure(a - n >= e - n, format!("entropy term contributes more than the target pretext task: {detail}"))?;
    Ok(detail)
}

fn pda_separation(desk: &Desk) -> Check {
    let present: BTreeSet<usize> = (0..5).collect();
    let eval = pda_filter(&desk.domains[PDA_HELD_OUT], &present).map_err(|e| e.to_string())?;
    let mut c = Desk::config(Scenario::Pda, SEEDS[0]);
    c.tasks.active = vec![Jigsaw];
    let sources = desk.sources_without(PDA_HELD_OUT);
    let out = train(&c, &sources, Some(&eval.unlabeled()), Some(&eval)).map_err(|e| e.to_string())?;
    let gamma = out.history.last().and_then(|r| r.gamma.clone()).ok_or("no gamma recorded")?;
    let (inside, outside): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
        gamma.iter().copied().enumerate().partition(|(k, _)| present.contains(k));
    let mean_g = |v: &[(usize, f64)]| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
    let (gin, gout) = (mean_g(&inside), mean_g(&outside));
    let lambdas: Vec<f64> = out.history.iter().map(|r| r.lambda).collect();
    let cap = c.weights.lambda_max;
    let detail = format!(
        "gamma present {gin:.3}, absent {gout:.3}; lambda {:?}; target acc {}",
        lambdas.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>(),
        pct(final_target(&out))
    );
    ensure(gout < 0.5 * gin, format!("no separation: {detail}"))?;
    ensure(lambdas.windows(2).all(|w| w[1] >= w[0]), format!("lambda not monotone: {detail}"))?;
    ensure(lambdas.iter().all(|&l| l <= cap), format!("lambda above {cap}: {detail}"))?;
    Ok(detail)
}

fn pretext_curves(runs: &DgRuns) -> Check {
    let curve = |h: &[MetricsRecord], t: TaskKind| -> (f64, f64) {
        (h.first().unwrap().pretext_acc[&t], h.last().unwrap().pretext_acc[&t])
    };
    let (j0, j1) = curve(&runs.jigsaw_history, Jigsaw);
    let (r0, r1) = curve(&runs.rotation_history, Rotation);
    let detail = format!("jigsaw {} -> {}, rotation {} -> {}", pct(j0), pct(j1), pct(r0), pct(r1));
    ensure(j1 > j0 && r1 > r0, format!("pretext accuracy did not rise: {detail}"))?;
    Ok(detail)
}

fn determinism() -> Check {
    let spec = SynthSpec { num_classes: 4, per_domain_count: 60, image_size: 24, styles: vec![Style::Plain, Style::Sketch] };
    let d = synth_domains(&spec, 3).map_err(|e| e.to_string())?;
    let mut c = TrainConfig::preset(Scenario::Dg);
    c.scenario.epochs = 2;
    c.scenario.batch_size = 16;
    c.tasks.active = vec![Jigsaw, Rotation];
    c.weights.alpha_s_rotation = 0.4;
    c.model.conv1 = 8;
    c.model.conv2 = 8;
    c.model.fc1 = 32;
    c.model.fc2 = 16;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let out = train(&c, &d[..1], None, Some(&d[1])).map_err(|e| e.to_string())?;
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        save_checkpoint(&out.checkpoint, &ckpt).map_err(|e| e.to_string())?;
        let metrics = dir.path().join(format!("{run}.csv"));
        write_metrics(&out.history, &metrics).map_err(|e| e.to_string())?;
        let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
        files.push((read(&metrics)?, read(&ckpt)?));
    }
    ensure(files[0].0 == files[1].0, "metrics differ")?;
    ensure(files[0].1 == files[1].1, "checkpoints differ")?;
    Ok(format!("metrics ({} bytes) and checkpoints ({} bytes) identical", files[0].0.len(), files[0].1.len()))
}

// ---------------------------------------------------------------- driver

fn run(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)"),
        Err(detail) => println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let filter: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: usize| filter.as_ref().is_none_or(|f| f.contains(&id));
    let mut ok = true;
    if wanted(1) {
        ok &= run(1, "permutation oracle", permutation_oracle);
    }
    if wanted(2) {
        ok &= run(2, "transform algebra", transform_algebra);
    }
    if wanted(3) {
        ok &= run(3, "loss identities", loss_identities);
    }
    if wanted(4) {
        ok &= run(4, "gradient correctness", gradient_correctness);
    }
    let desk = Desk::new();
    let needs_dg = [5, 6, 9].into_iter().any(wanted);
    let runs = needs_dg.then(|| dg_runs(&desk));
    if wanted(5) {
        ok &= run(5, "desk DG gain", || dg_gain(runs.as_ref().unwrap()));
    }
    if wanted(6) {
        ok &= run(6, "failure regimes", || failure_regime(&desk, runs.as_ref().unwrap()));
    }
    if wanted(7) {
        ok &= run(7, "DA ablation direction", || da_ablation(&desk));
    }
    if wanted(8) {
        ok &= run(8, "PDA class-weight separation", || pda_separation(&desk));
    }
    if wanted(9) {
        ok &= run(9, "pretext learning curves", || pretext_curves(runs.as_ref().unwrap()));
    }
    if wanted(10) {
        ok &= run(10, "determinism", determinism);
    }
    if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
