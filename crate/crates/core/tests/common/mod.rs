//! Helpers shared by the integration and acceptance tests: tiny models,
//! hand-built batches, naive reference arithmetic, finite differences.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdomain_core::data::{Batch, OrderedItem, Provenance};
use xdomain_core::model::layers::LayerSpec;
use xdomain_core::model::{BackboneSpec, ModelBundle, ModelSpec};
use xdomain_core::transforms::{ImageTensor, SelfSupSample, TaskKind};

pub const SIDE: usize = 6;

pub fn tiny_spec(num_classes: usize, pretext: Vec<(TaskKind, usize)>, disc: bool) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec {
            input: [3, SIDE, SIDE],
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 6 },
                LayerSpec::Relu,
            ],
        },
        num_classes,
        pretext,
        discriminator_hidden: disc.then_some([5, 4]),
    }
}

pub fn random_image(rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::from_fn(3, SIDE, SIDE, |_, _, _| rng.random::<f32>())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `classes[i]` for ordered items, `(task, label)` for transformed ones.
pub fn batch(
    rng: &mut ChaCha8Rng,
    provenance: Provenance,
    tasks: &[TaskKind],
    classes: &[Option<usize>],
    transformed: &[(TaskKind, usize)],
) -> Batch {
    Batch {
        provenance,
        tasks: tasks.to_vec(),
        ordered: classes.iter().map(|&class| OrderedItem { image: random_image(rng), class }).collect(),
        transformed: transformed
            .iter()
            .map(|&(task, pretext_label)| SelfSupSample { image: random_image(rng), pretext_label, task })
            .collect(),
    }
}

/// Row-by-row affine map computed with plain loops.
pub fn naive_affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &[f64]) -> Vec<Vec<f64>> {
    x.rows()
        .into_iter()
        .map(|row| {
            (0..w.nrows())
                .map(|o| b[o] + (0..w.ncols()).map(|i| w[[o, i]] * row[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-sum_k y_k log p_k` with explicit one-hot vectors.
pub fn naive_ce(z: &[f64], class: usize) -> f64 {
    let p = naive_softmax(z);
    let y: Vec<f64> = (0..z.len()).map(|k| if k == class { 1.0 } else { 0.0 }).collect();
    -y.iter().zip(&p).map(|(y, p)| y * p.ln()).sum::<f64>()
}

pub fn naive_entropy(z: &[f64]) -> f64 {
    -naive_softmax(z).iter().map(|p| p * p.ln()).sum::<f64>()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Central differences of `f` against `analytic` at coordinates drawn from
/// every parameter tensor accepted by `select` (at least `per_tensor` each,
/// `min_total` overall).
pub fn finite_difference_check(
    model: &ModelBundle,
    analytic: &ModelBundle,
    select: impl Fn(&str) -> bool,
    f: impl Fn(&ModelBundle) -> f64,
    per_tensor: usize,
    min_total: usize,
    seed: u64,
) -> FdReport {
    let mut r = rng(seed);
    let grads: Vec<(String, Vec<f64>)> =
        analytic.params().into_iter().map(|(n, p)| (n, p.to_vec())).collect();
    let tensors: Vec<usize> = grads.iter().enumerate().filter(|(_, (n, _))| select(n)).map(|(i, _)| i).collect();
    assert!(!tensors.is_empty(), "no tensors selected");
    let mut coords = Vec::new();
    for &t in &tensors {
        for _ in 0..per_tensor {
            coords.push((t, r.random_range(0..grads[t].1.len())));
        }
    }
    while coords.len() < min_total {
        let t = tensors[r.random_range(0..tensors.len())];
        coords.push((t, r.random_range(0..grads[t].1.len())));
    }
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for &(t, k) in &coords {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[t].1[k] += delta;
            f(&m)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = grads[t].1[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    FdReport { checked: coords.len(), max_rel_error: max_rel }
}

/// All permutations of `0..n`, built recursively and sorted.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                extend(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut vec![false; n], &mut out);
    out.sort();
    out
}

/// Exhaustive greedy max-min Hamming selection, recomputing every distance
/// against the whole selected set each round.
pub fn greedy_oracle(n: usize, count: usize) -> Vec<Vec<usize>> {
    let pool = all_permutations(n);
    let hamming = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let mut selected = vec![(0..n).collect::<Vec<_>>()];
    while selected.len() < count {
        let mut best: Option<(usize, &Vec<usize>)> = None;
        for cand in &pool {
            let d = selected.iter().map(|s| hamming(s, cand)).min().unwrap();
            if d > 0 && best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, cand));
            }
        }
        selected.push(best.expect("pool not exhausted").1.clone());
    }
    selected
}

pub fn oracle_min_distance(set: &[Vec<usize>]) -> usize {
    let mut best = usize::MAX;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            best = best.min(set[i].iter().zip(&set[j]).filter(|(x, y)| x != y).count());
        }
    }
    best
}

/// One seeded case of the transform laws; returns the first violation.
pub fn transform_algebra_case(seed: u64) -> Result<(), String> {
    use rand::seq::SliceRandom;
    use xdomain_core::permutations::Permutation;
    use xdomain_core::transforms::{decompose_grid, reassemble, rotate};

    let mut rng = rng(seed);
    let grid = rng.random_range(2..=4);
    let (th, tw) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let channels = if rng.random_bool(0.5) { 3 } else { 1 };
    let img = ImageTensor::from_fn(channels, grid * th, grid * tw, |_, _, _| rng.random::<f32>());

    for a in 0..4 {
        let ra = rotate(&img, a).map_err(|e| e.to_string())?;
        for b in 0..4 {
            let rab = rotate(&ra, b).map_err(|e| e.to_string())?;
            if rab != rotate(&img, (a + b) % 4).unwrap() {
                return Err(format!("seed {seed}: rotate {a} then {b}"));
            }
        }
    }

    let tiles = decompose_grid(&img, grid).map_err(|e| e.to_string())?;
    let n = grid * grid;
    if reassemble(&tiles, &Permutation::identity(n)).unwrap() != img {
        return Err(format!("seed {seed}: identity round trip"));
    }
    let mut mapping: Vec<usize> = (0..n).collect();
    mapping.shuffle(&mut rng);
    let p = Permutation::new(mapping.clone()).unwrap();
    let q = p.inverse();
    let shuffled = reassemble(&tiles, &p).unwrap();
    // Destination cell i holds source tile mapping[i].
    let cut = decompose_grid(&shuffled, grid).unwrap();
    if (0..n).any(|i| cut[i] != tiles[mapping[i]]) {
        return Err(format!("seed {seed}: destination-to-source convention"));
    }
    if reassemble(&cut, &q).unwrap() != img {
        return Err(format!("seed {seed}: inverse law"));
    }
    if shuffled.data().iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(format!("seed {seed}: value range"));
    }
    Ok(())
}
