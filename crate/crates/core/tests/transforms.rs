mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{rng, transform_algebra_case};
use proptest::prelude::*;
use rand::Rng;
use xdomain_core::data::{make_batch, ordered_count, Provenance, Sample};
use xdomain_core::permutations::generate_permutation_set;
use xdomain_core::transforms::{apply_pretext, augment, ImageTensor, PretextTask, TaskKind};

#[test]
fn transform_algebra_over_many_seeds() {
    for seed in 0..1000 {
        transform_algebra_case(seed).unwrap();
    }
}

fn image(seed: u64, size: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(3, size, size, |_, _, _| r.random::<f32>())
}

fn tasks(grid: usize, p: usize) -> Vec<PretextTask> {
    let perms = Arc::new(generate_permutation_set(grid * grid, p, 0).unwrap());
    vec![PretextTask::jigsaw(grid, perms).unwrap(), PretextTask::Rotation]
}

proptest! {
    #[test]
    fn batch_composition(size in 1usize..40, beta in 0.0f64..=1.0, seed in any::<u64>(), augment_images: bool) {
        let samples: Vec<Sample> = (0..size as u64).map(|i| Sample { image: image(i, 9), label: Some(i as usize % 3) }).collect();
        let draw: Vec<&Sample> = samples.iter().collect();
        let tasks = tasks(3, 5);
        let batch = make_batch(&draw, Provenance::Source, beta, &tasks, augment_images, &mut rng(seed)).unwrap();
        prop_assert_eq!(batch.ordered.len(), (beta * size as f64 + 0.5).floor() as usize);
        prop_assert_eq!(batch.ordered.len(), ordered_count(size, beta));
        prop_assert_eq!(batch.len(), size);
        for t in &batch.transformed {
            prop_assert!(t.pretext_label >= 1);
            let card = if t.task == TaskKind::Jigsaw { 5 } else { 4 };
            prop_assert!(t.pretext_label < card);
            prop_assert_eq!((t.image.height(), t.image.width()), (9, 9));
        }
        for img in batch.images() {
            prop_assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn label_zero_is_untouched(seed in any::<u64>(), size in 6usize..14) {
        let img = image(seed, size);
        let tasks = tasks(2, 4);
        let jig = tasks[0].clone().with_gray_prob(0.0);
        let s = apply_pretext(&img, &jig, 0, &mut rng(seed)).unwrap();
        let cropped = size / 2 * 2;
        let off = (size - cropped) / 2;
        prop_assert_eq!(s.image, img.crop(off, off, cropped, cropped).unwrap());
        prop_assert_eq!(apply_pretext(&img, &PretextTask::Rotation, 0, &mut rng(seed)).unwrap().image, img);
    }

    #[test]
    fn augmentation_stays_in_range(seed in any::<u64>()) {
        let img = image(seed, 12);
        let out = augment(&img, &mut rng(seed));
        prop_assert_eq!((out.height(), out.width()), (12, 12));
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn task_and_label_choice_is_uniform() {
    let samples: Vec<Sample> = (0..400).map(|i| Sample { image: image(i, 9), label: None }).collect();
    let draw: Vec<&Sample> = samples.iter().collect();
    let batch = make_batch(&draw, Provenance::Target, 0.0, &tasks(3, 5), false, &mut rng(3)).unwrap();
    let mut counts: BTreeMap<(TaskKind, usize), usize> = BTreeMap::new();
    for t in &batch.transformed {
        *counts.entry((t.task, t.pretext_label)).or_default() += 1;
    }
    // 200 draws per task spread over 4 (jigsaw) or 3 (rotation) labels.
    for (&(task, _), &c) in &counts {
        let expected = if task == TaskKind::Jigsaw { 50.0 } else { 66.7 };
        assert!((c as f64 - expected).abs() < 0.4 * expected, "{counts:?}");
    }
    assert_eq!(counts.len(), 7);
}
