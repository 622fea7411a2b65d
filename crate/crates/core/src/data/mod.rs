//! Datasets, validation splits, batch assembly and on-disk export.

mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::seeding;
use crate::transforms::{apply_pretext, augment, resize_bilinear, ImageTensor, PretextTask, SelfSupSample, TaskKind};

pub use synth::{synth_domains, Style, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: Option<usize>,
}

/// Samples of one domain; either all labeled or all unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    samples: Vec<Sample>,
    num_classes: usize,
    domain: Option<String>,
}

impl DomainDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, domain: Option<String>) -> Result<Self> {
        if num_classes == 0 {
            return invalid("num_classes must be positive");
        }
        let labeled = samples.iter().filter(|s| s.label.is_some()).count();
        if labeled != 0 && labeled != samples.len() {
            return invalid("dataset mixes labeled and unlabeled samples");
        }
        if let Some(bad) = samples.iter().filter_map(|s| s.label).find(|&l| l >= num_classes) {
            return invalid(format!("label {bad} outside 0..{num_classes}"));
        }
        Ok(Self { samples, num_classes, domain })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Option<&str> {
        self.domain.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.first().is_some_and(|s| s.label.is_some())
    }

    /// Same images with labels dropped.
    pub fn unlabeled(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| Sample { image: s.image.clone(), label: None }).collect(),
            num_classes: self.num_classes,
            domain: self.domain.clone(),
        }
    }

    /// Concatenation of several datasets sharing one label space; domain tags are dropped.
    pub fn pooled(parts: &[&DomainDataset]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("nothing to pool");
        };
        if parts.iter().any(|p| p.num_classes != first.num_classes) {
            return invalid("pooled datasets disagree on num_classes");
        }
        let samples = parts.iter().flat_map(|p| p.samples.iter().cloned()).collect();
        Self::new(samples, first.num_classes, None)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Stratified, seeded train/validation partition.
pub fn split_validation(ds: &DomainDataset, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return invalid(format!("validation fraction {fraction} outside (0, 1)"));
    }
    if !ds.is_labeled() {
        return invalid("validation split needs a labeled dataset");
    }
    let mut is_val = vec![false; ds.len()];
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == Some(class)).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!("class {class} has a single sample")));
        }
        let mut rng = seeding::stream(seed, &[seeding::tag("validation-split"), class as u64]);
        members.shuffle(&mut rng);
        for &i in &members[..round_half_up(fraction * members.len() as f64)] {
            is_val[i] = true;
        }
    }
    let pick = |want: bool| {
        let samples = ds.samples.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(s, _)| s.clone()).collect();
        DomainDataset { samples, num_classes: ds.num_classes, domain: ds.domain.clone() }
    };
    Ok((pick(false), pick(true)))
}

/// Restricts a dataset to `keep_classes`, keeping the original label space size.
pub fn pda_filter(ds: &DomainDataset, keep_classes: &BTreeSet<usize>) -> Result<DomainDataset> {
    if keep_classes.is_empty() {
        return invalid("empty class subset");
    }
    if let Some(c) = keep_classes.iter().find(|&&c| c >= ds.num_classes) {
        return invalid(format!("class {c} outside 0..{}", ds.num_classes));
    }
    let samples = ds
        .samples
        .iter()
        .filter(|s| s.label.is_some_and(|l| keep_classes.contains(&l)))
        .cloned()
        .collect();
    DomainDataset::new(samples, ds.num_classes, ds.domain.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Source,
    Target,
}

/// An untransformed image; it carries pretext label 0 for every active task.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedItem {
    pub image: ImageTensor,
    pub class: Option<usize>,
}

/// A mixture of ordered and pretext-transformed images drawn from one pool.
#[derive(Debug, Clone)]
pub struct Batch {
    pub provenance: Provenance,
    pub tasks: Vec<TaskKind>,
    pub ordered: Vec<OrderedItem>,
    pub transformed: Vec<SelfSupSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ordered.len() + self.transformed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All images, ordered items first.
    pub fn images(&self) -> impl Iterator<Item = &ImageTensor> {
        self.ordered.iter().map(|o| &o.image).chain(self.transformed.iter().map(|t| &t.image))
    }

    /// One-hot object label of ordered item `i`, if labeled.
    pub fn class_onehot(&self, i: usize, num_classes: usize) -> Option<Vec<f64>> {
        self.ordered[i].class.map(|c| (0..num_classes).map(|k| f64::from(u8::from(k == c))).collect())
    }
}

/// Number of untransformed items in a batch of `size`.
pub fn ordered_count(size: usize, beta: f64) -> usize {
    round_half_up(beta * size as f64).min(size)
}

/// Assembles a batch from the drawn samples.
///
/// The first `round(beta * B)` draws become ordered items; the rest are
/// transformed by a uniformly chosen task with a uniformly chosen nonzero
/// label. Transformed images are resampled back to the source image size.
pub fn make_batch<R: Rng + ?Sized>(
    draw: &[&Sample],
    provenance: Provenance,
    beta: f64,
    tasks: &[PretextTask],
    augment_images: bool,
    rng: &mut R,
) -> Result<Batch> {
    if draw.is_empty() {
        return invalid("empty draw");
    }
    if !(0.0..=1.0).contains(&beta) {
        return invalid(format!("beta {beta} outside [0, 1]"));
    }
    let n_ordered = ordered_count(draw.len(), beta);
    if n_ordered < draw.len() {
        if tasks.is_empty() {
            return invalid("transformed items requested without any pretext task");
        }
        if let Some(t) = tasks.iter().find(|t| t.cardinality() < 2) {
            return invalid(format!("{} has no non-identity label", t.kind()));
        }
    }
    let mut batch = Batch {
        provenance,
        tasks: tasks.iter().map(PretextTask::kind).collect(),
        ordered: Vec::with_capacity(n_ordered),
        transformed: Vec::with_capacity(draw.len() - n_ordered),
    };
    for (i, sample) in draw.iter().enumerate() {
        let image = if augment_images { augment(&sample.image, rng) } else { sample.image.clone() };
        if i < n_ordered {
            batch.ordered.push(OrderedItem { image, class: sample.label });
            continue;
        }
        let task = &tasks[rng.random_range(0..tasks.len())];
        let label = rng.random_range(1..task.cardinality());
        let mut s = apply_pretext(&image, task, label, rng)?;
        s.image = resize_bilinear(&s.image, image.height(), image.width());
        batch.transformed.push(s);
    }
    Ok(batch)
}

/// Draws without replacement over successive seeded shuffles of a pool.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    len: usize,
    seed: u64,
    shuffles: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return invalid("empty pool");
        }
        Ok(Self { len, seed, shuffles: 0, order: Vec::new(), cursor: 0 })
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut seeding::stream(self.seed, &[seeding::tag("epoch-shuffle"), self.shuffles]));
        self.shuffles += 1;
        self.cursor = 0;
    }

    /// Next `count` indices, continuing into a fresh shuffle when exhausted.
    pub fn next_indices(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            let take = (count - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    /// Remaining indices of the current shuffle, starting a new one if none remain.
    pub fn next_chunk(&mut self, max: usize) -> Vec<usize> {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        let take = max.min(self.order.len() - self.cursor);
        let out = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        out
    }
}

/// Manifest file name inside an exported dataset directory.
pub const MANIFEST: &str = "manifest.csv";

/// Writes each domain to `<dir>/<domain>/NNNNN.png` plus a `path,class,domain` manifest.
pub fn export_domains(dir: impl AsRef<Path>, domains: &[DomainDataset]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (d, ds) in domains.iter().enumerate() {
        let name = ds.domain.clone().unwrap_or_else(|| format!("domain{d}"));
        fs::create_dir_all(dir.join(&name))?;
        for (i, s) in ds.samples.iter().enumerate() {
            let rel = format!("{name}/{i:05}.png");
            save_png(&s.image, dir.join(&rel))?;
            let class = s.label.map(|l| l.to_string()).unwrap_or_default();
            manifest.push_str(&format!("{rel},{class},{name}\n"));
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads an exported directory back as one dataset per domain, in first-seen order.
pub fn load_domains(dir: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Vec<DomainDataset>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut names: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<Sample>> = Vec::new();
    let mut max_class = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [path, class, domain] = fields[..] else {
            return Err(Error::Format { line: line_no, message: format!("expected 3 fields in `{line}`") });
        };
        let label = match class.trim() {
            "" => None,
            c => Some(c.parse::<usize>().map_err(|e| Error::Format { line: line_no, message: e.to_string() })?),
        };
        max_class = max_class.max(label.map_or(0, |l| l + 1));
        let image = load_png(dir.join(path))?;
        let slot = match names.iter().position(|n| n == domain) {
            Some(p) => p,
            None => {
                names.push(domain.to_string());
                groups.push(Vec::new());
                names.len() - 1
            }
        };
        groups[slot].push(Sample { image, label });
    }
    let classes = num_classes.unwrap_or(max_class.max(1));
    names
        .into_iter()
        .zip(groups)
        .map(|(name, samples)| DomainDataset::new(samples, classes, Some(name)))
        .collect()
}

pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let q = |v: f32| (v * 255.0).round() as u8;
    if img.channels() == 1 {
        let buf = image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(img.get(0, y as usize, x as usize))]));
        buf.save(path)?;
    } else {
        let buf = image::RgbImage::from_fn(w, h, |x, y| {
            let px = |c: usize| q(img.get(c.min(img.channels() - 1), y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path)?;
    }
    Ok(())
}

/// Loads any image file as a 3-channel tensor.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}
