//! Image tensors and the label-generating transformations: rotation by
//! quarter turns, grid decomposition with tile shuffling, and the training
//! augmentation (random area crop, bilinear resize, horizontal flip).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::permutations::{Permutation, PermutationSet};

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return invalid(format!("degenerate image {channels}x{height}x{width}"));
        }
        if data.len() != channels * height * width {
            return invalid(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return invalid(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            ));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    /// Replaces every channel by the per-pixel channel mean.
    pub fn to_grayscale(&self) -> Self {
        let n = self.channels as f32;
        Self::from_fn(self.channels, self.height, self.width, |_, y, x| {
            (0..self.channels).map(|c| self.get(c, y, x)).sum::<f32>() / n
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Jigsaw,
    Rotation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Jigsaw => "jigsaw",
            TaskKind::Rotation => "rotation",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jigsaw" => Ok(TaskKind::Jigsaw),
            "rotation" => Ok(TaskKind::Rotation),
            _ => invalid(format!("unknown pretext task `{s}` (expected jigsaw or rotation)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Probability that a jigsaw tile is converted to grayscale.
pub const DEFAULT_GRAY_TILE_PROB: f64 = 0.1;

#[derive(Debug, Clone)]
pub enum PretextTask {
    Rotation,
    Jigsaw {
        grid_n: usize,
        perms: Arc<PermutationSet>,
        gray_prob: f64,
    },
}

impl PretextTask {
    pub fn jigsaw(grid_n: usize, perms: Arc<PermutationSet>) -> Result<Self> {
        if grid_n < 2 || perms.n_tiles() != grid_n * grid_n {
            return invalid(format!(
                "permutations over {} tiles do not fit a {grid_n}x{grid_n} grid",
                perms.n_tiles()
            ));
        }
        Ok(PretextTask::Jigsaw { grid_n, perms, gray_prob: DEFAULT_GRAY_TILE_PROB })
    }

    /// Same task with tile grayscale jitter at probability `p`.
    pub fn with_gray_prob(self, p: f64) -> Self {
        match self {
            PretextTask::Jigsaw { grid_n, perms, .. } => PretextTask::Jigsaw { grid_n, perms, gray_prob: p },
            other => other,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            PretextTask::Rotation => TaskKind::Rotation,
            PretextTask::Jigsaw { .. } => TaskKind::Jigsaw,
        }
    }

    /// Size of the label space: 4 for rotation, `P` for jigsaw.
    pub fn cardinality(&self) -> usize {
        match self {
            PretextTask::Rotation => 4,
            PretextTask::Jigsaw { perms, .. } => perms.len(),
        }
    }
}

/// A transformed image together with its pretext label.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSupSample {
    pub image: ImageTensor,
    pub pretext_label: usize,
    pub task: TaskKind,
}

/// Rotates counterclockwise by `k` quarter turns.
pub fn rotate(img: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height, img.width);
    Ok(match k {
        0 => img.clone(),
        1 => ImageTensor::from_fn(img.channels, w, h, |c, y, x| img.get(c, x, w - 1 - y)),
        2 => ImageTensor::from_fn(img.channels, h, w, |c, y, x| img.get(c, h - 1 - y, w - 1 - x)),
        3 => ImageTensor::from_fn(img.channels, w, h, |c, y, x| img.get(c, h - 1 - x, y)),
        _ => return invalid(format!("rotation index {k} outside 0..4")),
    })
}

/// Center-crops to the largest size divisible by `grid_n` and cuts row-major tiles.
pub fn decompose_grid(img: &ImageTensor, grid_n: usize) -> Result<Vec<ImageTensor>> {
    if grid_n < 2 {
        return invalid(format!("grid side must be at least 2, got {grid_n}"));
    }
    if img.height < grid_n || img.width < grid_n {
        return invalid(format!("{}x{} image is smaller than a {grid_n}x{grid_n} grid", img.height, img.width));
    }
    let (th, tw) = (img.height / grid_n, img.width / grid_n);
    let top = (img.height - th * grid_n) / 2;
    let left = (img.width - tw * grid_n) / 2;
    let mut tiles = Vec::with_capacity(grid_n * grid_n);
    for r in 0..grid_n {
        for c in 0..grid_n {
            tiles.push(img.crop(top + r * th, left + c * tw, th, tw)?);
        }
    }
    Ok(tiles)
}

/// Places `tiles[perm[i]]` at grid cell `i` of a square grid.
pub fn reassemble(tiles: &[ImageTensor], perm: &Permutation) -> Result<ImageTensor> {
    let side = (tiles.len() as f64).sqrt().round() as usize;
    if side * side != tiles.len() {
        return invalid(format!("{} tiles do not form a square grid", tiles.len()));
    }
    reassemble_grid(tiles, perm, side, side)
}

/// [`reassemble`] on an explicit `rows x cols` grid.
pub fn reassemble_grid(tiles: &[ImageTensor], perm: &Permutation, rows: usize, cols: usize) -> Result<ImageTensor> {
    if tiles.len() != perm.len() || tiles.len() != rows * cols || tiles.is_empty() {
        return invalid(format!(
            "{} tiles, permutation of {}, grid {rows}x{cols}",
            tiles.len(),
            perm.len()
        ));
    }
    let first = &tiles[0];
    let (ch, th, tw) = (first.channels, first.height, first.width);
    if tiles.iter().any(|t| t.channels != ch || t.height != th || t.width != tw) {
        return invalid("tiles differ in shape");
    }
    let map = perm.mapping();
    Ok(ImageTensor::from_fn(ch, rows * th, cols * tw, |c, y, x| {
        let cell = (y / th) * cols + x / tw;
        tiles[map[cell]].get(c, y % th, x % tw)
    }))
}

/// Builds the pretext sample for `label`. Jigsaw outputs cover the tiled
/// (center-cropped) area; each tile is independently grayscaled with the
/// task's `gray_prob` before shuffling.
pub fn apply_pretext<R: Rng + ?Sized>(
    img: &ImageTensor,
    task: &PretextTask,
    label: usize,
    rng: &mut R,
) -> Result<SelfSupSample> {
    if label >= task.cardinality() {
        return invalid(format!("label {label} outside the {} label space", task.kind()));
    }
    let image = match task {
        PretextTask::Rotation => rotate(img, label)?,
        PretextTask::Jigsaw { grid_n, perms, gray_prob } => {
            let tiles = decompose_grid(img, *grid_n)?
                .into_iter()
                .map(|t| if rng.random_bool(*gray_prob) { t.to_grayscale() } else { t })
                .collect::<Vec<_>>();
            reassemble(&tiles, perms.get(label).expect("label checked"))?
        }
    };
    Ok(SelfSupSample { image, pretext_label: label, task: task.kind() })
}

/// Bilinear resampling of the window `[top, top + h) x [left, left + w)`
/// (continuous coordinates) onto an `out_h x out_w` grid, half-pixel centers.
pub fn resample_window(
    img: &ImageTensor,
    top: f64,
    left: f64,
    h: f64,
    w: f64,
    out_h: usize,
    out_w: usize,
) -> ImageTensor {
    let sy = h / out_h as f64;
    let sx = w / out_w as f64;
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    ImageTensor::from_fn(img.channels, out_h, out_w, |c, y, x| {
        let fy = clamp(top + (y as f64 + 0.5) * sy - 0.5, img.height);
        let fx = clamp(left + (x as f64 + 0.5) * sx - 0.5, img.width);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let v = |yy, xx| img.get(c, yy, xx) as f64;
        let top_row = v(y0, x0) * (1.0 - dx) + v(y0, x1) * dx;
        let bottom_row = v(y1, x0) * (1.0 - dx) + v(y1, x1) * dx;
        (top_row * (1.0 - dy) + bottom_row * dy) as f32
    })
}

pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    resample_window(img, 0.0, 0.0, img.height as f64, img.width as f64, out_h, out_w)
}

/// One draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Retained area fraction in `[0.8, 1.0]`.
    pub area_fraction: f64,
    /// Crop placement in `[0, 1]` along each axis of the free range.
    pub offset_y: f64,
    pub offset_x: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { area_fraction: 1.0, offset_y: 0.0, offset_x: 0.0, flip: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            area_fraction: rng.random_range(0.8..=1.0),
            offset_y: rng.random(),
            offset_x: rng.random(),
            flip: rng.random_bool(0.5),
        }
    }
}

pub fn augment_with(img: &ImageTensor, params: AugmentParams) -> ImageTensor {
    let scale = params.area_fraction.clamp(0.0, 1.0).sqrt();
    let (h, w) = (img.height as f64 * scale, img.width as f64 * scale);
    let top = (img.height as f64 - h) * params.offset_y.clamp(0.0, 1.0);
    let left = (img.width as f64 - w) * params.offset_x.clamp(0.0, 1.0);
    let out = resample_window(img, top, left, h, w, img.height, img.width);
    if params.flip {
        out.flip_horizontal()
    } else {
        out
    }
}

pub fn augment<R: Rng + ?Sized>(img: &ImageTensor, rng: &mut R) -> ImageTensor {
    augment_with(img, AugmentParams::sample(rng))
}
