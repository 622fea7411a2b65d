//! The multi-head network: a shared feature backbone, the object head, one
//! pretext head per active task, and an optional domain discriminator that
//! sits behind a gradient-reversal boundary.

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seeding;
use crate::transforms::{ImageTensor, TaskKind};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use layers::{Activation, Cache, Conv2d, Layer, LayerSpec, Linear};

/// Weight range gain for layers followed by a rectifier.
const HIDDEN_GAIN: f64 = 6.0;
/// Weight range gain for output layers.
const OUTPUT_GAIN: f64 = 1.0;

/// Sequential feature extractor descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// conv5(32)-pool2-conv5(64)-pool2-fc(1024)-fc(128), rectifiers after every hidden layer.
    pub fn reference(input: [usize; 3]) -> Self {
        Self::reference_with_widths(input, [32, 64], [1024, 128])
    }

    pub fn reference_with_widths(input: [usize; 3], conv: [usize; 2], fc: [usize; 2]) -> Self {
        use LayerSpec::*;
        Self {
            input,
            layers: vec![
                Conv { out_channels: conv[0], kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Conv { out_channels: conv[1], kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Linear { out: fc[0] },
                Relu,
                Linear { out: fc[1] },
                Relu,
            ],
        }
    }

    /// Convolutional backbone ending in global average pooling, so that an
    /// affine object head supports class activation maps.
    pub fn cam_ready(input: [usize; 3], conv: [usize; 2]) -> Self {
        use LayerSpec::*;
        Self {
            input,
            layers: vec![
                Conv { out_channels: conv[0], kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Conv { out_channels: conv[1], kernel: 5 },
                Relu,
                GlobalAvgPool,
            ],
        }
    }

    /// Walks the layer list and returns the feature dimension.
    pub fn feature_dim(&self) -> Result<usize> {
        enum Shape {
            Spatial(usize, usize, usize),
            Flat(usize),
        }
        let [c, h, w] = self.input;
        let mut shape = Shape::Spatial(c, h, w);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape) {
                (LayerSpec::Conv { out_channels, kernel }, Shape::Spatial(_, h, w)) if h >= *kernel && w >= *kernel => {
                    Shape::Spatial(*out_channels, h - kernel + 1, w - kernel + 1)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool { size }, Shape::Spatial(c, h, w)) if *size > 0 && h >= *size && w >= *size => {
                    Shape::Spatial(c, h / size, w / size)
                }
                (LayerSpec::Flatten, Shape::Spatial(c, h, w)) => Shape::Flat(c * h * w),
                (LayerSpec::Linear { out }, Shape::Flat(_)) => Shape::Flat(*out),
                (LayerSpec::GlobalAvgPool, Shape::Spatial(c, _, _)) => Shape::Flat(c),
                (l, _) => return invalid(format!("layer {i} ({l:?}) does not fit the preceding shape")),
            };
        }
        match shape {
            Shape::Flat(f) => Ok(f),
            Shape::Spatial(..) => invalid("backbone must end in a flat feature vector"),
        }
    }

    /// Whether the features are the global average of the last spatial maps.
    pub fn exposes_spatial_maps(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::GlobalAvgPool))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Active pretext tasks with their label-space sizes.
    pub pretext: Vec<(TaskKind, usize)>,
    /// Hidden widths of the domain discriminator, when present.
    pub discriminator_hidden: Option<[usize; 2]>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<usize> {
        if self.num_classes == 0 {
            return invalid("num_classes must be positive");
        }
        for (i, (task, n)) in self.pretext.iter().enumerate() {
            if *n < 2 {
                return invalid(format!("{task} head needs at least 2 classes"));
            }
            if self.pretext[..i].iter().any(|(t, _)| t == task) {
                return invalid(format!("duplicate {task} head"));
            }
        }
        if let Some(h) = self.discriminator_hidden {
            if h.contains(&0) {
                return invalid("discriminator widths must be positive");
            }
        }
        self.backbone.feature_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Layer>,
}

/// Forward caches needed to backpropagate through the backbone.
#[derive(Debug)]
pub struct BackboneTrace {
    caches: Vec<Cache>,
}

impl Backbone {
    fn build(spec: &BackboneSpec, rng: Option<&mut seeding::StreamRng>) -> Result<Self> {
        spec.feature_dim()?;
        let mut rng = rng;
        let mut channels = spec.input[0];
        let mut flat = 0usize;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let [_, mut h, mut w] = spec.input;
        for l in &spec.layers {
            layers.push(match *l {
                LayerSpec::Conv { out_channels, kernel } => {
                    let conv = match rng.as_deref_mut() {
                        Some(r) => Conv2d::init(channels, out_channels, kernel, HIDDEN_GAIN, r),
                        None => Conv2d::zeros(channels, out_channels, kernel),
                    };
                    channels = out_channels;
                    h = h - kernel + 1;
                    w = w - kernel + 1;
                    Layer::Conv(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => {
                    h /= size;
                    w /= size;
                    Layer::MaxPool(size)
                }
                LayerSpec::Flatten => {
                    flat = channels * h * w;
                    Layer::Flatten
                }
                LayerSpec::Linear { out } => {
                    let lin = match rng.as_deref_mut() {
                        Some(r) => Linear::init(flat, out, HIDDEN_GAIN, r),
                        None => Linear::zeros(flat, out),
                    };
                    flat = out;
                    Layer::Linear(lin)
                }
                LayerSpec::GlobalAvgPool => {
                    flat = channels;
                    Layer::GlobalAvgPool
                }
            });
        }
        Ok(Self { layers })
    }

    fn run(&self, x: Array4<f64>, keep_cache: bool, stop_before_gap: bool) -> Result<(Activation, Vec<Cache>)> {
        let mut act = Activation::Spatial(x);
        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        for layer in &self.layers {
            if stop_before_gap && matches!(layer, Layer::GlobalAvgPool) {
                break;
            }
            let (next, cache) = layer.forward(act, keep_cache)?;
            act = next;
            caches.extend(cache);
        }
        Ok((act, caches))
    }

    pub fn forward(&self, x: Array4<f64>) -> Result<Array2<f64>> {
        match self.run(x, false, false)?.0 {
            Activation::Flat(f) => Ok(f),
            Activation::Spatial(_) => invalid("backbone produced spatial output"),
        }
    }

    pub fn forward_traced(&self, x: Array4<f64>) -> Result<(Array2<f64>, BackboneTrace)> {
        match self.run(x, true, false)? {
            (Activation::Flat(f), caches) => Ok((f, BackboneTrace { caches })),
            _ => invalid("backbone produced spatial output"),
        }
    }

    /// Accumulates parameter gradients for a feature gradient `dfeat`.
    pub fn backward(&self, trace: &BackboneTrace, dfeat: Array2<f64>, grad: &mut Backbone) {
        let mut d = Activation::Flat(dfeat);
        for (i, ((layer, cache), g)) in self.layers.iter().zip(&trace.caches).zip(grad.layers.iter_mut()).enumerate().rev() {
            match layer.backward(cache, d, g, i > 0) {
                Some(next) => d = next,
                None => return,
            }
        }
    }
}

/// Three affine layers with rectifiers in between; the last emits one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub layers: [Linear; 3],
}

#[derive(Debug)]
pub struct DiscriminatorTrace {
    inputs: [Array2<f64>; 3],
}

impl Discriminator {
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<(Array1<f64>, DiscriminatorTrace)> {
        let x0 = features.to_owned();
        let x1 = self.layers[0].forward(x0.view())?.mapv_into(|v| v.max(0.0));
        let x2 = self.layers[1].forward(x1.view())?.mapv_into(|v| v.max(0.0));
        let out = self.layers[2].forward(x2.view())?;
        Ok((out.column(0).to_owned(), DiscriminatorTrace { inputs: [x0, x1, x2] }))
    }

    /// Accumulates parameter gradients for `dlogits`; returns the unreversed feature gradient.
    pub fn backward(&self, trace: &DiscriminatorTrace, dlogits: &Array1<f64>, grad: &mut Discriminator) -> Array2<f64> {
        let dy = dlogits.view().insert_axis(Axis(1)).to_owned();
        let [g0, g1, g2] = &mut grad.layers;
        let mut d2 = self.layers[2].backward(trace.inputs[2].view(), dy.view(), g2);
        d2.zip_mut_with(&trace.inputs[2], |g, &v| if v <= 0.0 { *g = 0.0 });
        let mut d1 = self.layers[1].backward(trace.inputs[1].view(), d2.view(), g1);
        d1.zip_mut_with(&trace.inputs[1], |g, &v| if v <= 0.0 { *g = 0.0 });
        self.layers[0].backward(trace.inputs[0].view(), d1.view(), g0)
    }
}

/// Gradient-reversal boundary: identity forward, `-lambda * g` backward.
pub fn reverse_gradient(upstream: &Array2<f64>, lambda: f64) -> Array2<f64> {
    upstream.mapv(|g| -(lambda * g))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// All trainable parameters. Gradients use the same type, zero-initialized
/// through [`ModelBundle::zeros_like`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub object_head: Linear,
    pub pretext_heads: BTreeMap<TaskKind, Linear>,
    pub discriminator: Option<Discriminator>,
}

/// Gradient container with the parameter layout of a [`ModelBundle`].
pub type Gradients = ModelBundle;

/// Fan-in-scaled uniform weights and zero biases; each component draws from
/// its own stream so adding heads does not change the backbone draw.
pub fn init_parameters(spec: &ModelSpec, seed: u64) -> Result<ModelBundle> {
    let feat = spec.validate()?;
    let mut rng = seeding::stream(seed, &[seeding::tag("init/backbone")]);
    let backbone = Backbone::build(&spec.backbone, Some(&mut rng))?;
    let mut rng = seeding::stream(seed, &[seeding::tag("init/object")]);
    let object_head = Linear::init(feat, spec.num_classes, OUTPUT_GAIN, &mut rng);
    let pretext_heads = spec
        .pretext
        .iter()
        .map(|&(task, n)| {
            let mut rng = seeding::stream(seed, &[seeding::tag("init/pretext"), seeding::tag(task.name())]);
            (task, Linear::init(feat, n, OUTPUT_GAIN, &mut rng))
        })
        .collect();
    let discriminator = spec.discriminator_hidden.map(|[h1, h2]| {
        let mut rng = seeding::stream(seed, &[seeding::tag("init/discriminator")]);
        Discriminator {
            layers: [
                Linear::init(feat, h1, HIDDEN_GAIN, &mut rng),
                Linear::init(h1, h2, HIDDEN_GAIN, &mut rng),
                Linear::init(h2, 1, OUTPUT_GAIN, &mut rng),
            ],
        }
    });
    Ok(ModelBundle { spec: spec.clone(), backbone, object_head, pretext_heads, discriminator })
}

/// Stacks images into an `(N, C, H, W)` array.
pub fn images_to_array<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Array4<f64>> {
    let images: Vec<&ImageTensor> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return invalid("no images");
    };
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in &images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return invalid("images differ in shape");
        }
        data.extend(img.data().iter().map(|&v| v as f64));
    }
    Ok(Array4::from_shape_vec((images.len(), c, h, w), data).expect("sizes checked"))
}

impl ModelBundle {
    pub fn zeros_like(&self) -> Gradients {
        ModelBundle {
            spec: self.spec.clone(),
            backbone: Backbone { layers: self.backbone.layers.iter().map(Layer::zeros_like).collect() },
            object_head: Linear::zeros(self.object_head.inputs(), self.object_head.outputs()),
            pretext_heads: self
                .pretext_heads
                .iter()
                .map(|(&t, h)| (t, Linear::zeros(h.inputs(), h.outputs())))
                .collect(),
            discriminator: self.discriminator.as_ref().map(|d| Discriminator {
                layers: [0, 1, 2].map(|i| Linear::zeros(d.layers[i].inputs(), d.layers[i].outputs())),
            }),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.object_head.inputs()
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if [c, h, w] != self.spec.backbone.input {
            return invalid(format!("input {:?} does not match backbone input {:?}", [c, h, w], self.spec.backbone.input));
        }
        Ok(())
    }

    pub fn forward_features(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(images)?;
        self.backbone.forward(images.to_owned())
    }

    pub fn forward_features_traced(&self, images: &Array4<f64>) -> Result<(Array2<f64>, BackboneTrace)> {
        self.check_input(images)?;
        self.backbone.forward_traced(images.to_owned())
    }

    /// Final spatial maps `(N, K, h, w)` feeding the global average.
    pub fn spatial_maps(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(images)?;
        if !self.spec.backbone.exposes_spatial_maps() {
            return Err(crate::Error::UnsupportedArchitecture(
                "backbone does not end in global average pooling".into(),
            ));
        }
        match self.backbone.run(images.to_owned(), false, true)?.0 {
            Activation::Spatial(maps) => Ok(maps),
            Activation::Flat(_) => unreachable!("stopped before pooling"),
        }
    }

    pub fn classify(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.object_head.forward(features)
    }

    pub fn pretext_head(&self, task: TaskKind) -> Result<&Linear> {
        match self.pretext_heads.get(&task) {
            Some(h) => Ok(h),
            None => invalid(format!("model has no {task} head")),
        }
    }

    pub fn pretext_logits(&self, features: ArrayView2<f64>, task: TaskKind) -> Result<Array2<f64>> {
        self.pretext_head(task)?.forward(features)
    }

    pub fn discriminator(&self) -> Result<&Discriminator> {
        match &self.discriminator {
            Some(d) => Ok(d),
            None => invalid("model has no domain discriminator"),
        }
    }

    /// Source-domain probability per row. `lambda` scales the reversed
    /// gradient in [`ModelBundle::discriminator_backward`]; the forward value
    /// does not depend on it.
    pub fn discriminate_domain(&self, features: ArrayView2<f64>, lambda: f64) -> Result<Array1<f64>> {
        if !(lambda >= 0.0) {
            return invalid(format!("lambda {lambda} must be non-negative"));
        }
        Ok(self.discriminator()?.logits(features)?.0.mapv(sigmoid))
    }

    /// Backpropagates discriminator logit gradients: parameters receive the
    /// plain gradient, the returned feature gradient is reversed and scaled.
    pub fn discriminator_backward(
        &self,
        trace: &DiscriminatorTrace,
        dlogits: &Array1<f64>,
        lambda: f64,
        grad: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let d = self.discriminator()?;
        let Some(g) = grad.discriminator.as_mut() else {
            return invalid("gradient container has no discriminator");
        };
        Ok(reverse_gradient(&d.backward(trace, dlogits, g), lambda))
    }

    /// Parameter tensors in declared order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        fn push_linear<'a>(out: &mut Vec<(String, &'a [f64])>, name: String, l: &'a Linear) {
            out.push((format!("{name}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("backbone.{i}.weight"), c.weight.as_slice().expect("standard layout")));
                    out.push((format!("backbone.{i}.bias"), c.bias.as_slice().expect("standard layout")));
                }
                Layer::Linear(l) => push_linear(&mut out, format!("backbone.{i}"), l),
                _ => {}
            }
        }
        push_linear(&mut out, "object_head".into(), &self.object_head);
        for (t, h) in &self.pretext_heads {
            push_linear(&mut out, format!("pretext.{t}"), h);
        }
        if let Some(d) = &self.discriminator {
            for (i, l) in d.layers.iter().enumerate() {
                push_linear(&mut out, format!("discriminator.{i}"), l);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn push_linear<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: String, l: &'a mut Linear) {
            out.push((format!("{name}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), l.bias.as_slice_mut().expect("standard layout")));
        }
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("backbone.{i}.weight"), c.weight.as_slice_mut().expect("standard layout")));
                    out.push((format!("backbone.{i}.bias"), c.bias.as_slice_mut().expect("standard layout")));
                }
                Layer::Linear(l) => push_linear(&mut out, format!("backbone.{i}"), l),
                _ => {}
            }
        }
        push_linear(&mut out, "object_head".into(), &mut self.object_head);
        for (t, h) in self.pretext_heads.iter_mut() {
            push_linear(&mut out, format!("pretext.{t}"), h);
        }
        if let Some(d) = self.discriminator.as_mut() {
            for (i, l) in d.layers.iter_mut().enumerate() {
                push_linear(&mut out, format!("discriminator.{i}"), l);
            }
        }
        out
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &Gradients) {
        for ((_, dst), (_, src)) in self.params_mut().into_iter().zip(other.params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}
