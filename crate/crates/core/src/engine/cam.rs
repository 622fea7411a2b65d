//! Class activation maps for backbones that end in global average pooling.

use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::model::{images_to_array, ModelBundle};
use crate::transforms::ImageTensor;

/// `sum_k w[class, k] * f_k` at the resolution of the final feature maps.
pub fn cam_raw(model: &ModelBundle, image: &ImageTensor, class_index: usize) -> Result<Array2<f64>> {
    if class_index >= model.spec.num_classes {
        return invalid(format!("class {class_index} outside 0..{}", model.spec.num_classes));
    }
    let maps = model.spatial_maps(&images_to_array([image])?)?;
    let (_, k, h, w) = maps.dim();
    let weights = model.object_head.weight.row(class_index);
    let mut heat = Array2::zeros((h, w));
    for c in 0..k {
        heat.scaled_add(weights[c], &maps.slice(ndarray::s![0, c, .., ..]));
    }
    Ok(heat)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(map.dim())
    }
}

/// Bilinear resampling with half-pixel centers.
pub fn upsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - dx) + map[[y0, x1]] * dx;
        let bottom = map[[y1, x0]] * (1.0 - dx) + map[[y1, x1]] * dx;
        top * (1.0 - dy) + bottom * dy
    })
}

/// Normalized class evidence map at the image resolution.
pub fn cam_map(model: &ModelBundle, image: &ImageTensor, class_index: usize) -> Result<Array2<f64>> {
    let raw = cam_raw(model, image, class_index)?;
    Ok(upsample(&normalize(&raw), image.height(), image.width()))
}
