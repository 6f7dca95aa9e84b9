//! Grad-CAM heatmaps for the segmentation network and overlay rendering.

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::network::{UNet, DEFAULT_CAM_LAYER};
use crate::nn::{Mode, Tensor};

/// Scalar whose gradient drives the map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selector {
    /// Mean logit over pixels predicted foreground (logit > 0).
    MeanForeground,
    /// Logit at one pixel.
    Pixel { row: usize, col: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamTarget {
    pub selector: Selector,
    /// Positive multiplier on the target scalar. The map does not depend on it.
    pub scale: f64,
}

impl Default for CamTarget {
    fn default() -> Self {
        Self {
            selector: Selector::MeanForeground,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    pub target_layer: String,
    pub target: CamTarget,
    /// Set when the gradient or the rectified map vanished everywhere.
    pub zero_map: bool,
}

/// Gradient of the target scalar with respect to the logits, rescaled to unit max magnitude.
/// Min-max normalization would absorb any positive factor anyway; removing it up front
/// makes the map bit-identical under rescaling of the target.
fn seed_gradient(logits: &Tensor, target: &CamTarget) -> Result<Vec<f32>> {
    if !(target.scale > 0.0) {
        return Err(Error::Config(format!("target scale must be positive, got {}", target.scale)));
    }
    let mut g = vec![0.0f32; logits.data.len()];
    match target.selector {
        Selector::MeanForeground => {
            let fg: Vec<usize> = (0..g.len()).filter(|&i| logits.data[i] > 0.0).collect();
            let v = (target.scale / fg.len().max(1) as f64) as f32;
            for i in fg {
                g[i] = v;
            }
        }
        Selector::Pixel { row, col } => {
            if row >= logits.h || col >= logits.w {
                return Err(Error::Shape(format!(
                    "pixel ({row}, {col}) outside {}x{} output",
                    logits.h, logits.w
                )));
            }
            g[row * logits.w + col] = target.scale as f32;
        }
    }
    let max = g.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    if max > 0.0 {
        for v in &mut g {
            *v /= max;
        }
    }
    Ok(g)
}

/// `ReLU(Σ_c w_c·A_c)` with `w_c` the spatial mean of `∂target/∂A_c`, at layer resolution.
pub fn cam_from(activation: &Tensor, gradient: &Tensor) -> Vec<f32> {
    let plane = activation.plane();
    let mut map = vec![0.0f32; plane];
    for c in 0..activation.c {
        let g = gradient.channel(0, c);
        let w = (g.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64) as f32;
        if w == 0.0 {
            continue;
        }
        for (m, &a) in map.iter_mut().zip(activation.channel(0, c)) {
            *m += w * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    map
}

/// Bilinear resampling with pixel centers aligned (half-pixel convention).
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let mut out = vec![0.0f32; dh * dw];
    for r in 0..dh {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = (y - y0 as f64) as f32;
        for c in 0..dw {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = (x - x0 as f64) as f32;
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[r * dw + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Rescales to `[0, 1]`; returns `false` for an identically zero map, which stays zero.
fn min_max(values: &mut [f32]) -> bool {
    let max = values.iter().copied().fold(f32::MIN, f32::max);
    let min = values.iter().copied().fold(f32::MAX, f32::min);
    if !(max > 0.0) {
        values.fill(0.0);
        return false;
    }
    if max > min {
        for v in values.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        values.fill(1.0);
    }
    true
}

pub fn grad_cam(net: &UNet, image: &Image, layer: &str, target: &CamTarget) -> Result<Heatmap> {
    let valid = net.config().layer_names();
    if !valid.iter().any(|l| l == layer) {
        return Err(Error::UnknownLayer {
            name: layer.to_string(),
            valid: valid.join(", "),
        });
    }
    let x = Tensor::from_vec(1, 3, image.height, image.width, image.data.clone());
    let (logits, trace) = net.forward_traced(&x, Mode::Eval)?;
    let seed = seed_gradient(&logits, target)?;
    let d = Tensor::from_vec(1, 1, logits.h, logits.w, seed);
    let grads = net.backward(&trace, &d, None, &[layer]);
    let act = trace.activation(layer).expect("layer validated");
    let grad = &grads[layer];
    let cam = cam_from(act, grad);
    let mut values = resize_bilinear(&cam, act.h, act.w, image.height, image.width);
    let nonzero = min_max(&mut values);
    if !nonzero {
        log::warn!("Grad-CAM map for layer {layer} is identically zero");
    }
    Ok(Heatmap {
        height: image.height,
        width: image.width,
        values,
        target_layer: layer.to_string(),
        target: *target,
        zero_map: !nonzero,
    })
}

/// Grad-CAM on the default layer with the default target.
pub fn grad_cam_default(net: &UNet, image: &Image) -> Result<Heatmap> {
    grad_cam(net, image, DEFAULT_CAM_LAYER, &CamTarget::default())
}

/// Blue → cyan → yellow → red ramp.
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Colorized heatmap as an image.
pub fn render_heatmap(heat: &Heatmap) -> Image {
    let mut out = Image::zeros(heat.height, heat.width);
    let p = out.plane();
    for (i, &v) in heat.values.iter().enumerate() {
        let c = colormap(v);
        for ch in 0..3 {
            out.data[ch * p + i] = c[ch];
        }
    }
    out
}

/// `(1 − alpha)·image + alpha·colormap(heat)`.
pub fn overlay(image: &Image, heat: &Heatmap, alpha: f32) -> Result<Image> {
    if (image.height, image.width) != (heat.height, heat.width) {
        return Err(Error::Shape(format!(
            "image is {}x{}, heatmap is {}x{}",
            image.height, image.width, heat.height, heat.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let colors = render_heatmap(heat);
    let mut out = image.clone();
    for (o, c) in out.data.iter_mut().zip(&colors.data) {
        *o = (1.0 - alpha) * *o + alpha * c;
    }
    Ok(out)
}

/// Panels placed left to right; all must share one height.
pub fn side_by_side(panels: &[&Image]) -> Result<Image> {
    let Some(first) = panels.first() else {
        return Err(Error::Shape("no panels".into()));
    };
    let h = first.height;
    if panels.iter().any(|p| p.height != h) {
        return Err(Error::Shape("panels differ in height".into()));
    }
    let w: usize = panels.iter().map(|p| p.width).sum();
    let mut out = Image::zeros(h, w);
    let mut x0 = 0;
    for p in panels {
        for ch in 0..3 {
            let src = p.channel(ch);
            let dst = out.channel_mut(ch);
            for r in 0..h {
                dst[r * w + x0..r * w + x0 + p.width].copy_from_slice(&src[r * p.width..(r + 1) * p.width]);
            }
        }
        x0 += p.width;
    }
    Ok(out)
}
