//! White-box saliency: vanilla input gradients, SmoothGrad and Grad-CAM.
//!
//! Every method is implemented once on batches, as a graph computation
//! ([`explain_batch`]). With `create_graph` the resulting maps stay
//! differentiable in the model parameters, which is what the explanation
//! consistency loss trains through. The per-image functions below are thin
//! wrappers that return plain [`SaliencyMap`]s.
//!
//! Pixel methods collapse colour channels by taking the maximum absolute
//! gradient. Maps are min-max normalized per image; an all-zero map stays
//! zero, and a constant non-zero map becomes all ones.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::model::{Classifier, ClassifierSpec, InputShape};
use crate::tensor::Tensor;

/// Nominal dynamic range of input pixels; SmoothGrad's noise scale is a
/// fraction of it.
pub const PIXEL_RANGE: f64 = 1.0;

/// A model that saliency methods can query.
pub trait Explainable {
    /// `[N, classes]` scores for `x`, plus the activations of `layer` when
    /// one is named.
    fn scores(&self, x: &Var, layer: Option<&str>) -> Result<(Var, Option<Var>)>;

    /// Layer Grad-CAM uses when the spec does not name one.
    fn default_layer(&self) -> Option<&str> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    VanillaBp,
    Smoothgrad,
    GradCam,
}

impl SaliencyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SaliencyMethod::VanillaBp => "vanilla_bp",
            SaliencyMethod::Smoothgrad => "smoothgrad",
            SaliencyMethod::GradCam => "grad_cam",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            SaliencyMethod::VanillaBp => 0,
            SaliencyMethod::Smoothgrad => 1,
            SaliencyMethod::GradCam => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SaliencyMethod::VanillaBp),
            1 => Some(SaliencyMethod::Smoothgrad),
            2 => Some(SaliencyMethod::GradCam),
            _ => None,
        }
    }
}

impl std::fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_n() -> usize {
    40
}

fn default_sigma() -> f64 {
    0.15
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencySpec {
    pub method: SaliencyMethod,
    #[serde(default = "default_n")]
    pub smoothgrad_n: usize,
    /// Noise standard deviation as a fraction of [`PIXEL_RANGE`].
    #[serde(default = "default_sigma")]
    pub smoothgrad_sigma: f64,
    /// Grad-CAM layer; defaults to the model's target layer.
    #[serde(default)]
    pub target_layer: Option<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl SaliencySpec {
    pub fn new(method: SaliencyMethod) -> Self {
        SaliencySpec {
            method,
            smoothgrad_n: default_n(),
            smoothgrad_sigma: default_sigma(),
            target_layer: None,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.smoothgrad_n == 0 {
            return Err(Error::config("saliency.smoothgrad_n", "must be at least 1"));
        }
        if !(self.smoothgrad_sigma >= 0.0 && self.smoothgrad_sigma.is_finite()) {
            return Err(Error::config("saliency.smoothgrad_sigma", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Row-major `height x width` grid.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub method: SaliencyMethod,
    /// Task whose model produced the map (0 when not tied to a task).
    pub producing_task: usize,
}

impl SaliencyMap {
    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> SaliencyMap {
        SaliencyMap {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Indices attaining the maximum value.
pub fn argmax_set(values: &[f64]) -> Vec<usize> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == m)
        .map(|(i, _)| i)
        .collect()
}

/// Batched saliency maps, `[N, height * width]`.
pub struct SaliencyBatch {
    pub maps: Var,
    pub height: usize,
    pub width: usize,
    /// Scores of the clean inputs, when the method computed them.
    pub logits: Option<Var>,
}

impl SaliencyBatch {
    pub fn to_maps(&self, method: SaliencyMethod, producing_task: usize) -> Vec<SaliencyMap> {
        let p = self.height * self.width;
        self.maps
            .value()
            .data()
            .chunks(p)
            .map(|c| SaliencyMap {
                values: c.to_vec(),
                height: self.height,
                width: self.width,
                method,
                producing_task,
            })
            .collect()
    }
}

/// Grad-CAM intermediate quantities for a batch.
pub struct GradCamParts {
    /// `[N, K]` channel weights: mean over locations of `d y_c / d A^k`.
    pub alpha: Var,
    /// `[N, u * v]` rectified weighted sum of feature maps, not normalized.
    pub cam: Var,
    pub height: usize,
    pub width: usize,
    pub logits: Var,
}

fn check_classes(logits: &Var, classes: &[usize]) -> Result<()> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if classes.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} target classes for a batch of {n}",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {c} outputs"
        )));
    }
    Ok(())
}

/// `sum_n logits[n, classes[n]]`; its gradient w.r.t. sample `n` is that of
/// `y_{classes[n]}` because samples do not interact.
fn selected_score(logits: &Var, classes: &[usize]) -> Result<Var> {
    check_classes(logits, classes)?;
    let c = logits.shape()[1];
    let idx: Vec<usize> = classes.iter().enumerate().map(|(n, &k)| n * c + k).collect();
    let n = idx.len();
    ag::sum(&ag::gather(logits, Rc::new(idx), vec![n])?)
}

/// `[N, C, H, W]` gradients to `[N, H*W]` maps: max over channels of `|g|`.
fn collapse_channels(g: &Var) -> Result<Var> {
    let s = g.shape().to_vec();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let a = ag::abs(g);
    let vals = a.value().data();
    let mut idx = Vec::with_capacity(n * p);
    for b in 0..n {
        for px in 0..p {
            let mut best = b * c * p + px;
            for ch in 1..c {
                let j = (b * c + ch) * p + px;
                if vals[j] > vals[best] {
                    best = j;
                }
            }
            idx.push(best);
        }
    }
    ag::gather(&a, Rc::new(idx), vec![n, p])
}

/// Per-row min-max normalization of an `[N, P]` map batch.
pub fn normalize_rows(maps: &Var) -> Result<Var> {
    let (n, p) = (maps.shape()[0], maps.shape()[1]);
    let vals = maps.value().data();
    let mut min_idx = Vec::with_capacity(n);
    let mut max_idx = Vec::with_capacity(n);
    let mut regular = vec![0.0; n];
    let mut flat_nonzero = vec![0.0; n];
    let mut zero_rows = vec![0.0; n];
    for r in 0..n {
        let row = &vals[r * p..(r + 1) * p];
        let (mut lo, mut hi) = (0, 0);
        for (i, &v) in row.iter().enumerate() {
            if v < row[lo] {
                lo = i;
            }
            if v > row[hi] {
                hi = i;
            }
        }
        min_idx.push(r * p + lo);
        max_idx.push(r * p + hi);
        if row[hi] > row[lo] {
            regular[r] = 1.0;
        } else if row[hi] != 0.0 {
            flat_nonzero[r] = 1.0;
        } else {
            zero_rows[r] = 1.0;
        }
    }
    let lo = ag::gather(maps, Rc::new(min_idx), vec![n])?;
    let hi = ag::gather(maps, Rc::new(max_idx), vec![n])?;
    let regular = Rc::new(Tensor::new(vec![n], regular)?);
    // regular rows: (x - min) / (max - min); flat non-zero rows: x / max;
    // all-zero rows: x / 1.
    let offset = ag::mul_const(&lo, regular.clone())?;
    let spread = ag::mul_const(&ag::sub(&hi, &lo)?, regular)?;
    let flat = ag::mul_const(&hi, Rc::new(Tensor::new(vec![n], flat_nonzero)?))?;
    let denom = ag::add(
        &ag::add(&spread, &flat)?,
        &Var::constant(Tensor::new(vec![n], zero_rows)?),
    )?;
    // a true division keeps the row maximum at exactly 1
    let shifted = ag::sub(maps, &ag::repeat_rows(&offset, n, p)?)?;
    ag::div(&shifted, &ag::repeat_rows(&denom, n, p)?)
}

/// Grad-CAM weights and rectified map at `layer`.
pub fn grad_cam_parts(
    model: &dyn Explainable,
    images: &Tensor,
    classes: &[usize],
    layer: &str,
    create_graph: bool,
) -> Result<GradCamParts> {
    // a leaf input keeps the activations differentiable even when the
    // parameters are constants
    let x = Var::leaf(images.clone());
    let (logits, acts) = model.scores(&x, Some(layer))?;
    let acts = acts.ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{layer}`")))?;
    let y = selected_score(&logits, classes)?;
    let ga = ag::grad(&y, &[&acts], create_graph)?.remove(0);
    let s = acts.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("layer activations {:?}", s)));
    }
    let (n, k, u, v) = (s[0], s[1], s[2], s[3]);
    let p = u * v;
    let to_channel: Rc<Vec<usize>> = Rc::new((0..n * k * p).map(|j| j / p).collect());
    let alpha = ag::scale(
        &ag::scatter_add(&ga, to_channel.clone(), vec![n, k])?,
        1.0 / p as f64,
    );
    let weights = ag::gather(&alpha, to_channel, s.clone())?;
    let weighted = ag::mul(&acts, &weights)?;
    let to_pixel: Vec<usize> = (0..n * k * p)
        .map(|j| (j / (k * p)) * p + j % p)
        .collect();
    let cam = ag::relu(&ag::scatter_add(&weighted, Rc::new(to_pixel), vec![n, p])?);
    Ok(GradCamParts {
        alpha,
        cam,
        height: u,
        width: v,
        logits,
    })
}

fn input_gradient_maps(
    model: &dyn Explainable,
    inputs: Tensor,
    classes: &[usize],
    create_graph: bool,
) -> Result<(Var, Var)> {
    let x = Var::leaf(inputs);
    let (logits, _) = model.scores(&x, None)?;
    let y = selected_score(&logits, classes)?;
    let g = ag::grad(&y, &[&x], create_graph)?.remove(0);
    Ok((g, logits))
}

fn noisy_copies(images: &Tensor, copies: usize, sigma: f64, seeds: &[u64]) -> Result<Tensor> {
    let s = images.shape();
    let n = s[0];
    let per: usize = s[1..].iter().product();
    if seeds.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} noise seeds for a batch of {n}",
            seeds.len()
        )));
    }
    let std = sigma * PIXEL_RANGE;
    let mut data = Vec::with_capacity(n * copies * per);
    for (b, &seed) in seeds.iter().enumerate() {
        let src = &images.data()[b * per..(b + 1) * per];
        if std == 0.0 {
            for _ in 0..copies {
                data.extend_from_slice(src);
            }
            continue;
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..copies {
            data.extend(src.iter().map(|&v| v + normal.sample(&mut rng)));
        }
    }
    let mut shape = vec![n * copies];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(shape, data)
}

/// Saliency maps for a batch of `[N, C, H, W]` images.
///
/// `classes` are head rows (one per image). `noise_seeds` drive SmoothGrad's
/// per-image noise and are ignored by the other methods.
pub fn explain_batch(
    model: &dyn Explainable,
    images: &Tensor,
    classes: &[usize],
    spec: &SaliencySpec,
    noise_seeds: &[u64],
    create_graph: bool,
) -> Result<SaliencyBatch> {
    spec.validate()?;
    let s = images.shape().to_vec();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Shape(format!("saliency input {:?}", s)));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let (raw, height, width, logits) = match spec.method {
        SaliencyMethod::VanillaBp => {
            let (g, logits) = input_gradient_maps(model, images.clone(), classes, create_graph)?;
            (collapse_channels(&g)?, h, w, Some(logits))
        }
        SaliencyMethod::Smoothgrad => {
            let copies = spec.smoothgrad_n;
            let noisy = noisy_copies(images, copies, spec.smoothgrad_sigma, noise_seeds)?;
            let expanded: Vec<usize> = classes
                .iter()
                .flat_map(|&c| std::iter::repeat(c).take(copies))
                .collect();
            if classes.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} target classes for a batch of {n}",
                    classes.len()
                )));
            }
            let (g, _) = input_gradient_maps(model, noisy, &expanded, create_graph)?;
            let per: usize = s[1..].iter().product();
            let idx: Vec<usize> = (0..n * copies * per)
                .map(|j| (j / (copies * per)) * per + j % per)
                .collect();
            let mean = ag::scale(
                &ag::scatter_add(&g, Rc::new(idx), s.clone())?,
                1.0 / copies as f64,
            );
            (collapse_channels(&mean)?, h, w, None)
        }
        SaliencyMethod::GradCam => {
            let layer = spec
                .target_layer
                .as_deref()
                .or(model.default_layer())
                .ok_or_else(|| Error::InvalidArgument("grad_cam needs a target layer".into()))?;
            let parts = grad_cam_parts(model, images, classes, layer, create_graph)?;
            (parts.cam, parts.height, parts.width, Some(parts.logits))
        }
    };
    let maps = if spec.normalize {
        normalize_rows(&raw)?
    } else {
        raw
    };
    Ok(SaliencyBatch {
        maps,
        height,
        width,
        logits,
    })
}

/// Plain maps for a batch, not connected to any graph.
pub fn explain(
    model: &dyn Explainable,
    images: &Tensor,
    classes: &[usize],
    spec: &SaliencySpec,
    noise_seeds: &[u64],
) -> Result<Vec<SaliencyMap>> {
    let batch = explain_batch(model, images, classes, spec, noise_seeds, false)?;
    Ok(batch.to_maps(spec.method, 0))
}

fn single(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(shape)
}

pub fn vanilla_bp(model: &dyn Explainable, image: &Tensor, class_idx: usize) -> Result<SaliencyMap> {
    let spec = SaliencySpec::new(SaliencyMethod::VanillaBp);
    Ok(explain(model, &single(image)?, &[class_idx], &spec, &[0])?.remove(0))
}

pub fn smoothgrad(
    model: &dyn Explainable,
    image: &Tensor,
    class_idx: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyMap> {
    let spec = SaliencySpec {
        smoothgrad_n: n,
        smoothgrad_sigma: sigma,
        ..SaliencySpec::new(SaliencyMethod::Smoothgrad)
    };
    Ok(explain(model, &single(image)?, &[class_idx], &spec, &[seed])?.remove(0))
}

pub fn grad_cam(
    model: &dyn Explainable,
    image: &Tensor,
    class_idx: usize,
    target_layer: &str,
) -> Result<SaliencyMap> {
    let spec = SaliencySpec {
        target_layer: Some(target_layer.to_string()),
        ..SaliencySpec::new(SaliencyMethod::GradCam)
    };
    Ok(explain(model, &single(image)?, &[class_idx], &spec, &[0])?.remove(0))
}

/// Bilinear upsampling with half-pixel centres and edge clamping.
pub fn upsample(map: &SaliencyMap, to: (usize, usize)) -> Result<SaliencyMap> {
    let (th, tw) = to;
    if th < map.height || tw < map.width {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} to {th}x{tw}",
            map.height, map.width
        )));
    }
    if (th, tw) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let c = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut values = vec![0.0; th * tw];
    for y in 0..th {
        let (y0, y1, fy) = coord(y, map.height, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, map.width, tw);
            let at = |yy: usize, xx: usize| map.values[yy * map.width + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            values[y * tw + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(SaliencyMap {
        values,
        height: th,
        width: tw,
        ..map.clone()
    })
}

/// Number of values one stored map occupies.
pub fn map_values(spec: &SaliencySpec, model: &ClassifierSpec, input: InputShape) -> Result<usize> {
    Ok(match spec.method {
        SaliencyMethod::VanillaBp | SaliencyMethod::Smoothgrad => input.height * input.width,
        SaliencyMethod::GradCam => {
            let c = Classifier::new(model.clone(), input)?;
            let layer = spec.target_layer.as_deref().unwrap_or(&model.target_layer);
            let s = c.layer_shape(layer).ok_or_else(|| {
                Error::config("saliency.target_layer", format!("unknown layer `{layer}`"))
            })?;
            s.height * s.width
        }
    })
}

/// Bytes needed to store one reference map.
pub fn memory_cost(
    spec: &SaliencySpec,
    model: &ClassifierSpec,
    input: InputShape,
    bytes_per_value: usize,
) -> Result<usize> {
    Ok(map_values(spec, model, input)? * bytes_per_value)
}
