#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xreplay::autograd::{self as ag, Var};
use xreplay::model::{Classifier, ClassifierSpec, ConvBlockSpec, HeadInit, InputShape, ModelState, ModelView};
use xreplay::saliency::Explainable;
use xreplay::tensor::Tensor;
use xreplay::Result;

/// 3x8x8 input, two 4-channel k3 s2 blocks, 3 classes: 275 parameters.
pub fn tiny_classifier() -> Classifier {
    let block = ConvBlockSpec {
        out_channels: 4,
        kernel: 3,
        stride: 2,
    };
    Classifier::new(
        ClassifierSpec {
            conv_blocks: vec![block, block],
            target_layer: "conv2".into(),
            head_init: HeadInit::Zero,
        },
        InputShape::rgb(8, 8),
    )
    .unwrap()
}

/// Random parameters everywhere, including the head and biases.
pub fn random_state(classifier: &Classifier, classes: usize, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = classifier.init(&mut rng);
    let mut state = classifier
        .expand_head(&state, &(0..classes).collect::<Vec<_>>())
        .unwrap();
    for p in state.params.iter_mut() {
        if p.name.starts_with("head") || p.name.ends_with("bias") {
            for v in p.tensor.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    state
}

pub fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![n, c, h, w],
        (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

/// Central differences of `f` w.r.t. every parameter entry of `state`.
pub fn finite_difference(
    state: &ModelState,
    eps: f64,
    f: impl Fn(&ModelState) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for pi in 0..state.params.len() {
        let mut g = Vec::with_capacity(state.params[pi].tensor.len());
        for j in 0..state.params[pi].tensor.len() {
            let mut plus = state.clone();
            plus.params[pi].tensor.data_mut()[j] += eps;
            let mut minus = state.clone();
            minus.params[pi].tensor.data_mut()[j] -= eps;
            g.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out.push(g);
    }
    out
}

/// Compares autodiff and finite-difference gradients; returns the worst
/// violation ratio (<= 1 passes).
pub fn worst_ratio(auto: &[Tensor], fd: &[Vec<f64>], rtol: f64, atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, f) in auto.iter().zip(fd) {
        assert_eq!(a.len(), f.len());
        for (&x, &y) in a.data().iter().zip(f) {
            let allowed = rtol * x.abs().max(y.abs()) + atol;
            worst = worst.max((x - y).abs() / allowed);
        }
    }
    worst
}

/// Autodiff vs central differences (eps 1e-5) of a loss over all parameters.
/// Returns the worst violation ratio at rtol 1e-3 with a 1e-8 absolute floor
/// (<= 1 passes) and whether any gradient entry is non-zero.
pub fn gradient_check(
    state: &ModelState,
    classifier: &Classifier,
    loss: impl Fn(&ModelView) -> Var,
) -> (f64, bool) {
    let view = ModelView::trainable(classifier, state);
    let l = loss(&view);
    let refs: Vec<&Var> = view.params.iter().collect();
    let auto = ag::grad_values(&l, &refs).unwrap();
    let fd = finite_difference(state, 1e-5, |s| loss(&ModelView::constant(classifier, s)).value().item());
    let nonzero = auto.iter().any(|g| g.data().iter().any(|&v| v != 0.0));
    (worst_ratio(&auto, &fd, 1e-3, 1e-8), nonzero)
}

/// `y = x_flat W^T` for a fixed `[C, D]` weight matrix.
pub struct LinearModel {
    pub weights: Tensor,
}

impl Explainable for LinearModel {
    fn scores(&self, x: &Var, _layer: Option<&str>) -> Result<(Var, Option<Var>)> {
        let n = x.shape()[0];
        let d = x.value().len() / n;
        let flat = ag::reshape(x, vec![n, d])?;
        let w = Var::constant(self.weights.clone());
        Ok((ag::matmul(&flat, &ag::transpose(&w)?)?, None))
    }
}

/// `y = sum x^2` over the whole input, a single class.
pub struct SquareModel;

impl Explainable for SquareModel {
    fn scores(&self, x: &Var, _layer: Option<&str>) -> Result<(Var, Option<Var>)> {
        let n = x.shape()[0];
        let d = x.value().len() / n;
        let sq = ag::reshape(&ag::mul(x, x)?, vec![n * d])?;
        let s = ag::row_sums(&sq, n, d)?;
        Ok((ag::reshape(&s, vec![n, 1])?, None))
    }
}

/// Direct convolution of one `[c, h, w]` image, pad = k / 2.
fn conv_loops(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    o: usize,
    k: usize,
    s: usize,
) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / s + 1;
    let wo = (w + 2 * pad - k) / s + 1;
    let mut z = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * s + ky) as isize - pad as isize;
                            let xx = (ox * s + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += weight[((oc * c + ic) * k + ky) * k + kx]
                                * x[(ic * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                z[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (z, ho, wo)
}

/// Grad-CAM for one image of a two-block tiny model, by explicit loops:
/// returns `(alpha, normalized map)` for `layer` in {"conv1", "conv2"}.
pub fn grad_cam_loops(state: &ModelState, image: &[f64], class: usize, layer: &str) -> (Vec<f64>, Vec<f64>) {
    let p = |i: usize| state.params[i].tensor.data();
    let k = 4;
    let (z1, h1, w1) = conv_loops(image, (3, 8, 8), p(0), p(1), k, 3, 2);
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let (z2, h2, w2) = conv_loops(&a1, (k, h1, w1), p(2), p(3), k, 3, 2);
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    let z = (h2 * w2) as f64;
    let head = p(4);
    // dy_c / dA2[ch, i, j] = W[c, ch] / (u v)
    let mut d2 = vec![0.0; k * h2 * w2];
    for ch in 0..k {
        for j in 0..h2 * w2 {
            d2[ch * h2 * w2 + j] = head[class * k + ch] / z;
        }
    }
    let (acts, grads, hh, ww) = if layer == "conv2" {
        (a2, d2, h2, w2)
    } else {
        let w2t = p(2);
        let mut d1 = vec![0.0; k * h1 * w1];
        for o in 0..k {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let idx = (o * h2 + oy) * w2 + ox;
                    if z2[idx] <= 0.0 {
                        continue;
                    }
                    for ic in 0..k {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = (oy * 2 + ky) as isize - 1;
                                let x = (ox * 2 + kx) as isize - 1;
                                if y < 0 || x < 0 || y >= h1 as isize || x >= w1 as isize {
                                    continue;
                                }
                                d1[(ic * h1 + y as usize) * w1 + x as usize] +=
                                    d2[idx] * w2t[((o * k + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        (a1, d1, h1, w1)
    };
    let n = hh * ww;
    let alpha: Vec<f64> = (0..k)
        .map(|ch| grads[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let mut cam = vec![0.0; n];
    for (j, c) in cam.iter_mut().enumerate() {
        let s: f64 = (0..k).map(|ch| alpha[ch] * acts[ch * n + j]).sum();
        *c = s.max(0.0);
    }
    let lo = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let map = if hi > lo {
        cam.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else if hi != 0.0 {
        cam.iter().map(|v| v / hi).collect()
    } else {
        cam
    };
    (alpha, map)
}
