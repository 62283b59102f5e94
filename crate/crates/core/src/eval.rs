//! Accuracy matrices, forgetting metrics and the pointing game.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Classifier, ModelState, ModelView};
use crate::par;
use crate::saliency::{argmax_set, explain, upsample, Explainable, SaliencyMap, SaliencySpec};
use crate::scenario::{Mask, TaskData};
use crate::tensor::Tensor;

/// Test samples per evaluation work item.
const EVAL_CHUNK: usize = 16;

/// Lower-triangular `T x T` matrix; `get(k, i)` is defined for `i <= k`
/// (both 1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            cells: (1..=tasks).map(|k| vec![None; k]).collect(),
        }
    }

    /// Builds a matrix from full rows; row `k` must have `k` entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::Shape(format!(
                    "row {} has {} entries, expected {}",
                    k + 1,
                    row.len(),
                    k + 1
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(k + 1, i + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, k: usize, i: usize, value: f64) -> Result<()> {
        if k == 0 || i == 0 || i > k || k > self.tasks() {
            return Err(Error::InvalidArgument(format!(
                "cell ({k}, {i}) outside a {}-task lower triangle",
                self.tasks()
            )));
        }
        self.cells[k - 1][i - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, k: usize, i: usize) -> Option<f64> {
        self.cells.get(k.checked_sub(1)?)?.get(i.checked_sub(1)?)?.to_owned()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().flatten().all(Option::is_some)
    }

    /// Mean of row `k` (average accuracy over tasks seen so far).
    pub fn row_mean(&self, k: usize) -> Option<f64> {
        let row = self.cells.get(k.checked_sub(1)?)?;
        let vals: Option<Vec<f64>> = row.iter().cloned().collect();
        let vals = vals?;
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `(ACC, BWT)`: mean of the final row, and mean over `i < T` of
/// `R[T][i] - R[i][i]` (0 when `T = 1`). Shared by accuracy and
/// pointing-game matrices.
pub fn acc_bwt(r: &AccuracyMatrix) -> Result<(f64, f64)> {
    let t = r.tasks();
    if t == 0 || !r.is_complete() {
        return Err(Error::InvalidArgument(
            "accuracy matrix is not fully populated".into(),
        ));
    }
    let last = |i| r.get(t, i).expect("complete");
    let acc = (1..=t).map(last).sum::<f64>() / t as f64;
    let bwt = if t == 1 {
        0.0
    } else {
        (1..t)
            .map(|i| last(i) - r.get(i, i).expect("complete"))
            .sum::<f64>()
            / (t - 1) as f64
    };
    Ok((acc, bwt))
}

/// `(PG-ACC, PG-BWT)` of a hit-rate matrix.
pub fn pg_metrics(r_pg: &AccuracyMatrix) -> Result<(f64, f64)> {
    acc_bwt(r_pg)
}

/// Pointing-game tallies for one (model, test set) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointingStats {
    pub hits: usize,
    pub misses: usize,
    /// Correct prediction and hit.
    pub tp: usize,
    /// Correct prediction and miss.
    pub fp: usize,
    /// Incorrect prediction and hit.
    pub fn_: usize,
    /// Incorrect prediction and miss.
    pub tn: usize,
}

impl PointingStats {
    pub fn record(&mut self, correct: bool, hit: bool) {
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        match (correct, hit) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.hits as f64 / self.total() as f64)
    }
}

/// `(Pr, Re)`; `None` marks an undefined ratio (zero denominator).
pub fn precision_recall(stats: &PointingStats) -> (Option<f64>, Option<f64>) {
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    (ratio(stats.tp, stats.fp), ratio(stats.tp, stats.fn_))
}

/// Hit iff some location attaining the map's maximum lies in the mask.
/// The map is upsampled to the mask's resolution first; all-zero maps miss.
pub fn pointing_hit(saliency: &SaliencyMap, mask: &Mask) -> Result<bool> {
    let up = upsample(saliency, (mask.height, mask.width))?;
    if up.values.len() != mask.bits.len() {
        return Err(Error::Shape(format!(
            "saliency {}x{} vs mask {}x{}",
            up.height, up.width, mask.height, mask.width
        )));
    }
    if up.is_all_zero() {
        return Ok(false);
    }
    Ok(argmax_set(&up.values).into_iter().any(|i| mask.bits[i]))
}

/// Outcome for one test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Task of the test set.
    pub task: usize,
    /// Index within that test set.
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    /// Pointing-game outcome on the ground-truth class, when evaluated.
    pub hit: Option<bool>,
}

/// Row `k` of the evaluation: per-task accuracy and optional pointing stats.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub accuracy: Vec<f64>,
    pub pointing: Vec<Option<PointingStats>>,
    pub predictions: Vec<Prediction>,
}

fn evaluate_chunk(
    classifier: &Classifier,
    state: &ModelState,
    task: &TaskData,
    lo: usize,
    hi: usize,
    xai: Option<&SaliencySpec>,
) -> Result<Vec<Prediction>> {
    let samples = &task.test[lo..hi];
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let batch = Tensor::stack(&images)?;
    let view = ModelView::constant(classifier, state);
    let logits = {
        let _ng = ag::no_grad();
        view.scores(&Var::constant(batch.clone()), None)?.0.value().clone()
    };
    let predicted: Vec<usize> = argmax_rows(&logits)
        .into_iter()
        .map(|r| state.classes_seen[r])
        .collect();
    let hits: Vec<Option<bool>> = match xai {
        Some(spec) if samples.iter().all(|s| s.mask.is_some()) => {
            let rows = samples
                .iter()
                .map(|s| {
                    state.class_index(s.label).ok_or_else(|| {
                        Error::InvalidArgument(format!("class {} has no head row", s.label))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            // fixed per-sample seeds keep SmoothGrad evaluation reproducible
            let seeds: Vec<u64> = (lo..hi)
                .map(|j| crate::seed::mix(task.task_id as u64, &[j as u64]))
                .collect();
            let maps = explain(&view, &batch, &rows, spec, &seeds)?;
            maps.iter()
                .zip(samples)
                .map(|(m, s)| pointing_hit(m, s.mask.as_ref().expect("checked")).map(Some))
                .collect::<Result<_>>()?
        }
        _ => vec![None; samples.len()],
    };
    Ok(samples
        .iter()
        .enumerate()
        .map(|(j, s)| Prediction {
            task: task.task_id,
            index: lo + j,
            label: s.label,
            predicted: predicted[j],
            correct: predicted[j] == s.label,
            hit: hits[j],
        })
        .collect())
}

/// Evaluates the model on the test sets of tasks `1..=k`. Pointing-game
/// statistics are gathered when `xai` is given and a test set has masks.
pub fn evaluate(
    classifier: &Classifier,
    state: &ModelState,
    tasks: &[TaskData],
    k: usize,
    xai: Option<&SaliencySpec>,
) -> Result<EvalRow> {
    if tasks.len() < k {
        return Err(Error::InvalidArgument(format!(
            "test set of task {} is missing",
            tasks.len() + 1
        )));
    }
    classifier.check_state(state)?;
    let mut row = EvalRow {
        accuracy: Vec::with_capacity(k),
        pointing: Vec::with_capacity(k),
        predictions: Vec::new(),
    };
    for task in &tasks[..k] {
        let n = task.test.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "test set of task {} is empty",
                task.task_id
            )));
        }
        let parts = par::map_range(n.div_ceil(EVAL_CHUNK), |ci| {
            let lo = ci * EVAL_CHUNK;
            evaluate_chunk(classifier, state, task, lo, (lo + EVAL_CHUNK).min(n), xai)
        });
        let mut preds = Vec::with_capacity(n);
        for p in parts {
            preds.extend(p?);
        }
        let correct = preds.iter().filter(|p| p.correct).count();
        row.accuracy.push(correct as f64 / n as f64);
        let stats = if preds.iter().all(|p| p.hit.is_some()) {
            let mut s = PointingStats::default();
            for p in &preds {
                s.record(p.correct, p.hit.expect("checked"));
            }
            Some(s)
        } else {
            None
        };
        row.pointing.push(stats);
        row.predictions.extend(preds);
    }
    Ok(row)
}

/// One checkpoint's view of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressionPanel {
    pub checkpoint: usize,
    pub predicted: usize,
    pub correct: bool,
    /// Saliency on the ground-truth class, at image resolution.
    pub saliency: SaliencyMap,
}

impl ProgressionPanel {
    pub fn annotation(&self) -> &'static str {
        if self.correct {
            "correct"
        } else {
            "incorrect"
        }
    }
}

/// Saliency of one sample under each `(task, state)` checkpoint.
pub fn saliency_progression(
    classifier: &Classifier,
    image: &Tensor,
    label: usize,
    checkpoints: &[(usize, ModelState)],
    xai: &SaliencySpec,
    noise_seed: u64,
) -> Result<Vec<ProgressionPanel>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints given".into()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    checkpoints
        .iter()
        .map(|(k, state)| {
            classifier.check_state(state)?;
            let view = ModelView::constant(classifier, state);
            let logits = {
                let _ng = ag::no_grad();
                view.scores(&Var::constant(batch.clone()), None)?.0.value().clone()
            };
            let predicted = state.classes_seen[argmax_rows(&logits)[0]];
            let row = state.class_index(label).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "checkpoint of task {k} has not seen class {label}"
                ))
            })?;
            let map = explain(&view, &batch, &[row], xai, &[noise_seed])?.remove(0);
            Ok(ProgressionPanel {
                checkpoint: *k,
                predicted,
                correct: predicted == label,
                saliency: upsample(&map, (h, w))?,
            })
        })
        .collect()
}

fn heat(v: f64) -> [f64; 3] {
    // black -> red -> yellow -> white
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Renders panels side by side: the image blended with its saliency heat map,
/// a strip below each panel (green for correct, red for incorrect), and the
/// plain image as the first panel.
pub fn render_progression(image: &Tensor, panels: &[ProgressionPanel], scale: u32) -> RgbImage {
    let (h, w) = (image.shape()[1] as u32, image.shape()[2] as u32);
    let gap = 2 * scale;
    let strip = 3 * scale;
    let pw = w * scale;
    let total_w = (panels.len() as u32 + 1) * (pw + gap) - gap;
    let total_h = h * scale + gap + strip;
    let mut out = RgbImage::from_pixel(total_w, total_h, Rgb([255, 255, 255]));
    let px = |c: usize, y: u32, x: u32| image.data()[(c * h as usize + y as usize) * w as usize + x as usize];
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for p in 0..=panels.len() {
        let x0 = p as u32 * (pw + gap);
        for y in 0..h * scale {
            for x in 0..pw {
                let (sy, sx) = (y / scale, x / scale);
                let base = [px(0, sy, sx), px(1, sy, sx), px(2, sy, sx)];
                let rgb = if p == 0 {
                    base
                } else {
                    let s = panels[p - 1].saliency.values[(sy * w + sx) as usize];
                    let hm = heat(s);
                    std::array::from_fn(|c| 0.45 * base[c] + 0.55 * hm[c])
                };
                out.put_pixel(x0 + x, y, Rgb(rgb.map(to_u8)));
            }
        }
        if p > 0 {
            let colour = if panels[p - 1].correct {
                Rgb([40, 170, 60])
            } else {
                Rgb([210, 40, 40])
            };
            for y in h * scale + gap..total_h {
                for x in 0..pw {
                    out.put_pixel(x0 + x, y, colour);
                }
            }
        }
    }
    out
}

/// Pointing outcome of one map through any explainable model; for tests and
/// ad-hoc analysis.
pub fn point(
    model: &dyn Explainable,
    image: &Tensor,
    class_row: usize,
    mask: &Mask,
    xai: &SaliencySpec,
    noise_seed: u64,
) -> Result<bool> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let map = explain(model, &image.clone().reshape(shape)?, &[class_row], xai, &[noise_seed])?.remove(0);
    pointing_hit(&map, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::SaliencyMethod;

    fn map(values: Vec<f64>, h: usize, w: usize) -> SaliencyMap {
        SaliencyMap {
            values,
            height: h,
            width: w,
            method: SaliencyMethod::GradCam,
            producing_task: 1,
        }
    }

    fn quadrant_mask() -> Mask {
        Mask {
            height: 4,
            width: 4,
            bits: (0..16).map(|i| i / 4 < 2 && i % 4 >= 2).collect(),
        }
    }

    #[test]
    fn acc_bwt_examples() {
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.7, 0.8]]).unwrap();
        let (acc, bwt) = acc_bwt(&r).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
        assert!((bwt + 0.2).abs() < 1e-12);
        let one = AccuracyMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(acc_bwt(&one).unwrap(), (1.0, 0.0));
        let flat = AccuracyMatrix::from_rows(&[vec![0.5], vec![0.5, 0.6], vec![0.5, 0.6, 0.7]]).unwrap();
        assert_eq!(acc_bwt(&flat).unwrap().1, 0.0);
        let mut partial = AccuracyMatrix::new(2);
        partial.set(1, 1, 0.5).unwrap();
        assert!(acc_bwt(&partial).is_err());
        assert!(partial.set(1, 2, 0.5).is_err());
    }

    #[test]
    fn pg_metrics_on_hand_filled_matrix() {
        let r = AccuracyMatrix::from_rows(&[
            vec![0.8],
            vec![0.6, 0.9],
            vec![0.5, 0.7, 0.4],
        ])
        .unwrap();
        let (acc, bwt) = pg_metrics(&r).unwrap();
        assert!((acc - (0.5 + 0.7 + 0.4) / 3.0).abs() < 1e-12);
        assert!((bwt - ((0.5 - 0.8) + (0.7 - 0.9)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_examples() {
        let s = PointingStats {
            hits: 3,
            misses: 1,
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        let (p, r) = precision_recall(&s);
        assert!((p.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mut none_correct = PointingStats::default();
        none_correct.record(false, false);
        assert_eq!(precision_recall(&none_correct).0, None);
        let mut all = PointingStats::default();
        all.record(true, true);
        assert_eq!(precision_recall(&all), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn tallies_partition_samples() {
        let mut s = PointingStats::default();
        for (c, h) in [(true, true), (true, false), (false, true), (false, false), (true, true)] {
            s.record(c, h);
        }
        assert_eq!(s.tp + s.fp + s.fn_ + s.tn, s.total());
        assert_eq!(s.total(), 5);
    }

    #[test]
    fn pointing_examples() {
        let m = map(vec![0.1, 0.9, 0.2, 0.3], 2, 2);
        assert!(pointing_hit(&m, &quadrant_mask()).unwrap());
        assert!(pointing_hit(&m.scaled(7.5), &quadrant_mask()).unwrap());
        assert!(!pointing_hit(&map(vec![0.0; 4], 2, 2), &quadrant_mask()).unwrap());
        let mut peak = vec![0.0; 16];
        peak[3] = 1.0;
        assert!(pointing_hit(&map(peak.clone(), 4, 4), &quadrant_mask()).unwrap());
        peak[3] = 0.0;
        peak[12] = 1.0;
        assert!(!pointing_hit(&map(peak, 4, 4), &quadrant_mask()).unwrap());
        assert!(pointing_hit(&map(vec![0.0; 25], 5, 5), &quadrant_mask()).is_err());
    }
}
