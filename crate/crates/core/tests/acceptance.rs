//! Acceptance suite. Every criterion prints one line
//! `criterion N PASS|FAIL: <measurements>` before asserting, so
//! `cargo test -p xreplay --test acceptance -- --nocapture` gives a report.

mod common;

use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use xreplay::autograd::{self as ag, Var};
use xreplay::eval::*;
use xreplay::experiment::{run_experiment, ExperimentConfig};
use xreplay::memory::{equalized_quotas, reference_saliencies, QuotaPolicy};
use xreplay::model::{Classifier, ClassifierSpec, InputShape, ModelState, ModelView};
use xreplay::saliency::*;
use xreplay::scenario::{build_scenario, ScenarioSpec, TaskData};
use xreplay::strategies::*;
use xreplay::tensor::Tensor;

fn report(n: usize, pass: bool, detail: String, started: Instant) {
    println!(
        "criterion {n} {}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

fn synthetic(total: usize, tasks: usize, tpc: usize, tests: usize, seed: u64) -> Vec<TaskData> {
    let mut spec = ScenarioSpec::synthetic(total, tasks, total / tasks, seed);
    spec.synthetic.train_per_class = tpc;
    spec.synthetic.test_per_class = tests;
    spec.require_masks = true;
    build_scenario(&spec).unwrap()
}

fn default_cnn() -> Classifier {
    Classifier::new(ClassifierSpec::default(), InputShape::rgb(32, 32)).unwrap()
}

#[test]
fn criterion_01_grad_cam_oracle() {
    let t0 = Instant::now();
    let c = tiny_classifier();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_alpha, mut worst_map): (f64, f64) = (0.0, 0.0);
    let mut nonzero = 0;
    let rel = |a: f64, b: f64| (a - b).abs() / (1e-6 * a.abs().max(b.abs()) + 1e-12);
    for i in 0..20 {
        let state = random_state(&c, 3, rng.gen());
        let image = random_images(1, 3, 8, 8, rng.gen());
        let class = rng.gen_range(0..3);
        let layer = if i % 2 == 0 { "conv1" } else { "conv2" };
        let view = ModelView::constant(&c, &state);
        let parts = grad_cam_parts(&view, &image, &[class], layer, false).unwrap();
        let map = grad_cam(&view, &image.index0(0), class, layer).unwrap();
        let (alpha, oracle) = grad_cam_loops(&state, image.data(), class, layer);
        for (a, b) in parts.alpha.value().data().iter().zip(&alpha) {
            worst_alpha = worst_alpha.max(rel(*a, *b));
        }
        for (a, b) in map.values.iter().zip(&oracle) {
            worst_map = worst_map.max(rel(*a, *b));
        }
        nonzero += usize::from(!map.is_all_zero());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_alpha <= 1.0 && worst_map <= 1.0 && secs < 10.0;
    report(
        1,
        pass,
        format!(
            "20 triples, worst |diff|/(1e-6*|x|+1e-12): alpha {worst_alpha:.3}, map {worst_map:.3}; {nonzero} non-zero maps"
        ),
        t0,
    );
}

#[test]
fn criterion_02_gradient_checks() {
    let t0 = Instant::now();
    let c = tiny_classifier();
    let state = random_state(&c, 3, 21);
    let params = state.num_parameters();
    let images = random_images(4, 3, 8, 8, 22);
    let mut results: Vec<(String, f64, bool)> = Vec::new();
    let mut push = |name: &str, r: (f64, bool)| results.push((name.to_string(), r.0, r.1));

    push(
        "task",
        gradient_check(&state, &c, |v| {
            let (logits, _) = v.scores(&Var::constant(images.clone()), None).unwrap();
            task_loss(&logits, &[0, 1, 2, 1]).unwrap()
        }),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (method, side) in [
        (SaliencyMethod::VanillaBp, 8),
        (SaliencyMethod::Smoothgrad, 8),
        (SaliencyMethod::GradCam, 2),
    ] {
        let batch = ReplayBatch {
            images: images.clone(),
            rows: vec![2, 0, 1, 2],
            references: Tensor::new(
                vec![4, side * side],
                (0..4 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap(),
            noise_seeds: vec![1, 2, 3, 4],
            method,
        };
        let xai = SaliencySpec {
            smoothgrad_n: 4,
            ..SaliencySpec::new(method)
        };
        push(
            &format!("rrr/{method}"),
            gradient_check(&state, &c, |v| rrr_loss(v, &batch, &xai).unwrap().0),
        );
    }
    let anchor = EwcAnchor {
        theta: state
            .params
            .iter()
            .map(|p| p.tensor.map(|x| x + 0.1))
            .collect(),
        fisher: state.params.iter().map(|p| p.tensor.map(|x| x.abs())).collect(),
    };
    push(
        "ewc",
        gradient_check(&state, &c, |v| ewc_penalty(&v.params, std::slice::from_ref(&anchor), 5.0).unwrap()),
    );
    let old = Tensor::new(vec![4, 2], vec![0.5, -1.0, 1.5, 0.0, -0.3, 0.2, 2.0, 1.0]).unwrap();
    push(
        "lwf",
        gradient_check(&state, &c, |v| {
            let (logits, _) = v.scores(&Var::constant(images.clone()), None).unwrap();
            let idx: Vec<usize> = (0..4).flat_map(|n| [n * 3, n * 3 + 1]).collect();
            let sub = ag::gather(&logits, Rc::new(idx), vec![4, 2]).unwrap();
            lwf_distill(&sub, &old, 2.0).unwrap()
        }),
    );
    let secs = t0.elapsed().as_secs_f64();
    let pass = params <= 1000 && secs < 60.0 && results.iter().all(|(_, w, nz)| *w <= 1.0 && *nz);
    let detail = results
        .iter()
        .map(|(n, w, _)| format!("{n} {w:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        2,
        pass,
        format!("{params} parameters, worst violation ratio at rtol 1e-3 (<= 1 passes): {detail}"),
        t0,
    );
}

#[test]
fn criterion_03_smoothgrad_degeneracy() {
    let t0 = Instant::now();
    let c = tiny_classifier();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut same = 0;
    for _ in 0..50 {
        let state = random_state(&c, 3, rng.gen());
        let image = random_images(1, 3, 8, 8, rng.gen()).index0(0);
        let class = rng.gen_range(0..3);
        let view = ModelView::constant(&c, &state);
        let v = vanilla_bp(&view, &image, class).unwrap();
        let s = smoothgrad(&view, &image, class, 1, 0.0, rng.gen()).unwrap();
        same += usize::from(v == SaliencyMap { method: v.method, ..s });
    }
    // dyadic weights keep every sum of equal gradients exact
    let weights = Tensor::new(
        vec![2, 3 * 4 * 4],
        (0..96).map(|_| rng.gen_range(-64i32..64) as f64 / 64.0).collect(),
    )
    .unwrap();
    let linear = LinearModel { weights };
    let image = random_images(1, 3, 4, 4, 9).index0(0);
    let reference = vanilla_bp(&linear, &image, 1).unwrap();
    let mut linear_same = 0;
    let settings = [(1, 0.0), (2, 0.1), (7, 0.5), (40, 0.15), (64, 2.0)];
    for (n, sigma) in settings {
        let s = smoothgrad(&linear, &image, 1, n, sigma, 77).unwrap();
        linear_same += usize::from(s.values == reference.values);
    }
    let pass = same == 50 && linear_same == settings.len();
    report(
        3,
        pass,
        format!(
            "smoothgrad(n=1, sigma=0) bit-identical to vanilla in {same}/50 cases; linear model invariant in {linear_same}/{} (n, sigma) settings",
            settings.len()
        ),
        t0,
    );
}

#[test]
fn criterion_04_buffer_law() {
    let t0 = Instant::now();
    // m = 200 is the 2000-over-100-classes budget scaled to 10 classes
    let tasks = synthetic(10, 5, 100, 2, 4);
    let mut failures = Vec::new();
    let mut worst_drift: f64 = 0.0;
    let mut checked = 0;
    for (m, method) in [
        (10, SaliencyMethod::Smoothgrad),
        (50, SaliencyMethod::GradCam),
        (200, SaliencyMethod::VanillaBp),
    ] {
        let xai = SaliencySpec {
            smoothgrad_n: 8,
            ..SaliencySpec::new(method)
        };
        let mut cfg = TrainConfig::new(Strategy::Er);
        cfg.epochs = 1;
        cfg.rrr_enabled = true;
        let mut learner = Learner::new(default_cnn(), cfg, xai.clone(), m, QuotaPolicy::Equalized, 40 + m as u64).unwrap();
        let mut states: BTreeMap<usize, ModelState> = BTreeMap::new();
        for t in &tasks {
            learner.learn_task(t).unwrap();
            let k = t.task_id;
            states.insert(k, learner.state.clone());
            let buf = &learner.buffer;
            if buf.len() > m {
                failures.push(format!("m={m} k={k}: {} entries", buf.len()));
            }
            let counts: BTreeMap<usize, usize> = buf.per_task_counts().into_iter().collect();
            for task in 1..=k {
                let got = counts.get(&task).copied().unwrap_or(0);
                if got.abs_diff(m / k) > 1 {
                    failures.push(format!("m={m} k={k} task {task}: {got} vs floor {}", m / k));
                }
            }
            let images = buf.entries.iter().filter(|e| e.image.len() == 3 * 32 * 32).count();
            let maps = buf
                .entries
                .iter()
                .filter(|e| e.saliency.method == method && !e.saliency.values.is_empty())
                .count();
            if images != buf.len() || maps != buf.len() {
                failures.push(format!("m={m} k={k}: {images} images vs {maps} maps"));
            }
            for e in &buf.entries {
                let producer = &states[&e.task_id];
                let fresh = reference_saliencies(
                    &learner.classifier,
                    producer,
                    &[&e.image],
                    &[e.label],
                    &[e.noise_seed],
                    &xai,
                    e.task_id,
                )
                .unwrap()
                .remove(0);
                for (a, b) in fresh.values.iter().zip(&e.saliency.values) {
                    worst_drift = worst_drift.max((a - b).abs());
                }
                checked += 1;
            }
        }
        let expected = equalized_quotas(m, 5);
        let fin: Vec<usize> = learner.buffer.per_task_counts().into_iter().map(|(_, n)| n).collect();
        if fin != expected {
            failures.push(format!("m={m}: final counts {fin:?} vs {expected:?}"));
        }
    }
    let pass = failures.is_empty() && worst_drift <= 1e-6;
    report(
        4,
        pass,
        format!(
            "m in {{10, 50, 200}} over 5 tasks: {} violations, {checked} re-derived references, max |diff| {worst_drift:.2e} (atol 1e-6){}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
        t0,
    );
}

#[test]
fn criterion_05_composition_neutrality() {
    let t0 = Instant::now();
    let tasks = synthetic(10, 5, 12, 2, 5);
    let mut outcomes = Vec::new();
    for strategy in [Strategy::Er, Strategy::Ewc] {
        let run = |rrr: bool| {
            let mut cfg = TrainConfig::new(strategy);
            cfg.epochs = 2;
            cfg.rrr_enabled = rrr;
            cfg.rrr_lambda = if rrr { 0.0 } else { 1.0 };
            let mut l = Learner::new(
                default_cnn(),
                cfg,
                SaliencySpec::new(SaliencyMethod::GradCam),
                20,
                QuotaPolicy::Equalized,
                11,
            )
            .unwrap();
            for t in &tasks {
                l.learn_task(t).unwrap();
            }
            l
        };
        let (base, neutral) = (run(false), run(true));
        let identical = base.state == neutral.state && base.buffer == neutral.buffer;
        outcomes.push((strategy.as_str(), identical, base.state.version));
    }
    let pass = outcomes.iter().all(|o| o.1);
    let detail = outcomes
        .iter()
        .map(|(s, same, steps)| format!("{s}: {} after {steps} steps", if *same { "bit-identical" } else { "DIFFERENT" }))
        .collect::<Vec<_>>()
        .join(", ");
    report(5, pass, format!("rrr_enabled with lambda 0 vs base: {detail}"), t0);
}

#[test]
fn criterion_06_metric_formulas() {
    let t0 = Instant::now();
    let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.7, 0.8]]).unwrap();
    let (acc, bwt) = acc_bwt(&r).unwrap();
    let mut s = PointingStats::default();
    for (correct, hit) in [(true, true), (true, true), (true, false), (false, true)] {
        s.record(correct, hit);
    }
    let (p, rc) = precision_recall(&s);
    let flat = AccuracyMatrix::from_rows(&[vec![0.4], vec![0.1, 0.6], vec![0.4, 0.6, 0.9]]).unwrap();
    let (_, flat_bwt) = acc_bwt(&flat).unwrap();
    let (pg_acc, pg_bwt) = pg_metrics(&r).unwrap();
    let pass = (acc - 0.75).abs() < 1e-12
        && (bwt + 0.2).abs() < 1e-12
        && (pg_acc, pg_bwt) == (acc, bwt)
        && (p.unwrap() - 2.0 / 3.0).abs() < 1e-12
        && (rc.unwrap() - 2.0 / 3.0).abs() < 1e-12
        && flat_bwt == 0.0;
    report(
        6,
        pass,
        format!(
            "ACC {acc:.4} BWT {bwt:.4} (want 0.75, -0.2); precision {:.4} recall {:.4} (want 2/3); diagonal-equals-final BWT {flat_bwt}",
            p.unwrap(),
            rc.unwrap()
        ),
        t0,
    );
}

/// Settings of the directional comparison; see the README for how they were
/// chosen.
const C7_SEEDS: u64 = 5;
const C7_TRAIN_PER_CLASS: usize = 100;
const C7_EPOCHS: usize = 10;
const C7_RRR_LAMBDA: f64 = 0.1;

fn c7_config(seed: u64, rrr: bool) -> String {
    format!(
        r#"
schema_version = 1
seed = {seed}
output_dir = "unused"
buffer_capacity = 50
pointing_game = false

[scenario]
total_classes = 10
num_tasks = 5
ways_per_task = 2
image_size = [32, 32]
source = "synthetic"

[scenario.synthetic]
train_per_class = {C7_TRAIN_PER_CLASS}
test_per_class = 30

[train]
strategy = "er"
rrr_enabled = {rrr}
rrr_lambda = {C7_RRR_LAMBDA}
epochs = {C7_EPOCHS}

[saliency]
method = "grad_cam"
"#
    )
}

#[test]
fn criterion_07_directional_reproduction() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut acc = [Vec::new(), Vec::new()];
    let mut drift = [Vec::new(), Vec::new()];
    for seed in 0..C7_SEEDS {
        for (arm, rrr) in [(0, false), (1, true)] {
            let text = c7_config(seed, rrr);
            let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
            let s = run_experiment(&cfg, &text, &tmp.path().join(format!("{arm}_{seed}"))).unwrap();
            acc[arm].push(s.acc);
            drift[arm].push(s.buffer_rrr_loss.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a_er, a_rrr) = (mean(&acc[0]), mean(&acc[1]));
    let (d_er, d_rrr) = (mean(&drift[0]), mean(&drift[1]));
    let secs = t0.elapsed().as_secs_f64();
    let pass = a_rrr >= a_er && d_rrr < d_er && secs < 15.0 * 60.0;
    report(
        7,
        pass,
        format!(
            "{C7_SEEDS} seeds, m=50, Grad-CAM, lambda {C7_RRR_LAMBDA}: mean ACC ER {a_er:.4} vs ER+RRR {a_rrr:.4}; mean buffer L_RRR ER {d_er:.4} vs ER+RRR {d_rrr:.4}; per-seed ACC ER {:?} ER+RRR {:?}",
            acc[0].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            acc[1].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        ),
        t0,
    );
}

#[test]
fn criterion_08_pointing_game_sanity() {
    let t0 = Instant::now();
    let tasks = synthetic(10, 5, 100, 50, 8);
    let first = &tasks[..1];
    let mut cfg = TrainConfig::new(Strategy::Finetune);
    cfg.epochs = 60;
    let mut learner = Learner::new(
        default_cnn(),
        cfg,
        SaliencySpec::new(SaliencyMethod::GradCam),
        0,
        QuotaPolicy::Equalized,
        8,
    )
    .unwrap();
    learner.learn_task(&first[0]).unwrap();
    let train_images: Vec<&Tensor> = first[0].train.iter().map(|s| &s.image).collect();
    let pred = learner.classifier.predict(&learner.state, &Tensor::stack(&train_images).unwrap()).unwrap();
    let train_acc = first[0]
        .train
        .iter()
        .zip(&pred)
        .filter(|(s, &p)| learner.state.classes_seen[p] == s.label)
        .count() as f64
        / pred.len() as f64;
    let xai = SaliencySpec::new(SaliencyMethod::GradCam);
    let row = evaluate(&learner.classifier, &learner.state, first, 1, Some(&xai)).unwrap();
    let hit_rate = row.pointing[0].unwrap().hit_rate().unwrap();
    let chance = first[0]
        .test
        .iter()
        .map(|s| s.mask.as_ref().unwrap().area_fraction())
        .sum::<f64>()
        / first[0].test.len() as f64;
    // rescaling invariance of every decision
    let view = ModelView::constant(&learner.classifier, &learner.state);
    let mut changed = 0;
    let mut decisions = 0;
    for (i, s) in first[0].test.iter().enumerate() {
        let img = s.image.clone().reshape(vec![1, 3, 32, 32]).unwrap();
        let row = learner.state.class_index(s.label).unwrap();
        let map = explain(&view, &img, &[row], &xai, &[i as u64]).unwrap().remove(0);
        let mask = s.mask.as_ref().unwrap();
        let hit = pointing_hit(&map, mask).unwrap();
        for factor in [1e-3, 0.5, 3.7, 250.0] {
            decisions += 1;
            changed += usize::from(pointing_hit(&map.scaled(factor), mask).unwrap() != hit);
        }
    }
    let pass = hit_rate > chance && changed == 0;
    report(
        8,
        pass,
        format!(
            "task 1 train accuracy {train_acc:.3}, test accuracy {:.3}; Grad-CAM hit rate {hit_rate:.3} vs chance (mean mask area) {chance:.3}; {changed}/{decisions} decisions changed by rescaling",
            row.accuracy[0]
        ),
        t0,
    );
}

#[test]
fn criterion_09_memory_accounting() {
    let t0 = Instant::now();
    let gc = SaliencySpec::new(SaliencyMethod::GradCam);
    let vb = SaliencySpec::new(SaliencyMethod::VanillaBp);
    let sg = SaliencySpec::new(SaliencyMethod::Smoothgrad);
    let spec = ClassifierSpec::default();
    // three stride-2 blocks bring 56x56 down to a 7x7 target layer
    let seven = memory_cost(&gc, &spec, InputShape::rgb(56, 56), 4).unwrap();
    let input = InputShape::rgb(224, 224);
    let image_bytes = input.len() * 4;
    let vanilla = memory_cost(&vb, &spec, input, 4).unwrap();
    let smooth = memory_cost(&sg, &spec, input, 4).unwrap();
    let small = memory_cost(&gc, &spec, InputShape::rgb(32, 32), 4).unwrap();
    let pass = seven == 196 && vanilla == 224 * 224 * 4 && smooth == vanilla && vanilla * 3 == image_bytes && small == 64;
    report(
        9,
        pass,
        format!(
            "7x7 Grad-CAM at 4 B: {seven} B; pixel maps at 224x224: {vanilla} B = 1/{} of the {image_bytes} B image; default 4x4 Grad-CAM: {small} B",
            image_bytes / vanilla
        ),
        t0,
    );
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let t0 = Instant::now();
    let text = r#"
schema_version = 1
seed = 1234
output_dir = "unused"
buffer_capacity = 12

[scenario]
total_classes = 6
num_tasks = 3
ways_per_task = 2
image_size = [32, 32]
source = "synthetic"

[scenario.synthetic]
train_per_class = 16
test_per_class = 8

[train]
strategy = "er"
rrr_enabled = true
epochs = 2

[saliency]
method = "smoothgrad"
smoothgrad_n = 4
"#;
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    for d in ["a", "b"] {
        run_experiment(&cfg, text, &tmp.path().join(d)).unwrap();
    }
    let mut same = Vec::new();
    for f in ["R.csv", "buffer.bin"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        same.push((f, a == b, a.len()));
    }
    let pass = same.iter().all(|s| s.1);
    let detail = same
        .iter()
        .map(|(f, eq, n)| format!("{f} {} ({n} bytes)", if *eq { "identical" } else { "DIFFERENT" }))
        .collect::<Vec<_>>()
        .join(", ");
    report(10, pass, format!("two runs of one config: {detail}"), t0);
}
