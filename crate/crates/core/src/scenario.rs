//! Class-incremental task streams.
//!
//! A scenario splits `total_classes` into `num_tasks` disjoint class sets via a
//! seeded permutation. In the standard setting every task has
//! `ways_per_task` classes. In the few-shot setting the first task holds
//! `base_classes` classes with their full training data and every later task
//! holds `ways_per_task` classes with exactly `shots_per_class` training
//! samples each. Test sets are never subsampled.
//!
//! Images are stored channel-first (`[3, H, W]`) with values in `[0, 1]`.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::par;
use crate::seed::mix;
use crate::tensor::Tensor;

/// Training samples per class: a fixed count or the whole split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Shots {
    #[default]
    All,
    Count(usize),
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::All => s.serialize_str("all"),
            Shots::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Shots;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or \"all\"")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Shots, E> {
                if v == "all" {
                    Ok(Shots::All)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Shots, E> {
                if v == 0 {
                    return Err(E::invalid_value(serde::de::Unexpected::Unsigned(v), &self));
                }
                Ok(Shots::Count(v as usize))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Shots, E> {
                if v <= 0 {
                    return Err(E::invalid_value(serde::de::Unexpected::Signed(v), &self));
                }
                Ok(Shots::Count(v as usize))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Folder(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    /// Fraction of the bounding square the shape covers.
    fn fill(self) -> f64 {
        match self {
            ShapeKind::Disk => std::f64::consts::FRAC_PI_4,
            ShapeKind::Square => 1.0,
            ShapeKind::Triangle => 0.5,
            ShapeKind::Cross => 5.0 / 9.0,
            ShapeKind::Ring => std::f64::consts::FRAC_PI_4 * 0.75,
        }
    }

    /// Whether the point `(dy, dx)`, relative to the bounding square's
    /// top-left corner, lies inside the shape of side `side`.
    fn contains(self, dy: f64, dx: f64, side: f64) -> bool {
        let (u, v) = (dx / side, dy / side);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Ring => {
                let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
                (0.0625..=0.25).contains(&r2)
            }
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => (u - 0.5).abs() <= v / 2.0,
            ShapeKind::Cross => {
                let third = 1.0 / 3.0;
                ((third..2.0 * third).contains(&u)) || ((third..2.0 * third).contains(&v))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundParams {
    /// Mean grey level.
    pub base: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
    /// Amplitude of a random low-frequency sinusoidal texture.
    pub texture: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        BackgroundParams {
            base: 0.45,
            noise: 0.12,
            texture: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub shape_vocabulary: Vec<ShapeKind>,
    pub color_vocabulary: Vec<[f64; 3]>,
    pub background: BackgroundParams,
    /// Bounds on the object's area as a fraction of the image.
    pub object_scale_range: [f64; 2],
    /// Per-channel uniform jitter applied to the object colour.
    pub color_jitter: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            shape_vocabulary: vec![
                ShapeKind::Disk,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Cross,
                ShapeKind::Ring,
            ],
            color_vocabulary: vec![
                [0.9, 0.15, 0.15],
                [0.15, 0.8, 0.2],
                [0.2, 0.3, 0.95],
                [0.95, 0.85, 0.1],
            ],
            background: BackgroundParams::default(),
            object_scale_range: [0.10, 0.40],
            color_jitter: 0.08,
            train_per_class: 60,
            test_per_class: 30,
        }
    }
}

impl SyntheticParams {
    pub fn vocabulary_size(&self) -> usize {
        self.shape_vocabulary.len() * self.color_vocabulary.len()
    }

    /// Row-major `(shape, colour)` pair of a class.
    pub fn class_appearance(&self, class_id: usize) -> Result<(ShapeKind, [f64; 3])> {
        let colors = self.color_vocabulary.len();
        if colors == 0 || class_id >= self.vocabulary_size() {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} outside the synthetic vocabulary of {} classes",
                self.vocabulary_size()
            )));
        }
        Ok((
            self.shape_vocabulary[class_id / colors],
            self.color_vocabulary[class_id % colors],
        ))
    }
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub total_classes: usize,
    pub num_tasks: usize,
    #[serde(default)]
    pub base_classes: usize,
    #[serde(default)]
    pub shots_per_class: Shots,
    pub ways_per_task: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    /// Derived from the experiment's master seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub source: Source,
    #[serde(default)]
    pub synthetic: SyntheticParams,
    /// Held-out fraction per class for folder sources.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fail if any sample lacks a ground-truth mask.
    #[serde(default)]
    pub require_masks: bool,
}

impl ScenarioSpec {
    /// A standard split over synthetic data with default parameters.
    pub fn synthetic(total_classes: usize, num_tasks: usize, ways: usize, seed: u64) -> Self {
        ScenarioSpec {
            total_classes,
            num_tasks,
            base_classes: 0,
            shots_per_class: Shots::All,
            ways_per_task: ways,
            image_size: [32, 32],
            seed,
            source: Source::Synthetic,
            synthetic: SyntheticParams::default(),
            test_fraction: default_test_fraction(),
            require_masks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |f: &str, m: String| Err(Error::config(format!("scenario.{f}"), m));
        if self.total_classes == 0 {
            return cfg("total_classes", "must be positive".into());
        }
        if self.num_tasks == 0 {
            return cfg("num_tasks", "must be positive".into());
        }
        if self.ways_per_task == 0 {
            return cfg("ways_per_task", "must be positive".into());
        }
        if self.image_size.iter().any(|&s| s == 0) {
            return cfg("image_size", "dimensions must be positive".into());
        }
        if self.base_classes > 0 {
            let got = self.base_classes + (self.num_tasks - 1) * self.ways_per_task;
            if got != self.total_classes {
                return cfg(
                    "total_classes",
                    format!(
                        "b + (T-1)*C = total_classes violated: {} + ({}-1)*{} = {} != {}",
                        self.base_classes,
                        self.num_tasks,
                        self.ways_per_task,
                        got,
                        self.total_classes
                    ),
                );
            }
        } else if self.num_tasks * self.ways_per_task != self.total_classes {
            return cfg(
                "total_classes",
                format!(
                    "T*C = total_classes violated: {}*{} = {} != {}",
                    self.num_tasks,
                    self.ways_per_task,
                    self.num_tasks * self.ways_per_task,
                    self.total_classes
                ),
            );
        }
        if let Source::Synthetic = self.source {
            let p = &self.synthetic;
            if p.vocabulary_size() < self.total_classes {
                return cfg(
                    "synthetic",
                    format!(
                        "|shapes| x |colors| = {} is smaller than total_classes = {}",
                        p.vocabulary_size(),
                        self.total_classes
                    ),
                );
            }
            let [lo, hi] = p.object_scale_range;
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return cfg(
                    "synthetic.object_scale_range",
                    "need 0 < low <= high < 1".into(),
                );
            }
            if p.train_per_class == 0 || p.test_per_class == 0 {
                return cfg(
                    "synthetic",
                    "train_per_class and test_per_class must be positive".into(),
                );
            }
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return cfg("test_fraction", "must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Class counts per task, in task order.
    pub fn task_sizes(&self) -> Vec<usize> {
        (0..self.num_tasks)
            .map(|k| {
                if k == 0 && self.base_classes > 0 {
                    self.base_classes
                } else {
                    self.ways_per_task
                }
            })
            .collect()
    }

    /// Training-sample cap for classes of the task at zero-based position `k`.
    fn shots_for(&self, k: usize) -> Option<usize> {
        match self.shots_per_class {
            Shots::All => None,
            Shots::Count(n) if self.base_classes == 0 || k > 0 => Some(n),
            Shots::Count(_) => None,
        }
    }
}

/// Boolean object mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Global class index.
    pub label: usize,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    /// 1-based.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn has_masks(&self) -> bool {
        self.test.iter().all(|s| s.mask.is_some())
    }
}

/// Draws one synthetic image of `class_id` and the exact mask of its object.
pub fn generate_synthetic_sample(
    class_id: usize,
    params: &SyntheticParams,
    image_size: [usize; 2],
    rng: &mut impl Rng,
) -> Result<(Tensor, Mask)> {
    let (shape, color) = params.class_appearance(class_id)?;
    let [h, w] = image_size;
    let area = (h * w) as f64;
    let [lo, hi] = params.object_scale_range;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} is too small for a synthetic object"
        )));
    }

    let target = rng.gen_range(lo..=hi);
    let mut side = (target * area / shape.fill()).sqrt().round().clamp(1.0, h.min(w) as f64);
    let raster = |side: f64, oy: f64, ox: f64| -> Vec<bool> {
        let mut bits = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                bits[y * w + x] = shape.contains(y as f64 + 0.5 - oy, x as f64 + 0.5 - ox, side);
            }
        }
        bits
    };
    let frac = |bits: &[bool]| bits.iter().filter(|&&b| b).count() as f64 / area;

    // Nudge the side until the rasterized area lands inside the range.
    let mut bits = raster(side, 0.0, 0.0);
    for _ in 0..64 {
        let f = frac(&bits);
        if f < lo && side < h.min(w) as f64 {
            side += 1.0;
        } else if f > hi && side > 1.0 {
            side -= 1.0;
        } else {
            break;
        }
        bits = raster(side, 0.0, 0.0);
    }
    let oy = rng.gen_range(0.0..=(h as f64 - side)).floor();
    let ox = rng.gen_range(0.0..=(w as f64 - side)).floor();
    let bits = raster(side, oy, ox);

    let bg = &params.background;
    let fy = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / h as f64;
    let fx = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / w as f64;
    let phase: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    // per-image colour cast, scaled with the pixel noise
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * 0.4 * bg.noise);
    let jitter: [f64; 3] = std::array::from_fn(|_| {
        if params.color_jitter > 0.0 {
            rng.gen_range(-params.color_jitter..=params.color_jitter)
        } else {
            0.0
        }
    });

    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = bits[y * w + x];
            for c in 0..3 {
                let noise = if bg.noise > 0.0 {
                    rng.gen_range(-bg.noise..=bg.noise)
                } else {
                    0.0
                };
                let v = if inside {
                    color[c] + jitter[c] + 0.3 * noise
                } else {
                    let tex = bg.texture
                        * ((y as f64 * fy + x as f64 * fx) + phase[c] * std::f64::consts::TAU).sin();
                    bg.base + tint[c] + tex + noise
                };
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        Tensor::new(vec![3, h, w], data)?,
        Mask {
            height: h,
            width: w,
            bits,
        },
    ))
}

/// Builds the ordered task stream described by `spec`.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Vec<TaskData>> {
    spec.validate()?;
    let mut perm: Vec<usize> = (0..spec.total_classes).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.seed, &[0x5ce0])));

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut offset = 0;
    for (k, size) in spec.task_sizes().into_iter().enumerate() {
        let mut class_ids = perm[offset..offset + size].to_vec();
        class_ids.sort_unstable();
        offset += size;
        tasks.push(TaskData {
            task_id: k + 1,
            class_ids,
            train: Vec::new(),
            test: Vec::new(),
        });
    }

    match &spec.source {
        Source::Synthetic => fill_synthetic(spec, &mut tasks)?,
        Source::Folder(root) => fill_from_folder(spec, root, &mut tasks)?,
    }

    if spec.require_masks {
        for t in &tasks {
            if !t.has_masks() || t.train.iter().any(|s| s.mask.is_none()) {
                return Err(Error::MasksUnavailable(format!(
                    "task {} has samples without ground-truth masks",
                    t.task_id
                )));
            }
        }
    }
    Ok(tasks)
}

fn fill_synthetic(spec: &ScenarioSpec, tasks: &mut [TaskData]) -> Result<()> {
    let p = &spec.synthetic;
    for (k, task) in tasks.iter_mut().enumerate() {
        let n_train = spec.shots_for(k).unwrap_or(p.train_per_class);
        for (split, per_class, out) in [
            (0u64, n_train, &mut task.train),
            (1u64, p.test_per_class, &mut task.test),
        ] {
            let jobs: Vec<(usize, usize)> = task
                .class_ids
                .iter()
                .flat_map(|&c| (0..per_class).map(move |i| (c, i)))
                .collect();
            let made = par::map_slice(&jobs, |&(c, i)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(spec.seed, &[split, c as u64, i as u64]));
                generate_synthetic_sample(c, p, spec.image_size, &mut rng).map(|(image, mask)| {
                    Sample {
                        image,
                        label: c,
                        mask: Some(mask),
                    }
                })
            });
            for s in made {
                out.push(s?);
            }
        }
    }
    Ok(())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_rgb(path: &Path, [h, w]: [usize; 2]) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn load_mask(path: &Path, [h, w]: [usize; 2]) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let img = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Nearest);
    let bits = img.pixels().map(|p| p[0] > 127).collect();
    Ok(Mask {
        height: h,
        width: w,
        bits,
    })
}

fn fill_from_folder(spec: &ScenarioSpec, root: &Path, tasks: &mut [TaskData]) -> Result<()> {
    if !root.is_dir() {
        return Err(Error::config(
            "scenario.source.folder",
            format!("{} is not a directory", root.display()),
        ));
    }
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() < spec.total_classes {
        return Err(Error::config(
            "scenario.source.folder",
            format!(
                "{} holds {} class directories, need {}",
                root.display(),
                class_dirs.len(),
                spec.total_classes
            ),
        ));
    }

    for (k, task) in tasks.iter_mut().enumerate() {
        for &c in &task.class_ids {
            let dir = &class_dirs[c];
            let mut files: Vec<PathBuf> = read_dir_sorted(dir)?
                .into_iter()
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            if files.len() < 2 {
                return Err(Error::config(
                    "scenario.source.folder",
                    format!("{} needs at least two images", dir.display()),
                ));
            }
            files.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.seed, &[2, c as u64])));
            let n_test = ((files.len() as f64 * spec.test_fraction).round() as usize)
                .clamp(1, files.len() - 1);
            let (test_files, train_files) = files.split_at(n_test);
            let train_files = match spec.shots_for(k) {
                Some(n) => &train_files[..n.min(train_files.len())],
                None => train_files,
            };
            let load = |p: &PathBuf| -> Result<Sample> {
                let image = load_rgb(p, spec.image_size)?;
                let mask_path = dir.join("masks").join(p.file_name().expect("file name"));
                let mask = if mask_path.is_file() {
                    let m = load_mask(&mask_path, spec.image_size)?;
                    (m.count() > 0).then_some(m)
                } else {
                    None
                };
                Ok(Sample {
                    image,
                    label: c,
                    mask,
                })
            };
            for s in par::map_slice(train_files, load) {
                task.train.push(s?);
            }
            for s in par::map_slice(test_files, load) {
                task.test.push(s?);
            }
        }
    }
    Ok(())
}
