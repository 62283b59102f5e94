//! The dual replay buffer: stored samples and their frozen reference
//! saliencies, kept index-aligned in one entry list.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ModelState, ModelView};
use crate::par;
use crate::saliency::{explain, SaliencyMap, SaliencyMethod, SaliencySpec};
use crate::scenario::TaskData;
use crate::tensor::Tensor;

/// Images explained per saliency work item.
const EXPLAIN_CHUNK: usize = 8;

/// How capacity is split between tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuotaPolicy {
    /// `floor(m / k)` per seen task, remainder to the earliest tasks.
    #[default]
    Equalized,
    /// Fixed per-class counts for few-shot streams: `base` per class of task
    /// 1, `incremental` per class of later tasks. Earlier picks are kept.
    PerClass { base: usize, incremental: usize },
}

impl QuotaPolicy {
    /// Few-shot setting: 4 images per base class, 1 per later class.
    pub fn few_shot() -> Self {
        QuotaPolicy::PerClass {
            base: 4,
            incremental: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub image: Tensor,
    pub task_id: usize,
    /// Global class id.
    pub label: usize,
    pub saliency: SaliencyMap,
    /// Seed of the SmoothGrad noise used for the reference map.
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBuffer {
    pub capacity: usize,
    pub policy: QuotaPolicy,
    pub entries: Vec<BufferEntry>,
}

/// Equalized quotas for tasks `1..=k`.
pub fn equalized_quotas(capacity: usize, k: usize) -> Vec<usize> {
    let base = capacity / k;
    let extra = capacity % k;
    (0..k).map(|t| base + usize::from(t < extra)).collect()
}

/// Picks up to `count` indices, class-balanced within one.
fn balanced_pick(labels: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            let mut v: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            v.shuffle(rng);
            v
        })
        .collect();
    // random class order decides who gets the extra sample
    pools.shuffle(rng);
    let mut picked = Vec::with_capacity(count);
    let mut round = 0;
    while picked.len() < count {
        let mut any = false;
        for pool in &pools {
            if picked.len() == count {
                break;
            }
            if let Some(&i) = pool.get(round) {
                picked.push(i);
                any = true;
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    picked
}

/// Reference saliencies for `images` (global labels mapped to head rows).
pub fn reference_saliencies(
    classifier: &Classifier,
    state: &ModelState,
    images: &[&Tensor],
    labels: &[usize],
    noise_seeds: &[u64],
    xai: &SaliencySpec,
    producing_task: usize,
) -> Result<Vec<SaliencyMap>> {
    let rows = labels
        .iter()
        .map(|&c| {
            state
                .class_index(c)
                .ok_or_else(|| Error::InvalidArgument(format!("class {c} has no head row")))
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks = images.len().div_ceil(EXPLAIN_CHUNK);
    let parts = par::map_range(chunks, |ci| -> Result<Vec<SaliencyMap>> {
        let lo = ci * EXPLAIN_CHUNK;
        let hi = (lo + EXPLAIN_CHUNK).min(images.len());
        let view = ModelView::constant(classifier, state);
        let batch = Tensor::stack(&images[lo..hi])?;
        let mut maps = explain(&view, &batch, &rows[lo..hi], xai, &noise_seeds[lo..hi])?;
        for m in &mut maps {
            m.producing_task = producing_task;
        }
        Ok(maps)
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

impl DualBuffer {
    pub fn new(capacity: usize, policy: QuotaPolicy) -> Self {
        DualBuffer {
            capacity,
            policy,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Method of the stored references, if any.
    pub fn method(&self) -> Option<SaliencyMethod> {
        self.entries.first().map(|e| e.saliency.method)
    }

    /// Entry counts per task id, in task order.
    pub fn per_task_counts(&self) -> Vec<(usize, usize)> {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for e in &self.entries {
            match counts.iter_mut().find(|(t, _)| *t == e.task_id) {
                Some((_, n)) => *n += 1,
                None => counts.push((e.task_id, 1)),
            }
        }
        counts.sort_unstable();
        counts
    }

    /// Rebalances the buffer after task `task.task_id` and stores new samples
    /// with reference saliencies from `state`.
    pub fn update(
        &mut self,
        classifier: &Classifier,
        state: &ModelState,
        task: &TaskData,
        xai: &SaliencySpec,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        if let Some(stored) = self.method() {
            if stored != xai.method {
                return Err(Error::MethodMismatch {
                    stored: stored.to_string(),
                    requested: xai.method.to_string(),
                });
            }
        }
        let k = task.task_id;
        let labels: Vec<usize> = task.train.iter().map(|s| s.label).collect();
        let picked = match self.policy {
            QuotaPolicy::Equalized => {
                let quotas = equalized_quotas(self.capacity, k);
                self.downsample(&quotas, rng);
                let want = quotas[k - 1];
                if task.train.len() < want {
                    warn!(
                        "task {k} has {} training samples, quota is {want}; storing all",
                        task.train.len()
                    );
                }
                balanced_pick(&labels, want, rng)
            }
            QuotaPolicy::PerClass { base, incremental } => {
                let per_class = if k == 1 { base } else { incremental };
                let mut picked = Vec::new();
                for &c in &task.class_ids {
                    let mut pool: Vec<usize> =
                        (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    pool.shuffle(rng);
                    if pool.len() < per_class {
                        warn!("class {c} has {} samples, quota is {per_class}", pool.len());
                    }
                    picked.extend(pool.into_iter().take(per_class));
                }
                let room = self.capacity.saturating_sub(self.entries.len());
                if picked.len() > room {
                    warn!(
                        "per-class quota needs {} slots, {room} left; truncating",
                        picked.len()
                    );
                    picked.truncate(room);
                }
                picked
            }
        };
        let noise_seeds: Vec<u64> = picked.iter().map(|_| rng.gen()).collect();
        let images: Vec<&Tensor> = picked.iter().map(|&i| &task.train[i].image).collect();
        let picked_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
        let maps = reference_saliencies(
            classifier,
            state,
            &images,
            &picked_labels,
            &noise_seeds,
            xai,
            k,
        )?;
        for ((&i, saliency), noise_seed) in picked.iter().zip(maps).zip(noise_seeds) {
            self.entries.push(BufferEntry {
                image: task.train[i].image.clone(),
                task_id: k,
                label: labels[i],
                saliency,
                noise_seed,
            });
        }
        Ok(())
    }

    /// Randomly evicts entries of task `t` down to `quotas[t - 1]`.
    fn downsample(&mut self, quotas: &[usize], rng: &mut impl Rng) {
        let mut keep = vec![true; self.entries.len()];
        for (t, &q) in quotas.iter().enumerate() {
            let mut idx: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].task_id == t + 1)
                .collect();
            if idx.len() <= q {
                continue;
            }
            idx.shuffle(rng);
            for &i in &idx[q..] {
                keep[i] = false;
            }
        }
        let mut flags = keep.into_iter();
        self.entries.retain(|_| flags.next().unwrap_or(true));
    }

    /// Uniform draws with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch_size)
            .map(|_| rng.gen_range(0..self.entries.len()))
            .collect())
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<&BufferEntry>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }
}
