//! Image-grouped batch sampling and the copy / reduce mechanics for image features.
//!
//! A grouped batch holds `n` distinct images and `k` impressions per image,
//! laid out image-major: feature row `r` belongs to image `r / k`. Images are
//! drawn with probability proportional to their impression count.

use std::sync::mpsc::sync_channel;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupIndex};
use crate::error::{Error, Result};
use crate::sparse::SparseBatch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Distinct images per batch.
    pub n: usize,
    /// Impressions drawn per image.
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n: 8, k: 16, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "sampler n and k must be positive, got n={} k={}",
                self.n, self.k
            )));
        }
        Ok(())
    }
}

/// How gradients of the `k` copies of an image feature are folded back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Mean over the copies.
    #[default]
    Paper,
    /// Sum over the copies, the chain rule for a node fanned out `k` times.
    Exact,
}

/// Per-image draw probability `count(u) / total`.
pub fn compute_sample_probs(g: &GroupIndex) -> Result<Vec<f64>> {
    let total = g.total();
    if total == 0 {
        return Err(Error::invalid("cannot sample from an empty index"));
    }
    Ok(g.counts().iter().map(|&c| c as f64 / total as f64).collect())
}

/// Walker alias table for O(1) draws from a fixed discrete distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
    weights: Vec<f64>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("alias table needs at least one outcome"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("alias weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("alias weights sum to zero"));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Ok(AliasTable {
            prob,
            alias,
            weights: weights.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }

    /// `n` distinct outcomes, each successive draw proportional to weight
    /// among those not yet taken.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let support = self.weights.iter().filter(|&&w| w > 0.0).count();
        if n > support {
            return Err(Error::invalid(format!(
                "cannot draw {} distinct images from {}",
                n, support
            )));
        }
        let mut taken = vec![false; self.len()];
        let mut out = Vec::with_capacity(n);
        let mut remaining_mass: f64 = self.weights.iter().sum();
        let total = remaining_mass;
        while out.len() < n {
            // rejection is cheap while most mass is still free
            let pick = if remaining_mass > 0.25 * total {
                let mut hit = None;
                for _ in 0..64 {
                    let i = self.sample(rng);
                    if !taken[i] {
                        hit = Some(i);
                        break;
                    }
                }
                hit
            } else {
                None
            };
            let i = match pick {
                Some(i) => i,
                None => self.scan_free(&taken, remaining_mass, rng),
            };
            taken[i] = true;
            remaining_mass -= self.weights[i];
            out.push(i);
        }
        Ok(out)
    }

    fn scan_free<R: Rng + ?Sized>(&self, taken: &[bool], mass: f64, rng: &mut R) -> usize {
        let mut u = rng.random::<f64>() * mass;
        let mut last = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if taken[i] || w == 0.0 {
                continue;
            }
            last = Some(i);
            if u < w {
                return i;
            }
            u -= w;
        }
        last.expect("at least one free outcome")
    }
}

/// `n` images with `k` impressions each, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBatch {
    /// Group position (into the dataset's image list) of each batch image.
    pub groups: Vec<usize>,
    /// `[n x ...]` image tensors, or precomputed image features.
    pub images: Tensor,
    pub features: SparseBatch,
    pub labels: Vec<f64>,
    /// Dataset row of every feature row.
    pub rows: Vec<usize>,
    pub k: usize,
    /// Sampler RNG right after this batch was drawn; resuming from it
    /// reproduces the following batches.
    pub rng_after: ChaCha8Rng,
}

impl GroupedBatch {
    pub fn num_images(&self) -> usize {
        self.groups.len()
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    /// Assembles a batch from dataset rows, `k` consecutive rows per image.
    pub fn from_rows(ds: &Dataset, groups: Vec<usize>, rows: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || rows.len() != groups.len() * k {
            return Err(Error::shape(format!(
                "{} rows for {} images at k={}",
                rows.len(),
                groups.len(),
                k
            )));
        }
        for (r, &row) in rows.iter().enumerate() {
            if ds.row_image[row] != groups[r / k] {
                return Err(Error::invalid(format!(
                    "row {} belongs to image {}, not {}",
                    row,
                    ds.row_image[row],
                    groups[r / k]
                )));
            }
        }
        let imgs: Vec<&Tensor> = groups.iter().map(|&g| ds.image(g)).collect();
        Ok(GroupedBatch {
            images: Tensor::stack(&imgs)?,
            features: ds.features.gather_rows(&rows),
            labels: rows.iter().map(|&r| ds.labels[r]).collect(),
            groups,
            rows,
            k,
            rng_after: ChaCha8Rng::seed_from_u64(0),
        })
    }
}

/// Draws one grouped batch: `cfg.n` distinct images by `table`, then `cfg.k`
/// impressions per image uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    table: &AliasTable,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<GroupedBatch> {
    cfg.validate()?;
    if table.len() != ds.groups.num_images() {
        return Err(Error::invalid("alias table does not match the dataset"));
    }
    let groups = table.sample_distinct(cfg.n, rng)?;
    let mut rows = Vec::with_capacity(cfg.n * cfg.k);
    for &g in &groups {
        let members = &ds.groups.rows[g];
        for _ in 0..cfg.k {
            rows.push(members[rng.random_range(0..members.len())]);
        }
    }
    GroupedBatch::from_rows(ds, groups, rows, cfg.k)
}

/// A deterministic stream of batches whose position is captured by its RNG.
pub trait BatchSource {
    fn next_batch(&mut self, ds: &Dataset) -> Result<GroupedBatch>;
    fn rng(&self) -> &ChaCha8Rng;
    fn set_rng(&mut self, rng: ChaCha8Rng);
}

/// Grouped sampler with its own RNG stream.
#[derive(Debug, Clone)]
pub struct GroupedSampler {
    cfg: SamplerConfig,
    table: AliasTable,
    rng: ChaCha8Rng,
}

impl GroupedSampler {
    pub fn new(ds: &Dataset, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let probs = compute_sample_probs(&ds.groups)?;
        if cfg.n > probs.len() {
            return Err(Error::Config(format!(
                "batch asks for {} images but the dataset has {}",
                cfg.n,
                probs.len()
            )));
        }
        Ok(GroupedSampler {
            cfg,
            table: AliasTable::new(&probs)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }
}

impl BatchSource for GroupedSampler {
    fn next_batch(&mut self, ds: &Dataset) -> Result<GroupedBatch> {
        let mut b = sample_batch(ds, &self.table, &self.cfg, &mut self.rng)?;
        b.rng_after = self.rng.clone();
        Ok(b)
    }

    fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}

/// Thoroughly shuffled flat batches: every impression carries its own copy of
/// its image (`k = 1`). Each epoch is a fresh permutation drawn from the RNG
/// at the epoch boundary.
#[derive(Debug, Clone)]
pub struct ShuffledSampler {
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl ShuffledSampler {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("flat batch size must be positive".into()));
        }
        Ok(ShuffledSampler {
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
        })
    }
}

impl BatchSource for ShuffledSampler {
    fn next_batch(&mut self, ds: &Dataset) -> Result<GroupedBatch> {
        use rand::seq::SliceRandom;
        if ds.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = (0..ds.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        let groups = rows.iter().map(|&r| ds.row_image[r]).collect();
        let mut b = GroupedBatch::from_rows(ds, groups, rows, 1)?;
        b.rng_after = self.rng.clone();
        Ok(b)
    }

    fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
        self.order.clear();
        self.pos = 0;
    }
}

/// Runs `body` on `count` batches drawn by a producer thread that stays at
/// most two batches ahead. Batch content depends only on the source's RNG,
/// so the result is the same as drawing inline. On return the source is
/// rewound to just after the last batch handed to `body`.
pub fn run_prefetched<S, F>(source: &mut S, ds: &Dataset, count: u64, mut body: F) -> Result<()>
where
    S: BatchSource + Send,
    F: FnMut(GroupedBatch) -> Result<()>,
{
    if count == 0 {
        return Ok(());
    }
    let (tx, rx) = sync_channel::<Result<GroupedBatch>>(2);
    let mut last_rng = None;
    let outcome = thread::scope(|scope| {
        let src = &mut *source;
        scope.spawn(move || {
            for _ in 0..count {
                let b = src.next_batch(ds);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        let mut outcome = Ok(());
        for b in rx.iter() {
            match b {
                Ok(b) => {
                    last_rng = Some(b.rng_after.clone());
                    if let Err(e) = body(b) {
                        outcome = Err(e);
                        break;
                    }
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        drop(rx);
        outcome
    });
    if let Some(rng) = last_rng {
        source.set_rng(rng);
    }
    outcome
}

/// Repeats each row `k` times: row `i` becomes rows `i*k .. (i+1)*k`.
pub fn replicate_image_features(conv: &Tensor, k: usize) -> Tensor {
    let n = conv.rows();
    let idx: Vec<usize> = (0..n * k).map(|r| r / k).collect();
    conv.gather_rows(&idx)
}

/// Folds `[k*n x f]` copy gradients back to `[n x f]`.
pub fn reduce_copy_gradients(grad_c: &Tensor, k: usize, mode: GradMode) -> Result<Tensor> {
    let rows = grad_c.rows();
    if k == 0 || rows % k != 0 {
        return Err(Error::shape(format!("{} rows not divisible by k={}", rows, k)));
    }
    let n = rows / k;
    let f = grad_c.row_len();
    let mut shape = grad_c.shape().to_vec();
    shape[0] = n;
    let mut out = Tensor::zeros(&shape);
    for i in 0..n {
        let dst = out.row_mut(i);
        for c in 0..k {
            for (d, s) in dst.iter_mut().zip(grad_c.row(i * k + c)) {
                *d += s;
            }
        }
        if mode == GradMode::Paper {
            let inv = 1.0 / k as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    debug_assert_eq!(out.len(), n * f);
    Ok(out)
}
