//! Timing and memory measurements: sparse versus dense input layers, and
//! grouped versus flat batches.
//!
//! Peak memory is read from [`CountingAlloc`], which a binary opts into with
//! `#[global_allocator]`. Without it the memory fields are `None`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::network::{build_networks, forward_backward, NetConfig};
use crate::nn::{dense_fc_forward, dense_fc_param_grad, LayerParams};
use crate::pipeline::BenchConfig;
use crate::sampler::{BatchSource, GradMode, GroupedSampler, SamplerConfig, ShuffledSampler};
use crate::sparse::{csr_from_rows, sparse_fc_backward, sparse_fc_forward};
use crate::tensor::Tensor;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

// Safety: every call is forwarded unchanged to `System`; only counters are added.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(n: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn counting_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

pub fn live_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the heap growth above the starting
/// level at its peak (only meaningful when nothing else allocates meanwhile).
pub fn measure_transient<T>(f: impl FnOnce() -> T) -> (T, Option<usize>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK.load(Ordering::Relaxed);
    (out, counting_active().then(|| peak.saturating_sub(base)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDenseReport {
    pub dim: usize,
    pub nnz_per_row: usize,
    pub batch: usize,
    pub out: usize,
    /// Median forward+backward time.
    pub sparse_ms: f64,
    pub dense_ms: f64,
    pub speedup: f64,
    /// Heap growth during one sparse forward+backward.
    pub sparse_transient_bytes: Option<usize>,
    /// Heap growth during one dense forward+backward, excluding the input.
    pub dense_transient_bytes: Option<usize>,
    /// Size of the densified input batch the dense path needs.
    pub dense_input_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Forward and weight-gradient passes of one input layer in both layouts,
/// on random rows with `nnz_per_row` distinct nonzeros. The dense input is
/// built before timing starts.
pub fn bench_sparse_dense(cfg: &BenchConfig, seed: u64) -> Result<SparseDenseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<(usize, f64)>> = (0..cfg.batch)
        .map(|_| {
            let mut idx = rand::seq::index::sample(&mut rng, cfg.dim, cfg.nnz_per_row.min(cfg.dim)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| (j, rng.random_range(0.5..1.5))).collect()
        })
        .collect();
    let v = csr_from_rows(&rows, cfg.dim)?;
    let mut p = LayerParams::he_normal(&[cfg.dim, cfg.out], cfg.out, cfg.nnz_per_row.max(1), &mut rng);
    let g = Tensor::from_fn(&[cfg.batch, cfg.out], |_| rng.random_range(-1.0..1.0));
    let repeats = cfg.repeats.max(1);

    let mut sparse = Vec::with_capacity(repeats);
    let mut sparse_bytes = None;
    for _ in 0..repeats {
        p.zero_grad();
        let t = Instant::now();
        let (r, bytes) = measure_transient(|| -> Result<()> {
            let y = sparse_fc_forward(&v, &p)?;
            std::hint::black_box(&y);
            sparse_fc_backward(&v, &mut p, &g)
        });
        r?;
        sparse.push(t.elapsed().as_secs_f64() * 1e3);
        sparse_bytes = sparse_bytes.max(bytes);
    }

    let x = v.to_dense();
    let mut dense = Vec::with_capacity(repeats);
    let mut dense_bytes = None;
    for _ in 0..repeats {
        p.zero_grad();
        let t = Instant::now();
        let (r, bytes) = measure_transient(|| -> Result<()> {
            let y = dense_fc_forward(&x, &p)?;
            std::hint::black_box(&y);
            dense_fc_param_grad(&x, &mut p, &g)
        });
        r?;
        dense.push(t.elapsed().as_secs_f64() * 1e3);
        dense_bytes = dense_bytes.max(bytes);
    }
    let (sparse_ms, dense_ms) = (median(sparse), median(dense));
    Ok(SparseDenseReport {
        dim: cfg.dim,
        nnz_per_row: cfg.nnz_per_row,
        batch: cfg.batch,
        out: cfg.out,
        sparse_ms,
        dense_ms,
        speedup: dense_ms / sparse_ms,
        sparse_transient_bytes: sparse_bytes,
        dense_transient_bytes: dense_bytes,
        dense_input_bytes: x.len() * std::mem::size_of::<f64>(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub n: usize,
    pub k: usize,
    pub iters: usize,
    /// Forward+backward time per batch of `n*k` impressions.
    pub grouped_ms: f64,
    /// Same for `n*k` impressions each carrying its own image.
    pub flat_ms: f64,
    pub speedup: f64,
}

/// Times forward+backward on grouped batches against flat batches with the
/// same number of impressions. Batches are drawn before timing.
pub fn bench_grouped_vs_flat(
    net: &NetConfig,
    ds: &Dataset,
    sampler: SamplerConfig,
    iters: usize,
) -> Result<SamplingReport> {
    let (mut model, _) = build_networks(net, sampler.seed)?;
    let mut grouped = GroupedSampler::new(ds, sampler)?;
    let mut flat = ShuffledSampler::new(sampler.n * sampler.k, sampler.seed)?;
    let mut time = |src: &mut dyn BatchSource| -> Result<f64> {
        let batches = (0..iters).map(|_| src.next_batch(ds)).collect::<Result<Vec<_>>>()?;
        let t = Instant::now();
        for b in &batches {
            forward_backward(&mut model, b, 0.0, GradMode::Exact)?;
        }
        Ok(t.elapsed().as_secs_f64() * 1e3 / iters.max(1) as f64)
    };
    let grouped_ms = time(&mut grouped)?;
    let flat_ms = time(&mut flat)?;
    Ok(SamplingReport {
        n: sampler.n,
        k: sampler.k,
        iters,
        grouped_ms,
        flat_ms,
        speedup: flat_ms / grouped_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sparse_dense: SparseDenseReport,
    pub sampling: Option<SamplingReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sparse_dense_bench() {
        let cfg = BenchConfig {
            dim: 2000,
            nnz_per_row: 5,
            batch: 50,
            out: 8,
            repeats: 2,
            sampler_iters: 0,
        };
        let r = bench_sparse_dense(&cfg, 1).unwrap();
        assert!(r.sparse_ms > 0.0 && r.dense_ms > 0.0);
        assert_eq!(r.dense_input_bytes, 2000 * 50 * 8);
        // the library test binary keeps the system allocator
        assert!(r.sparse_transient_bytes.is_none());
    }

    #[test]
    fn grouped_vs_flat_runs() {
        use crate::data::synth::{generate, SynthSpec};
        use crate::network::tests::tiny_cfg;
        let spec = SynthSpec {
            n_images: 12,
            n_impressions: 300,
            image_size: 8,
            patch_size: 2,
            dim: 128,
            ..SynthSpec::default()
        };
        let data = generate(&spec, 0).unwrap();
        let ds = Dataset::new(data.impressions.clone(), 128, &data.store()).unwrap();
        let net = NetConfig {
            basic_dim: 128,
            ..tiny_cfg()
        };
        let r = bench_grouped_vs_flat(&net, &ds, SamplerConfig { n: 2, k: 4, seed: 0 }, 3).unwrap();
        assert_eq!((r.n, r.k, r.iters), (2, 4, 3));
        assert!(r.grouped_ms > 0.0 && r.flat_ms > 0.0);
    }
}
