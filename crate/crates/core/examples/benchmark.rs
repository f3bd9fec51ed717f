//! Times the sparse input layer against the dense one, and grouped batches
//! against flat batches. The counting allocator reports peak heap growth.

use deepctr::bench::{bench_grouped_vs_flat, bench_sparse_dense, CountingAlloc};
use deepctr::data::synth::{generate, SynthSpec};
use deepctr::data::Dataset;
use deepctr::network::NetConfig;
use deepctr::pipeline::BenchConfig;
use deepctr::sampler::SamplerConfig;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> deepctr::Result<()> {
    let r = bench_sparse_dense(&BenchConfig::default(), 0)?;
    println!(
        "dim {} nnz/row {} batch {} out {}: sparse {:.2} ms, dense {:.1} ms ({:.0}x)",
        r.dim, r.nnz_per_row, r.batch, r.out, r.sparse_ms, r.dense_ms, r.speedup
    );
    println!(
        "heap growth: sparse {:?} B, dense {:?} B plus a {} B dense input",
        r.sparse_transient_bytes, r.dense_transient_bytes, r.dense_input_bytes
    );

    let data = generate(
        &SynthSpec {
            n_images: 60,
            n_impressions: 3000,
            ..SynthSpec::default()
        },
        0,
    )?;
    let net = NetConfig::default();
    let ds = Dataset::new(data.impressions.clone(), net.basic_dim, &data.store())?;
    let s = bench_grouped_vs_flat(&net, &ds, SamplerConfig { n: 8, k: 16, seed: 0 }, 5)?;
    println!(
        "n={} k={}: grouped {:.1} ms, flat {:.1} ms per batch ({:.1}x)",
        s.n, s.k, s.grouped_ms, s.flat_ms, s.speedup
    );
    Ok(())
}
