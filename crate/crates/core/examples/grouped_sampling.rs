//! Image-grouped batches: images are drawn in proportion to their impression
//! counts, then `k` impressions per image.

use deepctr::data::synth::{generate, SynthSpec};
use deepctr::data::Dataset;
use deepctr::sampler::{compute_sample_probs, BatchSource, GroupedSampler, SamplerConfig};

fn main() -> deepctr::Result<()> {
    let spec = SynthSpec {
        n_images: 20,
        n_impressions: 3000,
        image_size: 16,
        patch_size: 4,
        ..SynthSpec::default()
    };
    let data = generate(&spec, 3)?;
    let ds = Dataset::new(data.impressions.clone(), spec.dim, &data.store())?;
    let probs = compute_sample_probs(&ds.groups)?;

    let mut sampler = GroupedSampler::new(&ds, SamplerConfig { n: 1, k: 4, seed: 0 })?;
    let draws = 20_000;
    let mut hits = vec![0usize; probs.len()];
    for _ in 0..draws {
        hits[sampler.next_batch(&ds)?.groups[0]] += 1;
    }
    println!("image       count   p(u)    observed");
    for (g, id) in ds.groups.image_ids.iter().enumerate().take(8) {
        println!(
            "{:10} {:6} {:7.4} {:9.4}",
            id,
            ds.groups.rows[g].len(),
            probs[g],
            hits[g] as f64 / draws as f64
        );
    }

    let mut sampler = GroupedSampler::new(&ds, SamplerConfig { n: 3, k: 4, seed: 1 })?;
    let b = sampler.next_batch(&ds)?;
    println!(
        "\none batch: images {:?}, image tensor {:?}, {} feature rows",
        b.groups,
        b.images.shape(),
        b.num_rows()
    );
    Ok(())
}
