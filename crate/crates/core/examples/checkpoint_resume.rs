//! Interrupts training, saves a checkpoint, restores it into a fresh trainer
//! and checks the result is bitwise the same as an uninterrupted run.

use deepctr::checkpoint::Checkpoint;
use deepctr::data::synth::{generate, SynthSpec};
use deepctr::data::Dataset;
use deepctr::network::{build_networks, ConvGroupSpec, ConvSpec, NetConfig};
use deepctr::sampler::{GroupedSampler, SamplerConfig};
use deepctr::trainer::{OptimConfig, Trainer};

fn main() -> deepctr::Result<()> {
    let spec = SynthSpec {
        n_images: 24,
        n_impressions: 1200,
        image_size: 8,
        patch_size: 2,
        dim: 128,
        ..SynthSpec::default()
    };
    let data = generate(&spec, 0)?;
    let ds = Dataset::new(data.impressions.clone(), spec.dim, &data.store())?;
    let cfg = NetConfig {
        image_shape: [3, 8, 8],
        conv: ConvSpec {
            first_kernel: 3,
            first_channels: 4,
            first_stride: 1,
            groups: vec![ConvGroupSpec {
                layers: 1,
                channels: 4,
                downsample: true,
            }],
        },
        basic_dim: spec.dim,
        embed_dim: 8,
        basic_hidden: 8,
        comb_hidden: vec![16, 8],
        ..NetConfig::default()
    };
    let sampler = SamplerConfig { n: 4, k: 4, seed: 5 };
    let opt = OptimConfig {
        base_lr: 0.05,
        lr_drop_iters: vec![30],
        max_iters: 40,
        eval_every: 10,
        ..OptimConfig::default()
    };

    let (mut straight, _) = build_networks(&cfg, 1)?;
    let mut t = Trainer::new(
        &mut straight,
        &ds,
        Some(&ds),
        GroupedSampler::new(&ds, sampler)?,
        opt.clone(),
    )?;
    t.run()?;
    let reference = t.finish().last.to_bytes();

    let (mut first, _) = build_networks(&cfg, 1)?;
    let mut t = Trainer::new(
        &mut first,
        &ds,
        Some(&ds),
        GroupedSampler::new(&ds, sampler)?,
        opt.clone(),
    )?;
    t.run_until(17)?;
    let path = std::env::temp_dir().join("deepctr-resume.ckpt");
    t.checkpoint().save(&path)?;
    println!("stopped at iteration {}, saved {}", t.iteration(), path.display());

    let ck = Checkpoint::load(&path)?;
    let mut second = ck.to_deepctr()?;
    let mut t = Trainer::new(&mut second, &ds, Some(&ds), GroupedSampler::new(&ds, sampler)?, opt)?;
    t.restore(&ck)?;
    t.run()?;
    let resumed = t.finish().last.to_bytes();
    println!("resumed run matches the uninterrupted one: {}", resumed == reference);
    Ok(())
}
