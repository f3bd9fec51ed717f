//! Which pixels move the click score: trains a small click model, then writes
//! the gradient heatmap of one image and measures how much of it falls on the
//! planted patch.

use deepctr::data::synth::{generate, SynthSpec};
use deepctr::network::{ConvGroupSpec, ConvSpec};
use deepctr::pipeline::{run_train, RunConfig, Splits};
use deepctr::saliency::{export_heatmap, SaliencyMap};

fn main() -> deepctr::Result<()> {
    let spec = SynthSpec {
        n_images: 120,
        n_impressions: 12_000,
        image_size: 16,
        patch_size: 4,
        visual_weight: 2.5,
        ..SynthSpec::default()
    };
    let data = generate(&spec, 0)?;
    let mut cfg = RunConfig::default();
    cfg.net.image_shape = [3, 16, 16];
    cfg.net.conv = ConvSpec {
        first_kernel: 3,
        first_channels: 8,
        first_stride: 1,
        groups: vec![ConvGroupSpec {
            layers: 1,
            channels: 16,
            downsample: true,
        }],
    };
    cfg.net.embed_dim = 32;
    cfg.optim.conv_lr_scale = 1.0;
    cfg.optim.max_iters = 1500;
    cfg.optim.lr_drop_iters = vec![900, 1300];
    let splits = Splits::from_synth(&data, &cfg)?;
    let (mut net, _) = run_train(&cfg, &splits, None)?;

    let store = data.store();
    let out = std::env::temp_dir().join("deepctr-saliency");
    std::fs::create_dir_all(&out).map_err(|e| deepctr::Error::io(&out, e))?;
    let mut shares = Vec::new();
    for p in data.patches.iter().take(10) {
        let imp = data
            .impressions
            .iter()
            .find(|i| i.image_id == p.image_id)
            .expect("every image is shown");
        let map = SaliencyMap::compute(&mut net, &p.image_id, &store.get(&p.image_id)?, &imp.features, spec.dim)?;
        let c = map.region_concentration(p.top, p.left, p.size, p.size)?;
        export_heatmap(&map, &out.join(format!("{}.pgm", p.image_id)))?;
        println!("{}: patch holds {:.1}x its area share of saliency", p.image_id, c);
        shares.push(c);
    }
    println!(
        "mean concentration {:.2}; heatmaps in {}",
        shares.iter().sum::<f64>() / shares.len() as f64,
        out.display()
    );
    Ok(())
}
