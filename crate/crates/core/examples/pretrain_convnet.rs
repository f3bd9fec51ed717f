//! Pretrains the conv stack to classify image categories, then saves it for
//! click-model training.

use deepctr::checkpoint::Checkpoint;
use deepctr::data::synth::{generate, SynthSpec};
use deepctr::network::{ConvGroupSpec, ConvSpec};
use deepctr::pipeline::{run_pretrain, RunConfig, Splits};

fn main() -> deepctr::Result<()> {
    let spec = SynthSpec {
        n_images: 80,
        n_impressions: 4000,
        image_size: 16,
        patch_size: 4,
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
    cfg.net.pretrain_hidden = vec![32];
    cfg.pretrain.crop = Some(14);
    cfg.pretrain.opt.max_iters = 300;
    cfg.pretrain.opt.lr_drop_iters = vec![240];
    cfg.pretrain.opt.eval_every = 50;

    let splits = Splits::from_synth(&data, &cfg)?;
    let (mut net, mut head, report) = run_pretrain(&cfg, &splits)?;
    for (iter, loss) in &report.losses {
        println!("iter {:4}  loss {:.4}", iter, loss);
    }
    println!("train accuracy {:.3}", report.train_accuracy);

    let ck = Checkpoint::from_pretrain(&mut net, &mut head, cfg.pretrain.opt.max_iters)?;
    let path = std::env::temp_dir().join("deepctr-pretrain.ckpt");
    ck.save(&path)?;
    println!("saved {} tensors to {}", ck.tensors.len(), path.display());
    Ok(())
}
