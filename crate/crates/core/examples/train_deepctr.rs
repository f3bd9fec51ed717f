//! Trains the image-aware click model and the basic-only network on the same
//! data and compares them on warm and cold test images.

use deepctr::data::synth::{generate, SynthSpec};
use deepctr::network::{ConvGroupSpec, ConvSpec};
use deepctr::pipeline::{evaluate_checkpoints, run_train, ModelChoice, RunConfig, Splits};

fn main() -> deepctr::Result<()> {
    let spec = SynthSpec {
        n_images: 120,
        n_impressions: 12_000,
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
    cfg.net.embed_dim = 32;
    cfg.optim.conv_lr_scale = 1.0;
    cfg.optim.max_iters = 1500;
    cfg.optim.lr_drop_iters = vec![900, 1300];
    cfg.optim.eval_every = 300;
    let splits = Splits::from_synth(&data, &cfg)?;

    for model in [ModelChoice::DnnBasic, ModelChoice::Deepctr] {
        let (_, report) = run_train(&cfg.for_model(model), &splits, None)?;
        for r in &report.log {
            println!("{:?} {}", model, r.to_line());
        }
        let best = report.best.unwrap_or(report.last);
        let warm = evaluate_checkpoints(std::slice::from_ref(&best), &splits.test, None)?;
        let cold = evaluate_checkpoints(std::slice::from_ref(&best), &splits.cold, None)?;
        println!("{:?}: warm AUC {:.4}, cold AUC {:.4}\n", model, warm.auc, cold.auc);
    }
    Ok(())
}
