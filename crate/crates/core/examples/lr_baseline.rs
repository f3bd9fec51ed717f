//! Logistic regression on the basic features, the reference model for the
//! relative metrics.

use deepctr::data::synth::{generate, SynthSpec};
use deepctr::metrics::EvalReport;
use deepctr::pipeline::{run_train_lr, RunConfig, Splits};

fn main() -> deepctr::Result<()> {
    let data = generate(
        &SynthSpec {
            n_images: 100,
            n_impressions: 10_000,
            ..SynthSpec::default()
        },
        0,
    )?;
    let cfg = RunConfig::default();
    let splits = Splits::from_synth(&data, &cfg)?;
    let mut lr = run_train_lr(&cfg, &splits)?;
    let report = EvalReport::compute(&lr.predict(&splits.test.features)?, &splits.test.labels)?;
    println!("test logloss {:.4}  AUC {:.4}", report.logloss, report.auc);

    let mut top: Vec<(usize, f64)> = lr.weights().iter().copied().enumerate().collect();
    top.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    println!("bias {:.3}; largest weights:", lr.bias());
    for (j, w) in top.iter().take(5) {
        println!("  feature {:5} {:+.3}", j, w);
    }
    let ck = lr.to_checkpoint(cfg.lr.opt.max_iters);
    println!("checkpoint holds {} tensors", ck.tensors.len());
    Ok(())
}
