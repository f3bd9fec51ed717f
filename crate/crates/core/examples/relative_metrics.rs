//! AUC, logloss and the lift of one model over a baseline, plus averaging
//! several models' predictions.

use deepctr::metrics::{eval_auc, eval_logloss, relative_auc, relative_logloss, EvalReport};
use deepctr::pipeline::average_predictions;

fn main() -> deepctr::Result<()> {
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let base = [0.6, 0.4, 0.3, 0.5, 0.2, 0.7, 0.35, 0.45];
    let a = [0.8, 0.3, 0.55, 0.4, 0.1, 0.7, 0.6, 0.2];
    let b = [0.7, 0.2, 0.4, 0.5, 0.3, 0.9, 0.3, 0.25];

    println!(
        "baseline AUC {:.4} logloss {:.4}",
        eval_auc(&base, &labels)?,
        eval_logloss(&base, &labels)?
    );
    let baseline = EvalReport::compute(&base, &labels)?;
    for (name, p) in [("model a", a.to_vec()), ("model b", b.to_vec())] {
        let r = EvalReport::compute(&p, &labels)?.with_baseline(&baseline)?;
        println!("{}: {}", name, r.to_json());
    }
    let ens = average_predictions(&[a.to_vec(), b.to_vec()])?;
    println!(
        "ensemble: {}",
        EvalReport::compute(&ens, &labels)?.with_baseline(&baseline)?.to_json()
    );

    // a lift of 5% over a baseline at AUC 0.7 needs AUC 0.71
    println!("relative AUC of 0.71 over 0.70: {:.2}%", relative_auc(0.71, 0.70)?);
    println!(
        "relative logloss of 0.45 over 0.50: {:.2}%",
        relative_logloss(0.45, 0.50)?
    );
    Ok(())
}
