//! Command-line front end. Every command reads an optional TOML run config,
//! applies `--seed`, writes the resolved config into `--out`, and then its
//! artifacts next to it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_grouped_vs_flat, bench_sparse_dense, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::data::synth::{generate, load_patches, SynthSpec};
use crate::data::{load_impressions, Dataset, ImageStore};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::pipeline::{
    evaluate_checkpoints, run_pretrain, run_train, run_train_lr, toml_error, ModelChoice, RunConfig, SplitName, Splits,
};
use crate::saliency::{export_heatmap, SaliencyMap};
use crate::trainer::format_log;

#[derive(Debug, Parser)]
#[command(name = "deepctr", version, about = "Train and evaluate image-aware click models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed and every seed derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Deepctr,
    DnnBasic,
    Lr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Cold,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset.
    Generate {
        /// Generator settings (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrains the conv stack on image categories.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Trains a click model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "deepctr")]
        model: ModelArg,
        /// Pretrained conv checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Overrides the iteration budget.
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Scores one model, or the average of several, on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report of the reference model for relative metrics.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Writes gradient heatmaps for the listed images.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image-id", required = true)]
        image_ids: Vec<String>,
    },
    /// Times sparse against dense input layers and grouped against flat batches.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs one parsed command and returns a short human-readable summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(spec.as_deref(), &out, seed),
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Train {
            common,
            model,
            init,
            max_iters,
        } => cmd_train(&common, model, init.as_deref(), max_iters),
        Command::Eval {
            common,
            checkpoints,
            split,
            baseline,
        } => cmd_eval(&common, &checkpoints, split, baseline.as_deref()),
        Command::Saliency {
            common,
            checkpoint,
            image_ids,
        } => cmd_saliency(&common, &checkpoint, &image_ids),
        Command::Bench { common } => cmd_bench(&common),
    }
}

pub fn cmd_generate(spec_path: Option<&Path>, out: &Path, seed: u64) -> Result<String> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| match toml_error(&text, &e) {
                Error::Config(m) => Error::Config(format!("{}: {}", p.display(), m)),
                other => other,
            })?
        }
        None => SynthSpec::default(),
    };
    let data = generate(&spec, seed)?;
    data.write(out)?;
    write(
        &out.join("spec.resolved.toml"),
        toml::to_string(&spec).expect("spec serializes"),
    )?;
    Ok(format!(
        "wrote {} impressions over {} images to {}",
        data.impressions.len(),
        data.images.len(),
        out.display()
    ))
}

pub fn cmd_pretrain(common: &Common) -> Result<String> {
    let cfg = load_config(common)?;
    cfg.write_resolved(&common.out)?;
    let splits = Splits::load(&cfg)?;
    let (mut net, mut head, report) = run_pretrain(&cfg, &splits)?;
    let ck = Checkpoint::from_pretrain(&mut net, &mut head, cfg.pretrain.opt.max_iters)?;
    ck.save(&common.out.join("pretrain.ckpt"))?;
    let log: String = report.losses.iter().map(|(i, l)| format!("{}\t{}\n", i, l)).collect();
    write(&common.out.join("pretrain_log.tsv"), log)?;
    Ok(format!(
        "pretrained conv stack, train accuracy {:.4}",
        report.train_accuracy
    ))
}

pub fn cmd_train(common: &Common, model: ModelArg, init: Option<&Path>, max_iters: Option<u64>) -> Result<String> {
    let mut cfg = load_config(common)?;
    if let Some(m) = max_iters {
        cfg.optim.max_iters = m;
        cfg.lr.opt.max_iters = m;
    }
    let choice = match model {
        ModelArg::Deepctr => ModelChoice::Deepctr,
        ModelArg::DnnBasic => ModelChoice::DnnBasic,
        ModelArg::Lr => ModelChoice::Lr,
    };
    let cfg = cfg.for_model(choice);
    cfg.write_resolved(&common.out)?;
    let splits = Splits::load(&cfg)?;
    let out = &common.out;
    if choice == ModelChoice::Lr {
        let mut m = run_train_lr(&cfg, &splits)?;
        m.to_checkpoint(cfg.lr.opt.max_iters).save(&out.join("model.ckpt"))?;
        return Ok(format!(
            "trained logistic regression on {} impressions",
            splits.train.len()
        ));
    }
    let init = init.map(Checkpoint::load).transpose()?;
    let (_, report) = run_train(&cfg, &splits, init.as_ref())?;
    write(&out.join("train_log.tsv"), format_log(&report.log))?;
    report.last.save(&out.join("last.ckpt"))?;
    report
        .best
        .as_ref()
        .unwrap_or(&report.last)
        .save(&out.join("model.ckpt"))?;
    Ok(match report.log.last() {
        Some(r) => format!(
            "trained {} iterations; eval logloss {:.5}, AUC {:.5}",
            r.iter, r.eval_logloss, r.eval_auc
        ),
        None => "no iterations run; saved the initial model".to_string(),
    })
}

pub fn cmd_eval(common: &Common, checkpoints: &[PathBuf], split: SplitArg, baseline: Option<&Path>) -> Result<String> {
    let cfg = load_config(common)?;
    cfg.write_resolved(&common.out)?;
    let cks = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let base = baseline
        .map(|p| {
            fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))
                .and_then(|t| EvalReport::from_json(&t))
        })
        .transpose()?;
    let splits = Splits::load(&cfg)?;
    let which = match split {
        SplitArg::Train => SplitName::Train,
        SplitArg::Test => SplitName::Test,
        SplitArg::Cold => SplitName::Cold,
    };
    let report = evaluate_checkpoints(&cks, splits.get(which), base.as_ref())?;
    let json = report.to_json();
    write(&common.out.join("report.json"), format!("{}\n", json))?;
    Ok(json)
}

pub fn cmd_saliency(common: &Common, checkpoint: &Path, image_ids: &[String]) -> Result<String> {
    let cfg = load_config(common)?;
    cfg.write_resolved(&common.out)?;
    let mut net = Checkpoint::load(checkpoint)?.to_deepctr()?;
    let dir = &cfg.data.dir;
    let impressions = load_impressions(&dir.join("impressions.tsv"), cfg.net.basic_dim)?;
    let store = ImageStore::open(dir.join("images"));
    let patches_path = dir.join("patches.tsv");
    let patches = if patches_path.exists() {
        load_patches(&patches_path)?
    } else {
        Vec::new()
    };
    let heat_dir = common.out.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
    let mut lines = Vec::new();
    for id in image_ids {
        let imp = impressions
            .iter()
            .find(|i| &i.image_id == id)
            .ok_or_else(|| Error::invalid(format!("no impression shows image {}", id)))?;
        let image = store.get(id)?;
        let map = SaliencyMap::compute(&mut net, id, &image, &imp.features, cfg.net.basic_dim)?;
        export_heatmap(&map, &heat_dir.join(format!("{}.pgm", id)))?;
        let conc = patches
            .iter()
            .find(|p| &p.image_id == id)
            .map(|p| map.region_concentration(p.top, p.left, p.size, p.size))
            .transpose()?;
        lines.push(serde_json::json!({
            "image_id": id,
            "features": imp.features,
            "total": map.total(),
            "patch_concentration": conc,
        }));
    }
    let json = serde_json::to_string_pretty(&lines).expect("json");
    write(&common.out.join("saliency.json"), format!("{}\n", json))?;
    Ok(format!("wrote {} heatmaps to {}", image_ids.len(), heat_dir.display()))
}

pub fn cmd_bench(common: &Common) -> Result<String> {
    let cfg = load_config(common)?;
    cfg.write_resolved(&common.out)?;
    let sparse_dense = bench_sparse_dense(&cfg.bench, cfg.seed)?;
    let sampling = if cfg.bench.sampler_iters > 0 {
        let ds = bench_dataset(&cfg)?;
        Some(bench_grouped_vs_flat(
            &cfg.net,
            &ds,
            cfg.sampler,
            cfg.bench.sampler_iters,
        )?)
    } else {
        None
    };
    let report = BenchReport { sparse_dense, sampling };
    let json = serde_json::to_string_pretty(&report).expect("json");
    write(&common.out.join("bench.json"), format!("{}\n", json))?;
    Ok(json)
}

/// The configured dataset if present, else a small generated one.
fn bench_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.dir.join("impressions.tsv").exists() {
        return Ok(Splits::load(cfg)?.train);
    }
    let [_, h, _] = cfg.net.image_shape;
    let spec = SynthSpec {
        n_impressions: 6000,
        image_size: h,
        patch_size: (h / 4).max(1),
        dim: cfg.net.basic_dim,
        ..SynthSpec::default()
    };
    let data = generate(&spec, cfg.seed)?;
    Dataset::new(data.impressions.clone(), cfg.net.basic_dim, &data.store())
}
