//! Declarative runs: one TOML file names the dataset, the model and every
//! optimizer setting, and the functions here turn it into trained models,
//! predictions and reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::synth::{load_categories, SynthData};
use crate::data::{load_impressions, split_dataset, Dataset, ImageStore, Impression};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network::{build_networks, pooled_features, DeepCtrNet, ImageTowerKind, NetConfig, PretrainHead};
use crate::sampler::SamplerConfig;
use crate::trainer::{
    pretrain, train_deepctr, train_lr_baseline, LrConfig, LrModel, OptimConfig, PretrainConfig, PretrainReport,
    TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `impressions.tsv`, `images/` and optionally `patches.tsv`.
    pub dir: PathBuf,
    /// Share of the warm impressions held out for evaluation.
    pub test_fraction: f64,
    /// Share of images whose impressions are all held out.
    pub cold_image_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            test_fraction: 0.1,
            cold_image_fraction: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub dim: usize,
    pub nnz_per_row: usize,
    pub batch: usize,
    pub out: usize,
    pub repeats: usize,
    /// Iterations timed for the grouped-vs-flat comparison; 0 skips it.
    pub sampler_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 100_000,
            nnz_per_row: 20,
            batch: 1000,
            out: 128,
            repeats: 3,
            sampler_iters: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub pretrain: PretrainConfig,
    pub lr: LrConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            net: NetConfig::default(),
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            pretrain: PretrainConfig::default(),
            lr: LrConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config in which every key is optional. Missing keys take the
    /// value of [`RunConfig::default`] at the same path, so a partial
    /// `[pretrain.opt]` keeps the pretraining defaults rather than the
    /// training ones.
    pub fn from_toml(text: &str) -> Result<Self> {
        // strict pass first, for unknown keys and type errors with line numbers
        toml::from_str::<RunConfig>(text).map_err(|e| toml_error(text, &e))?;
        let user: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("config serializes");
        overlay(&mut merged, user);
        let c = RunConfig::deserialize(merged).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.sampler.validate()?;
        self.optim.validate()?;
        self.pretrain.opt.validate()?;
        self.lr.opt.validate()?;
        for (name, f) in [
            ("test_fraction", self.data.test_fraction),
            ("cold_image_fraction", self.data.cold_image_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("data.{} {} not in [0, 1)", name, f)));
            }
        }
        Ok(())
    }

    /// Sets the run seed and derives every component seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sampler.seed = seed;
        self.pretrain.seed = seed;
        self.lr.seed = seed;
        self
    }

    /// The same run with a model variant's network settings.
    pub fn for_model(&self, model: ModelChoice) -> Self {
        let mut c = self.clone();
        if model == ModelChoice::DnnBasic {
            c.net.image_tower = ImageTowerKind::None;
        }
        c
    }

    /// Writes the fully resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// One-line description of a TOML error: `line N: message`.
pub fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().replace('\n', " ");
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            Error::Config(format!("line {}: {}", line, msg))
        }
        None => Error::Config(msg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// Image tower plus basic features.
    Deepctr,
    /// Basic features through the same fusion layers, no image tower.
    DnnBasic,
    /// Logistic regression on basic features.
    Lr,
}

/// Train, warm test and cold test sets plus the image categories.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub cold: Dataset,
    /// Category of each training image (group order), when known.
    pub train_categories: Option<Vec<usize>>,
}

impl Splits {
    pub fn build(
        impressions: &[Impression],
        store: &ImageStore,
        categories: Option<&[(String, usize)]>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let dim = cfg.net.basic_dim;
        let s = split_dataset(
            impressions,
            cfg.data.test_fraction,
            cfg.data.cold_image_fraction,
            cfg.data.split_seed,
        )?;
        let train = Dataset::new(s.train, dim, store)?;
        let test = Dataset::new(s.test, dim, store)?;
        let cold = Dataset::new(s.cold, dim, store)?;
        let train_categories = categories
            .map(|cats| {
                let map: std::collections::HashMap<&str, usize> =
                    cats.iter().map(|(id, c)| (id.as_str(), *c)).collect();
                train
                    .groups
                    .image_ids
                    .iter()
                    .map(|id| {
                        map.get(id.as_str())
                            .copied()
                            .ok_or_else(|| Error::invalid(format!("no category for image {}", id)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Ok(Splits {
            train,
            test,
            cold,
            train_categories,
        })
    }

    /// Reads the dataset directory named by the config.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = &cfg.data.dir;
        let impressions = load_impressions(&dir.join("impressions.tsv"), cfg.net.basic_dim)?;
        let mut store = ImageStore::open(dir.join("images"));
        store.preload(impressions.iter().map(|i| i.image_id.as_str()))?;
        let patches = dir.join("patches.tsv");
        let cats = if patches.exists() {
            Some(load_categories(&patches)?)
        } else {
            None
        };
        Splits::build(&impressions, &store, cats.as_deref(), cfg)
    }

    /// Splits a generated dataset held in memory.
    pub fn from_synth(data: &SynthData, cfg: &RunConfig) -> Result<Self> {
        Splits::build(&data.impressions, &data.store(), Some(&data.categories()), cfg)
    }

    pub fn get(&self, which: SplitName) -> &Dataset {
        match which {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
            SplitName::Cold => &self.cold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
    Cold,
}

/// Builds the click model and head for a run and pretrains the conv stack on
/// the training images' categories.
pub fn run_pretrain(cfg: &RunConfig, splits: &Splits) -> Result<(DeepCtrNet, PretrainHead, PretrainReport)> {
    let labels = splits
        .train_categories
        .as_ref()
        .ok_or_else(|| Error::invalid("pretraining needs image categories (patches.tsv)"))?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.image_tower = ImageTowerKind::Conv;
    let (mut net, mut head) = build_networks(&net_cfg, cfg.seed)?;
    let report = pretrain(&mut net, &mut head, &splits.train.images, labels, &cfg.pretrain)?;
    Ok((net, head, report))
}

/// Trains the click model (or the basic-only variant) from fresh weights,
/// optionally starting the conv stack from a pretraining checkpoint.
/// Evaluation during training uses the warm test split.
pub fn run_train(cfg: &RunConfig, splits: &Splits, init: Option<&Checkpoint>) -> Result<(DeepCtrNet, TrainReport)> {
    let (mut net, _) = build_networks(&cfg.net, cfg.seed)?;
    if let (Some(c), Some(_)) = (init, net.convnet()) {
        c.load_pretrained(&mut net, None)?;
    }
    let eval = (!splits.test.is_empty()).then_some(&splits.test);
    let report = train_deepctr(&mut net, &splits.train, eval, cfg.sampler, &cfg.optim)?;
    Ok((net, report))
}

pub fn run_train_lr(cfg: &RunConfig, splits: &Splits) -> Result<LrModel> {
    train_lr_baseline(&splits.train.features, &splits.train.labels, &cfg.lr)
}

/// Replaces every image of `ds` by its pooled conv features, for a model
/// whose conv stack is frozen.
pub fn with_frozen_features(ds: &Dataset, net: &mut DeepCtrNet) -> Result<Dataset> {
    let conv = net
        .convnet_mut()
        .ok_or_else(|| Error::invalid("frozen features need a conv stack"))?;
    let mut out = ds.clone();
    out.images = pooled_features(conv, &ds.images)?;
    Ok(out)
}

/// Click probabilities of a saved model on every row of `ds`.
pub fn predict_checkpoint(c: &Checkpoint, ds: &Dataset) -> Result<Vec<f64>> {
    match c.kind {
        ModelKind::DeepCtr => {
            let mut net = c.to_deepctr()?;
            let rows: Vec<usize> = (0..ds.len()).collect();
            net.predict(ds, &rows)
        }
        ModelKind::Lr => LrModel::from_checkpoint(c)?.predict(&ds.features),
        ModelKind::Pretrain => Err(Error::invalid("a pretraining checkpoint does not predict clicks")),
    }
}

/// Mean of several models' probabilities, row by row.
pub fn average_predictions(preds: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid("no predictions to average"))?;
    if preds.iter().any(|p| p.len() != first.len()) {
        return Err(Error::shape("prediction vectors differ in length"));
    }
    let inv = 1.0 / preds.len() as f64;
    Ok((0..first.len())
        .map(|i| preds.iter().map(|p| p[i]).sum::<f64>() * inv)
        .collect())
}

/// Report of one model or an ensemble, against an optional baseline report.
pub fn evaluate_checkpoints(cks: &[Checkpoint], ds: &Dataset, baseline: Option<&EvalReport>) -> Result<EvalReport> {
    let preds = cks
        .iter()
        .map(|c| predict_checkpoint(c, ds))
        .collect::<Result<Vec<_>>>()?;
    let r = EvalReport::compute(&average_predictions(&preds)?, &ds.labels)?;
    match baseline {
        Some(b) => r.with_baseline(b),
        None => Ok(r),
    }
}
