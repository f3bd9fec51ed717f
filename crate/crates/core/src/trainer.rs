//! SGD with momentum, the step schedule, the click-model training loop,
//! conv pretraining and the logistic-regression baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::{mirror_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network::{
    forward_backward, pretrain_forward_backward, DeepCtrNet, ParamGroup, PretrainHead, PretrainNet, Slot,
};
use crate::nn::{sigmoid, sigmoid_logloss, LayerParams, Mode};
use crate::sampler::{run_prefetched, BatchSource, GradMode, GroupedSampler, SamplerConfig};
use crate::sparse::{sparse_fc_backward, sparse_fc_forward, SparseBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Multiplier on the learning rate of conv-stack parameters.
    pub conv_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_iters: Vec<u64>,
    pub lr_drop_factor: f64,
    pub max_iters: u64,
    /// Evaluate (and log) every this many iterations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub grad_mode: GradMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.1,
            conv_lr_scale: 0.01,
            momentum: 0.9,
            weight_decay: 5e-5,
            lr_drop_iters: vec![3000, 5000, 7000],
            lr_drop_factor: 10.0,
            max_iters: 8000,
            eval_every: 500,
            grad_mode: GradMode::Paper,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.conv_lr_scale >= 0.0 && self.conv_lr_scale.is_finite()) {
            return bad(format!(
                "conv_lr_scale must be non-negative, got {}",
                self.conv_lr_scale
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!(
                "lr_drop_factor must be at least 1, got {}",
                self.lr_drop_factor
            ));
        }
        if self.lr_drop_iters.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_iters must be strictly increasing: {:?}",
                self.lr_drop_iters
            ));
        }
        if self.lr_drop_iters.first() == Some(&0) {
            return bad("lr_drop_iters must be positive".into());
        }
        Ok(())
    }
}

/// `base_lr / factor^(drops at or before iter)`.
pub fn lr_at(cfg: &OptimConfig, iter: u64) -> f64 {
    let drops = cfg.lr_drop_iters.iter().filter(|&&d| d <= iter).count();
    cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// Anything whose parameters an optimizer can walk.
pub trait Trainable {
    fn visit_slots(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>));
}

impl Trainable for DeepCtrNet {
    fn visit_slots(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        self.visit(f)
    }
}

impl Trainable for PretrainNet<'_> {
    fn visit_slots(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        self.visit(f)
    }
}

/// One momentum step over every parameter:
/// `buf = m*buf + grad + decay*param; param -= lr*buf`, with conv parameters
/// at `lr * conv_lr_scale`. Decay applies only to parameters flagged for it.
/// Gradients are zeroed afterwards.
pub fn sgd_step<M: Trainable + ?Sized>(model: &mut M, cfg: &OptimConfig, lr: f64) -> Result<()> {
    let mut bad = None;
    model.visit_slots(&mut |name, group, slot| {
        let Slot::Param(p) = slot else { return };
        let rate = match group {
            ParamGroup::Conv => lr * cfg.conv_lr_scale,
            ParamGroup::Dense => lr,
        };
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let mut finite = true;
        for ((v, g), b) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(p.momentum.data_mut())
        {
            *b = cfg.momentum * *b + g + decay * *v;
            *v -= rate * *b;
            finite &= v.is_finite();
        }
        p.zero_grad();
        if !finite && bad.is_none() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFinite(format!("parameter {} after update", name))),
        None => Ok(()),
    }
}

/// Logloss and AUC of the model over every row of `ds`.
pub fn evaluate(net: &mut DeepCtrNet, ds: &Dataset) -> Result<EvalReport> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let probs = net.predict(ds, &rows)?;
    EvalReport::compute(&probs, &ds.labels)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    /// Mean training objective since the previous record.
    pub train_loss: f64,
    pub eval_logloss: f64,
    pub eval_auc: f64,
}

impl LogRecord {
    /// Tab-separated `iter lr train_loss eval_logloss eval_auc`.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.iter, self.lr, self.train_loss, self.eval_logloss, self.eval_auc
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("log line has {} fields: {:?}", f.len(), line)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number {:?} in log line", s)))
        };
        Ok(LogRecord {
            iter: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad iteration {:?}", f[0])))?,
            lr: num(f[1])?,
            train_loss: num(f[2])?,
            eval_logloss: num(f[3])?,
            eval_auc: num(f[4])?,
        })
    }
}

pub fn format_log(records: &[LogRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Snapshot with the lowest eval logloss, if an eval set was given.
    pub best: Option<Checkpoint>,
    /// State after the final iteration, resumable.
    pub last: Checkpoint,
}

/// Everything the step loop touches except the batch source, so the source
/// can be lent to the prefetch thread.
struct Loop<'a> {
    net: &'a mut DeepCtrNet,
    eval: Option<&'a Dataset>,
    opt: OptimConfig,
    iteration: u64,
    log: Vec<LogRecord>,
    loss_sum: f64,
    loss_count: u64,
    best: Option<(f64, Checkpoint)>,
    last_good: Checkpoint,
}

impl Loop<'_> {
    fn snapshot(&mut self, sampler: &ChaCha8Rng) -> Checkpoint {
        let mut c = Checkpoint::from_deepctr(self.net, self.iteration);
        c.set_rng("sampler", sampler);
        c.set_scalar("loss_sum", self.loss_sum);
        c.set_scalar("loss_count", self.loss_count as f64);
        if let Some((ll, _)) = &self.best {
            c.set_scalar("best_eval_logloss", *ll);
        }
        c
    }

    fn diverged(&self, loss: f64) -> Error {
        Error::Diverged {
            iteration: self.iteration,
            loss,
            last_good: Box::new(self.last_good.clone()),
        }
    }

    fn step(&mut self, batch: crate::sampler::GroupedBatch) -> Result<()> {
        let lr = lr_at(&self.opt, self.iteration);
        let loss = match forward_backward(self.net, &batch, self.opt.weight_decay / 2.0, self.opt.grad_mode) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(self.diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if let Err(Error::NonFinite(_)) = sgd_step(self.net, &self.opt, lr) {
            return Err(self.diverged(loss));
        }
        self.iteration += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        let every = self.opt.eval_every;
        if (every > 0 && self.iteration % every == 0) || self.iteration == self.opt.max_iters {
            self.checkpoint_eval(lr, &batch.rng_after)?;
        }
        Ok(())
    }

    fn checkpoint_eval(&mut self, lr: f64, sampler: &ChaCha8Rng) -> Result<()> {
        let train_loss = self.loss_sum / self.loss_count.max(1) as f64;
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let (eval_logloss, eval_auc) = match self.eval {
            Some(ds) => {
                let r = evaluate(self.net, ds)?;
                (r.logloss, r.auc)
            }
            None => (f64::NAN, f64::NAN),
        };
        self.log.push(LogRecord {
            iter: self.iteration,
            lr,
            train_loss,
            eval_logloss,
            eval_auc,
        });
        let snap = self.snapshot(sampler);
        if self.eval.is_some() && self.best.as_ref().is_none_or(|(b, _)| eval_logloss < *b) {
            self.best = Some((eval_logloss, snap.clone()));
        }
        self.last_good = snap;
        Ok(())
    }
}

/// The training loop: draw a batch, forward/backward, momentum step, and
/// every `eval_every` iterations evaluate, log and snapshot. Batches are
/// prefetched on a second thread. The state after any iteration can be
/// captured with [`Trainer::checkpoint`] and continued with
/// [`Trainer::restore`].
pub struct Trainer<'a, S: BatchSource + Send> {
    source: S,
    train: &'a Dataset,
    core: Loop<'a>,
}

impl<'a, S: BatchSource + Send> Trainer<'a, S> {
    pub fn new(
        net: &'a mut DeepCtrNet,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        source: S,
        opt: OptimConfig,
    ) -> Result<Self> {
        opt.validate()?;
        let mut core = Loop {
            net,
            eval,
            opt,
            iteration: 0,
            log: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            best: None,
            last_good: Checkpoint::new(ModelKind::DeepCtr, String::new(), 0),
        };
        core.last_good = core.snapshot(source.rng());
        Ok(Trainer { source, train, core })
    }

    pub fn iteration(&self) -> u64 {
        self.core.iteration
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.core.log
    }

    /// Trains until `stop` iterations (capped at `max_iters`) have been done.
    pub fn run_until(&mut self, stop: u64) -> Result<()> {
        let stop = stop.min(self.core.opt.max_iters);
        if stop <= self.core.iteration {
            return Ok(());
        }
        let core = &mut self.core;
        run_prefetched(&mut self.source, self.train, stop - core.iteration, |b| core.step(b))
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.core.opt.max_iters)
    }

    /// Resumable snapshot of the model, sampler position and loop counters.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let rng = self.source.rng().clone();
        self.core.snapshot(&rng)
    }

    /// Continues from a snapshot taken by [`Trainer::checkpoint`]. The
    /// network must already hold the snapshot's parameters.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let rng = c
            .rng("sampler")
            .ok_or_else(|| Error::Format("checkpoint has no sampler stream".into()))?;
        self.source.set_rng(rng);
        self.core.iteration = c.iteration;
        self.core.loss_sum = c.scalar("loss_sum").unwrap_or(0.0);
        self.core.loss_count = c.scalar("loss_count").unwrap_or(0.0) as u64;
        self.core.best = c.scalar("best_eval_logloss").map(|ll| (ll, c.clone()));
        self.core.last_good = c.clone();
        Ok(())
    }

    pub fn finish(mut self) -> TrainReport {
        let last = self.checkpoint();
        TrainReport {
            log: self.core.log,
            best: self.core.best.map(|(_, c)| c),
            last,
        }
    }
}

/// Trains a click model with the grouped sampler for `opt.max_iters` iterations.
pub fn train_deepctr(
    net: &mut DeepCtrNet,
    train: &Dataset,
    eval: Option<&Dataset>,
    sampler: SamplerConfig,
    opt: &OptimConfig,
) -> Result<TrainReport> {
    let source = GroupedSampler::new(train, sampler)?;
    let mut t = Trainer::new(net, train, eval, source, opt.clone())?;
    t.run()?;
    Ok(t.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub opt: OptimConfig,
    pub batch_size: usize,
    /// Side of the random square crop; `None` trains on full images.
    pub crop: Option<usize>,
    /// Flip each training image left-right with probability 1/2.
    pub mirror: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            opt: OptimConfig {
                base_lr: 0.01,
                conv_lr_scale: 1.0,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_drop_iters: vec![1500],
                lr_drop_factor: 10.0,
                max_iters: 2000,
                eval_every: 200,
                grad_mode: GradMode::Paper,
            },
            batch_size: 32,
            crop: Some(28),
            mirror: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// `(iteration, mean loss since the previous entry)`.
    pub losses: Vec<(u64, f64)>,
    /// Accuracy on the (center-cropped) training images after the last step.
    pub train_accuracy: f64,
}

/// `[c x size x size]` window of a `[c x h x w]` image.
pub fn crop_image(t: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("crop expects [c,h,w], got {:?}", s))),
    };
    if top + size > h || left + size > w {
        return Err(Error::shape(format!(
            "{0}x{0} crop at ({1},{2}) outside {3}x{4}",
            size, top, left, h, w
        )));
    }
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let y = (i / size) % size + top;
        let x = i % size + left;
        t.data()[(ch * h + y) * w + x]
    }))
}

fn center_crop(t: &Tensor, size: Option<usize>) -> Result<Tensor> {
    match size {
        None => Ok(t.clone()),
        Some(s) => {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            crop_image(t, (h.saturating_sub(s)) / 2, (w.saturating_sub(s)) / 2, s)
        }
    }
}

/// Category classification of `images`, updating the shared conv stack in
/// place. Batches cycle through per-epoch permutations; each image gets a
/// random crop and mirror when enabled.
pub fn pretrain_convnet(
    pnet: &mut PretrainNet<'_>,
    images: &[Tensor],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.opt.validate()?;
    if images.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two categories"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretraining batch size must be at least 2".into()));
    }
    if let (Some(c), Some(first)) = (cfg.crop, images.first()) {
        if first.ndim() != 3 || c == 0 || c > first.shape()[1] || c > first.shape()[2] {
            return Err(Error::Config(format!(
                "crop {} does not fit images {:?}",
                c,
                first.shape()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut losses = Vec::new();
    let (mut sum, mut count) = (0.0, 0u64);
    for iter in 0..cfg.opt.max_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut batch_labels = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if pos == order.len() {
                order = (0..images.len()).collect();
                order.shuffle(&mut rng);
                pos = 0;
            }
            let i = order[pos];
            pos += 1;
            let mut x = match cfg.crop {
                Some(s) => {
                    let (h, w) = (images[i].shape()[1], images[i].shape()[2]);
                    let top = rng.random_range(0..=h - s);
                    let left = rng.random_range(0..=w - s);
                    crop_image(&images[i], top, left, s)?
                }
                None => images[i].clone(),
            };
            if cfg.mirror && rng.random::<bool>() {
                x = mirror_horizontal(&x);
            }
            batch.push(x);
            batch_labels.push(labels[i]);
        }
        let refs: Vec<&Tensor> = batch.iter().collect();
        let loss = pretrain_forward_backward(pnet, &Tensor::stack(&refs)?, &batch_labels)?;
        sgd_step(pnet, &cfg.opt, lr_at(&cfg.opt, iter))?;
        sum += loss;
        count += 1;
        let done = iter + 1;
        if (cfg.opt.eval_every > 0 && done % cfg.opt.eval_every == 0) || done == cfg.opt.max_iters {
            losses.push((done, sum / count as f64));
            sum = 0.0;
            count = 0;
        }
    }
    let train_accuracy = pretrain_accuracy(pnet, images, labels, cfg.crop)?;
    Ok(PretrainReport { losses, train_accuracy })
}

/// Fraction of images whose arg-max class (eval mode, center crop) is right.
pub fn pretrain_accuracy(
    pnet: &mut PretrainNet<'_>,
    images: &[Tensor],
    labels: &[usize],
    crop: Option<usize>,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("accuracy over no images"));
    }
    let mut correct = 0;
    for (part, lab) in images.chunks(64).zip(labels.chunks(64)) {
        let crops = part.iter().map(|t| center_crop(t, crop)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = crops.iter().collect();
        let logits = pnet.forward(&Tensor::stack(&refs)?, Mode::Eval)?;
        for (r, &l) in lab.iter().enumerate() {
            let row = logits.row(r);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("at least one class");
            correct += usize::from(arg == l);
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Pretrains the conv stack of `net` through `head`.
pub fn pretrain(
    net: &mut DeepCtrNet,
    head: &mut PretrainHead,
    images: &[Tensor],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let mut p = net.pretrain_net(head)?;
    pretrain_convnet(&mut p, images, labels, cfg)
}

/// Logistic regression on the sparse basic features.
#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    pub params: LayerParams,
}

impl Trainable for LrModel {
    fn visit_slots(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        f("lr.w", ParamGroup::Dense, Slot::Param(&mut self.params.weights));
        f("lr.b", ParamGroup::Dense, Slot::Param(&mut self.params.bias));
    }
}

impl LrModel {
    /// Zero-initialised model over `dim` features.
    pub fn new(dim: usize) -> Self {
        LrModel {
            params: LayerParams::zeros(&[dim, 1], 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.weights.value.shape()[0]
    }

    pub fn weights(&self) -> &[f64] {
        self.params.weights.value.data()
    }

    pub fn bias(&self) -> f64 {
        self.params.bias.value.data()[0]
    }

    pub fn predict_logits(&self, features: &SparseBatch) -> Result<Vec<f64>> {
        Ok(sparse_fc_forward(features, &self.params)?.into_data())
    }

    pub fn predict(&self, features: &SparseBatch) -> Result<Vec<f64>> {
        Ok(self.predict_logits(features)?.into_iter().map(sigmoid).collect())
    }

    pub fn to_checkpoint(&mut self, iteration: u64) -> Checkpoint {
        let config = serde_json::json!({ "dim": self.dim() }).to_string();
        let mut c = Checkpoint::new(ModelKind::Lr, config, iteration);
        c.capture(|f| self.visit_slots(f));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != ModelKind::Lr {
            return Err(Error::Format(format!(
                "expected a regression model, found {:?}",
                c.kind
            )));
        }
        let dim = c
            .tensor("lr.w")
            .ok_or_else(|| Error::Format("missing tensor lr.w".into()))?
            .shape()[0];
        let mut m = LrModel::new(dim);
        c.apply(|_| true, |f| m.visit_slots(f))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub opt: OptimConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            opt: OptimConfig {
                base_lr: 0.1,
                conv_lr_scale: 1.0,
                momentum: 0.9,
                weight_decay: 1e-6,
                lr_drop_iters: vec![3000],
                lr_drop_factor: 10.0,
                max_iters: 4000,
                eval_every: 0,
                grad_mode: GradMode::Paper,
            },
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Mini-batch SGD on the logloss through the sparse FC path with one output.
pub fn train_lr_baseline(features: &SparseBatch, labels: &[f64], cfg: &LrConfig) -> Result<LrModel> {
    cfg.opt.validate()?;
    let n = features.num_rows();
    if n == 0 || labels.len() != n {
        return Err(Error::shape(format!("{} feature rows vs {} labels", n, labels.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = LrModel::new(features.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let lambda = cfg.opt.weight_decay / 2.0;
    for iter in 0..cfg.opt.max_iters {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        while rows.len() < cfg.batch_size.min(n) {
            if pos == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                pos = 0;
            }
            rows.push(order[pos]);
            pos += 1;
        }
        let x = features.gather_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&r| labels[r]).collect();
        let z = sparse_fc_forward(&x, &model.params)?;
        let sq = model.params.weights.value.sq_norm();
        let (loss, dz) = sigmoid_logloss(&z, &y, sq, lambda)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("regression loss at iteration {}", iter)));
        }
        model.params.zero_grad();
        sparse_fc_backward(&x, &mut model.params, &dz)?;
        sgd_step(&mut model, &cfg.opt, lr_at(&cfg.opt, iter))?;
    }
    Ok(model)
}
