//! The click model: an image tower and a sparse basic-feature layer whose
//! outputs are concatenated and fused by fully connected layers into one logit.
//!
//! A grouped batch runs the image tower once per distinct image, replicates
//! each image feature `k` times to line up with its impressions, and on the
//! way back folds the `k` copy gradients into one per image.

mod config;
mod convnet;
mod mlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConvGroupSpec, ConvSpec, ImageTowerKind, NetConfig};
pub use convnet::{global_avg_pool, global_avg_pool_backward, ConvLayer, Convnet};
pub use mlp::{Combnet, Mlp};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    dense_fc_backward, dense_fc_forward, relu, relu_backward, sigmoid, sigmoid_logloss, softmax_cross_entropy,
    LayerParams, Mode, Param,
};
use crate::sampler::{reduce_copy_gradients, replicate_image_features, GradMode, GroupedBatch};
use crate::sparse::{sparse_fc_backward, sparse_fc_forward, SparseBatch};
use crate::tensor::{concat_cols, split_cols, Tensor};

/// Learning-rate group of a parameter: the pretrained conv stack may train
/// at a reduced rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Dense,
}

/// A named slot reached by a parameter visitor.
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor),
}

/// Rows of pooled features fed to the embedding per chunk when scoring.
const EVAL_IMAGE_CHUNK: usize = 32;
const EVAL_ROW_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTower {
    /// Absent when the tower consumes precomputed pooled features.
    pub convnet: Option<Convnet>,
    pub embed: LayerParams,
    trace: Option<(Tensor, Tensor)>,
}

impl ImageTower {
    /// `[n x embed_dim]` image features.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let pooled = match &mut self.convnet {
            Some(c) => c.forward(images, mode)?,
            None => {
                images.dims2()?;
                images.clone()
            }
        };
        let pre = dense_fc_forward(&pooled, &self.embed)?;
        let out = relu(&pre);
        self.trace = Some((pooled, pre));
        Ok(out)
    }

    /// Returns the image gradient when the tower starts from pixels.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Option<Tensor>> {
        let (pooled, pre) = self
            .trace
            .take()
            .ok_or_else(|| Error::invalid("image tower backward without forward"))?;
        let g = relu_backward(&pre, grad)?;
        let gp = dense_fc_backward(&pooled, &mut self.embed, &g)?;
        match &mut self.convnet {
            Some(c) => c.backward(&gp).map(Some),
            None => Ok(None),
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        if let Some(c) = &mut self.convnet {
            c.visit("conv", f);
        }
        f("embed.w", ParamGroup::Dense, Slot::Param(&mut self.embed.weights));
        f("embed.b", ParamGroup::Dense, Slot::Param(&mut self.embed.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
struct NetTrace {
    k: usize,
    basic_pre: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepCtrNet {
    pub cfg: NetConfig,
    pub image: Option<ImageTower>,
    pub basic: LayerParams,
    pub comb: Combnet,
    /// Stream for dropout masks.
    pub dropout_rng: ChaCha8Rng,
    trace: Option<NetTrace>,
}

/// Fully connected classification layers stacked on the pooled conv output
/// for category pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHead {
    pub mlp: Mlp,
}

impl PretrainHead {
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        self.mlp.visit("head", f);
    }
}

/// The category classifier. It borrows the click model's conv stack, so
/// every pretraining update lands directly in the click model.
pub struct PretrainNet<'a> {
    pub convnet: &'a mut Convnet,
    pub head: &'a mut PretrainHead,
}

impl PretrainNet<'_> {
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let pooled = self.convnet.forward(images, mode)?;
        // no dropout in the head, so the stream is never drawn from
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.head.mlp.forward(&pooled, mode, &mut unused)
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        self.convnet.visit("conv", f);
        self.head.visit(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, _, s| {
            if let Slot::Param(p) = s {
                p.zero_grad()
            }
        });
    }
}

/// Builds the click model and the pretraining head from one seed. Weights use
/// He initialisation and biases start at zero.
pub fn build_networks(cfg: &NetConfig, seed: u64) -> Result<(DeepCtrNet, PretrainHead)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled_width = cfg.conv.out_channels();
    let image = match cfg.image_tower {
        ImageTowerKind::None => None,
        kind => {
            let convnet = (kind == ImageTowerKind::Conv).then(|| Convnet::new(&cfg.conv, cfg.image_shape[0], &mut rng));
            let embed = LayerParams::he_normal(&[pooled_width, cfg.embed_dim], cfg.embed_dim, pooled_width, &mut rng);
            Some(ImageTower {
                convnet,
                embed,
                trace: None,
            })
        }
    };
    let basic = LayerParams::he_normal(
        &[cfg.basic_dim, cfg.basic_hidden],
        cfg.basic_hidden,
        cfg.basic_dim,
        &mut rng,
    );
    let comb = Combnet::new(
        cfg.comb_input_width(),
        &cfg.comb_hidden,
        cfg.dropout_rate,
        cfg.use_bn_comb,
        &mut rng,
    );
    let head = PretrainHead {
        mlp: Mlp::new(pooled_width, &cfg.pretrain_hidden, cfg.n_categories, 0.0, &mut rng),
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(1);
    let net = DeepCtrNet {
        cfg: cfg.clone(),
        image,
        basic,
        comb,
        dropout_rng,
        trace: None,
    };
    Ok((net, head))
}

impl DeepCtrNet {
    pub fn convnet(&self) -> Option<&Convnet> {
        self.image.as_ref().and_then(|t| t.convnet.as_ref())
    }

    pub fn convnet_mut(&mut self) -> Option<&mut Convnet> {
        self.image.as_mut().and_then(|t| t.convnet.as_mut())
    }

    /// The pretraining classifier over this model's conv stack.
    pub fn pretrain_net<'a>(&'a mut self, head: &'a mut PretrainHead) -> Result<PretrainNet<'a>> {
        let convnet = self
            .convnet_mut()
            .ok_or_else(|| Error::invalid("model has no conv stack to pretrain"))?;
        Ok(PretrainNet { convnet, head })
    }

    /// Visits every parameter and buffer in a fixed order with a stable name.
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        if let Some(t) = &mut self.image {
            t.visit(f);
        }
        f("basic.w", ParamGroup::Dense, Slot::Param(&mut self.basic.weights));
        f("basic.b", ParamGroup::Dense, Slot::Param(&mut self.basic.bias));
        self.comb.visit("comb", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, _, s| {
            if let Slot::Param(p) = s {
                p.zero_grad()
            }
        });
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, s| {
            if let Slot::Param(p) = s {
                n += p.len()
            }
        });
        n
    }

    /// Sum of squares over parameters subject to weight decay.
    pub fn weight_sq_norm(&mut self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, _, slot| {
            if let Slot::Param(p) = slot {
                if p.decay {
                    s += p.value.sq_norm();
                }
            }
        });
        s
    }

    /// `[n x embed_dim]` image features, or `None` for a basic-only model.
    pub fn image_features(&mut self, images: &Tensor, mode: Mode) -> Result<Option<Tensor>> {
        match &mut self.image {
            Some(t) => t.forward(images, mode).map(Some),
            None => Ok(None),
        }
    }

    /// Logits `[k*n x 1]` for `n` images and their `k*n` impressions.
    pub fn forward(&mut self, images: &Tensor, features: &SparseBatch, k: usize, mode: Mode) -> Result<Tensor> {
        let rows = features.num_rows();
        let conv = self.image_features(images, mode)?;
        let basic_pre = sparse_fc_forward(features, &self.basic)?;
        let basic = relu(&basic_pre);
        let fused = match &conv {
            Some(c) => {
                if c.rows() * k != rows {
                    return Err(Error::shape(format!(
                        "{} images x k={} does not match {} feature rows",
                        c.rows(),
                        k,
                        rows
                    )));
                }
                concat_cols(&[&replicate_image_features(c, k), &basic])?
            }
            None => basic,
        };
        let z = self.comb.forward(&fused, mode, &mut self.dropout_rng)?;
        self.trace = Some(NetTrace { k, basic_pre });
        Ok(z)
    }

    /// Backpropagates `grad_z` through the model, folding copy gradients per
    /// `mode`. Returns the image gradient when the tower starts from pixels.
    pub fn backward(&mut self, features: &SparseBatch, grad_z: &Tensor, mode: GradMode) -> Result<Option<Tensor>> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::invalid("backward without forward"))?;
        let g = self.comb.backward(grad_z)?;
        let basic_width = self.basic.bias.len();
        let (g_conv, g_basic) = match &self.image {
            Some(_) => {
                let mut parts = split_cols(&g, &[g.row_len() - basic_width, basic_width])?;
                let gb = parts.pop().expect("two parts");
                (parts.pop(), gb)
            }
            None => (None, g),
        };
        let g_basic = relu_backward(&trace.basic_pre, &g_basic)?;
        sparse_fc_backward(features, &mut self.basic, &g_basic)?;
        match (g_conv, &mut self.image) {
            (Some(gc), Some(tower)) => {
                let reduced = reduce_copy_gradients(&gc, trace.k, mode)?;
                tower.backward(&reduced)
            }
            _ => Ok(None),
        }
    }

    /// Logits for dataset rows in eval mode. Each distinct image passes
    /// through the tower once.
    pub fn predict_logits(&mut self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let mut slot = vec![usize::MAX; ds.groups.num_images()];
        let mut order = Vec::new();
        for &r in rows {
            let g = ds.row_image[r];
            if slot[g] == usize::MAX {
                slot[g] = order.len();
                order.push(g);
            }
        }
        let feats = match self.image {
            Some(_) => {
                let mut chunks = Vec::new();
                for part in order.chunks(EVAL_IMAGE_CHUNK) {
                    let imgs: Vec<&Tensor> = part.iter().map(|&g| ds.image(g)).collect();
                    let f = self
                        .image_features(&Tensor::stack(&imgs)?, Mode::Eval)?
                        .expect("tower present");
                    chunks.push(f);
                }
                Some(chunks)
            }
            None => None,
        };
        let mut out = Vec::with_capacity(rows.len());
        for part in rows.chunks(EVAL_ROW_CHUNK) {
            let v = ds.features.gather_rows(part);
            let basic = relu(&sparse_fc_forward(&v, &self.basic)?);
            let fused = match &feats {
                Some(chunks) => {
                    let width = chunks[0].row_len();
                    let mut c = Tensor::zeros(&[part.len(), width]);
                    for (i, &r) in part.iter().enumerate() {
                        let s = slot[ds.row_image[r]];
                        c.row_mut(i)
                            .copy_from_slice(chunks[s / EVAL_IMAGE_CHUNK].row(s % EVAL_IMAGE_CHUNK));
                    }
                    concat_cols(&[&c, &basic])?
                }
                None => basic,
            };
            let z = self.comb.forward(&fused, Mode::Eval, &mut self.dropout_rng)?;
            out.extend_from_slice(z.data());
        }
        self.trace = None;
        Ok(out)
    }

    /// Click probabilities for dataset rows in eval mode.
    pub fn predict(&mut self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        Ok(self.predict_logits(ds, rows)?.into_iter().map(sigmoid).collect())
    }

    /// `d z / d image` for one image and one basic-feature row, in eval mode.
    pub fn input_gradient(&mut self, image: &Tensor, features: &SparseBatch) -> Result<Tensor> {
        if self.convnet().is_none() {
            return Err(Error::invalid("input gradient needs a pixel image tower"));
        }
        if image.shape() != self.cfg.image_shape {
            return Err(Error::shape(format!(
                "image {:?}, model expects {:?}",
                image.shape(),
                self.cfg.image_shape
            )));
        }
        if features.num_rows() != 1 {
            return Err(Error::shape("input gradient takes exactly one feature row"));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(&shape)?;
        self.forward(&batch, features, 1, Mode::Eval)?;
        let g = self
            .backward(features, &Tensor::filled(&[1, 1], 1.0), GradMode::Exact)?
            .expect("pixel tower");
        self.zero_grad();
        g.reshape(image.shape())
    }
}

/// Logits and probabilities for a grouped batch, one per impression row.
pub fn deepctr_forward(net: &mut DeepCtrNet, batch: &GroupedBatch, mode: Mode) -> Result<(Tensor, Tensor)> {
    let z = net.forward(&batch.images, &batch.features, batch.k, mode)?;
    let z = z.reshape(&[batch.num_rows()])?;
    let y = z.map(sigmoid);
    Ok((z, y))
}

/// One training pass over a grouped batch: image tower on the `n` images,
/// replication to the `k*n` rows, fusion to the loss, backward through the
/// fusion layers, reduction of the copy gradients and the image tower
/// backward. Parameter gradients are overwritten. The returned loss includes
/// `lambda * ||W||^2` over decayed parameters; its gradient is applied by the
/// optimizer, not here.
pub fn forward_backward(net: &mut DeepCtrNet, batch: &GroupedBatch, lambda: f64, mode: GradMode) -> Result<f64> {
    net.zero_grad();
    let z = net.forward(&batch.images, &batch.features, batch.k, Mode::Train)?;
    let sq = if lambda == 0.0 { 0.0 } else { net.weight_sq_norm() };
    let (loss, dz) = sigmoid_logloss(&z, &batch.labels, sq, lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", loss)));
    }
    net.backward(&batch.features, &dz, mode)?;
    Ok(loss)
}

/// Cross-entropy over categories; gradients are overwritten and reach the
/// shared conv stack.
pub fn pretrain_forward_backward(pnet: &mut PretrainNet<'_>, images: &Tensor, labels: &[usize]) -> Result<f64> {
    pnet.zero_grad();
    let logits = pnet.forward(images, Mode::Train)?;
    let (loss, g) = softmax_cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("pretraining loss {}", loss)));
    }
    let gp = pnet.head.mlp.backward(&g)?;
    pnet.convnet.backward(&gp)?;
    Ok(loss)
}

/// Pooled conv features of each image, in eval mode.
pub fn pooled_features(convnet: &mut Convnet, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(EVAL_IMAGE_CHUNK) {
        let refs: Vec<&Tensor> = part.iter().collect();
        let f = convnet.forward(&Tensor::stack(&refs)?, Mode::Eval)?;
        for i in 0..part.len() {
            out.push(Tensor::new(&[f.row_len()], f.row(i).to_vec())?);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests;
