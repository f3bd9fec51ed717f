use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_output_extent, ConvGeometry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvGroupSpec {
    pub layers: usize,
    pub channels: usize,
    /// Stride 2 on the first layer of the group.
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvSpec {
    pub first_kernel: usize,
    pub first_channels: usize,
    pub first_stride: usize,
    pub groups: Vec<ConvGroupSpec>,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            first_kernel: 5,
            first_channels: 16,
            first_stride: 1,
            groups: vec![
                ConvGroupSpec {
                    layers: 2,
                    channels: 16,
                    downsample: false,
                },
                ConvGroupSpec {
                    layers: 2,
                    channels: 32,
                    downsample: true,
                },
            ],
        }
    }
}

impl ConvSpec {
    /// One 5x5 layer followed by four groups of four 3x3 layers (17 in all).
    pub fn seventeen_layer() -> Self {
        let group = |channels, downsample| ConvGroupSpec {
            layers: 4,
            channels,
            downsample,
        };
        ConvSpec {
            first_kernel: 5,
            first_channels: 64,
            first_stride: 2,
            groups: vec![group(64, false), group(128, true), group(256, true), group(512, true)],
        }
    }

    pub fn num_layers(&self) -> usize {
        1 + self.groups.iter().map(|g| g.layers).sum::<usize>()
    }

    /// `(in_channels, out_channels, kernel, geometry)` of every layer in order.
    pub fn layer_shapes(&self, in_channels: usize) -> Vec<(usize, usize, usize, ConvGeometry)> {
        let mut out = vec![(
            in_channels,
            self.first_channels,
            self.first_kernel,
            ConvGeometry::new(self.first_stride, self.first_kernel / 2),
        )];
        let mut c = self.first_channels;
        for g in &self.groups {
            for l in 0..g.layers {
                let stride = if l == 0 && g.downsample { 2 } else { 1 };
                out.push((c, g.channels, 3, ConvGeometry::new(stride, 1)));
                c = g.channels;
            }
        }
        out
    }

    pub fn out_channels(&self) -> usize {
        self.groups
            .iter()
            .rev()
            .find(|g| g.layers > 0)
            .map_or(self.first_channels, |g| g.channels)
    }
}

/// Which image pathway feeds the fusion layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTowerKind {
    /// Trainable convolution stack on raw pixels.
    #[default]
    Conv,
    /// Precomputed pooled convolution features; only the embedding layer trains.
    Frozen,
    /// No image input: a basic-features-only network.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// `[channels, height, width]` of stored images.
    pub image_shape: [usize; 3],
    pub conv: ConvSpec,
    pub image_tower: ImageTowerKind,
    pub embed_dim: usize,
    pub basic_dim: usize,
    pub basic_hidden: usize,
    pub comb_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub use_bn_comb: bool,
    /// Hidden widths of the classification head used for pretraining.
    pub pretrain_hidden: Vec<usize>,
    pub n_categories: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_shape: [3, 32, 32],
            conv: ConvSpec::default(),
            image_tower: ImageTowerKind::Conv,
            embed_dim: 128,
            basic_dim: 2048,
            basic_hidden: 128,
            comb_hidden: vec![256, 128],
            dropout_rate: 0.5,
            use_bn_comb: true,
            pretrain_hidden: vec![256, 256],
            n_categories: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {}", m)));
        if self.image_shape.contains(&0) {
            return bad("image_shape extents must be positive");
        }
        if self.embed_dim == 0 || self.basic_dim == 0 || self.basic_hidden == 0 {
            return bad("embed_dim, basic_dim and basic_hidden must be positive");
        }
        if self.comb_hidden.is_empty() || self.comb_hidden.contains(&0) {
            return bad("comb_hidden needs at least one positive width");
        }
        if self.pretrain_hidden.contains(&0) {
            return bad("pretrain_hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.n_categories < 2 {
            return bad("n_categories must be at least 2");
        }
        let c = &self.conv;
        if c.first_kernel == 0 || c.first_kernel % 2 == 0 || c.first_channels == 0 || c.first_stride == 0 {
            return bad("first conv layer needs an odd kernel and positive channels and stride");
        }
        if c.groups.iter().any(|g| g.layers == 0 || g.channels == 0) {
            return bad("conv groups need positive layers and channels");
        }
        if self.image_tower == ImageTowerKind::Conv {
            let (mut h, mut w) = (self.image_shape[1], self.image_shape[2]);
            for (_, _, k, geom) in c.layer_shapes(self.image_shape[0]) {
                h = conv_output_extent(h, k, geom)
                    .map_err(|_| Error::Config("image too small for the conv stack".into()))?;
                w = conv_output_extent(w, k, geom)
                    .map_err(|_| Error::Config("image too small for the conv stack".into()))?;
            }
        }
        Ok(())
    }

    /// Width of the fused input to the combination layers.
    pub fn comb_input_width(&self) -> usize {
        match self.image_tower {
            ImageTowerKind::None => self.basic_hidden,
            _ => self.embed_dim + self.basic_hidden,
        }
    }

    /// Closed-form parameter count of the click model (pretraining head excluded).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        if self.image_tower == ImageTowerKind::Conv {
            for (cin, cout, k, _) in self.conv.layer_shapes(self.image_shape[0]) {
                n += cout * cin * k * k + cout + 2 * cout;
            }
        }
        if self.image_tower != ImageTowerKind::None {
            n += self.conv.out_channels() * self.embed_dim + self.embed_dim;
        }
        n += self.basic_dim * self.basic_hidden + self.basic_hidden;
        let mut width = self.comb_input_width();
        if self.use_bn_comb {
            n += 2 * width;
        }
        for &h in &self.comb_hidden {
            n += width * h + h;
            width = h;
        }
        n + width + 1
    }
}
