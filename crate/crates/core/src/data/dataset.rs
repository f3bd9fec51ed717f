use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_group_index, GroupIndex, ImageStore, Impression};
use crate::error::{Error, Result};
use crate::sparse::{csr_from_rows, SparseBatch};
use crate::tensor::Tensor;

/// Impressions assembled for training: CSR features, labels, the image grouping
/// and one decoded tensor per unique image (in group order).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub impressions: Vec<Impression>,
    pub features: SparseBatch,
    pub labels: Vec<f64>,
    pub groups: GroupIndex,
    /// Group position of each impression row.
    pub row_image: Vec<usize>,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(impressions: Vec<Impression>, dim: usize, store: &ImageStore) -> Result<Self> {
        let rows: Vec<Vec<(usize, f64)>> = impressions.iter().map(|i| i.features.clone()).collect();
        let features = csr_from_rows(&rows, dim)?;
        let labels = impressions.iter().map(|i| f64::from(i.label)).collect();
        let groups = build_group_index(&impressions);
        let row_image = groups.row_groups();
        let mut images = Vec::with_capacity(groups.num_images());
        for id in &groups.image_ids {
            images.push(store.get(id)?);
        }
        if let Some(first) = images.first() {
            if first.ndim() != 3 {
                return Err(Error::shape("images must be [c,h,w]"));
            }
            if let Some((id, _)) = groups
                .image_ids
                .iter()
                .zip(&images)
                .find(|(_, t)| t.shape() != first.shape())
            {
                return Err(Error::Image {
                    id: id.clone(),
                    msg: format!("shape differs from {:?}", first.shape()),
                });
            }
        }
        Ok(Dataset {
            impressions,
            features,
            labels,
            groups,
            row_image,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn image(&self, group: usize) -> &Tensor {
        &self.images[group]
    }
}

/// Train / warm-test / cold-test partition of an impression log.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Impression>,
    /// Held-out impressions of images that also appear in training.
    pub test: Vec<Impression>,
    /// Impressions of images never shown in training.
    pub cold: Vec<Impression>,
}

/// Holds out `cold_image_fraction` of unique images entirely, then a
/// `test_fraction` of the remaining impressions. Order is preserved.
pub fn split_dataset(
    impressions: &[Impression],
    test_fraction: f64,
    cold_image_fraction: f64,
    seed: u64,
) -> Result<Split> {
    for (name, f) in [
        ("test_fraction", test_fraction),
        ("cold_image_fraction", cold_image_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::invalid(format!("{} {} not in [0, 1)", name, f)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&str> = impressions
        .iter()
        .map(|i| i.image_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut rng);
    let n_cold = (ids.len() as f64 * cold_image_fraction).round() as usize;
    let cold_ids: BTreeSet<&str> = ids[..n_cold].iter().copied().collect();

    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
        cold: Vec::new(),
    };
    for imp in impressions {
        if cold_ids.contains(imp.image_id.as_str()) {
            split.cold.push(imp.clone());
        } else if rng.random::<f64>() < test_fraction {
            split.test.push(imp.clone());
        } else {
            split.train.push(imp.clone());
        }
    }
    Ok(split)
}
