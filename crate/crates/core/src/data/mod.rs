//! Impressions, images, the image-to-impressions grouping, and synthetic data.

mod dataset;
mod group;
mod image;
mod impressions;
pub mod synth;

pub use dataset::{split_dataset, Dataset, Split};
pub use group::{build_group_index, GroupIndex};
pub use image::{
    center_resize, image_to_tensor, load_image, mirror_horizontal, read_pnm, tensor_to_pnm, write_pnm, ImageStore,
    PnmImage,
};
pub use impressions::{load_impressions, parse_impressions, write_impressions, Impression};
