use std::collections::BTreeMap;

use super::Impression;

/// Partition of impression rows by image, images in lexicographic id order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub image_ids: Vec<String>,
    pub rows: Vec<Vec<usize>>,
}

impl GroupIndex {
    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.image_ids.binary_search_by(|id| id.as_str().cmp(image_id)).ok()
    }

    /// Group position of every impression row.
    pub fn row_groups(&self) -> Vec<usize> {
        let mut out = vec![0; self.total()];
        for (g, rows) in self.rows.iter().enumerate() {
            for &r in rows {
                out[r] = g;
            }
        }
        out
    }
}

pub fn build_group_index(impressions: &[Impression]) -> GroupIndex {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, imp) in impressions.iter().enumerate() {
        map.entry(imp.image_id.as_str()).or_default().push(r);
    }
    let (image_ids, rows) = map.into_iter().map(|(k, v)| (k.to_string(), v)).unzip();
    GroupIndex { image_ids, rows }
}
