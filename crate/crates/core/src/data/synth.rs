//! Desk-scale synthetic click logs with a planted visual signal.
//!
//! Every image carries a coloured patch at a category-specific location. The
//! patch's green level also encodes the category, so the category survives
//! left-right mirroring. The red/blue balance `b` of the patch shifts the true
//! click logit by `visual_weight * (2b - 1)`, so that signal can only be
//! recovered from pixels. Basic features are one-hot
//! fields (zone, ad group, target, category, user attributes) with random
//! per-value weights and a zone x gender interaction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::image::{image_to_tensor, write_pnm, PnmImage};
use super::impressions::{format_impressions, Impression};
use super::ImageStore;
use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_impressions: usize,
    /// Log-normal sigma of per-image impression weights; 0 gives equal counts.
    pub count_sigma: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_categories: usize,
    pub images_per_ad_group: usize,
    pub n_zones: usize,
    pub n_targets: usize,
    pub n_ages: usize,
    pub n_power_levels: usize,
    pub dim: usize,
    pub base_logit: f64,
    pub basic_weight_std: f64,
    pub group_weight_std: f64,
    pub interaction_std: f64,
    pub visual_weight: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 600,
            n_impressions: 60_000,
            count_sigma: 0.8,
            image_size: 32,
            patch_size: 8,
            n_categories: 4,
            images_per_ad_group: 4,
            n_zones: 24,
            n_targets: 10,
            n_ages: 6,
            n_power_levels: 4,
            dim: 2048,
            base_logit: -1.8,
            basic_weight_std: 0.4,
            group_weight_std: 0.3,
            interaction_std: 0.4,
            visual_weight: 1.5,
        }
    }
}

/// Offsets of each one-hot field inside the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldLayout {
    pub zone: usize,
    pub group: usize,
    pub target: usize,
    pub category: usize,
    pub gender: usize,
    pub age: usize,
    pub power: usize,
    pub end: usize,
}

impl SynthSpec {
    pub fn n_groups(&self) -> usize {
        self.n_images.div_ceil(self.images_per_ad_group.max(1))
    }

    pub fn layout(&self) -> FieldLayout {
        let zone = 0;
        let group = zone + self.n_zones;
        let target = group + self.n_groups();
        let category = target + self.n_targets;
        let gender = category + self.n_categories;
        let age = gender + 2;
        let power = age + self.n_ages;
        let end = power + self.n_power_levels;
        FieldLayout {
            zone,
            group,
            target,
            category,
            gender,
            age,
            power,
            end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {}", m)));
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if self.n_impressions < self.n_images {
            return bad("n_impressions must be at least n_images".into());
        }
        if self.n_categories == 0 || self.n_zones == 0 || self.n_targets == 0 {
            return bad("field cardinalities must be positive".into());
        }
        if self.n_ages == 0 || self.n_power_levels == 0 || self.images_per_ad_group == 0 {
            return bad("field cardinalities must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return bad("patch_size must be in 1..=image_size".into());
        }
        let grid = grid_side(self.n_categories);
        if self.patch_size * grid > self.image_size {
            return bad(format!(
                "{} categories need a {}x{} patch grid that does not fit a {} image",
                self.n_categories, grid, grid, self.image_size
            ));
        }
        if self.dim < self.layout().end {
            return bad(format!(
                "dim {} smaller than the {} one-hot slots",
                self.dim,
                self.layout().end
            ));
        }
        if !(self.count_sigma >= 0.0 && self.count_sigma.is_finite()) {
            return bad("count_sigma must be finite and non-negative".into());
        }
        for v in [self.basic_weight_std, self.group_weight_std, self.interaction_std] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("weight std values must be finite and non-negative".into());
            }
        }
        if !self.visual_weight.is_finite() || !self.base_logit.is_finite() {
            return bad("visual_weight and base_logit must be finite".into());
        }
        Ok(())
    }
}

fn grid_side(n: usize) -> usize {
    (1..).find(|g| g * g >= n).unwrap()
}

/// Where the informative patch sits in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInfo {
    pub image_id: String,
    pub category: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub brightness: f64,
}

impl PatchInfo {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.size && x >= self.left && x < self.left + self.size
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub impressions: Vec<Impression>,
    pub images: Vec<(String, PnmImage)>,
    /// True click probability per impression row.
    pub truth: Vec<f64>,
    /// Logit contribution of the basic features (including the bias).
    pub basic_logit: Vec<f64>,
    /// Logit contribution of the image.
    pub visual_logit: Vec<f64>,
    pub patches: Vec<PatchInfo>,
}

impl SynthData {
    /// In-memory store holding every generated image.
    pub fn store(&self) -> ImageStore {
        let mut s = ImageStore::in_memory();
        for (id, img) in &self.images {
            s.insert(id.clone(), image_to_tensor(img));
        }
        s
    }

    pub fn categories(&self) -> Vec<(String, usize)> {
        self.patches.iter().map(|p| (p.image_id.clone(), p.category)).collect()
    }

    /// Writes `impressions.tsv`, `images/<id>.ppm`, `truth.tsv` and `patches.tsv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let images = out_dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let path = out_dir.join("impressions.tsv");
        fs::write(&path, format_impressions(&self.impressions)).map_err(|e| Error::io(&path, e))?;
        for (id, img) in &self.images {
            write_pnm(&images.join(format!("{}.ppm", id)), img)?;
        }
        let mut truth = String::new();
        for (row, (imp, p)) in self.impressions.iter().zip(&self.truth).enumerate() {
            let _ = writeln!(truth, "{}\t{}\t{}", imp.image_id, row, p);
        }
        let path = out_dir.join("truth.tsv");
        fs::write(&path, truth).map_err(|e| Error::io(&path, e))?;
        let path = out_dir.join("patches.tsv");
        fs::write(&path, format_patches(&self.patches)).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

pub fn format_patches(patches: &[PatchInfo]) -> String {
    let mut s = String::new();
    for p in patches {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.image_id, p.category, p.top, p.left, p.size, p.brightness
        );
    }
    s
}

/// Reads the `patches.tsv` sidecar: `image_id category top left size brightness`.
pub fn load_patches(path: &Path) -> Result<Vec<PatchInfo>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            Ok(PatchInfo {
                image_id: f[0].to_string(),
                category: num(f[1])?,
                top: num(f[2])?,
                left: num(f[3])?,
                size: num(f[4])?,
                brightness: f[5].parse().map_err(|_| err("bad brightness"))?,
            })
        })
        .collect()
}

/// Reads a `image_id<TAB>category` listing derived from `patches.tsv`.
pub fn load_categories(path: &Path) -> Result<Vec<(String, usize)>> {
    Ok(load_patches(path)?
        .into_iter()
        .map(|p| (p.image_id, p.category))
        .collect())
}

fn impression_counts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.n_images;
    let weights: Vec<f64> = if spec.count_sigma == 0.0 {
        vec![1.0; n]
    } else {
        let ln = LogNormal::new(0.0, spec.count_sigma).expect("validated sigma");
        (0..n).map(|_| ln.sample(rng)).collect()
    };
    let total: f64 = weights.iter().sum();
    let spare = spec.n_impressions - n;
    let exact: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
    let mut short = spec.n_impressions - counts.iter().sum::<usize>();
    // largest remainders first, ties by index
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    counts
}

fn render(spec: &SynthSpec, category: usize, brightness: f64, rng: &mut ChaCha8Rng) -> (PnmImage, usize, usize) {
    let s = spec.image_size;
    let grid = grid_side(spec.n_categories);
    let cell = s / grid;
    let slack = cell - spec.patch_size;
    let (gy, gx) = (category / grid, category % grid);
    let top = gy * cell + slack / 2;
    let left = gx * cell + slack / 2;

    let level: f64 = rng.random_range(0.25..0.75);
    let green = 0.1 + 0.8 * category as f64 / (spec.n_categories.max(2) - 1) as f64;
    let mut pixels = vec![0u8; s * s * 3];
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..s {
        for x in 0..s {
            let inside = y >= top && y < top + spec.patch_size && x >= left && x < left + spec.patch_size;
            let base = if inside {
                [0.2 + 0.8 * brightness, green, 0.9 - 0.8 * brightness]
            } else {
                let g = level + rng.random_range(-0.12..0.12);
                [g, g, g]
            };
            for (c, b) in base.iter().enumerate() {
                let v = b + rng.random_range(-0.03..0.03);
                pixels[(y * s + x) * 3 + c] = to_byte(v);
            }
        }
    }
    let img = PnmImage {
        width: s,
        height: s,
        channels: 3,
        maxval: 255,
        pixels,
    };
    (img, top, left)
}

/// Generates the dataset in memory, deterministically from `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = spec.layout();
    let normal = |std: f64| Normal::new(0.0, std).expect("validated std");
    let draw = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let d = normal(std);
        (0..n).map(|_| d.sample(rng)).collect()
    };
    let w_zone = draw(spec.n_zones, spec.basic_weight_std, &mut rng);
    let w_group = draw(spec.n_groups(), spec.group_weight_std, &mut rng);
    let w_target = draw(spec.n_targets, spec.basic_weight_std, &mut rng);
    let w_cat = draw(spec.n_categories, spec.basic_weight_std, &mut rng);
    let w_gender = draw(2, spec.basic_weight_std, &mut rng);
    let w_age = draw(spec.n_ages, spec.basic_weight_std, &mut rng);
    let w_power = draw(spec.n_power_levels, spec.basic_weight_std, &mut rng);
    let w_inter = draw(spec.n_zones * 2, spec.interaction_std, &mut rng);

    let group_category: Vec<usize> = (0..spec.n_groups())
        .map(|_| rng.random_range(0..spec.n_categories))
        .collect();

    let mut images = Vec::with_capacity(spec.n_images);
    let mut patches = Vec::with_capacity(spec.n_images);
    let mut image_meta = Vec::with_capacity(spec.n_images);
    for u in 0..spec.n_images {
        let id = format!("img{:05}", u);
        let group = u / spec.images_per_ad_group;
        let category = group_category[group];
        let target = rng.random_range(0..spec.n_targets);
        let brightness: f64 = rng.random();
        let (img, top, left) = render(spec, category, brightness, &mut rng);
        patches.push(PatchInfo {
            image_id: id.clone(),
            category,
            top,
            left,
            size: spec.patch_size,
            brightness,
        });
        images.push((id, img));
        image_meta.push((group, category, target, brightness));
    }

    let counts = impression_counts(spec, &mut rng);
    struct Row {
        imp: Impression,
        basic: f64,
        visual: f64,
        prob: f64,
    }
    let mut rows = Vec::with_capacity(spec.n_impressions);
    for (u, &count) in counts.iter().enumerate() {
        let (group, category, target, brightness) = image_meta[u];
        let visual = spec.visual_weight * (2.0 * brightness - 1.0);
        for _ in 0..count {
            let zone = rng.random_range(0..spec.n_zones);
            let gender = rng.random_range(0..2);
            let age = rng.random_range(0..spec.n_ages);
            let power = rng.random_range(0..spec.n_power_levels);
            let basic = spec.base_logit
                + w_zone[zone]
                + w_group[group]
                + w_target[target]
                + w_cat[category]
                + w_gender[gender]
                + w_age[age]
                + w_power[power]
                + w_inter[zone * 2 + gender];
            let prob = sigmoid(basic + visual);
            let label = u8::from(rng.random::<f64>() < prob);
            let features = vec![
                (lay.zone + zone, 1.0),
                (lay.group + group, 1.0),
                (lay.target + target, 1.0),
                (lay.category + category, 1.0),
                (lay.gender + gender, 1.0),
                (lay.age + age, 1.0),
                (lay.power + power, 1.0),
            ];
            rows.push(Row {
                imp: Impression::new(images[u].0.clone(), label, features),
                basic,
                visual,
                prob,
            });
        }
    }
    rows.shuffle(&mut rng);

    let mut data = SynthData {
        spec: spec.clone(),
        impressions: Vec::with_capacity(rows.len()),
        images,
        truth: Vec::with_capacity(rows.len()),
        basic_logit: Vec::with_capacity(rows.len()),
        visual_logit: Vec::with_capacity(rows.len()),
        patches,
    };
    for r in rows {
        data.impressions.push(r.imp);
        data.truth.push(r.prob);
        data.basic_logit.push(r.basic);
        data.visual_logit.push(r.visual);
    }
    Ok(data)
}

/// Generates and writes the dataset under `out_dir`.
pub fn synth_generate(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<SynthData> {
    let data = generate(spec, seed)?;
    data.write(out_dir)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_group_index, load_impressions};
    use crate::metrics::eval_auc;

    fn small() -> SynthSpec {
        SynthSpec {
            n_images: 40,
            n_impressions: 2000,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn equal_counts_when_sigma_zero() {
        let spec = SynthSpec {
            n_images: 2,
            n_impressions: 6,
            count_sigma: 0.0,
            ..SynthSpec::default()
        };
        let d = generate(&spec, 1).unwrap();
        assert_eq!(d.impressions.len(), 6);
        assert_eq!(build_group_index(&d.impressions).counts(), vec![3, 3]);
    }

    #[test]
    fn skewed_counts_sum_exactly() {
        let d = generate(&small(), 3).unwrap();
        let g = build_group_index(&d.impressions);
        assert_eq!(g.total(), 2000);
        assert_eq!(g.num_images(), 40);
        assert!(g.counts().iter().all(|&c| c >= 1));
        assert!(g.counts().iter().max() > g.counts().iter().min());
    }

    #[test]
    fn zero_visual_weight_means_image_carries_no_signal() {
        let spec = SynthSpec {
            visual_weight: 0.0,
            ..small()
        };
        let d = generate(&spec, 5).unwrap();
        let y: Vec<f64> = d.impressions.iter().map(|i| f64::from(i.label)).collect();
        let basic_only: Vec<f64> = d.basic_logit.iter().map(|&z| sigmoid(z)).collect();
        assert_eq!(eval_auc(&d.truth, &y).unwrap(), eval_auc(&basic_only, &y).unwrap());
    }

    #[test]
    fn positive_rate_tracks_true_probability() {
        let spec = SynthSpec {
            n_impressions: 50_000,
            ..SynthSpec::default()
        };
        let d = generate(&spec, 11).unwrap();
        let rate = d.impressions.iter().filter(|i| i.label == 1).count() as f64 / 50_000.0;
        let mean_p = d.truth.iter().sum::<f64>() / 50_000.0;
        assert!((rate / mean_p - 1.0).abs() < 0.10, "rate {rate} vs mean p {mean_p}");
    }

    #[test]
    fn deterministic_by_seed() {
        let a = generate(&small(), 9).unwrap();
        let b = generate(&small(), 9).unwrap();
        assert_eq!(a.impressions, b.impressions);
        assert_eq!(a.images, b.images);
        assert_eq!(a.truth, b.truth);
        let c = generate(&small(), 10).unwrap();
        assert_ne!(a.impressions, c.impressions);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SynthSpec {
            dim: 10,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
        let spec = SynthSpec {
            n_images: 0,
            ..SynthSpec::default()
        };
        assert!(generate(&spec, 0).is_err());
        let spec = SynthSpec {
            n_categories: 25,
            ..SynthSpec::default()
        };
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn write_then_load() {
        let spec = SynthSpec {
            n_images: 3,
            n_impressions: 12,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(&spec, 2, dir.path()).unwrap();
        let imps = load_impressions(&dir.path().join("impressions.tsv"), spec.dim).unwrap();
        assert_eq!(imps, d.impressions);
        let store = ImageStore::open(dir.path().join("images"));
        let t = store.get("img00001").unwrap();
        assert_eq!(t, image_to_tensor(&d.images[1].1));
        let patches = load_patches(&dir.path().join("patches.tsv")).unwrap();
        assert_eq!(patches, d.patches);
        let truth = fs::read_to_string(dir.path().join("truth.tsv")).unwrap();
        assert_eq!(truth.lines().count(), 12);
    }

    #[test]
    fn patch_pixels_encode_brightness() {
        let d = generate(&small(), 4).unwrap();
        let store = d.store();
        for p in d.patches.iter().take(10) {
            let t = store.get(&p.image_id).unwrap();
            let s = d.spec.image_size;
            let (y, x) = (p.top + p.size / 2, p.left + p.size / 2);
            let red = t.data()[y * s + x];
            assert!((red - (0.2 + 0.8 * p.brightness)).abs() < 0.04);
        }
    }
}
