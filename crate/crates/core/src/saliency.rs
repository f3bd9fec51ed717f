//! Gradient saliency: the derivative of the click logit with respect to the
//! input pixels, reduced to one nonnegative value per pixel.

use std::path::Path;

use crate::data::{write_pnm, PnmImage};
use crate::error::{Error, Result};
use crate::network::DeepCtrNet;
use crate::nn::Mode;
use crate::sparse::{csr_from_rows, SparseBatch};
use crate::tensor::Tensor;

/// A model that scores an image in a fixed impression context and can
/// differentiate that score with respect to the image.
pub trait ImageScorer {
    /// Pre-sigmoid click logit for `image` `[c x h x w]`.
    fn score(&mut self, image: &Tensor, features: &SparseBatch) -> Result<f64>;
    /// `d score / d image`, same shape as `image`.
    fn gradient(&mut self, image: &Tensor, features: &SparseBatch) -> Result<Tensor>;
}

impl ImageScorer for DeepCtrNet {
    fn score(&mut self, image: &Tensor, features: &SparseBatch) -> Result<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let z = self.forward(&image.clone().reshape(&shape)?, features, 1, Mode::Eval)?;
        Ok(z.data()[0])
    }

    fn gradient(&mut self, image: &Tensor, features: &SparseBatch) -> Result<Tensor> {
        self.input_gradient(image, features)
    }
}

/// `z(U) = <coef, U> + bias`, for which the gradient is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    pub coef: Tensor,
    pub bias: f64,
}

impl ImageScorer for LinearScorer {
    fn score(&mut self, image: &Tensor, _: &SparseBatch) -> Result<f64> {
        if image.shape() != self.coef.shape() {
            return Err(Error::shape(format!(
                "image {:?} vs {:?}",
                image.shape(),
                self.coef.shape()
            )));
        }
        Ok(self
            .coef
            .data()
            .iter()
            .zip(image.data())
            .map(|(a, u)| a * u)
            .sum::<f64>()
            + self.bias)
    }

    fn gradient(&mut self, image: &Tensor, _: &SparseBatch) -> Result<Tensor> {
        if image.shape() != self.coef.shape() {
            return Err(Error::shape(format!(
                "image {:?} vs {:?}",
                image.shape(),
                self.coef.shape()
            )));
        }
        Ok(self.coef.clone())
    }
}

/// Gradient of the logit at `image` for one impression's basic features.
pub fn input_gradient<S: ImageScorer + ?Sized>(
    model: &mut S,
    image: &Tensor,
    features: &[(usize, f64)],
    dim: usize,
) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::shape(format!("image must be [c,h,w], got {:?}", image.shape())));
    }
    let row = csr_from_rows(&[features.to_vec()], dim)?;
    model.gradient(image, &row)
}

/// Per-pixel maximum of `|w|` over channels: `[c x h x w]` to `[h x w]`.
pub fn saliency_from_gradient(w: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = match w.shape() {
        [c, h, wd] => (*c, *h, *wd),
        s => return Err(Error::shape(format!("gradient must be [c,h,w], got {:?}", s))),
    };
    let plane = h * wd;
    Ok(Tensor::from_fn(&[h, wd], |p| {
        (0..c).map(|ch| w.data()[ch * plane + p].abs()).fold(0.0, f64::max)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[h x w]`, nonnegative.
    pub values: Tensor,
    pub image_id: String,
    /// Basic-feature row the logit was evaluated with.
    pub features: Vec<(usize, f64)>,
}

impl SaliencyMap {
    pub fn compute<S: ImageScorer + ?Sized>(
        model: &mut S,
        image_id: &str,
        image: &Tensor,
        features: &[(usize, f64)],
        dim: usize,
    ) -> Result<Self> {
        let g = input_gradient(model, image, features, dim)?;
        Ok(SaliencyMap {
            values: saliency_from_gradient(&g)?,
            image_id: image_id.to_string(),
            features: features.to_vec(),
        })
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Share of the map's mass inside the rectangle divided by the
    /// rectangle's share of the area; 1 means no concentration.
    pub fn region_concentration(&self, top: usize, left: usize, height: usize, width: usize) -> Result<f64> {
        let (h, w) = self.values.dims2()?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "region {}x{} at ({},{}) outside {}x{}",
                height, width, top, left, h, w
            )));
        }
        let total = self.total();
        if total == 0.0 {
            return Ok(0.0);
        }
        let mut inside = 0.0;
        for y in top..top + height {
            inside += self.values.row(y)[left..left + width].iter().sum::<f64>();
        }
        Ok((inside / total) / ((height * width) as f64 / (h * w) as f64))
    }
}

/// Quantizes a map linearly so its maximum becomes 255. An all-zero map
/// stays all zero.
pub fn heatmap_bytes(values: &Tensor) -> Result<PnmImage> {
    let (h, w) = values.dims2()?;
    if !values.is_finite() {
        return Err(Error::NonFinite("saliency map".into()));
    }
    if values.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("saliency map has negative values"));
    }
    let max = values.max_abs();
    let pixels = values
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(PnmImage {
        width: w,
        height: h,
        channels: 1,
        maxval: 255,
        pixels,
    })
}

/// Writes the map as a binary P5 file.
pub fn export_heatmap(map: &SaliencyMap, path: &Path) -> Result<()> {
    write_pnm(path, &heatmap_bytes(&map.values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_pnm;
    use crate::network::build_networks;
    use crate::network::tests::tiny_cfg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_surrogate_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coef = Tensor::from_fn(&[3, 5, 4], |_| rng.random_range(-2.0..2.0));
        let mut s = LinearScorer {
            coef: coef.clone(),
            bias: 0.3,
        };
        let img = Tensor::from_fn(&[3, 5, 4], |_| rng.random());
        let g = input_gradient(&mut s, &img, &[(0, 1.0)], 4).unwrap();
        assert_eq!(g.shape(), coef.shape());
        for (a, b) in g.data().iter().zip(coef.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        // first-order expansion has no remainder
        let row = csr_from_rows(&[vec![]], 4).unwrap();
        let step = Tensor::from_fn(&[3, 5, 4], |_| rng.random_range(-0.5..0.5));
        let mut moved = img.clone();
        moved.axpy(1.0, &step).unwrap();
        let lin: f64 = g.data().iter().zip(step.data()).map(|(a, b)| a * b).sum();
        let diff = s.score(&moved, &row).unwrap() - s.score(&img, &row).unwrap();
        assert!((diff - lin).abs() < 1e-12);
    }

    #[test]
    fn network_gradient_matches_differences() {
        let cfg = tiny_cfg();
        let (mut net, _) = build_networks(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(&[3, 8, 8], |_| rng.random());
        let feats = [(1, 1.0), (7, 0.5)];
        let g = input_gradient(&mut net, &img, &feats, cfg.basic_dim).unwrap();
        let row = csr_from_rows(&[feats.to_vec()], cfg.basic_dim).unwrap();
        for _ in 0..10 {
            let i = rng.random_range(0..img.len());
            let h = 1e-6;
            let mut a = img.clone();
            a.data_mut()[i] += h;
            let mut b = img.clone();
            b.data_mut()[i] -= h;
            let fd = (net.score(&a, &row).unwrap() - net.score(&b, &row).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(g.data()[i].abs()).max(1e-3);
            assert!(
                (fd - g.data()[i]).abs() / scale < 1e-4,
                "pixel {}: {} vs {}",
                i,
                g.data()[i],
                fd
            );
        }
    }

    #[test]
    fn scaling_last_layer_scales_gradient() {
        let cfg = tiny_cfg();
        let (mut net, _) = build_networks(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn(&[3, 8, 8], |_| rng.random());
        let g1 = input_gradient(&mut net, &img, &[(2, 1.0)], cfg.basic_dim).unwrap();
        let last = net.comb.mlp.layers.last_mut().unwrap();
        last.weights.value.scale(2.0);
        last.bias.value.scale(2.0);
        let g2 = input_gradient(&mut net, &img, &[(2, 1.0)], cfg.basic_dim).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn channel_max_of_magnitudes() {
        let w = Tensor::new(&[3, 1, 2], vec![-3.0, 0.5, 1.0, -0.7, 2.0, 0.1]).unwrap();
        let m = saliency_from_gradient(&w).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[3.0, 0.7]);
        let mut neg = w.clone();
        neg.scale(-1.0);
        assert_eq!(saliency_from_gradient(&neg).unwrap(), m);
        assert_eq!(
            saliency_from_gradient(&Tensor::zeros(&[3, 2, 2])).unwrap(),
            Tensor::zeros(&[2, 2])
        );
        let single = Tensor::new(&[1, 1, 3], vec![-1.0, 2.0, -0.5]).unwrap();
        assert_eq!(saliency_from_gradient(&single).unwrap().data(), &[1.0, 2.0, 0.5]);
        assert!(saliency_from_gradient(&Tensor::zeros(&[4])).is_err());
    }

    fn map(values: Tensor) -> SaliencyMap {
        SaliencyMap {
            values,
            image_id: "x".into(),
            features: vec![],
        }
    }

    #[test]
    fn heatmap_quantization() {
        let c = heatmap_bytes(&Tensor::filled(&[2, 3], 0.4)).unwrap();
        assert!(c.pixels.iter().all(|&p| p == 255));
        let z = heatmap_bytes(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(z.pixels.iter().all(|&p| p == 0));
        let r = heatmap_bytes(&Tensor::new(&[1, 3], vec![0.0, 1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(r.pixels, vec![0, 128, 255]);
        assert!(heatmap_bytes(&Tensor::new(&[1, 1], vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn exported_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = map(Tensor::from_fn(&[6, 7], |_| rng.random_range(0.0..3.0)));
        let path = dir.path().join("h.pgm");
        export_heatmap(&m, &path).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!((back.width, back.height, back.channels), (7, 6, 1));
        assert_eq!(back, heatmap_bytes(&m.values).unwrap());
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5"));
        assert!(export_heatmap(&m, &dir.path().join("missing/h.pgm")).is_err());
    }

    #[test]
    fn concentration_of_uniform_and_peaked_maps() {
        let u = map(Tensor::filled(&[4, 4], 1.0));
        assert!((u.region_concentration(0, 0, 2, 2).unwrap() - 1.0).abs() < 1e-12);
        let mut v = Tensor::zeros(&[4, 4]);
        v.data_mut()[5] = 1.0;
        let p = map(v);
        assert!((p.region_concentration(1, 1, 2, 2).unwrap() - 4.0).abs() < 1e-12);
        assert!(p.region_concentration(3, 3, 2, 2).is_err());
    }
}
