//! Binary netpbm (P5 gray / P6 color) reading and writing, and the image store.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit netpbm raster, interleaved channels, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

fn header_token(data: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos]).ok()?.parse().ok()
}

pub fn decode_pnm(data: &[u8]) -> std::result::Result<PnmImage, String> {
    let channels = match data.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary P5/P6 netpbm file".into()),
    };
    let mut pos = 2;
    let width = header_token(data, &mut pos).ok_or("bad width")?;
    let height = header_token(data, &mut pos).ok_or("bad height")?;
    let maxval = header_token(data, &mut pos).ok_or("bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {}", maxval));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    if !data.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing header terminator".into());
    }
    pos += 1;
    let len = width * height * channels;
    let pixels = data
        .get(pos..pos + len)
        .ok_or_else(|| format!("truncated raster: need {} bytes, have {}", len, data.len() - pos))?
        .to_vec();
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{}\n{} {}\n{}\n", magic, img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&data).map_err(|msg| Error::Image {
        id: path.display().to_string(),
        msg,
    })
}

pub fn write_pnm(path: &Path, img: &PnmImage) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::invalid("netpbm output supports 1 or 3 channels"));
    }
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Channels-first tensor `[c x h x w]` with byte `b` mapped to `b / maxval`.
pub fn image_to_tensor(img: &PnmImage) -> Tensor {
    let (c, h, w) = (img.channels, img.height, img.width);
    let scale = f64::from(img.maxval);
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let p = i % (h * w);
        f64::from(img.pixels[p * c + ch]) / scale
    })
}

/// Inverse of [`image_to_tensor`] at maxval 255, rounding to the nearest byte.
pub fn tensor_to_pnm(t: &Tensor) -> Result<PnmImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        s => return Err(Error::shape(format!("image tensor must be [c,h,w], got {:?}", s))),
    };
    let mut pixels = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = t.data()[ch * h * w + p].clamp(0.0, 1.0);
            pixels[p * c + ch] = (v * 255.0).round() as u8;
        }
    }
    Ok(PnmImage {
        width: w,
        height: h,
        channels: c,
        maxval: 255,
        pixels,
    })
}

/// Center-crops to a square and resizes to `size x size` by nearest neighbour.
pub fn center_resize(t: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = t.shape() else {
        return Err(Error::shape("center_resize expects [c,h,w]"));
    };
    let (c, h, w) = (*c, *h, *w);
    let side = h.min(w);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        let sy = top + (y * side) / size;
        let sx = left + (x * side) / size;
        t.data()[(ch * h + sy) * w + sx]
    }))
}

/// Left-right flip of a `[c x h x w]` (or batched `[n x c x h x w]`) tensor.
pub fn mirror_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for line in out.data_mut().chunks_mut(w) {
        line.reverse();
    }
    out
}

/// Image tensors keyed by id, backed by `<root>/<id>.ppm` files.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    root: Option<PathBuf>,
    cache: HashMap<String, Tensor>,
}

impl ImageStore {
    /// In-memory store with no backing directory.
    pub fn in_memory() -> Self {
        ImageStore::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        ImageStore {
            root: Some(root.into()),
            cache: HashMap::new(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: Tensor) {
        self.cache.insert(id.into(), image);
    }

    pub fn path_for(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(format!("{}.ppm", id)))
    }

    pub fn get(&self, id: &str) -> Result<Tensor> {
        load_image(self, id)
    }

    /// Loads and caches every listed id.
    pub fn preload<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in ids {
            if !self.cache.contains_key(id) {
                let t = load_image(self, id)?;
                self.cache.insert(id.to_string(), t);
            }
        }
        Ok(())
    }
}

pub fn load_image(store: &ImageStore, image_id: &str) -> Result<Tensor> {
    if let Some(t) = store.cache.get(image_id) {
        return Ok(t.clone());
    }
    let path = store.path_for(image_id).ok_or_else(|| Error::Image {
        id: image_id.to_string(),
        msg: "not in store".into(),
    })?;
    let data = match fs::read(&path) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Image {
                id: image_id.to_string(),
                msg: format!("missing file {}", path.display()),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let img = decode_pnm(&data).map_err(|msg| Error::Image {
        id: image_id.to_string(),
        msg,
    })?;
    Ok(image_to_tensor(&img))
}
