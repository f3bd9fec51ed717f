//! Binary checkpoints: parameters, momentum buffers, running statistics,
//! iteration counter and RNG positions, all little-endian and fixed width.
//!
//! Layout: `DCTR`, u32 version, u8 model kind, u32-length config JSON,
//! u64 iteration, then counted sections of tensors, scalars and RNG states.
//! Strings carry a u16 length prefix.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DeepCtrNet, NetConfig, ParamGroup, PretrainHead, Slot};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCTR";
pub const FORMAT_VERSION: u32 = 1;

/// Suffix marking the momentum buffer of a parameter.
const MOMENTUM_SUFFIX: &str = "#momentum";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Click model.
    DeepCtr,
    /// Conv stack plus classification head.
    Pretrain,
    /// Logistic regression on basic features.
    Lr,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::DeepCtr => 1,
            ModelKind::Pretrain => 2,
            ModelKind::Lr => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(ModelKind::DeepCtr),
            2 => Ok(ModelKind::Pretrain),
            3 => Ok(ModelKind::Lr),
            _ => Err(Error::Format(format!("unknown model kind {}", c))),
        }
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Serialized model configuration.
    pub config: String,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub scalars: Vec<(String, f64)>,
    pub rngs: Vec<(String, RngState)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, config: String, iteration: u64) -> Self {
        Checkpoint {
            kind,
            config,
            iteration,
            tensors: Vec::new(),
            scalars: Vec::new(),
            rngs: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn rng(&self, name: &str) -> Option<ChaCha8Rng> {
        self.rngs.iter().find(|(n, _)| n == name).map(|(_, r)| r.restore())
    }

    pub fn set_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        self.rngs.retain(|(n, _)| n != name);
        self.rngs.push((name.to_string(), RngState::capture(rng)));
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.scalars.retain(|(n, _)| n != name);
        self.scalars.push((name.to_string(), v));
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        serde_json::from_str(&self.config).map_err(|e| Error::Format(format!("checkpoint config: {}", e)))
    }

    /// Adds every parameter (with momentum) and buffer reached by `visit`.
    pub fn capture(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, ParamGroup, Slot<'_>))) {
        let tensors = &mut self.tensors;
        visit(&mut |name, _, slot| match slot {
            Slot::Param(p) => {
                tensors.push((name.to_string(), p.value.clone()));
                tensors.push((format!("{}{}", name, MOMENTUM_SUFFIX), p.momentum.clone()));
            }
            Slot::Buffer(b) => tensors.push((name.to_string(), b.clone())),
        });
    }

    /// Copies stored values into every slot reached by `visit` whose name
    /// passes `keep`. Every such slot must be present with a matching shape.
    pub fn apply(
        &self,
        keep: impl Fn(&str) -> bool,
        visit: impl FnOnce(&mut dyn FnMut(&str, ParamGroup, Slot<'_>)),
    ) -> Result<()> {
        let mut err = None;
        let mut fetch = |name: &str, dst: &mut Tensor| {
            if err.is_some() {
                return;
            }
            match self.tensor(name) {
                Some(t) if t.shape() == dst.shape() => *dst = t.clone(),
                Some(t) => {
                    err = Some(Error::Format(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        name,
                        t.shape(),
                        dst.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("missing tensor {}", name))),
            }
        };
        visit(&mut |name, _, slot| {
            if !keep(name) {
                return;
            }
            match slot {
                Slot::Param(p) => {
                    fetch(name, &mut p.value);
                    fetch(&format!("{}{}", name, MOMENTUM_SUFFIX), &mut p.momentum);
                    p.zero_grad();
                }
                Slot::Buffer(b) => fetch(name, b),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Snapshot of a click model, including its dropout stream.
    pub fn from_deepctr(net: &mut DeepCtrNet, iteration: u64) -> Self {
        let config = serde_json::to_string(&net.cfg).expect("config serializes");
        let mut c = Checkpoint::new(ModelKind::DeepCtr, config, iteration);
        c.capture(|f| net.visit(f));
        c.set_rng("dropout", &net.dropout_rng);
        c
    }

    /// Rebuilds the click model stored in this checkpoint.
    pub fn to_deepctr(&self) -> Result<DeepCtrNet> {
        if self.kind != ModelKind::DeepCtr {
            return Err(Error::Format(format!("expected a click model, found {:?}", self.kind)));
        }
        let cfg = self.net_config()?;
        let (mut net, _) = crate::network::build_networks(&cfg, 0)?;
        self.apply(|_| true, |f| net.visit(f))?;
        net.dropout_rng = self
            .rng("dropout")
            .ok_or_else(|| Error::Format("missing dropout stream".into()))?;
        Ok(net)
    }

    /// Snapshot of the conv stack and classification head.
    pub fn from_pretrain(net: &mut DeepCtrNet, head: &mut PretrainHead, iteration: u64) -> Result<Self> {
        let config = serde_json::to_string(&net.cfg).expect("config serializes");
        let mut c = Checkpoint::new(ModelKind::Pretrain, config, iteration);
        let mut p = net.pretrain_net(head)?;
        c.capture(|f| p.visit(f));
        Ok(c)
    }

    /// Loads pretrained conv weights into a click model (and the head, if
    /// given). The conv stack shapes must agree.
    pub fn load_pretrained(&self, net: &mut DeepCtrNet, head: Option<&mut PretrainHead>) -> Result<()> {
        if self.kind != ModelKind::Pretrain {
            return Err(Error::Format(format!(
                "expected a pretrained conv stack, found {:?}",
                self.kind
            )));
        }
        let conv = net
            .convnet_mut()
            .ok_or_else(|| Error::invalid("model has no conv stack"))?;
        self.apply(|_| true, |f| conv.visit("conv", f))?;
        if let Some(h) = head {
            self.apply(|_| true, |f| h.visit(f))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.push(self.kind.code());
        w.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        w.extend_from_slice(self.config.as_bytes());
        w.extend_from_slice(&self.iteration.to_le_bytes());

        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut w, name);
            w.push(t.ndim() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str(&mut w, name);
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (name, r) in &self.rngs {
            put_str(&mut w, name);
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        w
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {} unsupported (expected {})",
                version, FORMAT_VERSION
            )));
        }
        let kind = ModelKind::from_code(r.take(1)?[0])?;
        let len = r.u32()? as usize;
        let config =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let iteration = r.u64()?;
        let mut c = Checkpoint::new(kind, config, iteration);

        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= data.len() / 8)
                .ok_or_else(|| Error::Format(format!("tensor {} too large for the file", name)))?;
            let bytes = r.take(n * 8)?;
            let values = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            c.tensors.push((name, Tensor::new(&shape, values)?));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            c.scalars.push((name, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            c.rngs.push((name, RngState { seed, stream, word_pos }));
        }
        if r.pos != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                data.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&data)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("checkpoint names are short");
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}
