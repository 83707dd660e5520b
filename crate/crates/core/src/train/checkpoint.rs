//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VXSCKPT\0" u32 version
//! u32 len, model config JSON
//! u32 count, then per parameter: u32 len, name, u32 rank, u32 extents[rank], f32 data
//! u32 count, then per batchnorm: u32 len, name, u32 C, f32 mean[C], f32 var[C], f64 momentum, f64 eps
//! u8 has_adam, then u64 t and f32 m, v per parameter in parameter order
//! u64 seed, u64 epoch
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub seed: u64,
    pub epoch: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &Model<f32>, adam: Option<&AdamState<f32>>, seed: u64, epoch: u64) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.bytes(serde_json::to_string(model.config()).expect("config serializes").as_bytes());
    w.u32(model.params().len());
    for p in model.params().iter() {
        w.bytes(p.name.as_bytes());
        w.u32(p.value.rank());
        for &e in p.value.shape() {
            w.u32(e);
        }
        w.f32s(p.value.data());
    }
    w.u32(model.batchnorm_states().len());
    for (name, s) in model.batchnorm_states() {
        w.bytes(name.as_bytes());
        w.u32(s.channels());
        w.f32s(&s.running_mean);
        w.f32s(&s.running_var);
        w.0.extend(s.momentum.to_le_bytes());
        w.0.extend(s.eps.to_le_bytes());
    }
    match adam {
        Some(a) => {
            w.0.push(1);
            w.u64(a.t);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.f32s(m.data());
                w.f32s(v.data());
            }
        }
        None => w.0.push(0),
    }
    w.u64(seed);
    w.u64(epoch);
    w.0
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, adam: Option<&AdamState<f32>>, seed: u64, epoch: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, seed, epoch);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated at byte offset {}: need {n} bytes, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, format!("invalid UTF-8 at byte offset {at}")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn err(&self, msg: String) -> Error {
        Error::format(self.path, format!("{msg} (byte offset {})", self.pos))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic at byte offset 0"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let cfg_text = r.string()?;
    let config: ModelConfig = serde_json::from_str(&cfg_text).map_err(|e| r.err(format!("bad model config: {e}")))?;
    let mut model = build_model::<f32>(&config, 0)?;
    let n = r.u32()?;
    if n != model.params().len() {
        return Err(r.err(format!("{n} parameters stored, config defines {}", model.params().len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = r.f32s(len)?;
        let at = r.pos;
        let p = model
            .params_mut()
            .get_mut(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name:?} before byte offset {at}")))?;
        if p.value.shape() != shape {
            return Err(Error::format(
                path,
                format!("parameter {name} has shape {shape:?}, expected {:?}", p.value.shape()),
            ));
        }
        p.value = Tensor::new(&shape, data)?;
    }
    let n = r.u32()?;
    if n != model.batchnorm_states().len() {
        return Err(r.err(format!("{n} batchnorm states stored, config defines {}", model.batchnorm_states().len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let c = r.u32()?;
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        let (momentum, eps) = (r.f64()?, r.f64()?);
        let at = r.pos;
        let slot = model
            .batchnorm_states_mut()
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(path, format!("unknown batchnorm {name:?} before byte offset {at}")))?;
        if slot.1.channels() != c {
            return Err(Error::format(path, format!("batchnorm {name} has {c} channels, expected {}", slot.1.channels())));
        }
        slot.1.running_mean = mean;
        slot.1.running_var = var;
        slot.1.momentum = momentum;
        slot.1.eps = eps;
    }
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut st = AdamState::new(model.params());
            for i in 0..model.params().len() {
                let len = model.params().at(i).value.len();
                let m = r.f32s(len)?;
                let v = r.f32s(len)?;
                st.m[i].data_mut().copy_from_slice(&m);
                st.v[i].data_mut().copy_from_slice(&v);
            }
            st.t = t;
            Some(st)
        }
        b => return Err(r.err(format!("bad optimizer flag {b}"))),
    };
    let seed = r.u64()?;
    let epoch = r.u64()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, adam, seed, epoch })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
