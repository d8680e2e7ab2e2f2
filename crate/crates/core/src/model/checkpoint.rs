//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "QSDT" | u32 version | u32 len + settings text | u64 seed | u128 word_pos
//! | u8 fused | u32 entries | entry*
//! entry: u16 len + name | u8 kind | u8 rank | u32 dims[rank] | payload
//!   kind 0 (f32):       f32 values
//!   kind 1 (quantized): u8 bits | f32 scale | i8 codes
//! ```
//!
//! Latent weights are stored as `f32`; the integer codes of quantized weights
//! are stored alongside as `<layer>.weight_q` and checked on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{FusedAffine, WeightLayer};
use crate::model::config::{ModelConfig, Settings};
use crate::model::Model;
use crate::quant::{QuantSpec, QuantizedWeight};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QSDT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    Dense(Vec<usize>, Vec<f32>),
    Quantized(Vec<usize>, u8, f32, Vec<i8>),
}

/// A loaded checkpoint: the model plus the settings and RNG state it was saved with.
#[derive(Clone, Debug)]
pub struct Checkpoint<T = f32> {
    pub model: Model<T>,
    pub settings: Settings,
    pub rng: Rng,
}

fn dense<T: Real>(t: &Tensor<T>) -> Entry {
    Entry::Dense(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64() as f32).collect())
}

fn layer_entries<T: Real>(l: &WeightLayer<T>, out: &mut Vec<(String, Entry)>) -> Result<()> {
    let n = &l.name;
    out.push((format!("{n}.weight"), dense(&l.weight.value)));
    if let Some(q) = l.quantized()? {
        let s = q.spec();
        out.push((
            format!("{n}.weight_q"),
            Entry::Quantized(q.shape().to_vec(), s.bits(), s.scale().as_f64() as f32, q.codes().to_vec()),
        ));
    }
    if let Some(s) = &l.step {
        out.push((format!("{n}.step"), dense(&s.value)));
    }
    if let Some(b) = &l.bias {
        out.push((format!("{n}.bias"), dense(&b.value)));
    }
    if let Some(r) = &l.norm {
        out.push((format!("{n}.gamma"), dense(&r.gamma.value)));
        out.push((format!("{n}.shift"), dense(&r.shift.value)));
        out.push((format!("{n}.running_mean"), dense(&r.running_mean)));
        out.push((format!("{n}.running_std"), dense(&r.running_std)));
    }
    if let Some(f) = &l.fused {
        out.push((format!("{n}.fused_weight"), dense(&f.weight)));
        out.push((format!("{n}.fused_bias"), dense(&f.bias)));
    }
    Ok(())
}

/// Serialize a model, the settings it was trained with and an RNG state.
pub fn to_bytes<T: Real>(model: &Model<T>, settings: &Settings, rng: &Rng) -> Result<Vec<u8>> {
    let mut settings = settings.clone();
    model.config.store(&mut settings)?;
    let mut entries = Vec::new();
    for l in model.layers() {
        layer_entries(l, &mut entries)?;
    }
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let text = settings.to_string();
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    let (seed, pos) = rng.state();
    b.extend_from_slice(&seed.to_le_bytes());
    b.extend_from_slice(&pos.to_le_bytes());
    b.push(model.is_fused() as u8);
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, e) in &entries {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        let shape = match e {
            Entry::Dense(s, _) => {
                b.push(0);
                s
            }
            Entry::Quantized(s, ..) => {
                b.push(1);
                s
            }
        };
        b.push(shape.len() as u8);
        for &d in shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match e {
            Entry::Dense(_, v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            Entry::Quantized(_, bits, scale, codes) => {
                b.push(*bits);
                b.extend_from_slice(&scale.to_le_bytes());
                b.extend(codes.iter().map(|&c| c as u8));
            }
        }
    }
    Ok(b)
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, settings: &Settings, rng: &Rng) -> Result<()> {
    fs::write(path, to_bytes(model, settings, rng)?)?;
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn tensor<T: Real>(entries: &mut BTreeMap<String, Entry>, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    match entries.remove(name) {
        Some(Entry::Dense(s, v)) if s == shape => Tensor::new(s, v.into_iter().map(|x| T::c(x as f64)).collect()),
        Some(Entry::Dense(s, _)) => Err(Error::format(format!("{name}: stored shape {s:?}, model expects {shape:?}"))),
        Some(Entry::Quantized(..)) => Err(Error::format(format!("{name}: expected a dense tensor"))),
        None => Err(Error::format(format!("checkpoint has no tensor {name}"))),
    }
}

fn restore_layer<T: Real>(l: &mut WeightLayer<T>, e: &mut BTreeMap<String, Entry>, fused: bool) -> Result<()> {
    let n = l.name.clone();
    l.weight.value = tensor(e, &format!("{n}.weight"), l.weight.value.shape())?;
    if let Some(s) = &mut l.step {
        s.value = tensor(e, &format!("{n}.step"), &[1])?;
    }
    if let Some(b) = &mut l.bias {
        b.value = tensor(e, &format!("{n}.bias"), b.value.shape())?;
    }
    if let Some(r) = &mut l.norm {
        let c = [r.channels()];
        r.gamma.value = tensor(e, &format!("{n}.gamma"), &c)?;
        r.shift.value = tensor(e, &format!("{n}.shift"), &c)?;
        r.running_mean = tensor(e, &format!("{n}.running_mean"), &c)?;
        r.running_std = tensor(e, &format!("{n}.running_std"), &c)?;
    }
    if let Some(q) = l.quantized()? {
        match e.remove(&format!("{n}.weight_q")) {
            Some(Entry::Quantized(shape, bits, scale, codes)) => {
                let stored = QuantizedWeight::from_codes(shape, codes, QuantSpec::new(bits, T::c(scale as f64))?)?;
                if stored.codes() != q.codes() || stored.spec().bits() != q.spec().bits() {
                    return Err(Error::format(format!("{n}: stored integer codes disagree with the latent weights")));
                }
            }
            _ => return Err(Error::format(format!("checkpoint has no quantized entry {n}.weight_q"))),
        }
    }
    if fused {
        let shape = l.weight.value.shape().to_vec();
        let weight = tensor(e, &format!("{n}.fused_weight"), &shape)?;
        let bias = tensor(e, &format!("{n}.fused_bias"), &[l.c_out()])?;
        l.fused = Some(FusedAffine { weight, bias });
    }
    Ok(())
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4).map_err(|_| Error::format("file too short for a checkpoint"))? != MAGIC {
        return Err(Error::format("bad magic: not a QSDT checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}; this build reads version {VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("settings blob is not UTF-8"))?;
    let settings = Settings::parse(text).map_err(|e| Error::format(format!("settings blob: {e}")))?;
    let rng = Rng::from_state(r.u64()?, r.u128()?);
    let fused = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::format(format!("fused flag {f}"))),
    };
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let nl = r.u16()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let e = match kind {
            0 => Entry::Dense(shape, (0..n).map(|_| r.f32()).collect::<Result<_>>()?),
            1 => {
                let bits = r.u8()?;
                let scale = r.f32()?;
                let codes = r.take(n)?.iter().map(|&c| c as i8).collect();
                Entry::Quantized(shape, bits, scale, codes)
            }
            k => return Err(Error::format(format!("{name}: unknown entry kind {k}"))),
        };
        entries.insert(name, e);
    }
    if r.at != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after the tensor table", bytes.len() - r.at)));
    }
    let config = ModelConfig::from_settings(&settings).map_err(|e| Error::format(format!("stored config: {e}")))?;
    let mut model = Model::<T>::build(&config, &mut Rng::new(0))?;
    for l in model.layers_mut() {
        restore_layer(l, &mut entries, fused)?;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::format(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, settings, rng })
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Mode;
    use crate::ste::ClipRound;

    fn model() -> (Model<f32>, Settings) {
        let mut s = Settings::default();
        for kv in ["model.height=8", "model.width=8", "model.stem_channels=4", "model.dim=16", "model.heads=2", "model.classes=3"] {
            s.apply_override(kv).unwrap();
        }
        let cfg = ModelConfig::from_settings(&s).unwrap();
        let mut rng = Rng::new(3);
        let mut m = Model::build(&cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.normal() as f32);
        m.forward(&x, Mode::Train, &mut ClipRound::exact()).unwrap();
        (m, s)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut m, s) = model();
        let rng = Rng::from_state(7, 1234);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        for fused in [false, true] {
            if fused {
                m.fuse().unwrap();
            }
            let bytes = to_bytes(&m, &s, &rng).unwrap();
            let mut back = from_bytes::<f32>(&bytes).unwrap();
            assert_eq!(back.rng.state(), (7, 1234));
            assert_eq!(back.model.is_fused(), fused);
            let a = m.forward(&x, Mode::Eval, &mut ClipRound::exact()).unwrap().logits;
            let b = back.model.forward(&x, Mode::Eval, &mut ClipRound::exact()).unwrap().logits;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let (m, s) = model();
        let bytes = to_bytes(&m, &s, &Rng::new(0)).unwrap();
        let fmt = |b: &[u8]| matches!(from_bytes::<f32>(b), Err(Error::Format(_)));
        assert!(fmt(&bytes[..bytes.len() - 3]));
        assert!(fmt(&bytes[..10]));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(fmt(&bad));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        match from_bytes::<f32>(&v2) {
            Err(Error::Format(m)) => assert!(m.contains("version 2")),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(fmt(&extra));
    }
}
