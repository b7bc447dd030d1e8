//! Versioned binary checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "MGCK"
//! version      u32      1
//! seed         u64      run seed
//! next_iter    u64      first plan record not yet applied
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! momentum     f64
//! weight_decay f64
//! n_tensors    u32
//! n_tensors x:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f32
//! ```
//!
//! Tensors appear in a fixed order: for each conv layer `i`,
//! `conv{i}.weight`, `bn{i}.gamma`, `bn{i}.beta`, `bn{i}.running_mean`,
//! `bn{i}.running_var`; then `fc.weight`, `fc.bias`; then one
//! `momentum.<name>` buffer per trainable tensor in the same order.
//! Batch randomness is keyed by `(seed, iter)`, so `seed` and `next_iter`
//! are the whole RNG state needed to resume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams, SgdState, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: SgdState<f32>,
    pub seed: u64,
    pub next_iter: u64,
}

fn trainable_names(layers: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..layers {
        names.push(format!("conv{i}.weight"));
        names.push(format!("bn{i}.gamma"));
        names.push(format!("bn{i}.beta"));
    }
    names.push("fc.weight".into());
    names.push("fc.bias".into());
    names
}

/// `(name, shape, data)` in file order.
fn entries(ck: &Checkpoint) -> Vec<(String, Vec<usize>, &[f32])> {
    let p = &ck.params;
    let mut out = Vec::new();
    for (i, (w, bn)) in p.convs.iter().zip(&p.bns).enumerate() {
        let c = vec![bn.channels()];
        out.push((format!("conv{i}.weight"), w.shape.clone(), &w.data[..]));
        out.push((format!("bn{i}.gamma"), c.clone(), &bn.gamma[..]));
        out.push((format!("bn{i}.beta"), c.clone(), &bn.beta[..]));
        out.push((format!("bn{i}.running_mean"), c.clone(), &bn.running_mean[..]));
        out.push((format!("bn{i}.running_var"), c, &bn.running_var[..]));
    }
    out.push(("fc.weight".into(), p.fc_w.shape.clone(), &p.fc_w.data[..]));
    out.push(("fc.bias".into(), vec![p.fc_b.len()], &p.fc_b[..]));
    let shapes = trainable_shapes(p);
    for ((name, shape), buf) in trainable_names(p.convs.len()).into_iter().zip(shapes).zip(&ck.optimizer.buffers) {
        out.push((format!("momentum.{name}"), shape, &buf[..]));
    }
    out
}

fn trainable_shapes(p: &ModelParams<f32>) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (w, bn) in p.convs.iter().zip(&p.bns) {
        out.push(w.shape.clone());
        out.push(vec![bn.channels()]);
        out.push(vec![bn.channels()]);
    }
    out.push(p.fc_w.shape.clone());
    out.push(vec![p.fc_b.len()]);
    out
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    if ck.optimizer.buffers.len() != ck.params.param_slices().len() {
        return Err(Error::Format("optimizer buffers do not match parameters".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ck.seed.to_le_bytes())?;
    w.write_all(&ck.next_iter.to_le_bytes())?;
    let cfg = serde_json::to_vec(&ck.params.config)?;
    put_u32(w, cfg.len())?;
    w.write_all(&cfg)?;
    w.write_all(&ck.optimizer.momentum.to_le_bytes())?;
    w.write_all(&ck.optimizer.weight_decay.to_le_bytes())?;
    let items = entries(ck);
    put_u32(w, items.len())?;
    for (name, shape, data) in items {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, shape.len())?;
        for &d in &shape {
            put_u32(w, d)?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        Ok(b)
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut b)?;
        if b.len() != n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        Ok(b)
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r };
    if &c.bytes::<4>("magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = c.u64("seed")?;
    let next_iter = c.u64("next_iter")?;
    let cfg_len = c.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(&c.vec(cfg_len, "config")?)?;
    let momentum = c.f64("momentum")?;
    let weight_decay = c.f64("weight_decay")?;

    // Build a skeleton with the right shapes and fill it in order.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::<f32>::init(&config, &mut rng)?;
    let optimizer = SgdState::new(&params, momentum, weight_decay);
    let mut ck = Checkpoint {
        params,
        optimizer,
        seed,
        next_iter,
    };
    let expected: Vec<(String, Vec<usize>)> = entries(&ck).into_iter().map(|(n, s, _)| (n, s)).collect();
    let n = c.u32("tensor count")?;
    if n != expected.len() {
        return Err(Error::Format(format!("expected {} tensors, found {n}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(n);
    for (name, shape) in &expected {
        let len = c.u32("tensor name length")?;
        let got = String::from_utf8(c.vec(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &got != name {
            return Err(Error::Format(format!("expected tensor {name}, found {got}")));
        }
        let ndim = c.u32(name)?;
        let dims = (0..ndim).map(|_| c.u32(name)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Format(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = dims.iter().product();
        let raw = c.vec(count * 4, name)?;
        loaded.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
    }
    let mut extra = [0u8; 1];
    if c.inner.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    let mut it = loaded.into_iter();
    let p = &mut ck.params;
    for (w, bn) in p.convs.iter_mut().zip(p.bns.iter_mut()) {
        w.data = it.next().unwrap();
        bn.gamma = it.next().unwrap();
        bn.beta = it.next().unwrap();
        bn.running_mean = it.next().unwrap();
        bn.running_var = it.next().unwrap();
    }
    p.fc_w = Tensor::from_vec(&p.fc_w.shape.clone(), it.next().unwrap())?;
    p.fc_b = it.next().unwrap();
    for buf in ck.optimizer.buffers.iter_mut() {
        *buf = it.next().unwrap();
    }
    Ok(ck)
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::<f32>::init(&ModelConfig::default(), &mut rng).unwrap();
        params.bns[1].running_mean[2] = 0.25;
        params.bns[0].running_var[0] = 4.0;
        let mut optimizer = SgdState::new(&params, 0.9, 1e-4);
        optimizer.buffers[0][5] = -1.5;
        Checkpoint {
            params,
            optimizer,
            seed: 77,
            next_iter: 1234,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ck).unwrap();
        assert_eq!(&bytes[..4], b"MGCK");
        assert_eq!(read_checkpoint(&bytes[..]).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(read_checkpoint(&v2[..]).unwrap_err().to_string().contains("version"));
    }
}
