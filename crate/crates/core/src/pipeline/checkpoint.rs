//! Little-endian checkpoint files.
//!
//! Layout: the 8-byte magic, a `u32` length and `key=value` text block with
//! the model configuration and optimizer settings, the counters (`u64` epoch,
//! `f64` validation loss, `u64` Adam step), a `u32` record count, then one
//! record per tensor: `u32` name length, UTF-8 name, `u8` dtype code, `u8`
//! rank, `u32` extents, raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"MRNSEG01";
const MAGIC_FAMILY: &[u8; 6] = b"MRNSEG";

/// A model snapshot with the optimizer state needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub epoch: u64,
    pub val_loss: f64,
}

pub fn config_to_text(cfg: &ModelConfig) -> String {
    format!(
        "kind={}\nresolutions={}\ndepth={}\nbase_channels={}\ninput_size={}\nin_channels={}\ninput_level={}\n",
        cfg.kind,
        cfg.resolutions,
        cfg.depth,
        cfg.base_channels,
        cfg.input_size,
        cfg.in_channels,
        cfg.input_level
    )
}

fn parse_kv(text: &str) -> Result<BTreeMap<&str, &str>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Format(format!("malformed config line '{l}'")))
        })
        .collect()
}

fn get<V: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<V> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing config key '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value for '{key}': {raw}")))
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let kv = parse_kv(text)?;
    let kind: String = get(&kv, "kind")?;
    Ok(ModelConfig {
        kind: kind.parse().map_err(|_| Error::Format(format!("unknown model kind '{kind}'")))?,
        resolutions: get(&kv, "resolutions")?,
        depth: get(&kv, "depth")?,
        base_channels: get(&kv, "base_channels")?,
        input_size: get(&kv, "input_size")?,
        in_channels: get(&kv, "in_channels")?,
        input_level: get(&kv, "input_level")?,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: Shape, data: &[T]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(4);
    for d in shape.dims() {
        put_u32(out, d);
    }
    for &v in data {
        v.write_le(out);
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let a = self.adam.config;
        let text = format!(
            "{}adam_eta={:?}\nadam_beta1={:?}\nadam_beta2={:?}\nadam_eps={:?}\nbn_ready={}\n",
            config_to_text(self.model.config()),
            a.eta,
            a.beta1,
            a.beta2,
            a.eps,
            self.model.stats_ready()
        );
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());

        let params = &self.model.params;
        let count = 3 * params.len() + 2 * self.model.stats.len();
        put_u32(&mut out, count);
        for p in params.iter() {
            put_tensor(&mut out, &p.name, p.value.shape(), p.value.data());
        }
        for s in &self.model.stats {
            put_tensor(&mut out, &format!("{}.running_mean", s.name), s.shape(), &s.mean);
            put_tensor(&mut out, &format!("{}.running_var", s.name), s.shape(), &s.var);
        }
        for (p, m) in params.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("adam.m.{}", p.name), m.shape(), m.data());
        }
        for (p, v) in params.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("adam.v.{}", p.name), v.shape(), v.data());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, None)
    }

    /// Loads into the architecture described by `expected`, failing with a
    /// shape error on the first tensor that does not fit it.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, Some(expected))
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_FAMILY) {
                return Err(Error::Version {
                    found: String::from_utf8_lossy(magic).into_owned(),
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(Error::Format("not a checkpoint file (bad magic bytes)".into()));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let stored = config_from_text(text)?;
        let kv = parse_kv(text)?;
        let adam_config = AdamConfig {
            eta: get(&kv, "adam_eta")?,
            beta1: get(&kv, "adam_beta1")?,
            beta2: get(&kv, "adam_beta2")?,
            eps: get(&kv, "adam_eps")?,
        };
        let bn_ready: bool = get(&kv, "bn_ready")?;
        let epoch = r.u64()?;
        let val_loss = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let t = r.u64()?;

        let count = r.u32()?;
        let mut records: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::Format(format!("tensor '{name}': unknown dtype code")))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| {
                Error::Format(format!("tensor '{name}': size overflow"))
            })?)?;
            let values = decode::<T>(dtype, raw);
            records.insert(name, (dims, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }

        let config = expected.copied().unwrap_or(stored);
        let mut model = Model::<T>::build(config, 0)?;
        let mut take = |name: &str, shape: Shape| -> Result<Vec<T>> {
            let (dims, values) = records
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
            let want = shape.dims().to_vec();
            if dims != want {
                return Err(Error::TensorShape {
                    name: name.to_string(),
                    found: dims,
                    expected: want,
                });
            }
            Ok(values)
        };
        for p in model.params.iter_mut() {
            let values = take(&p.name, p.value.shape())?;
            p.value = Tensor::from_vec(p.value.shape(), values)?;
        }
        for s in &mut model.stats {
            s.mean = take(&format!("{}.running_mean", s.name), s.shape())?;
            s.var = take(&format!("{}.running_var", s.name), s.shape())?;
            s.initialized = bn_ready;
        }
        let mut adam = AdamState::new(adam_config, &model.params);
        adam.t = t;
        for (i, p) in model.params.iter().enumerate() {
            let shape = p.value.shape();
            adam.m[i] = Tensor::from_vec(shape, take(&format!("adam.m.{}", p.name), shape)?)?;
            adam.v[i] = Tensor::from_vec(shape, take(&format!("adam.v.{}", p.name), shape)?)?;
        }
        if let Some(name) = records.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{name}'")));
        }
        Ok(Checkpoint {
            model,
            adam,
            epoch,
            val_loss,
        })
    }
}

fn decode<T: Scalar>(dtype: DType, raw: &[u8]) -> Vec<T> {
    match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: wanted {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
