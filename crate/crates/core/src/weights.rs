//! `DDWF` weight files. Byte layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "DDWF"
//! version      u16
//! config_len   u32, then config_len bytes of UTF-8 `key=value` lines
//! tensor_count u32
//! per tensor:
//!   name_len   u32, then name_len bytes of UTF-8
//!   rank       u8
//!   dims       rank x u32
//!   payload    product(dims) x f32
//! crc32        u32, IEEE CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{DermoNet, NetworkConfig};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDWF";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub version: u16,
    pub config: String,
    pub tensors: Vec<WeightTensor>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of weight data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl WeightFile {
    pub fn from_net(net: &DermoNet) -> Self {
        let mut tensors = Vec::new();
        net.visit("", &mut |name, p| {
            tensors.push(WeightTensor {
                name: name.to_string(),
                dims: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|&v| v as f32).collect(),
            })
        });
        WeightFile {
            version: VERSION,
            config: net.config.to_kv(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.version.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    /// Verifies the checksum before reading anything else.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 + 4 {
            return Err(Error::Format(format!("weight file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut c = Cursor { bytes: body, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let config = c.string()?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string()?;
            let rank = c.u8()? as usize;
            let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
            let payload = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
            let values = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(WeightTensor { name, dims, values });
        }
        if c.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - c.pos)));
        }
        Ok(WeightFile {
            version,
            config,
            tensors,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        NetworkConfig::from_kv(&self.config)
    }

    /// Builds the network the file describes; names and shapes must match
    /// the configuration's parameter list exactly.
    pub fn to_net(&self) -> Result<DermoNet> {
        let mut net = DermoNet::uninitialized(self.network_config()?)?;
        let expected = net.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "configuration needs {} tensors, file has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.dims {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match `{name}` {shape:?}",
                    t.name, t.dims
                )));
            }
            values.push(Tensor::new(shape, t.values.iter().map(|&v| v as f64).collect())?);
        }
        net.restore(&values)?;
        Ok(net)
    }
}

/// Identifier derived from the file checksum.
pub fn model_version(bytes: &[u8]) -> String {
    match bytes.len() {
        n if n >= 4 => format!("ddwf-{:08x}", u32::from_le_bytes(bytes[n - 4..].try_into().unwrap())),
        _ => "ddwf-unknown".into(),
    }
}

pub fn save_weights(net: &DermoNet, path: &Path) -> Result<()> {
    std::fs::write(path, WeightFile::from_net(net).to_bytes())?;
    Ok(())
}

/// The network and its model version string.
pub fn load_weights(path: &Path) -> Result<(DermoNet, String)> {
    let bytes = std::fs::read(path)?;
    let net = WeightFile::parse(&bytes)?.to_net()?;
    Ok((net, model_version(&bytes)))
}
