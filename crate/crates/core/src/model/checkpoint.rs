//! Bit-exact model persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RDAE" | version: u32 | config_len: u32 | config TOML (UTF-8)
//! record_count: u32
//! repeated record: name_len: u32 | name | rank: u32 | extents: u32 × rank | f32 × prod(extents)
//! crc32 of everything above: u32
//! ```
//!
//! Records hold every trainable parameter in the model's stable order, then
//! each batch-norm layer's running mean and variance. Structure is validated
//! first (so truncation is reported as such), then the checksum over the whole
//! prefix, then values are installed into a model rebuilt from the embedded
//! config.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"RDAE";
pub const FORMAT_VERSION: u32 = 1;

fn crc32_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC-32 (IEEE), the common zip/PNG polynomial.
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

/// Name a batch-norm layer by its gamma parameter, e.g. `enc0.u0.bn1`.
fn bn_record_name(gamma_name: &str) -> &str {
    gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name)
}

fn push_record(buf: &mut Vec<u8>, name: &str, extents: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for &e in extents {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model (parameters + batch-norm running stats) to bytes.
pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config())
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let params = model.parameters();
    let bns = model.batch_norms();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let record_count = params.len() + 2 * bns.len();
    buf.extend_from_slice(&(record_count as u32).to_le_bytes());
    for p in params {
        push_record(&mut buf, p.name(), p.value().shape(), p.value().data());
    }
    for bn in bns {
        let name = bn_record_name(bn.gamma().name()).to_owned();
        let (mean, var) = bn.running_stats();
        push_record(&mut buf, &format!("{name}.running_mean"), &[mean.len()], mean);
        push_record(&mut buf, &format!("{name}.running_var"), &[var.len()], var);
    }
    let checksum = crc32(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok(buf)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { section }.into());
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn take_u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

struct Record {
    name: String,
    extents: Vec<usize>,
    values: Vec<f32>,
}

fn read_record(cur: &mut Cursor) -> Result<Record> {
    let name_len = cur.take_u32("record header")? as usize;
    if name_len > 4096 {
        return Err(CheckpointError::BadParameter {
            name: "<unnamed>".into(),
            detail: format!("record name length {name_len} is implausible"),
        }
        .into());
    }
    let name = std::str::from_utf8(cur.take(name_len, "record name")?)
        .map_err(|_| CheckpointError::BadParameter {
            name: "<unnamed>".into(),
            detail: "record name is not UTF-8".into(),
        })?
        .to_owned();
    let rank = cur.take_u32("record shape")? as usize;
    if rank > 8 {
        return Err(CheckpointError::BadParameter {
            name,
            detail: format!("rank {rank} is implausible"),
        }
        .into());
    }
    let mut extents = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let e = cur.take_u32("record shape")? as usize;
        extents.push(e);
        len = len.saturating_mul(e);
    }
    if len.saturating_mul(4) > cur.remaining() {
        return Err(CheckpointError::Truncated { section: "record values" }.into());
    }
    let raw = cur.take(len * 4, "record values")?;
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Record { name, extents, values })
}

fn install(record: &Record, expected_name: &str, expected_shape: &[usize]) -> Result<()> {
    if record.name != expected_name {
        return Err(CheckpointError::BadParameter {
            name: record.name.clone(),
            detail: format!("expected record `{expected_name}` at this position"),
        }
        .into());
    }
    if record.extents != expected_shape {
        return Err(CheckpointError::BadParameter {
            name: record.name.clone(),
            detail: format!("shape {:?} does not match model shape {expected_shape:?}", record.extents),
        }
        .into());
    }
    Ok(())
}

/// Parses checkpoint bytes; verifies structure, checksum, then rebuilds the
/// model and installs every parameter and running-stat record.
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = cur.take_u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let config_len = cur.take_u32("config")? as usize;
    let config_raw = std::str::from_utf8(cur.take(config_len, "config")?)
        .map_err(|_| CheckpointError::BadConfig("config blob is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(config_raw).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    let record_count = cur.take_u32("record count")? as usize;
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        records.push(read_record(&mut cur)?);
    }
    if cur.remaining() < 4 {
        return Err(CheckpointError::Truncated { section: "checksum" }.into());
    }
    let stored = u32::from_le_bytes([
        bytes[bytes.len() - 4],
        bytes[bytes.len() - 3],
        bytes[bytes.len() - 2],
        bytes[bytes.len() - 1],
    ]);
    if crc32(&bytes[..bytes.len() - 4]) != stored {
        return Err(CheckpointError::ChecksumMismatch.into());
    }

    // Structure and checksum are good; rebuild and install.
    let mut model = Model::build(config, &mut RngState::new(0))?;
    let expected = {
        let params = model.parameters();
        params.len() + 2 * model.batch_norms().len()
    };
    if records.len() != expected {
        return Err(CheckpointError::BadParameter {
            name: "<records>".into(),
            detail: format!("file has {} records, model needs {expected}", records.len()),
        }
        .into());
    }
    let mut it = records.iter();
    for p in model.parameters_mut() {
        let rec = it.next().expect("count checked");
        install(rec, p.name(), p.value().shape())?;
        p.value_mut().data_mut().copy_from_slice(&rec.values);
    }
    for bn in model.batch_norms_mut() {
        let name = bn_record_name(bn.gamma().name()).to_owned();
        let c = bn.channels();
        let mean = it.next().expect("count checked");
        install(mean, &format!("{name}.running_mean"), &[c])?;
        let var = it.next().expect("count checked");
        install(var, &format!("{name}.running_var"), &[c])?;
        bn.set_running_stats(&mean.values, &var.values)?;
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
