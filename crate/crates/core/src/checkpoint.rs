//! Binary checkpoint format.
//!
//! ```text
//! "FTNN" | version u32 | descriptor_len u32 | descriptor utf-8
//! repeated: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | values f32 * numel
//! ```
//!
//! All integers and floats are little-endian. Parameters are written in name
//! order, so equal networks always serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::network::{Network, NetworkError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("descriptor and tensors disagree: {0}")]
    LengthMismatch(String),
    #[error("invalid utf-8 in {0}")]
    Utf8(&'static str),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = net.descriptor();
    put_str(&mut out, &desc);
    for (name, t) in net.params() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &'static str) -> Result<&'a str, CheckpointError> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| CheckpointError::Utf8(what))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("magic"));
    }
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let desc = r.string("descriptor")?;
    let (role, arch, input_shape, layers) = Network::<f32>::parse_descriptor(desc)?;

    let mut expected = BTreeMap::new();
    for l in &layers {
        if let (Some(ws), Some(bl)) = (l.kind.weight_shape(), l.kind.bias_len()) {
            expected.insert(l.weight_name(), ws);
            expected.insert(l.bias_name(), vec![bl]);
        }
    }

    let mut params = BTreeMap::new();
    while !r.done() {
        let name = r.string("parameter name")?.to_string();
        let rank = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("parameter dims")? as usize);
        }
        match expected.get(&name) {
            None => return Err(CheckpointError::LengthMismatch(format!("unexpected tensor `{name}`"))),
            Some(s) if *s != shape => {
                return Err(CheckpointError::LengthMismatch(format!(
                    "`{name}` stored as {shape:?}, descriptor implies {s:?}"
                )))
            }
            _ => {}
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "parameter values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data).map_err(NetworkError::from)?).is_some() {
            return Err(CheckpointError::LengthMismatch(format!("duplicate tensor `{name}`")));
        }
    }
    if params.len() != expected.len() {
        let missing: Vec<&String> = expected.keys().filter(|k| !params.contains_key(*k)).collect();
        return Err(CheckpointError::LengthMismatch(format!(
            "descriptor declares {} tensors, file holds {} (missing {missing:?})",
            expected.len(),
            params.len()
        )));
    }
    Ok(Network::from_parts(role, arch, input_shape, layers, params)?)
}

/// Writes through a sibling temporary file so a failed save leaves nothing behind.
pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(net);
    let tmp = path.with_extension("ftnn-partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
