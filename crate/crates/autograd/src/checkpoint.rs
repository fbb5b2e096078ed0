//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SBVK"
//! version    u32      FORMAT_VERSION
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u64 × rank
//!   payload  f64 × Π extents
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{AutogradError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SBVK";
pub const FORMAT_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutogradError::Format(msg.into()))
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> AutogradError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        AutogradError::Format("truncated checkpoint".into())
    } else {
        AutogradError::Io(e)
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return format_err(format!("bad magic {magic:?}"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| AutogradError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0; n * 8];
        r.read_exact(&mut payload).map_err(truncated)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| AutogradError::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0; 1];
    if r.read(&mut rest)? != 0 {
        return format_err("trailing bytes after last tensor");
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &named)?;
    write_atomic(path, &buf)?;
    Ok(())
}

/// Loads values into an existing store. Names and shapes must match exactly.
pub fn load_params(path: &Path, params: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path)?;
    let tensors = read_tensors(bytes.as_slice())?;
    if tensors.len() != params.len() {
        return format_err(format!(
            "{}: checkpoint has {} tensors, model has {}",
            path.display(),
            tensors.len(),
            params.len()
        ));
    }
    for (name, t) in tensors {
        let Some(id) = params.id(&name) else {
            return format_err(format!("{}: unknown tensor {name}", path.display()));
        };
        let p = params.get_mut(id);
        if p.value.shape() != t.shape() {
            return format_err(format!(
                "{}: tensor {name} has shape {:?}, model expects {:?}",
                path.display(),
                t.shape(),
                p.value.shape()
            ));
        }
        p.value = t;
    }
    Ok(())
}
