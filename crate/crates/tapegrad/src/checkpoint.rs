//! Binary checkpoint container: a versioned header followed by named float64
//! arrays with explicit shapes. Round trips are bit-exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TGCP"
//! version u32      currently 1
//! count   u64      number of entries
//! entry*  { name_len u32, name bytes (utf-8), rank u32, dims u64 * rank,
//!           values f64 * prod(dims) }
//! ```
//!
//! [`write_to`] / [`read_from`] expose the same payload over arbitrary
//! streams so callers can embed parameter blocks inside larger containers.

use crate::{Array, KernelError, ParamStore};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TGCP";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> KernelError {
    KernelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes every parameter of the store to `w` in the container layout.
pub fn write_to<W: Write>(store: &ParamStore, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, param) in store.iter() {
        let value = param.value();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes every parameter of the store. The write is atomic: data goes to a
/// sibling temp file first and is renamed into place.
pub fn save(store: &ParamStore, path: &Path) -> Result<(), KernelError> {
    let tmp = path.with_extension("tmp-checkpoint");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write_to(store, &mut w)
            .and_then(|()| w.flush())
            .map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Parses a parameter block from `r`. `context` labels the source in errors
/// (a path for files, any description for embedded streams).
pub fn read_from<R: Read>(r: &mut R, context: &str) -> Result<Vec<(String, Array)>, KernelError> {
    let io = |e: std::io::Error| KernelError::Io {
        path: context.to_string(),
        source: e,
    };

    fn take<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }

    let magic: [u8; 4] = take(r).map_err(io)?;
    if &magic != MAGIC {
        return Err(KernelError::Format(format!(
            "bad magic {magic:?} in {context}"
        )));
    }
    let version = u32::from_le_bytes(take(r).map_err(io)?);
    if version != VERSION {
        return Err(KernelError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u64::from_le_bytes(take(r).map_err(io)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(r).map_err(io)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| KernelError::Format("non-utf8 parameter name".into()))?;
        let rank = u32::from_le_bytes(take(r).map_err(io)?) as usize;
        if !(1..=3).contains(&rank) {
            return Err(KernelError::Format(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(r).map_err(io)?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(r).map_err(io)?));
        }
        out.push((name, Array::new(&shape, data)));
    }
    Ok(out)
}

/// Reads a checkpoint into a fresh list of (name, array) pairs in file order.
pub fn read(path: &Path) -> Result<Vec<(String, Array)>, KernelError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    read_from(&mut r, &path.display().to_string())
}

/// Installs previously read entries into an existing store. Every entry must
/// name a known parameter with a matching shape, and every parameter must be
/// covered.
pub fn apply(store: &ParamStore, entries: Vec<(String, Array)>) -> Result<(), KernelError> {
    let mut seen = 0usize;
    for (name, value) in entries {
        let param = store
            .get(&name)
            .ok_or_else(|| KernelError::MissingParam(name.clone()))?;
        if param.value().shape() != value.shape() {
            return Err(KernelError::ShapeMismatch {
                name,
                expected: param.value().shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        param.set(value);
        seen += 1;
    }
    if seen != store.len() {
        return Err(KernelError::Format(format!(
            "checkpoint covers {seen} of {} parameters",
            store.len()
        )));
    }
    Ok(())
}

/// Loads a checkpoint file into an existing store via [`read`] + [`apply`].
pub fn load_into(store: &ParamStore, path: &Path) -> Result<(), KernelError> {
    apply(store, read(path)?)
}
