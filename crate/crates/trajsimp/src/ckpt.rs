//! Single-file model container: a JSON metadata header (model kind plus
//! whatever structural description the model needs to rebuild itself)
//! followed by one or more named parameter sections in the tapegrad
//! checkpoint layout. Round trips are bit-exact; writes are atomic.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic    4 bytes  "TSMC"
//! version  u32      currently 1
//! kind_len u32, kind bytes (utf-8)
//! meta_len u64, meta bytes (JSON)
//! count    u32      number of parameter sections
//! section* { name_len u32, name bytes, tapegrad parameter block }
//! ```

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use tapegrad::{checkpoint, Array, ParamStore};

const MAGIC: &[u8; 4] = b"TSMC";
const VERSION: u32 = 1;

/// Writes a model container. `sections` pairs a section name with the
/// parameter store it snapshots; order is preserved.
pub fn save_model<M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    sections: &[(&str, &ParamStore)],
) -> Result<()> {
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::Contract(format!("unserializable model metadata: {e}")))?;
    let tmp = path.with_extension("tmp-model");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(kind.len() as u32).to_le_bytes())?;
            w.write_all(kind.as_bytes())?;
            w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
            w.write_all(&meta_bytes)?;
            w.write_all(&(sections.len() as u32).to_le_bytes())?;
            for (name, store) in sections {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                checkpoint::write_to(store, &mut w)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A parsed model container awaiting reconstruction.
pub struct LoadedModel {
    pub kind: String,
    pub meta: serde_json::Value,
    sections: Vec<(String, Vec<(String, Array)>)>,
}

impl LoadedModel {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "model file holds a '{}' model, expected '{kind}'",
                self.kind
            )))
        }
    }

    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Contract(format!("model metadata does not parse: {e}")))
    }

    /// Removes a section by name so its entries can be applied to a store.
    pub fn take_section(&mut self, name: &str) -> Result<Vec<(String, Array)>> {
        let pos = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Contract(format!("model file has no '{name}' section")))?;
        Ok(self.sections.remove(pos).1)
    }

    /// Applies a named section to `store`; every parameter must be covered.
    pub fn apply_section(&mut self, name: &str, store: &ParamStore) -> Result<()> {
        let entries = self.take_section(name)?;
        checkpoint::apply(store, entries).map_err(Error::Kernel)
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let bad = |msg: String| Error::Parse {
        path: path.display().to_string(),
        message: msg,
    };

    fn take<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn take_string(r: &mut impl Read, len: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }

    let magic: [u8; 4] = take(&mut r).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a model file")));
    }
    let version = u32::from_le_bytes(take(&mut r).map_err(io)?);
    if version != VERSION {
        return Err(bad(format!("unsupported model container version {version}")));
    }
    let kind_len = u32::from_le_bytes(take(&mut r).map_err(io)?) as usize;
    let kind = String::from_utf8(take_string(&mut r, kind_len).map_err(io)?)
        .map_err(|_| bad("non-utf8 model kind".into()))?;
    let meta_len = u64::from_le_bytes(take(&mut r).map_err(io)?) as usize;
    let meta_bytes = take_string(&mut r, meta_len).map_err(io)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| bad(format!("metadata json: {e}")))?;
    let count = u32::from_le_bytes(take(&mut r).map_err(io)?) as usize;
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r).map_err(io)?) as usize;
        let name = String::from_utf8(take_string(&mut r, name_len).map_err(io)?)
            .map_err(|_| bad("non-utf8 section name".into()))?;
        let entries = checkpoint::read_from(&mut r, &format!("{} [{name}]", path.display()))
            .map_err(Error::Kernel)?;
        sections.push((name, entries));
    }
    Ok(LoadedModel { kind, meta, sections })
}
