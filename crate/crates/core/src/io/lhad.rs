//! LHAD: one attention dump per file.
//!
//! ```text
//! magic      4 bytes  "LHAD"
//! version    u16      1
//! grid_size  u16
//! num_layers u16
//! num_heads  u16
//! id_len     u32, then id_len bytes of UTF-8 sample id
//! image_w    u32
//! image_h    u32
//! text_len   u32, then text_len bytes of UTF-8 text
//! payload    num_layers * num_heads * grid_size^2 f32
//! ```
//!
//! Integers and floats are little-endian. The payload is layer-major, then
//! head-major, then row-major within each map.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{validate_dump, AttentionDump, AttnMap};

pub const MAGIC: [u8; 4] = *b"LHAD";
pub const VERSION: u16 = 1;

pub fn encode_dump(dump: &AttentionDump) -> Vec<u8> {
    let p = dump.grid_size();
    let floats = dump.num_layers() * dump.num_heads() * p * p;
    let mut buf = Vec::with_capacity(32 + dump.sample_id().len() + dump.text().len() + 4 * floats);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for n in [p, dump.num_layers(), dump.num_heads()] {
        buf.extend_from_slice(&(n as u16).to_le_bytes());
    }
    buf.extend_from_slice(&(dump.sample_id().len() as u32).to_le_bytes());
    buf.extend_from_slice(dump.sample_id().as_bytes());
    buf.extend_from_slice(&dump.image_width().to_le_bytes());
    buf.extend_from_slice(&dump.image_height().to_le_bytes());
    buf.extend_from_slice(&(dump.text().len() as u32).to_le_bytes());
    buf.extend_from_slice(dump.text().as_bytes());
    for map in dump.maps() {
        for v in map.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn write_dump(dump: &AttentionDump, path: &Path) -> Result<()> {
    let p = dump.grid_size();
    if p > u16::MAX as usize || dump.num_layers() > u16::MAX as usize || dump.num_heads() > u16::MAX as usize {
        return Err(Error::format(path, "grid, layer or head count exceeds 16 bits"));
    }
    fs::write(path, encode_dump(dump)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                section,
                expected: n as u64,
                actual: left as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn string(&mut self, section: &'static str) -> Result<String> {
        let len = self.u32(section)? as usize;
        let raw = self.take(len, section)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, format!("{section} is not valid UTF-8")))
    }
}

/// Parses an in-memory LHAD file. `path` is used only for error messages.
pub fn decode_dump(bytes: &[u8], path: &Path, strict: bool) -> Result<AttentionDump> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic });
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: version });
    }
    let p = r.u16("header")? as usize;
    let layers = r.u16("header")? as usize;
    let heads = r.u16("header")? as usize;
    let sample_id = r.string("sample_id")?;
    let image_w = r.u32("header")?;
    let image_h = r.u32("header")?;
    let text = r.string("text")?;
    if p == 0 || layers == 0 || heads == 0 {
        return Err(Error::format(path, format!("zero dimension: grid {p}, {layers} layers, {heads} heads")));
    }

    let cells = p * p;
    let payload = r.take(4 * layers * heads * cells, "payload")?;
    let trailing = bytes.len() - r.pos;
    if trailing > 0 {
        return Err(Error::TrailingBytes { path: path.to_path_buf(), count: trailing as u64 });
    }
    let maps = payload
        .chunks_exact(4 * cells)
        .map(|chunk| {
            let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            AttnMap::new(p, values)
        })
        .collect::<Result<Vec<_>>>()?;
    let dump = AttentionDump::new(sample_id, p, layers, heads, maps, image_w, image_h, text)?;
    if strict {
        let violations = validate_dump(&dump);
        if !violations.is_empty() {
            return Err(Error::StrictValidation {
                path: path.to_path_buf(),
                violations: violations.iter().map(ToString::to_string).collect(),
            });
        }
    }
    Ok(dump)
}

pub fn read_dump(path: &Path, strict: bool) -> Result<AttentionDump> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes, path, strict)
}
