//! On-disk formats.

mod docs;
mod lhad;

pub use docs::*;
pub use lhad::{decode_dump, encode_dump, read_dump, write_dump, MAGIC, VERSION};
