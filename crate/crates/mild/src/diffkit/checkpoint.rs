//! Parameter checkpoint file.
//!
//! Layout: magic `"MLDP"`, `u32` entry count, one spec block per entry, then
//! `u64` value count followed by the flat `f64` little-endian payload. Spec
//! blocks start with a kind byte: `0` for an MLP (head byte, `u32` width
//! count, widths) and `1` for a matrix (`u32` rows, cols).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DiffError, EntryKind, Head, ModelParams, NetSpec, ParamLayout};

const MAGIC: [u8; 4] = *b"MLDP";
const KIND_MLP: u8 = 0;
const KIND_MATRIX: u8 = 1;
const MAX_VALUES: u64 = 1 << 32;

pub fn save_checkpoint<P: AsRef<Path>>(path: P, params: &ModelParams) -> Result<(), DiffError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    let entries = params.layout().entries();
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for entry in entries {
        match &entry.kind {
            EntryKind::Mlp(spec) => {
                out.write_all(&[KIND_MLP])?;
                out.write_all(&[match spec.head {
                    Head::Linear => 0u8,
                    Head::Softmax => 1u8,
                }])?;
                out.write_all(&(spec.widths.len() as u32).to_le_bytes())?;
                for &w in &spec.widths {
                    out.write_all(&(w as u32).to_le_bytes())?;
                }
            }
            EntryKind::Matrix { rows, cols } => {
                out.write_all(&[KIND_MATRIX])?;
                out.write_all(&(*rows as u32).to_le_bytes())?;
                out.write_all(&(*cols as u32).to_le_bytes())?;
            }
        }
    }
    out.write_all(&(params.values().len() as u64).to_le_bytes())?;
    for &v in params.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), DiffError> {
    input
        .read_exact(buf)
        .map_err(|_| DiffError::Truncated(what.to_string()))
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    read_exact_or(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<ModelParams, DiffError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DiffError::BadMagic);
    }
    let entry_count = read_u32(&mut input, "entry count")?;
    let mut layout = ParamLayout::new();
    for e in 0..entry_count {
        let mut kind = [0u8; 1];
        read_exact_or(&mut input, &mut kind, "entry kind")?;
        match kind[0] {
            KIND_MLP => {
                let mut head = [0u8; 1];
                read_exact_or(&mut input, &mut head, "head byte")?;
                let head = match head[0] {
                    0 => Head::Linear,
                    1 => Head::Softmax,
                    other => {
                        return Err(DiffError::Corrupt(format!("unknown head byte {other}")))
                    }
                };
                let width_count = read_u32(&mut input, "width count")? as usize;
                if width_count < 2 || width_count > 64 {
                    return Err(DiffError::Corrupt(format!(
                        "implausible width count {width_count}"
                    )));
                }
                let mut widths = Vec::with_capacity(width_count);
                for _ in 0..width_count {
                    widths.push(read_u32(&mut input, "width")? as usize);
                }
                let spec = NetSpec::new(widths, head)
                    .map_err(|e| DiffError::Corrupt(format!("bad net spec in entry {e}")))?;
                layout.register_net(spec);
            }
            KIND_MATRIX => {
                let rows = read_u32(&mut input, "rows")? as usize;
                let cols = read_u32(&mut input, "cols")? as usize;
                if rows == 0 || cols == 0 {
                    return Err(DiffError::Corrupt("zero matrix dimension".into()));
                }
                layout.register_matrix(rows, cols);
            }
            other => {
                return Err(DiffError::Corrupt(format!(
                    "unknown entry kind {other} at entry {e}"
                )))
            }
        }
    }
    let mut count_bytes = [0u8; 8];
    read_exact_or(&mut input, &mut count_bytes, "value count")?;
    let count = u64::from_le_bytes(count_bytes);
    if count > MAX_VALUES {
        return Err(DiffError::Corrupt(format!("value count {count} too large")));
    }
    if count as usize != layout.total_len() {
        return Err(DiffError::Corrupt(format!(
            "payload declares {count} values, layout expects {}",
            layout.total_len()
        )));
    }
    let mut values = Vec::with_capacity(count as usize);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact_or(&mut input, &mut buf, "payload")?;
        values.push(f64::from_le_bytes(buf));
    }
    ModelParams::from_parts(layout, values)
}
