//! Binary and CSV file formats.
//!
//! - `HSC1` cube: magic `"HSC1"`, then `u32` T, H, W, L (little-endian), then
//!   `T*H*W*L` `f32` values in `(t, h, w, l)` row-major order.
//! - `HSA1` abundance stack: magic `"HSA1"`, then `u32` T, N, P, then `f32`
//!   payload in `(t, n, p)` order.
//! - Endmember matrix: CSV, one row per endmember, L columns, `.` decimal
//!   separator, no header.
//!
//! Payloads are single precision; in-memory values are double precision.
//! Reading widens losslessly, so write-then-read of a file-sourced value is
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AbundanceStack, HsiError, SequenceCube};

const CUBE_MAGIC: [u8; 4] = *b"HSC1";
const ABUNDANCE_MAGIC: [u8; 4] = *b"HSA1";

/// Hard cap on declared element counts; anything above it is treated as a
/// corrupt header rather than an allocation request.
const MAX_ELEMENTS: u64 = 1 << 33;

fn write_header<W: Write>(out: &mut W, magic: &[u8; 4], dims: &[u32]) -> Result<(), HsiError> {
    out.write_all(magic)?;
    for &d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32_payload<W: Write>(out: &mut W, values: &[f64]) -> Result<(), HsiError> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_magic<R: Read>(input: &mut R, expected: [u8; 4]) -> Result<(), HsiError> {
    let mut found = [0u8; 4];
    input.read_exact(&mut found).map_err(|_| HsiError::Truncated {
        declared: 4,
        available: 0,
    })?;
    if found != expected {
        return Err(HsiError::BadMagic { expected, found });
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, HsiError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| HsiError::Truncated {
        declared: 4,
        available: 0,
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_payload<R: Read>(input: &mut R, count: u64) -> Result<Vec<f64>, HsiError> {
    if count > MAX_ELEMENTS {
        return Err(HsiError::DimOverflow(format!(
            "header declares {count} values, cap is {MAX_ELEMENTS}"
        )));
    }
    let mut bytes = vec![0u8; (count * 4) as usize];
    let mut filled = 0usize;
    while filled < bytes.len() {
        match input.read(&mut bytes[filled..]) {
            Ok(0) => {
                return Err(HsiError::Truncated {
                    declared: count,
                    available: (filled / 4) as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(HsiError::Io(e)),
        }
    }
    let mut values = Vec::with_capacity(count as usize);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(HsiError::NonFinite(format!(
                "payload value at index {}",
                values.len()
            )));
        }
        values.push(v);
    }
    Ok(values)
}

/// Write a cube in `HSC1` format. Values are rounded to `f32`.
pub fn write_cube<P: AsRef<Path>>(path: P, cube: &SequenceCube) -> Result<(), HsiError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(
        &mut out,
        &CUBE_MAGIC,
        &[
            cube.t_count() as u32,
            cube.height() as u32,
            cube.width() as u32,
            cube.bands() as u32,
        ],
    )?;
    write_f32_payload(&mut out, cube.values())?;
    out.flush()?;
    Ok(())
}

/// Read a cube from `HSC1` format.
pub fn read_cube<P: AsRef<Path>>(path: P) -> Result<SequenceCube, HsiError> {
    let mut input = BufReader::new(File::open(path)?);
    read_magic(&mut input, CUBE_MAGIC)?;
    let t = read_u32(&mut input)? as u64;
    let h = read_u32(&mut input)? as u64;
    let w = read_u32(&mut input)? as u64;
    let l = read_u32(&mut input)? as u64;
    let count = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| HsiError::DimOverflow("cube header element count overflows u64".into()))?;
    let values = read_f32_payload(&mut input, count)?;
    SequenceCube::new(t as usize, h as usize, w as usize, l as usize, values)
}

/// Write an abundance stack in `HSA1` format. Values are rounded to `f32`.
pub fn write_abundance<P: AsRef<Path>>(path: P, a: &AbundanceStack) -> Result<(), HsiError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(
        &mut out,
        &ABUNDANCE_MAGIC,
        &[
            a.t_count() as u32,
            a.pixel_count() as u32,
            a.endmember_count() as u32,
        ],
    )?;
    write_f32_payload(&mut out, a.values())?;
    out.flush()?;
    Ok(())
}

/// Read an abundance stack from `HSA1` format.
pub fn read_abundance<P: AsRef<Path>>(path: P) -> Result<AbundanceStack, HsiError> {
    let mut input = BufReader::new(File::open(path)?);
    read_magic(&mut input, ABUNDANCE_MAGIC)?;
    let t = read_u32(&mut input)? as u64;
    let n = read_u32(&mut input)? as u64;
    let p = read_u32(&mut input)? as u64;
    let count = t
        .checked_mul(n)
        .and_then(|v| v.checked_mul(p))
        .ok_or_else(|| HsiError::DimOverflow("abundance header element count overflows u64".into()))?;
    let values = read_f32_payload(&mut input, count)?;
    AbundanceStack::new(t as usize, n as usize, p as usize, values)
}

/// Write one endmember matrix (`rows x bands`, row-major) as CSV.
pub fn write_endmember_csv<P: AsRef<Path>>(
    path: P,
    matrix: &[f64],
    bands: usize,
) -> Result<(), HsiError> {
    if bands == 0 || matrix.len() % bands != 0 {
        return Err(HsiError::DimensionMismatch(format!(
            "matrix of {} values is not a multiple of {bands} bands",
            matrix.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for row in matrix.chunks_exact(bands) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read an endmember matrix from CSV; returns `(values, rows, bands)`.
pub fn read_endmember_csv<P: AsRef<Path>>(path: P) -> Result<(Vec<f64>, usize, usize), HsiError> {
    let input = BufReader::new(File::open(path)?);
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut bands = 0usize;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| HsiError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if rows == 0 {
            bands = row.len();
        } else if row.len() != bands {
            return Err(HsiError::Parse(format!(
                "line {}: expected {bands} columns, found {}",
                lineno + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(HsiError::NonFinite(format!("CSV line {}", lineno + 1)));
        }
        values.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(HsiError::Parse("empty endmember CSV".into()));
    }
    Ok((values, rows, bands))
}
