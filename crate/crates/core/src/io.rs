//! Serialization for tensors: a small binary container and CSV for
//! matrices and vectors.
//!
//! Binary container layout, all little-endian:
//!
//! ```text
//! u64 rank | u64 extent[0] .. extent[rank-1] | f32 data[..]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write a tensor in the binary container format.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor from the binary container format.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u64(r)? as usize;
    if rank == 0 || rank > 32 {
        return Err(Error::Parse(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f32; len];
    let mut buf = [0u8; 4];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor::new(&shape, data)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Write a tensor to a file in the binary container format.
pub fn write_tensor_file<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Read a tensor from a file in the binary container format.
pub fn read_tensor_file<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Render a rank-1 or rank-2 tensor as CSV. Values use the shortest
/// representation that round-trips exactly.
pub fn tensor_to_csv(t: &Tensor) -> Result<String> {
    let (rows, cols) = match *t.shape() {
        [n] => (1, n),
        [m, n] => (m, n),
        _ => {
            return Err(Error::Dimension(format!(
                "CSV supports rank 1 or 2, got {:?}",
                t.shape()
            )))
        }
    };
    let mut out = String::new();
    for i in 0..rows {
        let row = &t.data()[i * cols..(i + 1) * cols];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Parse CSV into a rank-2 tensor (one line becomes a `1 x n` matrix).
pub fn tensor_from_csv(s: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|e| {
                Error::Parse(format!("line {}: {:?}: {}", lineno + 1, field, e))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("empty CSV".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse("ragged CSV rows".into()));
    }
    let m = rows.len();
    Tensor::new(&[m, cols], rows.into_iter().flatten().collect())
}
