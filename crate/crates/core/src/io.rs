//! Binary float matrix files.
//!
//! Layout: three little-endian `u32` header fields `rows cols extra`, then
//! `rows * cols` little-endian floats. Frame streams store `f32` payloads with
//! the sample rate in `extra`; full-precision tensors store `f64` payloads
//! with `extra = 64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `extra` header value marking a 64-bit payload.
pub const F64_MARKER: u32 = 64;

fn write_header<W: Write>(w: &mut W, rows: usize, cols: usize, extra: u32) -> std::io::Result<()> {
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    w.write_all(&extra.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R) -> std::io::Result<(usize, usize, u32)> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let extra = read_u32(r)?;
    Ok((rows, cols, extra))
}

/// Writes `m` as 32-bit floats with `extra` in the third header slot.
pub fn write_f32_matrix<W: Write>(w: &mut W, m: &Matrix, extra: u32) -> std::io::Result<()> {
    write_header(w, m.rows(), m.cols(), extra)?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_matrix<R: Read>(r: &mut R) -> std::io::Result<(Matrix, u32)> {
    let (rows, cols, extra) = read_header(r)?;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Matrix::from_vec(rows, cols, data), extra))
}

pub fn write_f64_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    write_header(w, m.rows(), m.cols(), F64_MARKER)?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let (rows, cols, extra) = read_header(r).map_err(|e| Error::io("tensor header", e))?;
    if extra != F64_MARKER {
        return Err(Error::Data(format!(
            "expected 64-bit tensor marker {F64_MARKER}, found {extra}"
        )));
    }
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io("tensor payload", e))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Frame stream: `T x F` features at a nominal sample rate.
pub fn write_frame_stream(path: &Path, frames: &Matrix, sample_rate: u32) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_f32_matrix(&mut w, frames, sample_rate)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_frame_stream(path: &Path) -> Result<(Matrix, u32)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_f32_matrix(&mut BufReader::new(file)).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_stream_header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.25, 4.0], vec![0.0, 1.0]]);
        let mut buf = Vec::new();
        write_f32_matrix(&mut buf, &m, 16000).unwrap();
        assert_eq!(buf.len(), 12 + 6 * 4);
        assert_eq!(&buf[0..4], &3u32.to_le_bytes());
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &16000u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        let (back, sr) = read_f32_matrix(&mut buf.as_slice()).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(back, m);
    }

    #[test]
    fn f64_tensor_is_exact() {
        let m = Matrix::from_rows(&[vec![0.1, 1.0 / 3.0, -1e-300]]);
        let mut buf = Vec::new();
        write_f64_matrix(&mut buf, &m).unwrap();
        assert_eq!(read_f64_matrix(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn f64_reader_rejects_f32_payload() {
        let mut buf = Vec::new();
        write_f32_matrix(&mut buf, &Matrix::zeros(1, 1), 100).unwrap();
        assert!(read_f64_matrix(&mut buf.as_slice()).is_err());
    }
}
