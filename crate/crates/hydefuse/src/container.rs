//! HSB container: the on-disk interchange format for images.
//!
//! An HSB file is a single JSON header line followed by raw little-endian
//! `f64` samples:
//!
//! ```text
//! {"magic":"HSB1","rows":R,"cols":C,"bands":B,"dtype":"f64"}\n
//! <R*C*B little-endian f64 values>
//! ```
//!
//! Samples are band-major: band 0's `R*C` values in row-major spatial order,
//! then band 1, and so on. That matches the column-major layout of the
//! in-memory pixel-by-band matrix, so serialization is a straight copy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{HsiImage, SpatialDims};

const MAGIC: &str = "HSB1";
const DTYPE: &str = "f64";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    rows: usize,
    cols: usize,
    bands: usize,
    dtype: String,
}

/// Writes `img` to `writer` in HSB form.
pub fn write_hsb_to<W: Write>(writer: &mut W, img: &HsiImage) -> Result<()> {
    let header = Header {
        magic: MAGIC.to_string(),
        rows: img.rows(),
        cols: img.cols(),
        bands: img.bands(),
        dtype: DTYPE.to_string(),
    };
    let header_json =
        serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(header_json.as_bytes())?;
    writer.write_all(b"\n")?;
    // Column-major matrix storage is exactly the band-major sample order.
    for v in img.data().as_slice() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads an HSB image from `reader`, validating the header and payload size.
pub fn read_hsb_from<R: Read>(reader: &mut R) -> Result<HsiImage> {
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format("missing header line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(Error::Format("header line exceeds 4096 bytes".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            header.magic, MAGIC
        )));
    }
    if header.dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported dtype {:?}, expected {:?}",
            header.dtype, DTYPE
        )));
    }
    let pixels = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| Error::Format("pixel count overflows".into()))?;
    let count = pixels
        .checked_mul(header.bands)
        .ok_or_else(|| Error::Format("sample count overflows".into()))?;
    if count == 0 {
        return Err(Error::Format("image must have at least one sample".into()));
    }

    let mut payload = vec![0u8; count * 8];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated payload, expected {count} samples"))
        } else {
            Error::Io(e)
        }
    })?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }

    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("payload contains non-finite values".into()));
    }
    let data = DMatrix::from_column_slice(pixels, header.bands, &values);
    HsiImage::new(SpatialDims::new(header.rows, header.cols), data)
}

/// Writes an image to a file at `path`.
pub fn write_hsb<P: AsRef<Path>>(path: P, img: &HsiImage) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_hsb_to(&mut writer, img)?;
    writer.flush()?;
    Ok(())
}

/// Reads an image from the file at `path`.
pub fn read_hsb<P: AsRef<Path>>(path: P) -> Result<HsiImage> {
    let mut reader = BufReader::new(File::open(path)?);
    read_hsb_from(&mut reader)
}
