// SPDX-License-Identifier: Apache-2.0

//! Little-endian helpers shared by the binary file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8], what: &'static str) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| truncated(what, e))?;
    if &buf != magic {
        return Err(Error::BadHeader {
            what,
            detail: format!(
                "magic {:?} != {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    Ok(())
}

pub fn truncated(what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated(what.to_string())
    } else {
        Error::RawIo(e)
    }
}

pub fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| truncated(what, e))?;
    Ok(out)
}

pub fn write_u32s<W: Write>(w: &mut W, xs: &[u32]) -> Result<()> {
    for &x in xs {
        w.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_u32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u32>> {
    let mut out = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut out)
        .map_err(|e| truncated(what, e))?;
    Ok(out)
}

pub fn read_bytes<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut out = vec![0u8; n];
    r.read_exact(&mut out).map_err(|e| truncated(what, e))?;
    Ok(out)
}

/// Fails when `r` has bytes left over.
pub fn expect_eof<R: Read>(r: &mut R, what: &'static str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::BadHeader {
            what,
            detail: "trailing bytes after payload".into(),
        }),
    }
}
