//! Shared helpers for the little-endian container formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::ReadBytesExt;

use crate::error::{Error, Result};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn finish<W: Write>(path: &Path, mut w: W) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|_| Error::format("magic", "file shorter than magic bytes"))?;
    if &got != magic {
        return Err(Error::format(
            "magic",
            format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            ),
        ));
    }
    Ok(())
}

/// Maps a short read onto a truncation error naming `field`.
pub(crate) fn truncated(field: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(field, "truncated payload")
        } else {
            Error::format(field, e.to_string())
        }
    }
}

pub(crate) fn read_u8<R: Read>(r: &mut R, field: &'static str) -> Result<u8> {
    r.read_u8().map_err(truncated(field))
}

/// Errors if any bytes remain after the declared payload.
pub(crate) fn expect_eof<R: Read>(r: &mut R, field: &'static str) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(field, "trailing bytes after payload")),
        Err(e) => Err(Error::format(field, e.to_string())),
    }
}
