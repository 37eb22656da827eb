//! Little-endian helpers shared by the `.rffb`, `.rksm` and `.frds` readers.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn truncated(what: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &'static str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated("magic"))?;
    if buf != magic.as_bytes() {
        return Err(Error::BadMagic { expected: magic });
    }
    Ok(())
}

pub(crate) fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    r.read_u8().map_err(truncated(what))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(truncated(what))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(truncated(what))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(truncated(what))
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(truncated(what))?;
    Ok(out)
}

pub(crate) fn read_u32_vec<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u32>> {
    let mut out = vec![0u32; len];
    r.read_u32_into::<LittleEndian>(&mut out)
        .map_err(truncated(what))?;
    Ok(out)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    for v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}
