//! Portable float maps.
//!
//! Header `PF` (three channels) or `Pf` (one channel), then `width height`,
//! then the scale, whose sign gives the byte order (negative = little-endian).
//! Rows are stored bottom to top as 32-bit floats.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use polguide::Image;

#[derive(Debug, thiserror::Error)]
pub enum PfmError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a PFM file: {0}")]
    Format(String),
    #[error("PFM supports 1 or 3 channels, got {0}")]
    Channels(usize),
}

pub fn write<W: Write>(out: &mut W, img: &Image) -> Result<(), PfmError> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(PfmError::Channels(c)),
    };
    write!(out, "{tag}\n{} {}\n-1.0\n", img.width(), img.height())?;
    let row_len = img.width() * img.channels();
    let mut buf = Vec::with_capacity(row_len * 4);
    for row in (0..img.height()).rev() {
        buf.clear();
        for v in &img.data()[row * row_len..(row + 1) * row_len] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn token<R: BufRead>(r: &mut R) -> Result<String, PfmError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 64 {
            return Err(PfmError::Format("header token too long".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| PfmError::Format("non-ASCII header".into()))
}

pub fn read<R: Read>(input: R) -> Result<Image, PfmError> {
    let mut r = BufReader::new(input);
    let channels = match token(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(PfmError::Format(format!("bad magic {other:?}"))),
    };
    let num = |s: String, what: &str| -> Result<usize, PfmError> {
        s.parse()
            .map_err(|_| PfmError::Format(format!("bad {what} {s:?}")))
    };
    let width = num(token(&mut r)?, "width")?;
    let height = num(token(&mut r)?, "height")?;
    let scale: f64 = token(&mut r)?
        .parse()
        .map_err(|_| PfmError::Format("bad scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PfmError::Format("zero scale".into()));
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut raw = vec![0u8; row_len * height * 4];
    r.read_exact(&mut raw)
        .map_err(|_| PfmError::Format("truncated pixel data".into()))?;
    let mut data = vec![0.0; row_len * height];
    for (file_row, chunk) in raw.chunks_exact(row_len * 4).enumerate() {
        let row = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b: [u8; 4] = b.try_into().expect("4 bytes");
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            data[row * row_len + i] = v as f64;
        }
    }
    Ok(Image::from_vec(height, width, channels, data).expect("sized"))
}

pub fn save(path: &Path, img: &Image) -> Result<(), PfmError> {
    let mut f = BufWriter::new(File::create(path)?);
    write(&mut f, img)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Image, PfmError> {
    read(File::open(path)?)
}
