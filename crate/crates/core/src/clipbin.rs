//! CLIPBIN: a minimal binary container for one clip.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CLB1"
//! 4       4     frames   (u32)
//! 8       4     height   (u32)
//! 12      4     width    (u32)
//! 16      4     channels (u32)
//! 20      4*N   N = frames*height*width*channels f32 values,
//!               row-major over (frame, row, col, channel)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampling_grid::Clip;

pub const MAGIC: &[u8; 4] = b"CLB1";

pub fn write_clip<W: Write>(mut w: W, clip: &Clip) -> Result<()> {
    w.write_all(MAGIC)?;
    for d in [clip.frames, clip.height, clip.width, clip.channels] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(clip.data.len() * 4);
    for v in &clip.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_clip<R: Read>(mut r: R) -> Result<Clip> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing CLIPBIN header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad CLIPBIN magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated CLIPBIN header: {e}")))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("CLIPBIN dimensions overflow".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated CLIPBIN payload ({n} values expected): {e}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after CLIPBIN payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Clip::new(dims[0], dims[1], dims[2], dims[3], data)
}

pub fn save(path: impl AsRef<Path>, clip: &Clip) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Clip> {
    read_clip(BufReader::new(File::open(path)?))
}
