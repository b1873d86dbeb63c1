//! PCD1: little-endian binary container for one dataset split.
//!
//! ```text
//! "PCD1" | count: u64 | points: u64 | classes: u64
//! count × ( label: u64 | points × 3 × f32 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, PointCloud};
use crate::error::{Error, Result};

pub const PCD_MAGIC: &[u8; 4] = b"PCD1";

pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    w.write_all(PCD_MAGIC)?;
    for v in [data.len(), data.points, data.num_classes] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for c in &data.clouds {
        w.write_all(&(c.label as u64).to_le_bytes())?;
        for v in c.points.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("PCD1 container", format!("reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("PCD1 container", format!("reading magic: {e}")))?;
    if &magic != PCD_MAGIC {
        return Err(Error::format("PCD1 container", format!("bad magic {magic:?}")));
    }
    let count = read_u64(&mut r, "cloud count")? as usize;
    let points = read_u64(&mut r, "points per cloud")? as usize;
    let classes = read_u64(&mut r, "class count")? as usize;
    let cloud_bytes = points
        .checked_mul(12)
        .ok_or_else(|| Error::format("PCD1 container", "points per cloud overflows"))?;
    let mut clouds = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; cloud_bytes];
    for i in 0..count {
        let label = read_u64(&mut r, "label")? as usize;
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("PCD1 container", format!("cloud {i}: {e}")))?;
        let pts = buf
            .chunks_exact(12)
            .map(|p| [0, 1, 2].map(|d| f32::from_le_bytes(p[4 * d..4 * d + 4].try_into().expect("4 bytes"))))
            .collect();
        clouds.push(PointCloud { points: pts, label });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("PCD1 container", "trailing bytes after the last cloud"));
    }
    Dataset::new(clouds, classes, points)
}

pub fn write_dataset_file(data: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|source| Error::Path {
        path: path.to_owned(),
        source,
    })?;
    write_dataset(data, BufWriter::new(f))
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|source| Error::Path {
        path: path.to_owned(),
        source,
    })?;
    read_dataset(BufReader::new(f))
}
