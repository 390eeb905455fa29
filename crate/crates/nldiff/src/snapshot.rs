//! On-disk field snapshots.
//!
//! Layout (little-endian): magic `NLDF`, version u16, ndim u8, per-axis size
//! u64 x ndim, spacing f64, extent f64, time f64, field name (u16 length +
//! ASCII bytes), then the payload as f64 values in axis-major order (last
//! axis fastest). Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{NldError, Result};
use crate::lattice::{Field, Grid};

pub const MAGIC: &[u8; 4] = b"NLDF";
pub const VERSION: u16 = 1;

pub fn write_snapshot(field: &Field, name: &str, path: &Path) -> Result<()> {
    if !name.is_ascii() {
        return Err(NldError::Format(format!(
            "field name `{name}` is not ASCII"
        )));
    }
    if name.len() > u16::MAX as usize {
        return Err(NldError::Format("field name too long".into()));
    }
    let grid = &field.grid;
    let mut out = Vec::with_capacity(64 + field.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(grid.dim() as u8);
    for _ in 0..grid.dim() {
        out.extend_from_slice(&(grid.points_per_axis() as u64).to_le_bytes());
    }
    out.extend_from_slice(&grid.spacing().to_le_bytes());
    out.extend_from_slice(&grid.extent().to_le_bytes());
    out.extend_from_slice(&field.time_tag.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for v in &field.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(Field, String)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(NldError::Format(format!(
                "truncated snapshot: wanted {n} bytes at offset {pos:?}, file has {}",
                buf.len()
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(NldError::Format(format!(
            "bad magic {magic:?}; expected {MAGIC:?}"
        )));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(NldError::Format(format!(
            "unsupported snapshot version {version} (this build reads {VERSION})"
        )));
    }
    let ndim = take(&mut pos, 1)?[0] as usize;
    if ndim == 0 || ndim > 3 {
        return Err(NldError::Format(format!("bad dimension {ndim}")));
    }
    let mut sizes = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        sizes.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
    }
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(NldError::Format(format!(
            "anisotropic grids are not supported (sizes {sizes:?})"
        )));
    }
    let _spacing = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let extent = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let time = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
        .map_err(|_| NldError::Format("field name is not valid ASCII".into()))?;
    let count: usize = sizes.iter().product();
    let payload = take(&mut pos, count * 8)?;
    if pos != buf.len() {
        return Err(NldError::Format(format!(
            "trailing {} bytes after payload",
            buf.len() - pos
        )));
    }
    let grid = Arc::new(Grid::custom(ndim, sizes[0], extent)?);
    let mut field = Field::zeros(&grid);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        field.values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    field.time_tag = Some(time);
    Ok((field, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nldf");
        let grid = Arc::new(Grid::custom(3, 17, 4.0).unwrap());
        let mut f = Field::zeros(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for v in f.values.iter_mut() {
            *v = rng.gen::<f64>() * 1e3 - 500.0;
        }
        f.time_tag = Some(12.25);
        write_snapshot(&f, "u", &path).unwrap();
        let (g, name) = read_snapshot(&path).unwrap();
        assert_eq!(name, "u");
        assert_eq!(g.time_tag, Some(12.25));
        assert_eq!(g.grid.points_per_axis(), 17);
        for (a, b) in f.values.iter().zip(&g.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nldf");
        let grid = Arc::new(Grid::custom(3, 9, 2.0).unwrap());
        let f = Field::constant(&grid, 1.0);
        write_snapshot(&f, "u", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_snapshot(&path), Err(NldError::Format(_))));
    }

    #[test]
    fn version_and_magic_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nldf");
        let grid = Arc::new(Grid::custom(3, 9, 2.0).unwrap());
        let f = Field::constant(&grid, 1.0);
        write_snapshot(&f, "u", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version LE low byte
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshot(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(NldError::Format(_))));
    }
}
