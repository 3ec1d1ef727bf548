//! `MSTF` clip-feature files.
//!
//! Little-endian layout: magic `MSTF`, u32 version (1), u32 clip count,
//! u32 dim, f32 clip seconds, u32 frames per clip, then `clips * dim` f32
//! values in row-major order.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{malformed, Error, Position, Result};
use crate::lattice::ClipGrid;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MSTF";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// Per-clip features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    grid: ClipGrid,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(grid: ClipGrid, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be positive".into()));
        }
        if values.len() != grid.num_clips() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} clips of dim {dim}",
                values.len(),
                grid.num_clips()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {i}")));
        }
        // The file stores clip seconds as f32.
        let secs = grid.clip_seconds() as f32 as f64;
        let grid = ClipGrid::with_frames(grid.num_clips(), secs, grid.frames_per_clip())?;
        Ok(Self { grid, dim, values })
    }

    pub fn grid(&self) -> &ClipGrid {
        &self.grid
    }

    pub fn num_clips(&self) -> usize {
        self.grid.num_clips()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, clip: usize) -> &[f32] {
        &self.values[clip * self.dim..(clip + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.num_clips(), self.dim], self.values.clone()).expect("validated shape")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN as usize + 4 * self.values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.num_clips(), "clip count")?.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.dim, "dim")?.to_le_bytes());
        buf.extend_from_slice(&(self.grid.clip_seconds() as f32).to_le_bytes());
        buf.extend_from_slice(&self.grid.frames_per_clip().to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one matrix; the whole input is validated before anything is
    /// returned, and trailing bytes are rejected.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "MSTF feature file";
        let at = |b: u64| Position::Byte(b);
        if bytes.len() < HEADER_LEN as usize {
            return Err(malformed(
                WHAT,
                at(bytes.len() as u64),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(malformed(WHAT, at(0), "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(malformed(WHAT, at(4), format!("unsupported version {version}")));
        }
        let clips = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        if clips == 0 {
            return Err(malformed(WHAT, at(8), "clip count is 0"));
        }
        if dim == 0 {
            return Err(malformed(WHAT, at(12), "dim is 0"));
        }
        let secs = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        if !(secs.is_finite() && secs > 0.0) {
            return Err(malformed(WHAT, at(16), format!("clip seconds {secs} must be positive")));
        }
        let frames = u32_at(20);
        let expected = (clips as u64)
            .checked_mul(dim as u64)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| malformed(WHAT, at(8), "payload size overflows"))?;
        if (bytes.len() as u64) < expected {
            return Err(malformed(
                WHAT,
                at(bytes.len() as u64),
                format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        if (bytes.len() as u64) > expected {
            return Err(malformed(WHAT, at(expected), "trailing bytes after payload"));
        }
        let mut values = Vec::with_capacity(clips * dim);
        for (i, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(malformed(WHAT, at(HEADER_LEN + 4 * i as u64), "non-finite value"));
            }
            values.push(v);
        }
        let grid = ClipGrid::with_frames(clips, f64::from(secs), frames)?;
        Self::new(grid, dim, values)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

/// A directory holding one `<video_id>.mstf` file per video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureStore {
    dir: PathBuf,
}

impl FeatureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, video_id: &str) -> Result<PathBuf> {
        if video_id.is_empty() || video_id.contains(['/', '\\']) || video_id == "." || video_id == ".." {
            return Err(Error::InvalidArgument(format!("unusable video id {video_id:?}")));
        }
        Ok(self.dir.join(format!("{video_id}.mstf")))
    }

    pub fn load(&self, video_id: &str) -> Result<FeatureMatrix> {
        let path = self.path(video_id)?;
        FeatureMatrix::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, video_id: &str, features: &FeatureMatrix) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        write_file(&self.path(video_id)?, features)
    }
}

pub fn write_file(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::new();
    features.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f32> = (0..5 * 3).map(|_| rng.random_range(-10.0..10.0)).collect();
        FeatureMatrix::new(ClipGrid::with_frames(5, 1.0, 16).unwrap(), 3, values).unwrap()
    }

    fn bytes(m: &FeatureMatrix) -> Vec<u8> {
        let mut b = Vec::new();
        m.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = sample();
        let b = bytes(&m);
        assert_eq!(b.len(), 24 + 15 * 4);
        assert_eq!(&b[..4], b"MSTF");
        let back = FeatureMatrix::from_bytes(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn rejects_corruption_with_positions() {
        let b = bytes(&sample());
        let err = FeatureMatrix::from_bytes(&b[..b.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
        assert!(FeatureMatrix::from_bytes(&b[..10]).is_err());

        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&bad).unwrap_err().to_string().contains("byte 0"));

        let mut zero_dim = b.clone();
        zero_dim[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(FeatureMatrix::from_bytes(&zero_dim).unwrap_err().to_string().contains("byte 12"));

        let mut nan = b.clone();
        nan[24 + 8..24 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(FeatureMatrix::from_bytes(&nan).unwrap_err().to_string().contains("byte 32"));

        let mut version = b.clone();
        version[4] = 2;
        assert!(FeatureMatrix::from_bytes(&version).is_err());

        let mut long = b;
        long.push(0);
        assert!(FeatureMatrix::from_bytes(&long).is_err());
    }

    #[test]
    fn store_paths() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::new(dir.path());
        store.save("v1", &sample()).unwrap();
        assert_eq!(store.load("v1").unwrap(), sample());
        assert!(store.path("../x").is_err());
        assert!(store.load("missing").is_err());
    }
}
