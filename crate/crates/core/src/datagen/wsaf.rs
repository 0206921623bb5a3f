//! `WSAF` sample files:
//!
//! ```text
//! "WSAF" u32 version  u32 N1  u32 N2
//! f32 P[3 N1]  f32 Q[3 N2]  f32 S[3 N1]  u16 labels[N1]
//! ```
//!
//! all little-endian.

use std::path::Path;

use crate::binio::{put_f32s, put_u32, read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point, PointCloud};

use super::scene::SamplePair;

pub const WSAF_MAGIC: &[u8; 4] = b"WSAF";
pub const WSAF_VERSION: u32 = 1;

fn flat(points: &[Point]) -> Vec<f32> {
    points.iter().flat_map(|p| p.map(|c| c as f32)).collect()
}

fn rows(values: &[f32]) -> Vec<Point> {
    values
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect()
}

pub fn sample_to_bytes(sample: &SamplePair) -> Result<Vec<u8>> {
    let n1 = u32::try_from(sample.source.len())
        .map_err(|_| Error::Argument("source too large for WSAF".into()))?;
    let n2 = u32::try_from(sample.target.len())
        .map_err(|_| Error::Argument("target too large for WSAF".into()))?;
    let mut out = Vec::with_capacity(16 + 4 * 3 * (2 * n1 as usize + n2 as usize) + 2 * n1 as usize);
    out.extend_from_slice(WSAF_MAGIC);
    put_u32(&mut out, WSAF_VERSION);
    put_u32(&mut out, n1);
    put_u32(&mut out, n2);
    for part in [sample.source.points(), sample.target.points(), sample.flow.vectors()] {
        let vals = flat(part);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("value overflows 32-bit float".into()));
        }
        put_f32s(&mut out, &vals);
    }
    for l in &sample.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn sample_from_bytes(bytes: &[u8]) -> Result<SamplePair> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4, "magic")?;
    if magic != WSAF_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:02x?}, expected {:02x?} (\"WSAF\")", magic, WSAF_MAGIC),
        ));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != WSAF_VERSION {
        return Err(Error::format(at, format!("unsupported WSAF version {version}")));
    }
    let n1 = r.u32("N1")? as usize;
    let n2 = r.u32("N2")? as usize;
    let p = r.f32s(3 * n1, "source points")?;
    let q = r.f32s(3 * n2, "target points")?;
    let s = r.f32s(3 * n1, "flow vectors")?;
    let labels = (0..n1).map(|_| r.u16("labels")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SamplePair::new(
        PointCloud::new(rows(&p))?,
        PointCloud::new(rows(&q))?,
        FlowField::new(rows(&s))?,
        labels,
    )
}

pub fn write_sample(sample: &SamplePair, path: &Path) -> Result<()> {
    write_atomic(path, &sample_to_bytes(sample)?)
}

pub fn read_sample(path: &Path) -> Result<SamplePair> {
    sample_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, SceneConfig};

    fn sample() -> SamplePair {
        generate_scene(&SceneConfig {
            num_points: 64,
            num_objects: 2,
            resample_target: true,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = sample_to_bytes(&s).unwrap();
        let back = sample_from_bytes(&bytes).unwrap();
        assert_eq!(back, s.quantized());
        assert_eq!(sample_to_bytes(&back).unwrap(), bytes);
        assert_eq!(bytes.len(), 16 + 4 * 3 * (64 * 3) + 2 * 64);
    }

    #[test]
    fn corrupted_magic_names_the_bytes() {
        let mut bytes = sample_to_bytes(&sample()).unwrap();
        bytes[1] = b'Z';
        match sample_from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_and_truncated_files() {
        assert!(matches!(sample_from_bytes(&[]), Err(Error::Format { offset: 0, .. })));
        let bytes = sample_to_bytes(&sample()).unwrap();
        match sample_from_bytes(&bytes[..20]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample_000000.wsaf");
        let s = sample().quantized();
        write_sample(&s, &path).unwrap();
        assert_eq!(read_sample(&path).unwrap(), s);
    }
}
