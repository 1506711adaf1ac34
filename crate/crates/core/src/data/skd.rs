//! SKD1 portable dataset container.
//!
//! Layout: 8-byte magic `SKDSET\x01\x00`, a little-endian `u32` byte length
//! followed by a UTF-8 JSON manifest, then `count` records. Each record is
//! five little-endian `u32` (T, label, subject, performance, camera; label
//! `0xFFFFFFFF` = unlabeled) followed by `C*V*T` little-endian `f32` in
//! (C outer, V middle, T inner) order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Dataset, SkeletonSequence, Topology, CHANNELS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SKDSET\x01\x00";
pub const VERSION: u32 = 1;
const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    count: usize,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "V")]
    joints: usize,
    #[serde(rename = "T_max")]
    t_max: usize,
    class_names: Vec<String>,
    topology: Topology,
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Magic check plus the length-prefixed JSON manifest.
    pub(crate) fn header<T: serde::de::DeserializeOwned>(&mut self, magic: &[u8; 8]) -> Result<T> {
        let m = self.take(8, "magic")?;
        if m != magic {
            return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(m))));
        }
        let len = self.u32("manifest length")? as usize;
        let at = self.offset();
        let json = self.take(len, "manifest")?;
        serde_json::from_slice(json).map_err(|e| Error::format(at, format!("invalid manifest: {e}")))
    }
}

pub(crate) fn write_header<W: Write, T: Serialize>(w: &mut W, magic: &[u8; 8], manifest: &T) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, xs: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Serializes a dataset into SKD1 bytes.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let joints = ds.topology.n_joints();
    for (i, s) in ds.sequences.iter().enumerate() {
        let (c, v, _) = s.coords.dim();
        if c != CHANNELS || v != joints {
            return Err(Error::shape(format!("sequence {i} has shape ({c}, {v}, _), expected ({CHANNELS}, {joints}, _)")));
        }
    }
    let manifest = Manifest {
        version: VERSION,
        count: ds.len(),
        channels: CHANNELS,
        joints,
        t_max: ds.max_frames(),
        class_names: ds.class_names.clone(),
        topology: ds.topology.clone(),
    };
    let mut out = Vec::new();
    write_header(&mut out, MAGIC, &manifest)?;
    for s in &ds.sequences {
        for x in [
            s.n_frames() as u32,
            s.label.unwrap_or(UNLABELED),
            s.subject_id,
            s.performance_id,
            s.camera_id,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        write_f32s(&mut out, s.coords.iter().copied())?;
    }
    Ok(out)
}

/// Parses SKD1 bytes, validating magic, version and every record.
pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    let m: Manifest = r.header(MAGIC)?;
    if m.version != VERSION {
        return Err(Error::format(8, format!("unsupported version {}", m.version)));
    }
    if m.channels != CHANNELS || m.joints != m.topology.n_joints() {
        return Err(Error::format(
            8,
            format!("manifest shape C={} V={} disagrees with topology of {} joints", m.channels, m.joints, m.topology.n_joints()),
        ));
    }
    let topology = Topology::new(m.topology.parents().to_vec())?;
    let mut ds = Dataset::new(topology, m.class_names);
    for i in 0..m.count {
        let start = r.offset();
        let rec_err = |e: Error| match e {
            Error::Format { offset, msg } => Error::format(
                offset,
                format!("record {i} of {}: {msg}", m.count),
            ),
            other => other,
        };
        let t = r.u32("record header").map_err(rec_err)? as usize;
        let label = r.u32("record header").map_err(rec_err)?;
        let subject_id = r.u32("record header").map_err(rec_err)?;
        let performance_id = r.u32("record header").map_err(rec_err)?;
        let camera_id = r.u32("record header").map_err(rec_err)?;
        if t == 0 || t > m.t_max {
            return Err(Error::format(start, format!("record {i}: frame count {t} outside 1..={}", m.t_max)));
        }
        let data = r.f32_vec(CHANNELS * m.joints * t, "record coordinates").map_err(rec_err)?;
        let coords = Array3::from_shape_vec((CHANNELS, m.joints, t), data).expect("length checked");
        ds.sequences.push(SkeletonSequence {
            coords,
            label: (label != UNLABELED).then_some(label),
            subject_id,
            performance_id,
            camera_id,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.offset(),
            format!("manifest declares {} records but {} trailing bytes remain", m.count, r.remaining()),
        ));
    }
    Ok(ds)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}
