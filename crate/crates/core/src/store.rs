//! Feature store: the data model for paired-modality frame features and its
//! bit-exact binary file format.
//!
//! A [`FeatureStore`] is a labeled collection of videos, each carrying one
//! RGB and one motion ("flow") feature sequence sampled at the same frame
//! positions. Values are stored as little-endian `f32` exactly as they appear
//! on disk; all matching math widens to `f64` (see [`crate::frames::Frames`]).
//!
//! File layout (`FSET`, version 1, all integers little-endian):
//!
//! ```text
//! "FSET" | version u16 | num_records u32 | dim u32
//!   repeated num_records times:
//!     video_id u32 | class_id u32 | T u32
//!     rgb payload  (T*dim f32, row-major)
//!     flow payload (T*dim f32, row-major)
//! CRC32 of all preceding bytes (u32)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::wire;

const MAGIC: &[u8; 4] = b"FSET";
const VERSION: u16 = 1;

/// Which stream a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Appearance stream.
    Rgb,
    /// Motion stream.
    Flow,
}

/// One video in one modality: `T` frame vectors of dimension `D`, stored as
/// `f32` to match the on-disk representation bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    num_frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    /// Validates and builds a sequence from a flat row-major buffer.
    pub fn new(modality: Modality, num_frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Invariant("frame count must be >= 1".into()));
        }
        if dim == 0 {
            return Err(Error::Invariant("feature dimension must be >= 1".into()));
        }
        if values.len() != num_frames * dim {
            return Err(Error::Invariant(format!(
                "payload has {} values, expected {}x{}",
                values.len(),
                num_frames,
                dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature sequence payload",
            });
        }
        for t in 0..num_frames {
            if values[t * dim..(t + 1) * dim].iter().all(|&v| v == 0.0) {
                return Err(Error::Invariant(format!(
                    "frame {t} is the all-zero vector; cosine would be undefined"
                )));
            }
        }
        Ok(FeatureSequence {
            modality,
            num_frames,
            dim,
            values,
        })
    }

    /// Stream tag.
    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Number of frames `T`.
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrows frame `t` (length `dim`).
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// The flat row-major payload, as stored on disk.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Widens to the `f64` matrix used by all matching math.
    pub fn to_frames(&self) -> Frames {
        let data = self.values.iter().map(|&v| v as f64).collect();
        // Shape was validated at construction; from_flat cannot fail here.
        Frames::from_flat(data, self.num_frames, self.dim).expect("validated shape")
    }
}

/// One labeled video: paired RGB and flow sequences over the same frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    /// Store-unique identifier.
    pub video_id: u32,
    /// Class label in `[0, num_classes)`.
    pub class_id: u32,
    /// Appearance stream.
    pub rgb: FeatureSequence,
    /// Motion stream.
    pub flow: FeatureSequence,
}

impl VideoRecord {
    /// Validates the rgb/flow pairing and builds a record.
    pub fn new(video_id: u32, class_id: u32, rgb: FeatureSequence, flow: FeatureSequence) -> Result<Self> {
        if rgb.num_frames() != flow.num_frames() {
            return Err(Error::LengthMismatch {
                left: rgb.num_frames(),
                right: flow.num_frames(),
            });
        }
        if rgb.dim() != flow.dim() {
            return Err(Error::DimMismatch {
                left: rgb.dim(),
                right: flow.dim(),
            });
        }
        Ok(VideoRecord {
            video_id,
            class_id,
            rgb,
            flow,
        })
    }

    /// Borrows the sequence for the requested modality.
    pub fn sequence(&self, modality: Modality) -> &FeatureSequence {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}

/// A labeled collection of paired-modality videos.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    records: Vec<VideoRecord>,
    num_classes: usize,
    dim: usize,
    by_class: Vec<Vec<usize>>,
}

impl FeatureStore {
    /// Validates all invariants and builds a store.
    ///
    /// Requirements: at least one record; all records share one feature
    /// dimension; every `class_id` lies in `[0, num_classes)` and every class
    /// owns at least one record; `video_id`s are unique.
    pub fn new(records: Vec<VideoRecord>, num_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyStore);
        }
        if num_classes == 0 {
            return Err(Error::Invariant("num_classes must be >= 1".into()));
        }
        let dim = records[0].rgb.dim();
        let mut by_class = vec![Vec::new(); num_classes];
        let mut seen_ids = std::collections::HashSet::new();
        for (idx, rec) in records.iter().enumerate() {
            if rec.rgb.dim() != dim {
                return Err(Error::DimMismatch {
                    left: dim,
                    right: rec.rgb.dim(),
                });
            }
            let class = rec.class_id as usize;
            if class >= num_classes {
                return Err(Error::Invariant(format!(
                    "class_id {} out of range for {} classes",
                    rec.class_id, num_classes
                )));
            }
            if !seen_ids.insert(rec.video_id) {
                return Err(Error::Invariant(format!(
                    "duplicate video_id {}",
                    rec.video_id
                )));
            }
            by_class[class].push(idx);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Invariant(format!("class {empty} has no records")));
        }
        Ok(FeatureStore {
            records,
            num_classes,
            dim,
            by_class,
        })
    }

    /// All records, in insertion order.
    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    /// Record by positional index.
    pub fn record(&self, idx: usize) -> Result<&VideoRecord> {
        self.records.get(idx).ok_or(Error::IndexOutOfRange {
            index: idx,
            len: self.records.len(),
        })
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// True when the store holds no records (unreachable for valid stores).
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shared feature dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Positional indices of all records labeled `class`.
    pub fn class_records(&self, class: usize) -> Result<&[usize]> {
        self.by_class
            .get(class)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: class,
                len: self.num_classes,
            })
    }

    /// Finds the positional index of a record by its `video_id`.
    pub fn find_video(&self, video_id: u32) -> Option<usize> {
        self.records.iter().position(|r| r.video_id == video_id)
    }
}

/// Serializes a store to the `FSET` byte format (without writing a file).
pub fn encode_store(store: &FeatureStore) -> Result<Vec<u8>> {
    if store.records.len() > u32::MAX as usize || store.dim > u32::MAX as usize {
        return Err(Error::Invariant("store too large for format counters".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    wire::put_u16(&mut buf, VERSION);
    wire::put_u32(&mut buf, store.records.len() as u32);
    wire::put_u32(&mut buf, store.dim as u32);
    for rec in &store.records {
        let t = rec.rgb.num_frames();
        if t > u32::MAX as usize {
            return Err(Error::Invariant("frame count too large for format".into()));
        }
        wire::put_u32(&mut buf, rec.video_id);
        wire::put_u32(&mut buf, rec.class_id);
        wire::put_u32(&mut buf, t as u32);
        for &v in rec.rgb.values() {
            wire::put_f32(&mut buf, v);
        }
        for &v in rec.flow.values() {
            wire::put_f32(&mut buf, v);
        }
    }
    wire::seal_crc(&mut buf);
    Ok(buf)
}

/// Writes a store to `path` in the `FSET` format.
///
/// The store is re-validated before writing so a file is only produced for
/// stores satisfying every invariant; `load_store(save_store(s)) == s`.
pub fn save_store(store: &FeatureStore, path: &Path) -> Result<()> {
    // Re-validate defensively: the cheap way to guarantee no invalid file
    // is ever produced, even if the store was built by a buggy caller.
    FeatureStore::new(store.records.clone(), store.num_classes)?;
    let bytes = encode_store(store)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses a store from `FSET` bytes.
pub fn decode_store(bytes: &[u8]) -> Result<FeatureStore> {
    let mut c = wire::Cursor::new(bytes);
    let magic = c.get_bytes(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "FSET" });
    }
    let version = c.get_u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let num_records = c.get_u32()? as usize;
    let dim = c.get_u32()? as usize;

    // First pass: pull raw payloads; defer value checks until the checksum
    // has confirmed the bytes are what the writer produced.
    struct RawRecord {
        video_id: u32,
        class_id: u32,
        frames: usize,
        rgb: Vec<f32>,
        flow: Vec<f32>,
    }
    let mut raw = Vec::with_capacity(num_records.min(1 << 20));
    for _ in 0..num_records {
        let video_id = c.get_u32()?;
        let class_id = c.get_u32()?;
        let frames = c.get_u32()? as usize;
        let count = frames
            .checked_mul(dim)
            .ok_or_else(|| Error::Invariant("record payload size overflows".into()))?;
        let read_payload = |c: &mut wire::Cursor| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(c.get_f32()?);
            }
            Ok(v)
        };
        let rgb = read_payload(&mut c)?;
        let flow = read_payload(&mut c)?;
        raw.push(RawRecord {
            video_id,
            class_id,
            frames,
            rgb,
            flow,
        });
    }
    match c.remaining() {
        4 => {}
        n if n < 4 => return Err(Error::Truncated { needed: 4 - n }),
        _ => {
            return Err(Error::Invariant(
                "trailing bytes after checksum".into(),
            ))
        }
    }
    let _ = c.pos(); // all non-checksum bytes consumed
    wire::check_crc(bytes)?;

    let mut records = Vec::with_capacity(raw.len());
    let mut max_class: u32 = 0;
    for r in raw {
        max_class = max_class.max(r.class_id);
        let rgb = FeatureSequence::new(Modality::Rgb, r.frames, dim, r.rgb)?;
        let flow = FeatureSequence::new(Modality::Flow, r.frames, dim, r.flow)?;
        records.push(VideoRecord::new(r.video_id, r.class_id, rgb, flow)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyStore);
    }
    FeatureStore::new(records, max_class as usize + 1)
}

/// Reads a store from an `FSET` file.
pub fn load_store(path: &Path) -> Result<FeatureStore> {
    let bytes = std::fs::read(path)?;
    decode_store(&bytes)
}
