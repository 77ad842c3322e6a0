//! On-disk dataset: a directory holding `manifest.json` and `samples.bin`.
//!
//! `samples.bin` is a little-endian record stream, train then val then test.
//! Each record is
//!
//! ```text
//! id: u64
//! image: width * height f32
//! 3 x { kind tag: u8, parameter count: u16, parameters: f32 ...,
//!       landmark count: u16, landmarks: (f32, f32) ... }
//! ```
//!
//! The manifest records the byte range of every split so a reader can load
//! one split without touching the others.

use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetConfig, LandmarkCounts, Result, Sample, Split};
use crate::geometry::{Point, RasterGrid, ShapeKind, ShapeSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "samples.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Split,
    pub count: usize,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub counts: SplitCounts,
    pub landmark_counts: LandmarkCounts,
    pub image: RasterGrid,
    pub config: DatasetConfig,
    pub splits: Vec<SplitEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Manifest {
    pub fn entry(&self, split: Split) -> Option<&SplitEntry> {
        self.splits.iter().find(|e| e.split == split)
    }
}

/// The whole dataset as returned by [`read_dataset`].
pub type DatasetFile = Dataset;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = ds.split(split);
        let offset = bytes.len() as u64;
        for s in samples {
            encode_sample(s, &mut bytes)?;
        }
        splits.push(SplitEntry { split, count: samples.len(), offset, length: bytes.len() as u64 - offset });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        counts: SplitCounts { train: ds.train.len(), val: ds.val.len(), test: ds.test.len() },
        landmark_counts: ds.config.landmarks,
        image: ds.config.grid,
        config: ds.config.clone(),
        splits,
    };
    let rec_path = dir.join(RECORDS_FILE);
    let mut f = fs::File::create(&rec_path).map_err(io_err(&rec_path))?;
    f.write_all(&bytes).map_err(io_err(&rec_path))?;
    let man_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&man_path, json).map_err(io_err(&man_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DataError::Parse { offset: 0, message: format!("manifest: {e}") })?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(DataError::Version { found: version, expected: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(|e| DataError::Parse { offset: 0, message: format!("manifest: {e}") })
}

/// Reads all three splits. Any malformed byte fails the whole read.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(RECORDS_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut parts = Vec::new();
    for split in Split::ALL {
        let entry = manifest.entry(split).ok_or_else(|| DataError::Parse {
            offset: 0,
            message: format!("manifest lacks the {} split", split.name()),
        })?;
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or(DataError::Parse { offset: bytes.len() as u64, message: "record file is truncated".into() })?;
        let slice = &bytes[entry.offset as usize..end as usize];
        parts.push(decode_split(slice, entry, &manifest)?);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    if end_of_last(&manifest) != bytes.len() as u64 {
        return Err(DataError::Parse { offset: end_of_last(&manifest), message: "trailing bytes".into() });
    }
    Ok(Dataset { config: manifest.config, train, val, test })
}

fn end_of_last(m: &Manifest) -> u64 {
    m.splits.iter().map(|e| e.offset + e.length).max().unwrap_or(0)
}

/// Reads one split only, seeking past the others.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .entry(split)
        .ok_or_else(|| DataError::Parse { offset: 0, message: format!("no {} split", split.name()) })?;
    let path = dir.join(RECORDS_FILE);
    let mut f = fs::File::open(&path).map_err(io_err(&path))?;
    let file_len = f.metadata().map_err(io_err(&path))?.len();
    if entry.offset + entry.length > file_len {
        return Err(DataError::Parse { offset: file_len, message: "record file is truncated".into() });
    }
    f.seek(SeekFrom::Start(entry.offset)).map_err(io_err(&path))?;
    let mut buf = vec![0u8; entry.length as usize];
    f.read_exact(&mut buf).map_err(io_err(&path))?;
    decode_split(&buf, entry, &manifest)
}

fn encode_sample(s: &Sample, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&s.id.to_le_bytes());
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (shape, pts) in s.shapes.iter().zip(&s.landmarks) {
        out.push(shape.kind().tag());
        let params = shape.parameters();
        let too_long = |what: &str| DataError::InvalidConfig(format!("{what} count exceeds u16"));
        out.extend_from_slice(&u16::try_from(params.len()).map_err(|_| too_long("parameter"))?.to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out.extend_from_slice(&u16::try_from(pts.len()).map_err(|_| too_long("landmark"))?.to_le_bytes());
        for p in pts {
            out.extend_from_slice(&(p.x as f32).to_le_bytes());
            out.extend_from_slice(&(p.y as f32).to_le_bytes());
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Parse {
                offset: self.base + self.buf.len() as u64,
                message: format!("unexpected end of records (needed {n} more bytes at {})", self.offset()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_split(buf: &[u8], entry: &SplitEntry, manifest: &Manifest) -> Result<Vec<Sample>> {
    let mut cur = Cursor { buf, pos: 0, base: entry.offset };
    let grid = manifest.image;
    let mut samples = Vec::with_capacity(entry.count);
    for _ in 0..entry.count {
        samples.push(decode_sample(&mut cur, grid)?);
    }
    if cur.pos != buf.len() {
        return Err(DataError::Parse {
            offset: cur.offset(),
            message: format!("{} split has bytes beyond its {} records", entry.split.name(), entry.count),
        });
    }
    Ok(samples)
}

fn decode_sample(cur: &mut Cursor<'_>, grid: RasterGrid) -> Result<Sample> {
    let id = cur.u64()?;
    let n = grid.pixel_count();
    let raw = cur.take(4 * n)?;
    let image = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut shapes = Vec::with_capacity(3);
    let mut landmarks = Vec::with_capacity(3);
    for expected in ShapeKind::ALL {
        let at = cur.offset();
        let tag = cur.u8()?;
        let kind = ShapeKind::from_tag(tag)
            .filter(|k| *k == expected)
            .ok_or_else(|| DataError::Parse { offset: at, message: format!("unexpected shape tag {tag}") })?;
        let at = cur.offset();
        let count = cur.u16()? as usize;
        let params = (0..count).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let shape = ShapeSpec::from_parameters(kind, &params)
            .map_err(|e| DataError::Parse { offset: at, message: e.to_string() })?;
        let count = cur.u16()? as usize;
        let mut pts = Vec::with_capacity(count);
        for _ in 0..count {
            let x = cur.f32()? as f64;
            let y = cur.f32()? as f64;
            pts.push(Point::new(x, y));
        }
        shapes.push(shape);
        landmarks.push(pts);
    }
    Ok(Sample { id, grid, image, shapes, landmarks })
}
