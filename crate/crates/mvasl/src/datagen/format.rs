//! Binary dataset container and its JSON-lines manifest sidecar.
//!
//! Layout: magic `MASL`, format version u16, then records back to back.
//! Each record is a fixed header (N, T_raw, D, H, W, C as LE u32), a label
//! bitmap, a segment table, and the frame payload as LE f32 in
//! `[view][frame][channel][row][col]` order. The manifest carries one JSON
//! object per record with its byte offset, labels, and split tag.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, FrameStore, Result, Segment, SplitTag, SynthVideo, TrainExample};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MASL";
pub const FORMAT_VERSION: u16 = 1;

pub const DATASET_FILE: &str = "dataset.masl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line: where the record lives and what it is labeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub offset: u64,
    pub labels: Vec<u8>,
    pub split: SplitTag,
}

impl ManifestEntry {
    pub fn label_flags(&self) -> Vec<bool> {
        self.labels.iter().map(|&b| b != 0).collect()
    }
}

/// Record header plus segment table, without the frame payload.
#[derive(Debug, Clone)]
pub struct RecordMeta {
    pub views: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<bool>,
    pub segments: Vec<Segment>,
    payload_offset: u64,
}

impl RecordMeta {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn bitmap(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unbitmap(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

struct CountingWriter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn write_all(&mut self, buf: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(buf)?;
        self.written += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.write_all(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.write_all(&v.to_le_bytes())
    }
}

/// Write videos and their split tags; returns the manifest that was written
/// alongside.
pub fn write_dataset(
    videos: &[SynthVideo],
    splits: &[SplitTag],
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    assert_eq!(videos.len(), splits.len(), "one split tag per video");
    std::fs::create_dir_all(dir)?;
    let mut w = CountingWriter { inner: BufWriter::new(File::create(dir.join(DATASET_FILE))?), written: 0 };
    w.write_all(MAGIC)?;
    w.u16(FORMAT_VERSION)?;

    let mut manifest = Vec::with_capacity(videos.len());
    for (index, (video, &split)) in videos.iter().zip(splits).enumerate() {
        let offset = w.written;
        let fs = &video.frames;
        for dim in [fs.views, fs.frames, fs.channels, fs.height, fs.width, video.labels.len()] {
            w.u32(dim as u32)?;
        }
        w.write_all(&bitmap(&video.labels))?;
        w.u32(video.segments.len() as u32)?;
        for seg in &video.segments {
            w.u16(seg.class)?;
            w.u16(seg.onset)?;
            w.u16(seg.offset)?;
            w.write_all(&bitmap(&seg.visible_views))?;
        }
        for &px in &fs.data {
            w.write_all(&px.to_le_bytes())?;
        }
        manifest.push(ManifestEntry {
            index,
            offset,
            labels: video.labels.iter().map(|&b| b as u8).collect(),
            split,
        });
    }
    w.inner.flush()?;

    let mut mf = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for entry in &manifest {
        serde_json::to_writer(&mut mf, entry)?;
        mf.write_all(b"\n")?;
    }
    mf.flush()?;
    Ok(manifest)
}

struct RecordParser<'f> {
    file: &'f File,
    pos: u64,
}

impl RecordParser<'_> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.file.seek(SeekFrom::Start(self.pos))?;
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.file.read(&mut buf[filled..])?;
            if n == 0 {
                return Err(DatasetError::Truncated(self.pos));
            }
            filled += n;
        }
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn meta(&mut self) -> Result<RecordMeta> {
        let views = self.u32()? as usize;
        let frames = self.u32()? as usize;
        let channels = self.u32()? as usize;
        let height = self.u32()? as usize;
        let width = self.u32()? as usize;
        let classes = self.u32()? as usize;
        let mut label_bytes = vec![0u8; classes.div_ceil(8)];
        self.exact(&mut label_bytes)?;
        let labels = unbitmap(&label_bytes, classes);
        let seg_count = self.u32()? as usize;
        let mut segments = Vec::with_capacity(seg_count);
        for _ in 0..seg_count {
            let class = self.u16()?;
            let onset = self.u16()?;
            let offset = self.u16()?;
            let mut vis = vec![0u8; views.div_ceil(8)];
            self.exact(&mut vis)?;
            segments.push(Segment { class, onset, offset, visible_views: unbitmap(&vis, views) });
        }
        Ok(RecordMeta {
            views,
            frames,
            channels,
            height,
            width,
            classes,
            labels,
            segments,
            payload_offset: self.pos,
        })
    }

    fn frames_f32(&mut self, count: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; count * 4];
        self.exact(&mut bytes)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn check_header(file: &File) -> Result<u64> {
    let mut parser = RecordParser { file, pos: 0 };
    let mut magic = [0u8; 4];
    parser.exact(&mut magic).map_err(|_| DatasetError::BadMagic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = parser.u16()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    Ok(parser.pos)
}

/// Read every record back into memory. Round-trips `write_dataset` bitwise
/// on frames and labels.
pub fn read_dataset(dir: &Path) -> Result<Vec<SynthVideo>> {
    let path = dataset_path(dir);
    let file = File::open(&path)?;
    let end = file.metadata()?.len();
    let mut pos = check_header(&file)?;
    let mut videos = Vec::new();
    while pos < end {
        let mut parser = RecordParser { file: &file, pos };
        let meta = parser.meta()?;
        let count = meta.views * meta.frames * meta.frame_len();
        let data = parser.frames_f32(count)?;
        videos.push(SynthVideo {
            frames: FrameStore {
                views: meta.views,
                frames: meta.frames,
                channels: meta.channels,
                height: meta.height,
                width: meta.width,
                data,
            },
            labels: meta.labels,
            segments: meta.segments,
        });
        pos = parser.pos;
    }
    Ok(videos)
}

fn dataset_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(DATASET_FILE)
    }
}

/// Random-access reader over a written dataset, resolving records through
/// the manifest offsets so training never has to hold the file in memory.
pub struct DatasetReader {
    file: RefCell<File>,
    entries: Vec<ManifestEntry>,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let file = File::open(dataset_path(dir))?;
        check_header(&file)?;
        let manifest_path =
            if dir.is_file() { dir.with_extension("manifest.jsonl") } else { dir.join(MANIFEST_FILE) };
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(File::open(&manifest_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Manifest(format!("line {}: {}", lineno + 1, e)))?;
            entries.push(entry);
        }
        Ok(DatasetReader { file: RefCell::new(file), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn indices_for(&self, split: SplitTag) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.index).collect()
    }

    fn entry(&self, index: usize) -> Result<&ManifestEntry> {
        self.entries.get(index).ok_or(DatasetError::OutOfRange { index, len: self.entries.len() })
    }

    pub fn read_meta(&self, index: usize) -> Result<RecordMeta> {
        let offset = self.entry(index)?.offset;
        let file = self.file.borrow();
        let mut parser = RecordParser { file: &file, pos: offset };
        parser.meta()
    }

    pub fn read_record(&self, index: usize) -> Result<SynthVideo> {
        let offset = self.entry(index)?.offset;
        let file = self.file.borrow();
        let mut parser = RecordParser { file: &file, pos: offset };
        let meta = parser.meta()?;
        let count = meta.views * meta.frames * meta.frame_len();
        let data = parser.frames_f32(count)?;
        Ok(SynthVideo {
            frames: FrameStore {
                views: meta.views,
                frames: meta.frames,
                channels: meta.channels,
                height: meta.height,
                width: meta.width,
                data,
            },
            labels: meta.labels,
            segments: meta.segments,
        })
    }

    /// Read only the frames at `indices` (training precision), skipping the
    /// rest of the payload.
    pub fn read_example(&self, index: usize, indices: &[usize]) -> Result<TrainExample> {
        let meta = self.read_meta(index)?;
        let flen = meta.frame_len();
        let file = self.file.borrow();
        let mut views = Vec::with_capacity(meta.views);
        for v in 0..meta.views {
            let mut data = Vec::with_capacity(indices.len() * flen);
            for &t in indices {
                debug_assert!(t < meta.frames);
                let pos = meta.payload_offset + ((v * meta.frames + t) * flen * 4) as u64;
                let mut parser = RecordParser { file: &file, pos };
                let frame = parser.frames_f32(flen)?;
                data.extend(frame.iter().map(|&x| x as f64));
            }
            views.push(
                Tensor::new(vec![indices.len(), flen], data)
                    .map_err(|e| DatasetError::Manifest(format!("non-finite frame data: {e}")))?,
            );
        }
        Ok(TrainExample { views, labels: meta.labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthConfig};

    fn small_videos() -> Vec<SynthVideo> {
        let config = SynthConfig {
            num_views: 2,
            num_classes: 3,
            frames_per_video: 10,
            height: 8,
            width: 8,
            channels: 2,
            videos: 3,
            max_concurrent_actions: 2,
            visibility_prob: 0.8,
            noise_std: 0.05,
            train_ratio: 0.7,
            seed: 21,
        };
        generate(&config).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let videos = small_videos();
        let dir = tempfile::tempdir().unwrap();
        let splits = vec![SplitTag::Train, SplitTag::Test, SplitTag::Train];
        write_dataset(&videos, &splits, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(videos, back);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &[], dir.path()).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let videos = small_videos();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&videos, &[SplitTag::Train; 3], dir.path()).unwrap();
        let path = dir.path().join(DATASET_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::BadMagic)));
    }

    #[test]
    fn truncated_record_is_rejected() {
        let videos = small_videos();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&videos, &[SplitTag::Train; 3], dir.path()).unwrap();
        let path = dir.path().join(DATASET_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Truncated(_))));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &[], dir.path()).unwrap();
        let path = dir.path().join(DATASET_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::BadVersion(99))));
    }

    #[test]
    fn reader_random_access_matches_sequential() {
        let videos = small_videos();
        let dir = tempfile::tempdir().unwrap();
        let splits = vec![SplitTag::Test, SplitTag::Train, SplitTag::Train];
        write_dataset(&videos, &splits, dir.path()).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(reader.len(), 3);
        assert_eq!(reader.indices_for(SplitTag::Test), vec![0]);
        for i in [2usize, 0, 1] {
            assert_eq!(reader.read_record(i).unwrap(), videos[i]);
            let meta = reader.read_meta(i).unwrap();
            assert_eq!(meta.labels, videos[i].labels);
            assert_eq!(meta.segments, videos[i].segments);
        }
        // sampled reads match in-memory gathering
        let indices = vec![1usize, 4, 9];
        let ex = reader.read_example(1, &indices).unwrap();
        let direct = crate::datagen::sample_example((&videos[1]).into(), &indices);
        assert_eq!(ex.views, direct.views);
        assert_eq!(ex.labels, direct.labels);
    }
}
