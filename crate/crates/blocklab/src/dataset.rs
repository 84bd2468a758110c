//! Corpus container, deterministic generation driver and split management.
//!
//! A corpus is a single little-endian binary file:
//!
//! ```text
//! header:  magic "BLKCORP1" | version u32 | n u64 | t u32 | h u32 | w u32
//!          | channels u8 (3) | dtype u8 (0 = u8 linear) | master_seed u64
//! records: n x [ scene_json_len u32 | scene_json bytes
//!              | label u8 (0 stable, 1 tip, 2 drop) | tip_edge u32
//!              | frames t*h*w*channels bytes ]
//! tail:    n x u64 record offsets | index_offset u64 | magic "BLKCIDX1"
//! ```
//!
//! Frames are stored 8-bit per channel (`round(v * 255)`); readers map bytes
//! back with `v / 255`, so 0 and 255 decode to exactly 0.0 and 1.0. The tail
//! index gives O(1) random record access for shuffled batching.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scenegen::{
    render_sequence, FallMode, Frame, GenConfig, RenderConfig, SceneSpec, StabilityOutcome,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

const MAGIC_HEADER: &[u8; 8] = b"BLKCORP1";
const MAGIC_INDEX: &[u8; 8] = b"BLKCIDX1";
const FORMAT_VERSION: u32 = 1;

/// Corpus-wide constants; every record conforms to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub count: u64,
    pub frames_per_sequence: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u8,
    pub dtype: u8,
    pub master_seed: u64,
}

impl CorpusHeader {
    pub fn frame_bytes(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }
    pub fn sequence_bytes(&self) -> usize {
        self.frames_per_sequence as usize * self.frame_bytes()
    }
}

/// One stored sequence, decoded.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub index: u64,
    pub scene: SceneSpec,
    pub label: StabilityOutcome,
    /// Raw 8-bit frame data, length t*h*w*channels.
    pub frames: Vec<u8>,
}

impl SequenceRecord {
    pub fn frame(&self, header: &CorpusHeader, t: usize) -> Frame {
        let fb = header.frame_bytes();
        Frame::from_u8(header.height as usize, header.width as usize, &self.frames[t * fb..(t + 1) * fb])
    }
}

fn encode_label(label: StabilityOutcome) -> (u8, u32) {
    match label {
        StabilityOutcome::Stable => (0, 0),
        StabilityOutcome::Falls(FallMode::TipOverEdge(e)) => (1, e as u32),
        StabilityOutcome::Falls(FallMode::FreeDrop) => (2, 0),
    }
}

fn decode_label(tag_byte: u8, edge: u32) -> Result<StabilityOutcome> {
    match tag_byte {
        0 => Ok(StabilityOutcome::Stable),
        1 => Ok(StabilityOutcome::Falls(FallMode::TipOverEdge(edge as usize))),
        2 => Ok(StabilityOutcome::Falls(FallMode::FreeDrop)),
        other => Err(Error::Format(format!("unknown label tag {other}"))),
    }
}

/// Parameters of a corpus generation run.
#[derive(Debug, Clone)]
pub struct GenRun {
    pub count: u64,
    pub master_seed: u64,
    pub frames_per_sequence: u32,
    pub height: u32,
    pub width: u32,
    pub gen: GenConfig,
    pub render: RenderConfig,
}

/// Generates `run.count` sequences and writes the corpus to `path`.
///
/// Per-record seeds derive from the master seed and the record index, so the
/// output is byte-identical across re-runs regardless of render parallelism
/// (frames render in parallel, writes happen in index order). On any error
/// the partially written temp file is removed.
pub fn generate_corpus(run: &GenRun, path: &Path) -> Result<CorpusHeader> {
    if run.count < 1 {
        return Err(Error::Argument("corpus count must be >= 1".into()));
    }
    run.gen.validate()?;
    let header = CorpusHeader {
        version: FORMAT_VERSION,
        count: run.count,
        frames_per_sequence: run.frames_per_sequence,
        height: run.height,
        width: run.width,
        channels: 3,
        dtype: 0,
        master_seed: run.master_seed,
    };

    let tmp_path = temp_sibling(path);
    let result = write_corpus(run, &header, &tmp_path);
    match result {
        Ok(()) => {
            std::fs::rename(&tmp_path, path)?;
            Ok(header)
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            Err(e)
        }
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_else(|| "corpus".into());
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_corpus(run: &GenRun, header: &CorpusHeader, tmp_path: &Path) -> Result<()> {
    let file = File::create(tmp_path)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC_HEADER)?;
    out.write_all(&header.version.to_le_bytes())?;
    out.write_all(&header.count.to_le_bytes())?;
    out.write_all(&header.frames_per_sequence.to_le_bytes())?;
    out.write_all(&header.height.to_le_bytes())?;
    out.write_all(&header.width.to_le_bytes())?;
    out.write_all(&[header.channels, header.dtype])?;
    out.write_all(&header.master_seed.to_le_bytes())?;

    let mut offsets = Vec::with_capacity(run.count as usize);
    let mut written = HEADER_LEN as u64;

    // Render in parallel chunks, write sequentially in index order.
    const CHUNK: u64 = 64;
    let mut start = 0u64;
    while start < run.count {
        let end = (start + CHUNK).min(run.count);
        let rendered: Vec<Result<(SceneSpec, StabilityOutcome, Vec<u8>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let seed = rng::derive(run.master_seed, &[tag::SCENE, i]);
                let scene = crate::scenegen::sample_scene(seed, &run.gen)?;
                let video = render_sequence(
                    &scene,
                    run.frames_per_sequence as usize,
                    run.height as usize,
                    run.width as usize,
                    &run.render,
                )?;
                let mut bytes = Vec::with_capacity(header.sequence_bytes());
                for f in &video.frames {
                    bytes.extend_from_slice(&f.to_u8());
                }
                Ok((scene, video.label, bytes))
            })
            .collect();
        for (k, item) in rendered.into_iter().enumerate() {
            let (scene, label, bytes) = item?;
            offsets.push(written);
            let scene_json = serde_json::to_vec(&scene)?;
            let (tag_byte, edge) = encode_label(label);
            out.write_all(&(scene_json.len() as u32).to_le_bytes())?;
            out.write_all(&scene_json)?;
            out.write_all(&[tag_byte])?;
            out.write_all(&edge.to_le_bytes())?;
            out.write_all(&bytes)?;
            written += 4 + scene_json.len() as u64 + 1 + 4 + bytes.len() as u64;
            let _ = k;
        }
        start = end;
    }

    let index_offset = written;
    for off in &offsets {
        out.write_all(&off.to_le_bytes())?;
    }
    out.write_all(&index_offset.to_le_bytes())?;
    out.write_all(MAGIC_INDEX)?;
    out.flush()?;
    Ok(())
}

const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4 + 4 + 2 + 8;

/// Read-only random access to a corpus file. Safe to share across threads.
pub struct Corpus {
    file: File,
    header: CorpusHeader,
    offsets: Vec<u64>,
}

impl Corpus {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut head = [0u8; HEADER_LEN];
        file.read_exact(&mut head)?;
        if &head[0..8] != MAGIC_HEADER {
            return Err(Error::Format("bad corpus magic".into()));
        }
        let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let header = CorpusHeader {
            version,
            count: u64::from_le_bytes(head[12..20].try_into().unwrap()),
            frames_per_sequence: u32::from_le_bytes(head[20..24].try_into().unwrap()),
            height: u32::from_le_bytes(head[24..28].try_into().unwrap()),
            width: u32::from_le_bytes(head[28..32].try_into().unwrap()),
            channels: head[32],
            dtype: head[33],
            master_seed: u64::from_le_bytes(head[34..42].try_into().unwrap()),
        };
        if header.channels != 3 || header.dtype != 0 {
            return Err(Error::Format("unsupported corpus layout".into()));
        }

        file.seek(SeekFrom::End(-16))?;
        let mut tail = [0u8; 16];
        file.read_exact(&mut tail)?;
        if &tail[8..16] != MAGIC_INDEX {
            return Err(Error::Format("bad corpus index magic".into()));
        }
        let index_offset = u64::from_le_bytes(tail[0..8].try_into().unwrap());
        file.seek(SeekFrom::Start(index_offset))?;
        let mut offsets = vec![0u64; header.count as usize];
        let mut buf = vec![0u8; 8 * offsets.len()];
        file.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            offsets[i] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(Self { file, header, offsets })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    /// Reads one record by index.
    pub fn record(&self, index: u64) -> Result<SequenceRecord> {
        if index >= self.header.count {
            return Err(Error::Argument(format!(
                "record index {index} out of range 0..{}",
                self.header.count
            )));
        }
        let off = self.offsets[index as usize];
        let mut len_buf = [0u8; 4];
        self.file.read_exact_at(&mut len_buf, off)?;
        let json_len = u32::from_le_bytes(len_buf) as usize;
        let mut rest = vec![0u8; json_len + 1 + 4 + self.header.sequence_bytes()];
        self.file.read_exact_at(&mut rest, off + 4)?;
        let scene: SceneSpec = serde_json::from_slice(&rest[..json_len])?;
        let tag_byte = rest[json_len];
        let edge = u32::from_le_bytes(rest[json_len + 1..json_len + 5].try_into().unwrap());
        let label = decode_label(tag_byte, edge)?;
        let frames = rest[json_len + 5..].to_vec();
        Ok(SequenceRecord { index, scene, label, frames })
    }

    /// Loads frames of one sequence as f32 in [0,1], canonical axis order
    /// (T, H, W, C) flattened row-major.
    pub fn sequence_f32(&self, index: u64) -> Result<Vec<f32>> {
        let rec = self.record(index)?;
        Ok(rec.frames.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Deterministic train/validation partition of record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub seed: u64,
}

/// Splits `[0, n)` into shuffled train/validation index sets.
pub fn split(n: u64, train_count: u64, val_count: u64, seed: u64) -> Result<SplitSpec> {
    if train_count + val_count > n {
        return Err(Error::Argument(format!(
            "split counts {train_count}+{val_count} exceed corpus size {n}"
        )));
    }
    let mut indices: Vec<u64> = (0..n).collect();
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        indices.swap(i, j);
    }
    let train = indices[..train_count as usize].to_vec();
    let validation = indices[train_count as usize..(train_count + val_count) as usize].to_vec();
    Ok(SplitSpec { train, validation, seed })
}

/// Loads a batch of sequences as f32 tensors in canonical (T, H, W, C) order.
pub fn load_batch(corpus: &Corpus, indices: &[u64]) -> Result<Vec<Vec<f32>>> {
    indices.iter().map(|&i| corpus.sequence_f32(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::GenConfig;

    fn small_run(n: u64, seed: u64) -> GenRun {
        GenRun {
            count: n,
            master_seed: seed,
            frames_per_sequence: 4,
            height: 16,
            width: 16,
            gen: GenConfig::default(),
            render: RenderConfig::default(),
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.corpus");
        let p2 = dir.path().join("b.corpus");
        generate_corpus(&small_run(3, 99), &p1).unwrap();
        generate_corpus(&small_run(3, 99), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_echoes_run_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.corpus");
        generate_corpus(&small_run(5, 7), &p).unwrap();
        let c = Corpus::open(&p).unwrap();
        let h = c.header();
        assert_eq!((h.count, h.frames_per_sequence, h.height, h.width, h.channels), (5, 4, 16, 16, 3));
        assert_eq!(h.master_seed, 7);
    }

    #[test]
    fn records_roundtrip_and_random_access_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.corpus");
        generate_corpus(&small_run(6, 11), &p).unwrap();
        let c = Corpus::open(&p).unwrap();
        let sequential: Vec<_> = (0..6).map(|i| c.record(i).unwrap()).collect();
        for &i in &[5u64, 0, 3, 2, 4, 1] {
            let r = c.record(i).unwrap();
            assert_eq!(r.frames, sequential[i as usize].frames);
            assert_eq!(r.scene, sequential[i as usize].scene);
        }
        assert!(c.record(6).is_err());
    }

    #[test]
    fn byte_mapping_is_exact_at_endpoints() {
        let f = Frame::from_u8(1, 2, &[255, 0, 128, 255, 255, 0]);
        assert_eq!(f.data[0], 1.0);
        assert_eq!(f.data[1], 0.0);
        assert_eq!(f.data[3], 1.0);
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let a = split(10, 9, 1, 42).unwrap();
        let b = split(10, 9, 1, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u64> = a.train.iter().chain(a.validation.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split(10, 9, 2, 42).is_err());
    }

    #[test]
    fn failed_generation_cleans_up_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        // Invalid config triggers an error before any rename.
        let mut run = small_run(2, 1);
        run.height = 4; // render_frame rejects sizes < 8
        let p = dir.path().join("bad.corpus");
        assert!(generate_corpus(&run, &p).is_err());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert!(leftovers.is_empty(), "temp files left: {leftovers:?}");
    }
}
