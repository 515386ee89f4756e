//! Embedding bundles: per-sentence, per-layer word embeddings in one file.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "DPROBE01" ("DPROBE" + two-digit format version)
//! 8       4     u32 manifest length M
//! 12      M     manifest, UTF-8 JSON (see BundleManifest)
//! 12+M    ...   payload: one float32 tensor per sentence, concatenated
//! ```
//!
//! Each sentence tensor has shape `[L+1][T][d]`, layer-major and row-major:
//! the value for (layer k, token t, dim j) sits at element
//! `(k * T + t) * d + j`. Manifest offsets are byte offsets into the payload.
//! Because layers come first, layers `0..=k` of a sentence form a contiguous
//! prefix of its tensor.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::corpus::DepSentence;
use crate::fsutil::atomic_write_with;

pub const MAGIC_PREFIX: &[u8; 6] = b"DPROBE";
pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 8] = b"DPROBE01";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not an embedding bundle (bad magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported bundle format version {found}, this build reads version {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("truncated bundle: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("bundle has {actual} bytes, {expected} expected from its manifest")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in sentence {sentence} at layer {layer}, token {token}, dim {dim}")]
    NonFinite { sentence: String, layer: usize, token: usize, dim: usize },
    #[error("bundle does not align with treebank: {0}")]
    Alignment(String),
    #[error("invalid subword alignment: {0}")]
    SubwordAlignment(String),
    #[error("sentence index {index} out of range for bundle with {len} sentences")]
    OutOfRange { index: usize, len: usize },
}

/// Rule used to turn subword vectors into word vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

/// Model-level facts shared by every sentence in a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub model_name: String,
    /// Number of transformer layers L; a bundle stores L+1 hidden-state sets.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEntry {
    pub id: String,
    pub tokens: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dtype: String,
    pub endianness: String,
    pub pooling: Pooling,
    pub sentences: Vec<SentenceEntry>,
}

impl BundleManifest {
    pub fn header(&self) -> BundleHeader {
        BundleHeader {
            model_name: self.model_name.clone(),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            pooling: self.pooling,
        }
    }

    /// Byte size of one sentence tensor with `tokens` tokens.
    pub fn sentence_bytes(&self, tokens: usize) -> u64 {
        ((self.num_layers + 1) * tokens * self.hidden_dim * 4) as u64
    }

    pub fn payload_bytes(&self) -> u64 {
        self.sentences.iter().map(|s| self.sentence_bytes(s.tokens)).sum()
    }

    fn validate(&self) -> Result<(), EmbedError> {
        if self.format_version != FORMAT_VERSION {
            return Err(EmbedError::VersionMismatch {
                found: self.format_version.to_string(),
                expected: FORMAT_VERSION,
            });
        }
        if self.num_layers < 1 || self.hidden_dim < 1 {
            return Err(EmbedError::Manifest(format!(
                "num_layers {} and hidden_dim {} must both be at least 1",
                self.num_layers, self.hidden_dim
            )));
        }
        if self.dtype != "float32" || self.endianness != "little" {
            return Err(EmbedError::Manifest(format!(
                "unsupported encoding {}/{}",
                self.dtype, self.endianness
            )));
        }
        let mut expected = 0u64;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.tokens == 0 {
                return Err(EmbedError::Manifest(format!("sentence {} has no tokens", s.id)));
            }
            if s.offset != expected {
                return Err(EmbedError::Manifest(format!(
                    "sentence #{i} ({}) starts at offset {}, expected {expected}",
                    s.id, s.offset
                )));
            }
            expected += self.sentence_bytes(s.tokens);
        }
        Ok(())
    }
}

/// Word-level hidden states of one sentence, shape `[layers][tokens][dim]`
/// where `layers = L + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbeddings {
    layers: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl SentenceEmbeddings {
    pub fn new(layers: usize, tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if data.len() != layers * tokens * dim {
            return Err(EmbedError::Shape(format!(
                "{} values do not fill [{layers}][{tokens}][{dim}]",
                data.len()
            )));
        }
        Ok(SentenceEmbeddings { layers, tokens, dim, data })
    }

    /// Builds a tensor from `f(layer, token)` vectors.
    pub fn from_fn<F>(layers: usize, tokens: usize, dim: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f32>,
    {
        let mut data = Vec::with_capacity(layers * tokens * dim);
        for k in 0..layers {
            for t in 0..tokens {
                let v = f(k, t);
                assert_eq!(v.len(), dim, "vector for ({k}, {t}) has wrong length");
                data.extend_from_slice(&v);
            }
        }
        SentenceEmbeddings { layers, tokens, dim, data }
    }

    /// Number of hidden-state sets (L + 1).
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.tokens + token) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All token vectors of one layer, `tokens * dim` values.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let n = self.tokens * self.dim;
        &self.data[layer * n..(layer + 1) * n]
    }

    /// Keeps layers `0..count`.
    pub fn truncate_layers(&mut self, count: usize) {
        if count < self.layers {
            self.layers = count;
            self.data.truncate(count * self.tokens * self.dim);
        }
    }

    fn check_finite(&self, sentence: &str) -> Result<(), EmbedError> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let dim = pos % self.dim;
            let token = (pos / self.dim) % self.tokens;
            let layer = pos / (self.dim * self.tokens);
            return Err(EmbedError::NonFinite { sentence: sentence.to_string(), layer, token, dim });
        }
        Ok(())
    }
}

/// Streams sentences into a bundle. The payload is spooled to a temporary
/// file next to the destination; [`finish`](Self::finish) writes the header
/// and payload and renames the result into place.
pub struct BundleWriter {
    path: PathBuf,
    header: BundleHeader,
    spool: io::BufWriter<NamedTempFile>,
    entries: Vec<SentenceEntry>,
    offset: u64,
}

impl BundleWriter {
    pub fn create(path: impl AsRef<Path>, header: BundleHeader) -> Result<Self, EmbedError> {
        let path = path.as_ref().to_path_buf();
        if header.num_layers < 1 || header.hidden_dim < 1 {
            return Err(EmbedError::Shape("num_layers and hidden_dim must be at least 1".into()));
        }
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let spool = io::BufWriter::new(NamedTempFile::new_in(dir)?);
        Ok(BundleWriter { path, header, spool, entries: Vec::new(), offset: 0 })
    }

    pub fn push(&mut self, id: &str, emb: &SentenceEmbeddings) -> Result<(), EmbedError> {
        let h = &self.header;
        if emb.layers != h.num_layers + 1 || emb.dim != h.hidden_dim || emb.tokens == 0 {
            return Err(EmbedError::Shape(format!(
                "sentence {id} has shape [{}][{}][{}], bundle expects [{}][T>=1][{}]",
                emb.layers,
                emb.tokens,
                emb.dim,
                h.num_layers + 1,
                h.hidden_dim
            )));
        }
        emb.check_finite(id)?;
        let mut bytes = Vec::with_capacity(emb.data.len() * 4);
        for v in &emb.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.spool.write_all(&bytes)?;
        self.entries.push(SentenceEntry { id: id.to_string(), tokens: emb.tokens, offset: self.offset });
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(self) -> Result<BundleManifest, EmbedError> {
        let BundleWriter { path, header, spool, entries, .. } = self;
        let manifest = BundleManifest {
            format_version: FORMAT_VERSION,
            model_name: header.model_name,
            num_layers: header.num_layers,
            hidden_dim: header.hidden_dim,
            dtype: "float32".into(),
            endianness: "little".into(),
            pooling: header.pooling,
            sentences: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| EmbedError::Manifest(e.to_string()))?;
        let mut spool = spool.into_inner().map_err(|e| e.into_error())?;
        spool.as_file_mut().seek(SeekFrom::Start(0))?;
        atomic_write_with(&path, |w| {
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(&json)?;
            io::copy(spool.as_file_mut(), w)?;
            Ok(())
        })?;
        Ok(manifest)
    }
}

/// Writes a complete bundle from an iterator of `(id, embeddings)` pairs.
pub fn write_bundle<'a, I>(path: impl AsRef<Path>, header: BundleHeader, sentences: I) -> Result<BundleManifest, EmbedError>
where
    I: IntoIterator<Item = (&'a str, &'a SentenceEmbeddings)>,
{
    let mut w = BundleWriter::create(path, header)?;
    for (id, emb) in sentences {
        w.push(id, emb)?;
    }
    w.finish()
}

/// Random-access bundle reader. Reads are positional, so one reader can be
/// shared by many threads.
#[derive(Debug)]
pub struct BundleReader {
    file: File,
    manifest: BundleManifest,
    payload_start: u64,
    by_id: HashMap<String, usize>,
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

impl BundleReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let mut file = File::open(path.as_ref())?;
        let actual = file.metadata()?.len();
        let mut fixed = [0u8; 12];
        if actual < 12 {
            let mut head = Vec::new();
            file.read_to_end(&mut head)?;
            if !MAGIC_PREFIX.starts_with(&head[..head.len().min(6)]) {
                return Err(EmbedError::BadMagic(head));
            }
            return Err(EmbedError::Truncated { expected: 12, actual });
        }
        file.read_exact(&mut fixed)?;
        let magic = &fixed[..8];
        if &magic[..6] != MAGIC_PREFIX {
            return Err(EmbedError::BadMagic(magic.to_vec()));
        }
        if magic != MAGIC {
            return Err(EmbedError::VersionMismatch {
                found: String::from_utf8_lossy(&magic[6..]).into_owned(),
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as u64;
        if actual < 12 + manifest_len {
            return Err(EmbedError::Truncated { expected: 12 + manifest_len, actual });
        }
        let mut json = vec![0u8; manifest_len as usize];
        file.read_exact(&mut json)?;
        let manifest: BundleManifest =
            serde_json::from_slice(&json).map_err(|e| EmbedError::Manifest(e.to_string()))?;
        manifest.validate()?;
        let payload_start = 12 + manifest_len;
        let expected = payload_start + manifest.payload_bytes();
        if actual < expected {
            return Err(EmbedError::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(EmbedError::TrailingBytes { expected, actual });
        }
        let mut by_id = HashMap::with_capacity(manifest.sentences.len());
        for (i, s) in manifest.sentences.iter().enumerate() {
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(EmbedError::Manifest(format!("duplicate sentence id {}", s.id)));
            }
        }
        Ok(BundleReader { file, manifest, payload_start, by_id })
    }

    pub fn manifest(&self) -> &BundleManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sentences.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn read(&self, index: usize) -> Result<SentenceEmbeddings, EmbedError> {
        self.read_layers(index, self.manifest.num_layers + 1)
    }

    /// Reads only hidden-state sets `0..layers` of a sentence.
    pub fn read_layers(&self, index: usize, layers: usize) -> Result<SentenceEmbeddings, EmbedError> {
        let entry = self
            .manifest
            .sentences
            .get(index)
            .ok_or(EmbedError::OutOfRange { index, len: self.len() })?;
        let all = self.manifest.num_layers + 1;
        if layers == 0 || layers > all {
            return Err(EmbedError::Shape(format!("requested {layers} layers, bundle has {all}")));
        }
        let d = self.manifest.hidden_dim;
        let count = layers * entry.tokens * d;
        let mut buf = vec![0u8; count * 4];
        read_at(&self.file, &mut buf, self.payload_start + entry.offset)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(SentenceEmbeddings { layers, tokens: entry.tokens, dim: d, data })
    }

    pub fn read_id(&self, id: &str) -> Result<SentenceEmbeddings, EmbedError> {
        let index = self
            .position(id)
            .ok_or_else(|| EmbedError::Alignment(format!("sentence {id} is not in the bundle")))?;
        self.read(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<(&str, SentenceEmbeddings), EmbedError>> + '_ {
        (0..self.len()).map(move |i| self.read(i).map(|e| (self.manifest.sentences[i].id.as_str(), e)))
    }

    /// Checks that the bundle holds exactly `sentences`, in order, with
    /// matching token counts.
    pub fn validate_alignment(&self, sentences: &[DepSentence]) -> Result<(), EmbedError> {
        let entries = &self.manifest.sentences;
        for (i, (e, s)) in entries.iter().zip(sentences).enumerate() {
            if e.id != s.id() {
                return Err(EmbedError::Alignment(format!(
                    "position {i}: bundle has sentence {:?}, treebank has {:?}",
                    e.id,
                    s.id()
                )));
            }
            if e.tokens != s.len() {
                return Err(EmbedError::Alignment(format!(
                    "sentence {}: bundle has {} tokens, treebank has {}",
                    e.id,
                    e.tokens,
                    s.len()
                )));
            }
        }
        if entries.len() != sentences.len() {
            return Err(EmbedError::Alignment(format!(
                "bundle has {} sentences, treebank has {}",
                entries.len(),
                sentences.len()
            )));
        }
        Ok(())
    }
}

/// Pools subword vectors `[layers][S][dim]` into word vectors
/// `[layers][T][dim]`. `spans[w]` is the subword range of word `w`; spans
/// must be non-empty, ordered and disjoint. Subwords outside every span
/// (sentence delimiters) are ignored.
pub fn pool_subwords(
    subwords: &SentenceEmbeddings,
    spans: &[Range<usize>],
    pooling: Pooling,
) -> Result<SentenceEmbeddings, EmbedError> {
    let mut prev_end = 0;
    for (w, span) in spans.iter().enumerate() {
        if span.is_empty() {
            return Err(EmbedError::SubwordAlignment(format!("word {w} has an empty span")));
        }
        if span.start < prev_end {
            return Err(EmbedError::SubwordAlignment(format!("span of word {w} overlaps or is out of order")));
        }
        if span.end > subwords.tokens {
            return Err(EmbedError::SubwordAlignment(format!(
                "span of word {w} ends at {}, past {} subwords",
                span.end, subwords.tokens
            )));
        }
        prev_end = span.end;
    }
    let dim = subwords.dim;
    Ok(SentenceEmbeddings::from_fn(subwords.layers, spans.len(), dim, |k, w| {
        let span = &spans[w];
        match pooling {
            Pooling::First => subwords.vector(k, span.start).to_vec(),
            Pooling::Mean => {
                let mut acc = vec![0f64; dim];
                for s in span.clone() {
                    for (a, v) in acc.iter_mut().zip(subwords.vector(k, s)) {
                        *a += f64::from(*v);
                    }
                }
                let n = span.len() as f64;
                acc.into_iter().map(|a| (a / n) as f32).collect()
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(l: usize, d: usize) -> BundleHeader {
        BundleHeader { model_name: "test".into(), num_layers: l, hidden_dim: d, pooling: Pooling::Mean }
    }

    fn counting(layers: usize, tokens: usize, dim: usize, base: f32) -> SentenceEmbeddings {
        let data = (0..layers * tokens * dim).map(|i| base + i as f32 * 0.25).collect();
        SentenceEmbeddings::new(layers, tokens, dim, data).unwrap()
    }

    #[test]
    fn payload_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let e = counting(2, 2, 2, 0.0);
        let m = write_bundle(&path, header(1, 2), [("s1", &e)]).unwrap();
        assert_eq!(m.payload_bytes(), 32);
        let json_len = serde_json::to_vec(&m).unwrap().len() as u64;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 4 + json_len + 32);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"DPROBE01");
    }

    #[test]
    fn empty_bundle_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        write_bundle(&path, header(3, 4), std::iter::empty()).unwrap();
        let r = BundleReader::open(&path).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.manifest().num_layers, 3);
    }

    #[test]
    fn rejects_nan_and_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        let mut data = vec![0.0f32; 8];
        data[5] = f32::NAN;
        let e = SentenceEmbeddings::new(2, 2, 2, data).unwrap();
        let err = write_bundle(&path, header(1, 2), [("x", &e)]).unwrap_err();
        assert!(matches!(err, EmbedError::NonFinite { layer: 1, token: 0, dim: 1, .. }), "{err}");
        assert!(!path.exists());

        let wrong = counting(3, 2, 2, 0.0);
        assert!(matches!(
            write_bundle(&path, header(1, 2), [("x", &wrong)]).unwrap_err(),
            EmbedError::Shape(_)
        ));
        assert!(SentenceEmbeddings::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn random_access_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        let sents: Vec<(String, SentenceEmbeddings)> =
            (0..5).map(|i| (format!("s{i}"), counting(3, i + 1, 4, i as f32))).collect();
        write_bundle(&path, header(2, 4), sents.iter().map(|(id, e)| (id.as_str(), e))).unwrap();
        let r = BundleReader::open(&path).unwrap();
        let seq: Vec<_> = r.iter().map(|x| x.unwrap().1).collect();
        for i in [3, 0, 4, 1, 2] {
            assert_eq!(r.read(i).unwrap(), seq[i]);
            assert_eq!(r.read_id(&format!("s{i}")).unwrap(), sents[i].1);
        }
        let prefix = r.read_layers(4, 2).unwrap();
        let mut want = sents[4].1.clone();
        want.truncate_layers(2);
        assert_eq!(prefix, want);
        assert!(matches!(r.read(9), Err(EmbedError::OutOfRange { .. })));

        // Concurrent readers see the same bytes.
        std::thread::scope(|s| {
            for t in 0..4 {
                let r = &r;
                let seq = &seq;
                s.spawn(move || {
                    for k in 0..20 {
                        let i = (t + k) % 5;
                        assert_eq!(&r.read(i).unwrap(), &seq[i]);
                    }
                });
            }
        });
    }

    #[test]
    fn truncation_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let e = counting(2, 3, 2, 1.0);
        write_bundle(&path, header(1, 2), [("a", &e)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        match BundleReader::open(&cut).unwrap_err() {
            EmbedError::Truncated { expected, actual } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 5);
            }
            other => panic!("unexpected {other}"),
        }
        let msg = BundleReader::open(&cut).unwrap_err().to_string();
        assert!(msg.contains(&format!("expected {} bytes", bytes.len())), "{msg}");

        let v2 = dir.path().join("v2.bin");
        let mut altered = bytes.clone();
        altered[6..8].copy_from_slice(b"02");
        std::fs::write(&v2, &altered).unwrap();
        assert!(matches!(
            BundleReader::open(&v2).unwrap_err(),
            EmbedError::VersionMismatch { ref found, .. } if found == "02"
        ));

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"GARBAGE!\0\0\0\0").unwrap();
        assert!(matches!(BundleReader::open(&junk).unwrap_err(), EmbedError::BadMagic(_)));

        let tiny = dir.path().join("tiny.bin");
        std::fs::write(&tiny, b"DPRO").unwrap();
        assert!(matches!(BundleReader::open(&tiny).unwrap_err(), EmbedError::Truncated { .. }));

        let long = dir.path().join("long.bin");
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&long, &extra).unwrap();
        assert!(matches!(BundleReader::open(&long).unwrap_err(), EmbedError::TrailingBytes { .. }));
    }

    #[test]
    fn alignment_against_treebank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("al.bin");
        let e = counting(2, 2, 2, 0.0);
        write_bundle(&path, header(1, 2), [("a", &e), ("b", &e)]).unwrap();
        let r = BundleReader::open(&path).unwrap();
        let sent = |id: &str| {
            DepSentence::new(id, vec!["x".into(), "y".into()], vec![0, 1], vec!["root".into(), "d".into()])
                .unwrap()
        };
        r.validate_alignment(&[sent("a"), sent("b")]).unwrap();
        assert!(matches!(r.validate_alignment(&[sent("a"), sent("c")]), Err(EmbedError::Alignment(_))));
        assert!(matches!(r.validate_alignment(&[sent("a")]), Err(EmbedError::Alignment(_))));
        assert!(matches!(r.validate_alignment(&[sent("b"), sent("a")]), Err(EmbedError::Alignment(_))));
    }

    #[test]
    fn pooling_rules() {
        // Layers 2, subwords 3, dim 2.
        let sub = SentenceEmbeddings::new(
            2,
            3,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
        )
        .unwrap();
        let single = pool_subwords(&sub, &[0..1, 1..2, 2..3], Pooling::Mean).unwrap();
        assert_eq!(single, sub);
        let pooled = pool_subwords(&sub, &[0..1, 1..3], Pooling::Mean).unwrap();
        assert_eq!(pooled.vector(0, 1), &[4.0, 5.0]);
        assert_eq!(pooled.vector(1, 1), &[40.0, 50.0]);
        let first = pool_subwords(&sub, &[0..1, 1..3], Pooling::First).unwrap();
        assert_eq!(first.vector(1, 1), &[30.0, 40.0]);
        // Delimiter at subword 0 excluded.
        let skip = pool_subwords(&sub, &[1..3], Pooling::Mean).unwrap();
        assert_eq!(skip.tokens(), 1);

        assert!(pool_subwords(&sub, &[0..0], Pooling::Mean).is_err());
        assert!(pool_subwords(&sub, &[0..2, 1..3], Pooling::Mean).is_err());
        assert!(pool_subwords(&sub, &[0..4], Pooling::Mean).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = SentenceEmbeddings> {
        (1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(l, t, d)| {
            prop::collection::vec(-1e6f32..1e6, l * t * d)
                .prop_map(move |data| SentenceEmbeddings::new(l, t, d, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(a in arb_tensor(), b_scale in -3.0f32..3.0) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.bin");
            let b = SentenceEmbeddings::new(a.layers, a.tokens, a.dim, a.data.iter().map(|v| v * b_scale).collect()).unwrap();
            let hdr = header(a.layers.max(2) - 1, a.dim);
            // Pad layer count to at least 2 hidden-state sets.
            let pad = |e: &SentenceEmbeddings| {
                let layers = hdr.num_layers + 1;
                SentenceEmbeddings::from_fn(layers, e.tokens, e.dim, |k, t| {
                    if k < e.layers { e.vector(k, t).to_vec() } else { vec![-0.0; e.dim] }
                })
            };
            let (pa, pb) = (pad(&a), pad(&b));
            write_bundle(&path, hdr, [("a", &pa), ("b", &pb)]).unwrap();
            let r = BundleReader::open(&path).unwrap();
            let ra = r.read(0).unwrap();
            let rb = r.read(1).unwrap();
            let bits = |e: &SentenceEmbeddings| e.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&ra), bits(&pa));
            prop_assert_eq!(bits(&rb), bits(&pb));
        }

        #[test]
        fn mean_pooling_is_bounded_and_commutes_with_layers(
            t in arb_tensor(),
            cut_seed in 0usize..1000,
        ) {
            // Random contiguous partition of the subwords.
            let s = t.tokens;
            let mut spans = Vec::new();
            let mut start = 0;
            let mut k = cut_seed;
            while start < s {
                let len = 1 + k % (s - start);
                spans.push(start..start + len);
                start += len;
                k = k / 3 + 7;
            }
            let pooled = pool_subwords(&t, &spans, Pooling::Mean).unwrap();
            let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            for layer in 0..t.layers {
                for (w, span) in spans.iter().enumerate() {
                    let max_in = span.clone().map(|i| norm(t.vector(layer, i))).fold(0.0, f64::max);
                    prop_assert!(norm(pooled.vector(layer, w)) <= max_in * (1.0 + 1e-6) + 1e-6);
                }
                let single = SentenceEmbeddings::new(1, t.tokens, t.dim, t.layer(layer).to_vec()).unwrap();
                let pooled_single = pool_subwords(&single, &spans, Pooling::Mean).unwrap();
                prop_assert_eq!(pooled_single.layer(0), pooled.layer(layer));
            }
        }
    }
}
