//! On-disk formats.
//!
//! # Embedding file (`DEMB`)
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `b"DEMB"` |
//! | 4 | 2 | version `u16`, currently 1 |
//! | 6 | 2 | flags `u16`: bit 0 labels present, bit 1 rows unit-normalized; other bits zero |
//! | 8 | 4 | rows `u32` |
//! | 12 | 4 | dim `u32` |
//! | 16 | 4·rows·dim | row-major `f32` payload |
//! | … | 4·rows | labels `i32` if bit 0 is set, `-1` = unlabeled |
//!
//! The file length must match the header exactly. Values are stored as `f32`
//! and widened to `f64` on read.
//!
//! # Prompt checkpoint (`DTHT`)
//!
//! magic `b"DTHT"`, version `u16` (1), flags `u16` (0), `n: u32`, `d_e: u32`,
//! then `n·d_e` row-major `f64` values.
//!
//! # Manifest
//!
//! A TOML document naming the embedding files of one dataset; relative paths
//! are resolved against the manifest's directory.
//!
//! ```toml
//! id_embeddings = "id.demb"
//! text_embeddings = "text.demb"
//! covariate_embeddings = "covariate.demb"  # optional
//! semantic_embeddings = "semantic.demb"    # optional
//! class_names = ["class_0", "class_1"]
//!
//! [score]            # optional overrides
//! tau = 0.01
//! c = 2
//!
//! [prompt]           # optional; frozen-encoder settings for training
//! seed = 0
//! n = 4
//! d_e = 16
//! hidden = 32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_rows, FeatureMatrix};
use crate::error::{Error, Result};
use crate::prompt::PromptDims;
use crate::scores::ScoreConfig;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"DEMB";
pub const THETA_MAGIC: [u8; 4] = *b"DTHT";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_LABELS: u16 = 1;
pub const FLAG_NORMALIZED: u16 = 1 << 1;
const KNOWN_FLAGS: u16 = FLAG_LABELS | FLAG_NORMALIZED;
const HEADER_LEN: usize = 16;
/// Norm tolerance for rows of a file flagged normalized (f32 storage).
pub const STORED_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u16,
    pub flags: u16,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingHeader {
    pub fn has_labels(&self) -> bool {
        self.flags & FLAG_LABELS != 0
    }

    pub fn is_normalized(&self) -> bool {
        self.flags & FLAG_NORMALIZED != 0
    }

    fn expected_len(&self) -> usize {
        let labels = if self.has_labels() { 4 * self.rows } else { 0 };
        HEADER_LEN + 4 * self.rows * self.dim + labels
    }
}

/// Contents of an embedding file, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub data: Array2<f64>,
    /// `-1` marks an unlabeled row.
    pub labels: Option<Vec<i32>>,
    /// Whether the writer declared the rows unit-normalized.
    pub normalized: bool,
}

impl EmbeddingFile {
    pub fn new(data: Array2<f64>, labels: Option<Vec<i32>>, normalized: bool) -> Self {
        Self {
            data,
            labels,
            normalized,
        }
    }

    /// Rows as unit-norm features in `f64`.
    pub fn features(&self) -> Result<FeatureMatrix> {
        normalize_rows(&FeatureMatrix::new(self.data.clone())?)
    }

    /// Labels as class indices; fails on a missing label column or on any
    /// unlabeled or out-of-range row.
    pub fn class_labels(&self, classes: usize) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("embedding file has no labels".into()))?;
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l < 0 || l as usize >= classes {
                    Err(Error::LabelOutOfRange {
                        index: i,
                        label: l as i64,
                        classes,
                    })
                } else {
                    Ok(l as usize)
                }
            })
            .collect()
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic(bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    Ok(())
}

pub fn decode_header(bytes: &[u8]) -> Result<EmbeddingHeader> {
    check_magic(bytes, EMBEDDING_MAGIC)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let flags = u16_at(bytes, 6);
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::InvalidConfig(format!("unknown flag bits {flags:#06x}")));
    }
    let header = EmbeddingHeader {
        version,
        flags,
        rows: u32_at(bytes, 8) as usize,
        dim: u32_at(bytes, 12) as usize,
    };
    if header.dim == 0 {
        return Err(Error::InvalidDimension("embedding dim must be > 0".into()));
    }
    Ok(header)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    let header = decode_header(bytes)?;
    let expected = header.expected_len();
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let payload_end = HEADER_LEN + 4 * header.rows * header.dim;
    let values: Vec<f64> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / header.dim,
            col: i % header.dim,
        });
    }
    let data = Array2::from_shape_vec((header.rows, header.dim), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let labels = header.has_labels().then(|| {
        bytes[payload_end..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    if header.is_normalized() {
        for (i, row) in data.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > STORED_NORM_TOL {
                log::debug!("row {i} of a normalized file has norm {norm}");
                return Err(Error::NotNormalized);
            }
        }
    }
    Ok(EmbeddingFile {
        data,
        labels,
        normalized: header.is_normalized(),
    })
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let (rows, dim) = file.data.dim();
    if dim == 0 {
        return Err(Error::InvalidDimension("embedding dim must be > 0".into()));
    }
    let too_big = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidDimension(format!("{v} exceeds u32")));
    let rows32 = too_big(rows)?;
    let dim32 = too_big(dim)?;
    if let Some(labels) = &file.labels {
        if labels.len() != rows {
            return Err(Error::ShapeMismatch(format!("{rows} rows but {} labels", labels.len())));
        }
    }
    let mut flags = 0u16;
    if file.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if file.normalized {
        flags |= FLAG_NORMALIZED;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * dim + 4 * rows);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    for ((row, col), &v) in file.data.indexed_iter() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    if let Some(labels) = &file.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    decode_embeddings(&read_bytes(path)?)
}

/// Reads only the 16-byte header.
pub fn read_header(path: &Path) -> Result<EmbeddingHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| with_path(path, e))?;
    decode_header(&buf)
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    fs::write(path, encode_embeddings(file)?)?;
    Ok(())
}

/// Writes unit-norm features with the normalized flag set.
pub fn write_features(path: &Path, features: &FeatureMatrix, labels: Option<&[usize]>) -> Result<()> {
    let labels = labels.map(|l| l.iter().map(|&v| v as i32).collect());
    write_embeddings(
        path,
        &EmbeddingFile::new(features.as_array().clone(), labels, features.is_normalized()),
    )
}

pub fn encode_theta(theta: &Array2<f64>) -> Result<Vec<u8>> {
    let (n, d) = theta.dim();
    let n32 = u32::try_from(n).map_err(|_| Error::InvalidDimension("n exceeds u32".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::InvalidDimension("d_e exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d);
    out.extend_from_slice(&THETA_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in theta.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_theta(bytes: &[u8]) -> Result<Array2<f64>> {
    check_magic(bytes, THETA_MAGIC)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let (n, d) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expected = HEADER_LEN + 8 * n * d;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((n, d), values).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn write_theta(path: &Path, theta: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_theta(theta)?)?;
    Ok(())
}

pub fn read_theta(path: &Path) -> Result<Array2<f64>> {
    decode_theta(&read_bytes(path)?)
}

/// Optional per-dataset overrides of [`ScoreConfig`] fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub react_percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msp_tau: Option<f64>,
}

impl ScoreOverrides {
    pub fn apply(&self, mut cfg: ScoreConfig) -> ScoreConfig {
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.react_percentile {
            cfg.react_percentile = v;
        }
        if let Some(v) = self.msp_tau {
            cfg.msp_tau = v;
        }
        cfg
    }

    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

/// Frozen-encoder settings of the prompt model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub seed: u64,
    pub n: usize,
    pub d_e: usize,
    pub hidden: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        let d = PromptDims::with_defaults(1, 1);
        Self {
            seed: 0,
            n: d.n,
            d_e: d.d_e,
            hidden: d.hidden,
        }
    }
}

impl PromptSection {
    pub fn dims(&self, dim: usize, classes: usize) -> PromptDims {
        PromptDims::new(self.n, self.d_e, self.hidden, dim, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_embeddings: Option<PathBuf>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "ScoreOverrides::is_empty")]
    pub score: ScoreOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptSection>,
}

/// A parsed manifest whose file paths are resolved and checked.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub path: PathBuf,
    pub dim: usize,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest {
            path: PathBuf::new(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Parses, resolves relative paths and validates the referenced files:
    /// every file exists with a valid header, all dims agree and the class
    /// list matches the text rows. Only headers are read.
    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let text = read_text(path)?;
        let mut manifest: Manifest = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut manifest.id_embeddings);
        resolve(&mut manifest.text_embeddings);
        if let Some(p) = manifest.covariate_embeddings.as_mut() {
            resolve(p);
        }
        if let Some(p) = manifest.semantic_embeddings.as_mut() {
            resolve(p);
        }

        let header = |p: &Path| -> Result<EmbeddingHeader> {
            if !p.exists() {
                return Err(err(format!("missing file {}", p.display())));
            }
            read_header(p)
        };
        let text_header = header(&manifest.text_embeddings)?;
        let dim = text_header.dim;
        if manifest.class_names.len() != text_header.rows {
            return Err(err(format!(
                "{} class names but {} text rows",
                manifest.class_names.len(),
                text_header.rows
            )));
        }
        let mut others = vec![("id", &manifest.id_embeddings)];
        others.extend(manifest.covariate_embeddings.as_ref().map(|p| ("covariate", p)));
        others.extend(manifest.semantic_embeddings.as_ref().map(|p| ("semantic", p)));
        for (name, p) in others {
            let h = header(p)?;
            if h.dim != dim {
                return Err(err(format!("{name} embeddings have dim {} but text has {dim}", h.dim)));
            }
        }
        manifest.score.apply(ScoreConfig::default()).validate_for(text_header.rows)?;
        Ok(LoadedManifest {
            manifest,
            path: path.to_path_buf(),
            dim,
        })
    }
}

impl LoadedManifest {
    pub fn score_config(&self) -> ScoreConfig {
        self.manifest.score.apply(ScoreConfig::default())
    }

    pub fn classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn texts(&self) -> Result<FeatureMatrix> {
        read_embeddings(&self.manifest.text_embeddings)?.features()
    }

    pub fn id(&self) -> Result<EmbeddingFile> {
        read_embeddings(&self.manifest.id_embeddings)
    }

    pub fn covariate(&self) -> Result<Option<EmbeddingFile>> {
        self.manifest.covariate_embeddings.as_deref().map(read_embeddings).transpose()
    }

    pub fn semantic(&self) -> Result<Option<EmbeddingFile>> {
        self.manifest.semantic_embeddings.as_deref().map(read_embeddings).transpose()
    }
}

/// `index,score` CSV with a header line.
pub fn scores_to_csv(scores: &[f64]) -> String {
    let mut out = String::from("index,score\n");
    for (i, s) in scores.iter().enumerate() {
        // `{:?}` prints the shortest representation that round-trips.
        out.push_str(&format!("{i},{s:?}\n"));
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<f64>> {
    let bad = |line: usize, msg: &str| Error::InvalidConfig(format!("scores line {line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "index,score" => {}
        _ => return Err(bad(1, "expected header `index,score`")),
    }
    let mut scores = Vec::new();
    for (n, line) in lines {
        let (idx, value) = line.split_once(',').ok_or_else(|| bad(n + 1, "expected two fields"))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad(n + 1, "bad index"))?;
        if idx != scores.len() {
            return Err(bad(n + 1, "indices must be 0, 1, 2, ..."));
        }
        let v: f64 = value.trim().parse().map_err(|_| bad(n + 1, "bad score"))?;
        if !v.is_finite() {
            return Err(bad(n + 1, "non-finite score"));
        }
        scores.push(v);
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(scores)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>> {
    parse_scores_csv(&read_text(path)?)
}

pub fn write_scores_csv(path: &Path, scores: &[f64]) -> Result<()> {
    fs::write(path, scores_to_csv(scores))?;
    Ok(())
}
