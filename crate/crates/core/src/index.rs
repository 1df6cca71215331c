//! Hybrid embeddings and exact top-k search.
//!
//! Each memory node carries up to three unit vectors: a holistic visual
//! vector, local patch vectors with 0..=1000 grid coordinates, and a
//! semantic-state vector encoding the node's serialized HAS/NOT_HAS sets.
//! Search is exact brute force over the chosen field — desk-scale memories
//! make exactness cheap and the retrieval tests need exact similarities.
//!
//! On disk: a fixed-width little-endian f32 row file plus a JSON-Lines
//! manifest mapping each row to its node key and field. Round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, TextEncoder};

const VECTOR_FILE_MAGIC: &[u8; 4] = b"VIX1";
pub const DEFAULT_FUSION_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no unit form")]
    ZeroVector,
    #[error("patch coordinates invalid: {0:?} (need 0 <= x1 < x2 <= 1000 and 0 <= y1 < y2 <= 1000)")]
    InvalidCoords([u16; 4]),
    #[error("duplicate index entry for node {0}")]
    DuplicateEntry(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("search depth k must be >= 1")]
    InvalidK,
    #[error("corrupt vector store: {0}")]
    CorruptStore(String),
    #[error("encoder error: {0}")]
    Encoder(#[from] ClientError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Local patch vector with its bounding box on the 0..=1000 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub vector: Vec<f32>,
    pub coords: [u16; 4],
}

impl Patch {
    pub fn validate_coords(coords: [u16; 4]) -> Result<(), IndexError> {
        let [x1, y1, x2, y2] = coords;
        if x1 < x2 && x2 <= 1000 && y1 < y2 && y2 <= 1000 {
            Ok(())
        } else {
            Err(IndexError::InvalidCoords(coords))
        }
    }
}

/// The per-node embedding triplet. All vectors are unit-normalized and share
/// one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridEmbedding {
    pub z_vis: Vec<f32>,
    pub z_loc: Vec<Patch>,
    pub z_sem: Vec<f32>,
}

/// Textual form of a node's logical state, the input to the text encoder.
/// Deterministic in the two concept sets: both sides are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticStateDescriptor {
    pub text: String,
}

pub fn serialize_state<S: AsRef<str>>(
    positive: impl IntoIterator<Item = S>,
    negative: impl IntoIterator<Item = S>,
) -> SemanticStateDescriptor {
    let mut pos: Vec<String> = positive.into_iter().map(|s| s.as_ref().to_string()).collect();
    let mut neg: Vec<String> = negative.into_iter().map(|s| s.as_ref().to_string()).collect();
    pos.sort();
    pos.dedup();
    neg.sort();
    neg.dedup();
    let side = |items: &[String]| {
        if items.is_empty() {
            "none".to_string()
        } else {
            items.join(", ")
        }
    };
    SemanticStateDescriptor {
        text: format!("HAS: {} | NOT_HAS: {}", side(&pos), side(&neg)),
    }
}

/// Scales a vector to unit L2 norm. Vectors already unit within 1e-6 pass
/// through bit-identically, so re-inserting stored vectors cannot drift.
pub fn normalize(vector: &[f32]) -> Result<Vec<f32>, IndexError> {
    let norm = vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(IndexError::ZeroVector);
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return Ok(vector.to_vec());
    }
    Ok(vector.iter().map(|&v| (v as f64 / norm) as f32).collect())
}

/// Builds the embedding triplet for a visual node: normalizes the holistic
/// and patch vectors and encodes the serialized logical state.
pub fn build_embedding(
    visual_vec: &[f32],
    patches: &[Patch],
    positive: &std::collections::BTreeSet<String>,
    negative: &std::collections::BTreeSet<String>,
    text_encoder: &dyn TextEncoder,
) -> Result<HybridEmbedding, IndexError> {
    let dim = text_encoder.dimension();
    if visual_vec.len() != dim {
        return Err(IndexError::DimensionMismatch { expected: dim, actual: visual_vec.len() });
    }
    let z_vis = normalize(visual_vec)?;
    let mut z_loc = Vec::with_capacity(patches.len());
    for patch in patches {
        Patch::validate_coords(patch.coords)?;
        if patch.vector.len() != dim {
            return Err(IndexError::DimensionMismatch { expected: dim, actual: patch.vector.len() });
        }
        z_loc.push(Patch { vector: normalize(&patch.vector)?, coords: patch.coords });
    }
    let descriptor = serialize_state(positive.iter(), negative.iter());
    let raw_sem = text_encoder.encode_text(&descriptor.text)?;
    if raw_sem.len() != dim {
        return Err(IndexError::DimensionMismatch { expected: dim, actual: raw_sem.len() });
    }
    let z_sem = normalize(&raw_sem)?;
    Ok(HybridEmbedding { z_vis, z_loc, z_sem })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchField {
    Vis,
    Sem,
    Fused,
}

#[derive(Debug, Clone)]
struct IndexEntry {
    embedding: HybridEmbedding,
    insert_seq: u64,
}

/// Brute-force cosine index over node embeddings, keyed by node key.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    alpha: f64,
    entries: BTreeMap<String, IndexEntry>,
    next_seq: u64,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self::with_alpha(dim, DEFAULT_FUSION_ALPHA)
    }

    pub fn with_alpha(dim: usize, alpha: f64) -> Self {
        Self { dim, alpha, entries: BTreeMap::new(), next_seq: 0 }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Inserts a node's triplet, normalizing every vector; returns an
    /// opaque handle usable as the graph's embedding reference.
    pub fn insert(&mut self, key: &str, embedding: HybridEmbedding) -> Result<u64, IndexError> {
        if self.entries.contains_key(key) {
            return Err(IndexError::DuplicateEntry(key.to_string()));
        }
        self.check_dim(&embedding.z_vis)?;
        self.check_dim(&embedding.z_sem)?;
        let mut z_loc = Vec::with_capacity(embedding.z_loc.len());
        for patch in &embedding.z_loc {
            self.check_dim(&patch.vector)?;
            Patch::validate_coords(patch.coords)?;
            z_loc.push(Patch { vector: normalize(&patch.vector)?, coords: patch.coords });
        }
        let normalized = HybridEmbedding {
            z_vis: normalize(&embedding.z_vis)?,
            z_loc,
            z_sem: normalize(&embedding.z_sem)?,
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries
            .insert(key.to_string(), IndexEntry { embedding: normalized, insert_seq: seq });
        Ok(seq)
    }

    /// Inserts a textual node with a single content vector serving as both
    /// the visual and semantic field.
    pub fn insert_content(&mut self, key: &str, vector: &[f32]) -> Result<u64, IndexError> {
        let unit = normalize(vector)?;
        self.insert(
            key,
            HybridEmbedding { z_vis: unit.clone(), z_loc: Vec::new(), z_sem: unit },
        )
    }

    pub fn embedding(&self, key: &str) -> Option<&HybridEmbedding> {
        self.entries.get(key).map(|e| &e.embedding)
    }

    fn check_dim(&self, vector: &[f32]) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, actual: vector.len() });
        }
        Ok(())
    }

    fn field_similarity(&self, entry: &IndexEntry, query: &[f32], field: SearchField) -> f64 {
        match field {
            SearchField::Vis => dot(query, &entry.embedding.z_vis),
            SearchField::Sem => dot(query, &entry.embedding.z_sem),
            SearchField::Fused => {
                self.alpha * dot(query, &entry.embedding.z_vis)
                    + (1.0 - self.alpha) * dot(query, &entry.embedding.z_sem)
            }
        }
    }

    /// Similarity of one node to the query under the fused field; `None`
    /// for keys not in the index.
    pub fn similarity(&self, key: &str, query: &[f32], field: SearchField) -> Option<f64> {
        self.entries.get(key).map(|e| self.field_similarity(e, query, field))
    }

    /// Exact top-k by cosine similarity over the selected field, descending,
    /// ties broken by ascending node key.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        field: SearchField,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        self.check_dim(query)?;
        let mut scored: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|(key, entry)| (key.clone(), self.field_similarity(entry, query, field)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Writes the binary vector file at `path` and the row manifest at
    /// `<path>.manifest.jsonl`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let rows: Vec<(RowMeta, &[f32])> = self.rows();

        let mut bin = std::io::BufWriter::new(std::fs::File::create(path)?);
        bin.write_all(VECTOR_FILE_MAGIC)?;
        bin.write_all(&(rows.len() as u64).to_le_bytes())?;
        bin.write_all(&(self.dim as u32).to_le_bytes())?;
        for (_, vector) in &rows {
            for &v in *vector {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        bin.flush()?;

        let mut manifest = std::io::BufWriter::new(std::fs::File::create(manifest_path(path))?);
        for (meta, _) in &rows {
            serde_json::to_writer(&mut manifest, meta)
                .map_err(|e| IndexError::CorruptStore(e.to_string()))?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        Ok(())
    }

    fn rows(&self) -> Vec<(RowMeta, &[f32])> {
        let mut rows: Vec<(RowMeta, &[f32])> = Vec::new();
        for (key, entry) in &self.entries {
            type FieldRow<'a> = (RowField, Option<[u16; 4]>, &'a [f32]);
            let mut fields: Vec<FieldRow> = vec![
                (RowField::Vis, None, &entry.embedding.z_vis),
                (RowField::Sem, None, &entry.embedding.z_sem),
            ];
            for patch in &entry.embedding.z_loc {
                fields.push((RowField::Loc, Some(patch.coords), &patch.vector));
            }
            for (field, coords, vector) in fields {
                let row = rows.len() as u64;
                rows.push((
                    RowMeta { coords, field, key: key.clone(), row, seq: entry.insert_seq },
                    vector,
                ));
            }
        }
        rows
    }

    pub fn load(path: impl AsRef<Path>, alpha: f64) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let corrupt = |reason: String| IndexError::CorruptStore(reason);

        let mut bin = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        bin.read_exact(&mut magic)
            .map_err(|_| corrupt("file shorter than header".into()))?;
        if &magic != VECTOR_FILE_MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let mut count_bytes = [0u8; 8];
        bin.read_exact(&mut count_bytes)
            .map_err(|_| corrupt("missing row count".into()))?;
        let row_count = u64::from_le_bytes(count_bytes) as usize;
        let mut dim_bytes = [0u8; 4];
        bin.read_exact(&mut dim_bytes)
            .map_err(|_| corrupt("missing dimension".into()))?;
        let dim = u32::from_le_bytes(dim_bytes) as usize;

        let mut vectors = Vec::with_capacity(row_count);
        let mut buf = vec![0u8; dim * 4];
        for row in 0..row_count {
            bin.read_exact(&mut buf)
                .map_err(|_| corrupt(format!("vector file truncated at row {row}")))?;
            let vector: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            vectors.push(vector);
        }
        let mut trailer = [0u8; 1];
        if bin.read(&mut trailer)? != 0 {
            return Err(corrupt("trailing bytes after last row".into()));
        }

        let manifest = std::fs::File::open(manifest_path(path))?;
        let mut metas: Vec<RowMeta> = Vec::with_capacity(row_count);
        for (i, line) in BufReader::new(manifest).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let meta: RowMeta = serde_json::from_str(&line)
                .map_err(|e| corrupt(format!("manifest line {}: {e}", i + 1)))?;
            metas.push(meta);
        }
        if metas.len() != row_count {
            return Err(corrupt(format!(
                "manifest has {} rows, vector file has {row_count}",
                metas.len()
            )));
        }

        #[derive(Default)]
        struct PendingEntry {
            vis: Option<Vec<f32>>,
            sem: Option<Vec<f32>>,
            loc: Vec<Patch>,
            seq: u64,
        }
        let mut index = VectorIndex::with_alpha(dim, alpha);
        let mut pending: BTreeMap<String, PendingEntry> = BTreeMap::new();
        for meta in metas {
            let row = meta.row as usize;
            if row >= vectors.len() {
                return Err(corrupt(format!("manifest row {row} out of range")));
            }
            let vector = vectors[row].clone();
            let slot = pending.entry(meta.key.clone()).or_insert_with(|| PendingEntry {
                seq: meta.seq,
                ..Default::default()
            });
            match meta.field {
                RowField::Vis => slot.vis = Some(vector),
                RowField::Sem => slot.sem = Some(vector),
                RowField::Loc => {
                    let coords = meta
                        .coords
                        .ok_or_else(|| corrupt(format!("loc row {row} missing coords")))?;
                    slot.loc.push(Patch { vector, coords });
                }
            }
        }
        for (key, PendingEntry { vis, sem, loc, seq }) in pending {
            let z_vis = vis.ok_or_else(|| corrupt(format!("node {key} missing vis row")))?;
            let z_sem = sem.ok_or_else(|| corrupt(format!("node {key} missing sem row")))?;
            index.entries.insert(
                key,
                IndexEntry { embedding: HybridEmbedding { z_vis, z_loc: loc, z_sem }, insert_seq: seq },
            );
            index.next_seq = index.next_seq.max(seq + 1);
        }
        Ok(index)
    }
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.jsonl");
    path.with_file_name(name)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Serialize, Deserialize)]
struct RowMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<[u16; 4]>,
    field: RowField,
    key: String,
    row: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RowField {
    Vis,
    Sem,
    Loc,
}
