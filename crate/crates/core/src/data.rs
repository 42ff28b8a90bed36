//! Bag data model and file formats.
//!
//! Instance embeddings are stored as `f32` and promoted to `f64` for every
//! computation. A bag is one SIIB file:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SIIB"
//! 4       4         version (u32, = 1)
//! 8       4         D (u32)
//! 12      4         n (u32)
//! 16      4         flags (u32): bit0 coords, bit1 instance labels
//! 20      4·n·D     f32 values, instance-major
//! ..      8·n       i32 (row, col) pairs, if bit0
//! ..      n         u8 instance labels, if bit1
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const SIIB_MAGIC: [u8; 4] = *b"SIIB";
pub const SIIB_VERSION: u32 = 1;
pub const SIIB_HEADER_LEN: usize = 20;

const FLAG_COORDS: u32 = 1;
const FLAG_LABELS: u32 = 1 << 1;

/// D×n matrix of instance embeddings; column `i` is instance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    values: Vec<f32>,
    coords: Option<Vec<[i32; 2]>>,
    instance_labels: Option<Vec<u8>>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from instance-major `f32` values (`count` blocks of `dim`).
    pub fn new(dim: usize, count: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape(
                "embedding dimension must be at least 1".into(),
            ));
        }
        if values.len() != dim * count {
            return Err(Error::Shape(format!(
                "{} values for a {dim}x{count} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            dim,
            count,
            values,
            coords: None,
            instance_labels: None,
        })
    }

    /// Rounds instance-major `f64` values to `f32` storage.
    pub fn from_f64(dim: usize, count: usize, values: &[f64]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Self::new(dim, count, values.iter().map(|&v| v as f32).collect())
    }

    /// Builds a matrix from a list of equally sized columns.
    pub fn from_columns<C: AsRef<[f64]>>(dim: usize, columns: &[C]) -> Result<Self> {
        let mut values = Vec::with_capacity(dim * columns.len());
        for (i, c) in columns.iter().enumerate() {
            let c = c.as_ref();
            if c.len() != dim {
                return Err(Error::Shape(format!(
                    "column {i} has length {}, expected {dim}",
                    c.len()
                )));
            }
            values.extend_from_slice(c);
        }
        Self::from_f64(dim, columns.len(), &values)
    }

    pub fn with_coords(mut self, coords: Vec<[i32; 2]>) -> Result<Self> {
        if coords.len() != self.count {
            return Err(Error::Shape(format!(
                "{} coordinates for {} instances",
                coords.len(),
                self.count
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn with_instance_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.count {
            return Err(Error::Shape(format!(
                "{} instance labels for {} instances",
                labels.len(),
                self.count
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidLabel {
                index: i,
                value: labels[i],
            });
        }
        self.instance_labels = Some(labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn coords(&self) -> Option<&[[i32; 2]]> {
        self.coords.as_deref()
    }

    pub fn instance_labels(&self) -> Option<&[u8]> {
        self.instance_labels.as_deref()
    }

    pub fn column(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_f64(&self, i: usize) -> Vec<f64> {
        self.column(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// All values promoted to `f64`, instance-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn column_norm(&self, i: usize) -> f64 {
        self.column(i)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Gathers the given columns (with their coords and labels) in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Shape(format!(
                    "column index {i} out of range for {} instances",
                    self.count
                )));
            }
            values.extend_from_slice(self.column(i));
        }
        Ok(Self {
            dim: self.dim,
            count: indices.len(),
            values,
            coords: self
                .coords
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            instance_labels: self
                .instance_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Drops coordinates and instance labels.
    pub fn without_annotations(&self) -> Self {
        Self {
            dim: self.dim,
            count: self.count,
            values: self.values.clone(),
            coords: None,
            instance_labels: None,
        }
    }

    fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.coords.is_some() {
            flags |= FLAG_COORDS;
        }
        if self.instance_labels.is_some() {
            flags |= FLAG_LABELS;
        }
        flags
    }

    pub fn encoded_len(&self) -> usize {
        let mut len = SIIB_HEADER_LEN + 4 * self.values.len();
        if self.coords.is_some() {
            len += 8 * self.count;
        }
        if self.instance_labels.is_some() {
            len += self.count;
        }
        len
    }

    pub fn to_siib_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let dim =
            u32::try_from(self.dim).map_err(|_| Error::Shape("dimension exceeds u32".into()))?;
        let count = u32::try_from(self.count)
            .map_err(|_| Error::Shape("instance count exceeds u32".into()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&SIIB_MAGIC);
        out.extend_from_slice(&SIIB_VERSION.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&self.flags().to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(coords) = &self.coords {
            for [r, c] in coords {
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        if let Some(labels) = &self.instance_labels {
            out.extend_from_slice(labels);
        }
        Ok(out)
    }

    pub fn from_siib_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != SIIB_MAGIC {
            return Err(Error::BadMagic {
                expected: SIIB_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != SIIB_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: SIIB_VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !(FLAG_COORDS | FLAG_LABELS) != 0 {
            return Err(Error::Invalid(format!("unknown SIIB flags {flags:#x}")));
        }
        if dim == 0 {
            return Err(Error::Shape(
                "embedding dimension must be at least 1".into(),
            ));
        }

        let mut expected = SIIB_HEADER_LEN + 4 * dim * count;
        if flags & FLAG_COORDS != 0 {
            expected += 8 * count;
        }
        if flags & FLAG_LABELS != 0 {
            expected += count;
        }
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes(bytes.len() - expected));
        }

        let mut values = Vec::with_capacity(dim * count);
        for _ in 0..dim * count {
            values.push(f32::from_le_bytes(r.array::<4>()?));
        }
        let mut m = Self::new(dim, count, values)?;
        if flags & FLAG_COORDS != 0 {
            let mut coords = Vec::with_capacity(count);
            for _ in 0..count {
                let row = i32::from_le_bytes(r.array::<4>()?);
                let col = i32::from_le_bytes(r.array::<4>()?);
                coords.push([row, col]);
            }
            m = m.with_coords(coords)?;
        }
        if flags & FLAG_LABELS != 0 {
            m = m.with_instance_labels(r.take(count)?.to_vec())?;
        }
        Ok(m)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array::<4>()?))
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let bytes = m.to_siib_bytes()?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_siib_bytes(&read_bytes(path.as_ref())?)
}

/// D×τ matrix of representative negative instances. Every column has a
/// strictly positive norm.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMatrix(EmbeddingMatrix);

impl KeyMatrix {
    pub fn new(m: EmbeddingMatrix) -> Result<Self> {
        if m.count() == 0 {
            return Err(Error::Shape("key matrix has no columns".into()));
        }
        if let Some(i) = (0..m.count()).find(|&i| m.column_norm(i) <= 0.0) {
            return Err(Error::Invalid(format!("key column {i} has zero norm")));
        }
        Ok(Self(m.without_annotations()))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.count()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.0
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_embeddings(&self.0, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_embeddings(path)?)
    }
}

/// The instances of one bag retained by salient instance inference, ordered
/// by descending saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct SalientBag {
    pub source_bag_id: String,
    pub selected_indices: Vec<usize>,
    pub saliency: Vec<f64>,
    pub embeddings: EmbeddingMatrix,
}

impl SalientBag {
    pub fn len(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_indices.is_empty()
    }

    /// The selected instances re-ordered by their original index.
    pub fn in_source_order(&self) -> EmbeddingMatrix {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&j| self.selected_indices[j]);
        self.embeddings
            .select_columns(&order)
            .expect("positions are in range")
    }

    /// Sidecar CSV `selected_index,saliency`.
    pub fn saliency_csv(&self) -> String {
        let mut out = String::from("selected_index,saliency\n");
        for (i, s) in self.selected_indices.iter().zip(&self.saliency) {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagRecord {
    pub bag_id: String,
    pub label: u8,
    pub embedding_path: PathBuf,
}

/// Ordered list of bags. Relative paths are resolved against the manifest's
/// directory when read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<BagRecord>,
}

impl Manifest {
    pub fn new(records: Vec<BagRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.label > 1 {
                return Err(Error::Manifest(format!(
                    "bag {:?}: label {} is not 0 or 1",
                    r.bag_id, r.label
                )));
            }
            if !seen.insert(r.bag_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate bag_id {:?}", r.bag_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn negatives(&self) -> impl Iterator<Item = &BagRecord> {
        self.records.iter().filter(|r| r.label == 0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bag_id,label,path\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{}\n",
                r.bag_id,
                r.label,
                r.embedding_path.display()
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Parses manifest CSV text. Paths are returned as written.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Manifest(format!("missing column {name:?}")))
    };
    let (id_col, label_col, path_col) = (column("bag_id")?, column("label")?, column("path")?);

    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Manifest(e.to_string()))?;
        let field = |c: usize| {
            row.get(c)
                .ok_or_else(|| Error::Manifest(format!("row {}: missing field", line + 1)))
        };
        let label = match field(label_col)? {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Manifest(format!(
                    "row {}: label {other:?} is not 0 or 1",
                    line + 1
                )))
            }
        };
        records.push(BagRecord {
            bag_id: field(id_col)?.to_string(),
            label,
            embedding_path: PathBuf::from(field(path_col)?),
        });
    }
    Manifest::new(records)
}

/// Reads a manifest and resolves every path relative to the manifest's
/// directory; each resolved path must exist.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    for r in &mut manifest.records {
        r.embedding_path = base.join(&r.embedding_path);
        if !r.embedding_path.is_file() {
            return Err(Error::Manifest(format!(
                "bag {:?}: file {} not found",
                r.bag_id,
                r.embedding_path.display()
            )));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::from_columns(2, &[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap()
    }

    #[test]
    fn encoded_size_matches_layout() {
        let m = sample();
        assert_eq!(m.to_siib_bytes().unwrap().len(), 44);
        let full = m
            .with_coords(vec![[0, 0], [0, 1], [1, 0]])
            .unwrap()
            .with_instance_labels(vec![0, 1, 0])
            .unwrap();
        assert_eq!(full.to_siib_bytes().unwrap().len(), 44 + 24 + 3);
        assert_eq!(full.encoded_len(), 71);
    }

    #[test]
    fn round_trip_with_annotations() {
        let m = sample()
            .with_coords(vec![[3, -1], [0, 7], [2, 2]])
            .unwrap()
            .with_instance_labels(vec![1, 0, 1])
            .unwrap();
        let back = EmbeddingMatrix::from_siib_bytes(&m.to_siib_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn nan_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.siib");
        let err = EmbeddingMatrix::new(2, 1, vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(1)));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_siib_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            EmbeddingMatrix::from_siib_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_siib_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_siib_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn header_claims_more_columns_than_payload() {
        let m = EmbeddingMatrix::from_f64(2, 4, &[1.0; 8]).unwrap();
        let mut bytes = m.to_siib_bytes().unwrap();
        bytes[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_siib_bytes(&bytes),
            Err(Error::Truncated {
                expected: 60,
                found: 52
            })
        ));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = sample().to_siib_bytes().unwrap();
        bytes[24..28].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_siib_bytes(&bytes),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn trailing_bytes() {
        let mut bytes = sample().to_siib_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            EmbeddingMatrix::from_siib_bytes(&bytes),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("bag_id,label,path\na,0,a.siib\nb,1,b.siib\n").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].label, 1);
        assert_eq!(m.records[0].embedding_path, PathBuf::from("a.siib"));
    }

    #[test]
    fn manifest_duplicate_id() {
        let err = parse_manifest("bag_id,label,path\na,0,a.siib\na,1,b.siib\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn manifest_bad_label() {
        let err = parse_manifest("bag_id,label,path\na,2,a.siib\n").unwrap_err();
        assert!(err.to_string().contains("not 0 or 1"));
    }

    #[test]
    fn manifest_missing_column() {
        let err = parse_manifest("bag_id,path\na,a.siib\n").unwrap_err();
        assert!(err.to_string().contains("missing column \"label\""));
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        write_embeddings(&sample(), dir.path().join("a.siib")).unwrap();
        std::fs::write(dir.path().join("m.csv"), "bag_id,label,path\na,0,a.siib\n").unwrap();
        let m = read_manifest(dir.path().join("m.csv")).unwrap();
        assert_eq!(m.records[0].embedding_path, dir.path().join("a.siib"));

        std::fs::write(
            dir.path().join("bad.csv"),
            "bag_id,label,path\nz,0,zz.siib\n",
        )
        .unwrap();
        assert!(read_manifest(dir.path().join("bad.csv")).is_err());
    }

    #[test]
    fn key_matrix_rejects_zero_column() {
        assert!(KeyMatrix::new(sample()).is_err());
        let ok = sample().select_columns(&[0, 1]).unwrap();
        assert_eq!(KeyMatrix::new(ok).unwrap().count(), 2);
    }
}
