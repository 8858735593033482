//! Labeled representation matrices and the `EMBV0001` interchange format.
//!
//! Layout (little-endian, no padding, no checksum):
//!
//! ```text
//! magic      8 bytes   "EMBV0001"
//! n          u64
//! d          u32
//! flags      u32       bit 0 = labels present
//! task_id    u16 length + UTF-8 bytes
//! classes    u32 count + count × u32 ids
//! matrix     n·d × f32 row-major
//! labels     n × u32   (only when bit 0 is set)
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on save, so a set
//! that came from a file saves back to the identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

pub const EMB_MAGIC: &[u8; 8] = b"EMBV0001";
const EMB_FAMILY: &[u8; 4] = b"EMBV";
const FLAG_LABELS: u32 = 1;

/// One task snapshot of representation (or input) vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    task_id: String,
    dim: usize,
    vectors: Vec<f64>,
    labels: Option<Vec<u32>>,
    class_space: Vec<u32>,
}

impl EmbeddingSet {
    /// Builds a set from a row-major matrix, enforcing every invariant.
    pub fn new(
        task_id: impl Into<String>,
        dim: usize,
        vectors: Vec<f64>,
        labels: Option<Vec<u32>>,
        class_space: Vec<u32>,
    ) -> Result<Self> {
        let set = EmbeddingSet {
            task_id: task_id.into(),
            dim,
            vectors,
            labels,
            class_space,
        };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set from individual rows.
    pub fn from_rows(
        task_id: impl Into<String>,
        rows: &[Vec<f64>],
        labels: Option<Vec<u32>>,
        class_space: Vec<u32>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::dim(dim, row.len()));
            }
            vectors.extend_from_slice(row);
        }
        Self::new(task_id, dim, vectors, labels, class_space)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        if !self.vectors.len().is_multiple_of(self.dim) {
            return Err(Error::Validation(format!(
                "matrix of {} values is not a whole number of {}-dim rows",
                self.vectors.len(),
                self.dim
            )));
        }
        if self.task_id.len() > u16::MAX as usize {
            return Err(Error::Validation("task id longer than 65535 bytes".into()));
        }
        if let Some(i) = self.vectors.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry at row {}, column {}",
                i / self.dim,
                i % self.dim
            )));
        }
        if let Some(row) = (0..self.len()).find(|&i| linalg::is_zero(self.row(i))) {
            return Err(Error::Validation(format!("row {row} is the zero vector")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.len()
                )));
            }
            if let Some((row, y)) = labels
                .iter()
                .enumerate()
                .find(|(_, y)| !self.class_space.contains(y))
            {
                return Err(Error::Validation(format!(
                    "label {y} on row {row} is not in the class space"
                )));
            }
        }
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.vectors
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_space(&self) -> &[u32] {
        &self.class_space
    }

    /// Same rows and metadata with a different matrix (e.g. the encoder's
    /// output for these inputs).
    pub fn with_vectors(&self, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        Self::new(
            self.task_id.clone(),
            dim,
            vectors,
            self.labels.clone(),
            self.class_space.clone(),
        )
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        Self::new(
            self.task_id.clone(),
            self.dim,
            vectors,
            labels,
            self.class_space.clone(),
        )
    }

    /// The rows of one class, or an empty-set error if none carry it.
    pub fn class_view(&self, class_id: u32) -> Result<ClassView<'_>> {
        let labels = self.labels.as_ref().ok_or(Error::MissingLabels)?;
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class_id)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptySet(format!("no rows labeled {class_id}")));
        }
        Ok(ClassView {
            parent: self,
            class_id,
            rows,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.len();
        let mut narrowed = Vec::with_capacity(self.vectors.len());
        for (i, &x) in self.vectors.iter().enumerate() {
            let y = x as f32;
            if !y.is_finite() {
                return Err(Error::Validation(format!(
                    "entry at row {} overflows f32",
                    i / self.dim
                )));
            }
            narrowed.push(y);
        }
        if let Some(row) = narrowed
            .chunks_exact(self.dim)
            .position(|r| r.iter().all(|&x| x == 0.0))
        {
            return Err(Error::Validation(format!(
                "row {row} underflows to the zero vector in f32"
            )));
        }

        let label_bytes = self.labels.as_ref().map_or(0, |_| 4 * n);
        let mut out = Vec::with_capacity(
            30 + self.task_id.len() + 4 * self.class_space.len() + 4 * narrowed.len() + label_bytes,
        );
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.task_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.task_id.as_bytes());
        out.extend_from_slice(&(self.class_space.len() as u32).to_le_bytes());
        for c in &self.class_space {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for x in narrowed {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for y in labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8).map_err(|_| Error::Format("file shorter than magic".into()))?;
        if magic != EMB_MAGIC {
            if &magic[..4] == EMB_FAMILY {
                return Err(Error::Format(format!(
                    "unsupported version {:?}",
                    String::from_utf8_lossy(&magic[4..])
                )));
            }
            return Err(Error::Format("bad magic bytes".into()));
        }
        let n = r.u64()?;
        let dim = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !FLAG_LABELS != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
        }
        let id_len = r.u16()? as usize;
        let task_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Format("task id is not UTF-8".into()))?
            .to_owned();
        let class_count = r.u32()? as usize;
        r.ensure(class_count.checked_mul(4))?;
        let class_space = (0..class_count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;

        let n = usize::try_from(n).map_err(|_| Error::Corruption("row count overflows".into()))?;
        let cells = n.checked_mul(dim);
        r.ensure(cells.and_then(|c| c.checked_mul(4)))?;
        let cells = cells.unwrap_or(0);
        let mut vectors = Vec::with_capacity(cells);
        for _ in 0..cells {
            vectors.push(f64::from(r.f32()?));
        }
        let labels = if flags & FLAG_LABELS != 0 {
            r.ensure(n.checked_mul(4))?;
            Some((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        Self::new(task_id, dim, vectors, labels, class_space)
    }
}

/// Reads an `EMBV0001` file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

/// Writes an `EMBV0001` file.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = set.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// The rows of one class inside a parent set.
#[derive(Debug, Clone)]
pub struct ClassView<'a> {
    parent: &'a EmbeddingSet,
    class_id: u32,
    rows: Vec<usize>,
}

impl<'a> ClassView<'a> {
    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn parent(&self) -> &'a EmbeddingSet {
        self.parent
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.parent.dim()
    }

    /// The `k`-th vector of this class (not the `k`-th row of the parent).
    pub fn vector(&self, k: usize) -> &'a [f64] {
        self.parent.row(self.rows[k])
    }

    pub fn vectors(&self) -> Vec<&'a [f64]> {
        self.rows.iter().map(|&r| self.parent.row(r)).collect()
    }
}

/// Partitions a labeled set into one view per class that occurs, ordered by
/// class id.
pub fn split_by_class(set: &EmbeddingSet) -> Result<Vec<ClassView<'_>>> {
    let labels = set.labels().ok_or(Error::MissingLabels)?;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(class_id, rows)| ClassView {
            parent: set,
            class_id,
            rows,
        })
        .collect())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Fails early when a declared section cannot fit in what is left.
    pub(crate) fn ensure(&self, needed: Option<usize>) -> Result<()> {
        match needed {
            Some(k) if k <= self.remaining() => Ok(()),
            _ => Err(Error::Corruption(format!(
                "payload truncated at byte {}",
                self.pos
            ))),
        }
    }

    pub(crate) fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        self.ensure(Some(k))?;
        let out = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        buf.copy_from_slice(self.take(N)?);
        Ok(buf)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<f64> = (0..n * d)
            .map(|_| f64::from(rng.random_range(-1.0f32..1.0)) + 2.0)
            .collect();
        let labels = (0..n).map(|i| (i % 4) as u32).collect();
        EmbeddingSet::new("rand", d, vectors, Some(labels), vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn minimal_file_loads() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMBV0001");
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"t");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let set = EmbeddingSet::from_bytes(&bytes).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.row(0), &[1.0, 0.0]);
        assert_eq!(set.labels(), Some(&[0u32][..]));
        assert_eq!(set.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn round_trip_file_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emb");
        let set = random_set(100, 16, 3);
        save_embeddings(&set, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded, set);
        save_embeddings(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_matrix_is_corruption() {
        let set = random_set(10, 4, 1);
        let bytes = set.to_bytes().unwrap();
        // header: 8 + 8 + 4 + 4 + (2 + 4) + (4 + 16) = 50 bytes; cut inside row 3.
        let cut = 50 + 3 * 16 + 6;
        assert!(matches!(
            EmbeddingSet::from_bytes(&bytes[..cut]),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn header_errors() {
        let set = random_set(3, 2, 1);
        let good = set.to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingSet::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[7] = b'2';
        assert!(matches!(EmbeddingSet::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(EmbeddingSet::from_bytes(&bad), Err(Error::Corruption(_))));

        let mut bad = good.clone();
        bad[20] |= 0b10;
        assert!(matches!(EmbeddingSet::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_payloads_are_rejected() {
        let mut bytes = random_set(2, 2, 1).to_bytes().unwrap();
        // first matrix value starts right after the 50-byte header
        bytes[50..54].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingSet::from_bytes(&bytes),
            Err(Error::Validation(_))
        ));

        assert!(matches!(
            EmbeddingSet::from_rows("z", &[vec![0.0, 0.0]], None, vec![]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            EmbeddingSet::from_rows("z", &[vec![1.0, 0.0]], Some(vec![7]), vec![0, 1]),
            Err(Error::Validation(_))
        ));
        let big = EmbeddingSet::from_rows("z", &[vec![1e300, 1.0]], None, vec![]).unwrap();
        assert!(big.to_bytes().is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let set = EmbeddingSet::from_rows(
            "t",
            &[vec![1.0], vec![2.0], vec![3.0]],
            Some(vec![0, 1, 0]),
            vec![0, 1],
        )
        .unwrap();
        let views = split_by_class(&set).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].class_id(), 0);
        assert_eq!(views[0].row_indices(), &[0, 2]);
        assert_eq!(views[1].row_indices(), &[1]);
        assert_eq!(views[0].vector(1), &[3.0]);

        let same = EmbeddingSet::from_rows("t", &[vec![1.0], vec![2.0]], Some(vec![5, 5]), vec![5])
            .unwrap();
        let views = split_by_class(&same).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].row_indices(), &[0, 1]);

        let unlabeled = EmbeddingSet::from_rows("t", &[vec![1.0]], None, vec![]).unwrap();
        assert!(matches!(split_by_class(&unlabeled), Err(Error::MissingLabels)));
    }

    #[test]
    fn balanced_split_counts() {
        let set = random_set(400, 3, 9);
        let views = split_by_class(&set).unwrap();
        let labels = set.labels().unwrap();
        assert_eq!(views.len(), 4);
        for v in &views {
            let expected = labels.iter().filter(|&&y| y == v.class_id()).count();
            assert_eq!(expected, 100);
            assert_eq!(v.len(), expected);
        }
    }

    proptest! {
        #[test]
        fn load_save_identity(
            n in 1usize..20,
            d in 1usize..6,
            seed in any::<u64>(),
            labeled in any::<bool>(),
        ) {
            let mut set = random_set(n, d, seed);
            if !labeled {
                set = EmbeddingSet::new("rand", d, set.matrix().to_vec(), None, vec![]).unwrap();
            }
            let bytes = set.to_bytes().unwrap();
            let back = EmbeddingSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn mutated_headers_never_panic(pos in 0usize..50, byte in any::<u8>(), cut in 0usize..120) {
            let set = random_set(4, 3, 5);
            let mut bytes = set.to_bytes().unwrap();
            bytes[pos] = byte;
            let cut = cut.min(bytes.len());
            if let Ok(loaded) = EmbeddingSet::from_bytes(&bytes[..cut]) {
                // Whatever survives must satisfy the invariants again.
                prop_assert!(EmbeddingSet::new(
                    loaded.task_id(),
                    loaded.dim(),
                    loaded.matrix().to_vec(),
                    loaded.labels().map(<[u32]>::to_vec),
                    loaded.class_space().to_vec(),
                ).is_ok());
            }
            let _ = EmbeddingSet::from_bytes(&bytes);
        }

        #[test]
        fn split_is_a_partition(labels in proptest::collection::vec(0u32..5, 1..60)) {
            let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64 + 1.0]).collect();
            let set = EmbeddingSet::from_rows("p", &rows, Some(labels.clone()), (0..5).collect()).unwrap();
            let views = split_by_class(&set).unwrap();
            let mut all: Vec<usize> = views.iter().flat_map(|v| v.row_indices().to_vec()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for v in &views {
                prop_assert!(v.row_indices().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(v.row_indices().iter().all(|&r| labels[r] == v.class_id()));
            }
        }
    }
}
