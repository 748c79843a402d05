//! Association-matrix data model, construction, and file I/O.
//!
//! An [`AssociationMatrix`] is the central record of a forgetting study: an
//! `M × N` grid whose entry `(i, j)` measures how much upstream example `j`
//! was forgotten after fine-tuning on task `i`. Rows are built from pairs of
//! [`PerformanceSnapshot`]s via [`build_row`], and matrices round-trip
//! through CSV (human-readable) and a framed little-endian binary format
//! (bit-exact, fast at scale). [`export_heatmap`] renders a matrix as a
//! portable graymap for quick visual inspection.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes identifying the framed binary matrix format.
const BINARY_MAGIC: &[u8; 4] = b"AMX1";

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix must have at least one task and one example")]
    Empty,
    #[error("dimension mismatch: {context} has length {got}, expected {expected}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("duplicate {context} id `{id}`")]
    DuplicateId { context: &'static str, id: String },
    #[error("snapshots disagree on example ids at position {index} (`{before}` vs `{after}`)")]
    IdMismatch {
        index: usize,
        before: String,
        after: String,
    },
    #[error("snapshots disagree on value kind ({before} vs {after})")]
    KindMismatch {
        before: MatrixKind,
        after: MatrixKind,
    },
    #[error("binary-kind value at row {row}, column {col} is {value}, expected 0 or 1")]
    NonBinaryValue { row: usize, col: usize, value: f64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("task index {index} out of range for {tasks} tasks")]
    TaskOutOfRange { index: usize, tasks: usize },
    #[error("heatmap range is empty: lo={lo} must be below hi={hi}")]
    BadHeatmapRange { lo: f64, hi: f64 },
    #[error("CSV header must start with `task_id` followed by example ids")]
    MalformedHeader,
    #[error("CSV row {row} has {got} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("unparseable cell at row {row}, column {col}: `{content}`")]
    BadCell {
        row: usize,
        col: usize,
        content: String,
    },
    #[error("bad magic bytes: expected `AMX1`")]
    BadMagic,
    #[error("unknown kind byte {0}")]
    BadKindByte(u8),
    #[error("binary file truncated or over-long")]
    BadFraming,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// What the numbers in a matrix or snapshot mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// Log-perplexity (or loss) increase in nats; may be negative.
    Continuous,
    /// Exact-match drop: 1 iff the example flipped from correct to incorrect.
    Binary,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixKind::Continuous => write!(f, "continuous"),
            MatrixKind::Binary => write!(f, "binary"),
        }
    }
}

/// On-disk serialization format for matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

/// Per-example scores of one model checkpoint on one evaluation set.
///
/// Two snapshots of the same examples — before and after fine-tuning —
/// difference into one forgetting row via [`build_row`].
#[derive(Debug, Clone)]
pub struct PerformanceSnapshot {
    example_ids: Vec<String>,
    scores: Vec<f64>,
    kind: MatrixKind,
}

impl PerformanceSnapshot {
    pub fn new(
        example_ids: Vec<String>,
        scores: Vec<f64>,
        kind: MatrixKind,
    ) -> Result<Self, MatrixError> {
        if example_ids.len() != scores.len() {
            return Err(MatrixError::DimensionMismatch {
                context: "scores",
                expected: example_ids.len(),
                got: scores.len(),
            });
        }
        check_unique(&example_ids, "example")?;
        for (j, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(MatrixError::NonFiniteValue { row: 0, col: j });
            }
            if kind == MatrixKind::Binary && s != 0.0 && s != 1.0 {
                return Err(MatrixError::NonBinaryValue {
                    row: 0,
                    col: j,
                    value: s,
                });
            }
        }
        Ok(Self {
            example_ids,
            scores,
            kind,
        })
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }
}

/// One forgetting row: how much each example's score degraded between two
/// snapshots.
///
/// Continuous kind subtracts (`after − before`, so positive means forgotten;
/// negative values are meaningful and retained). Binary kind marks 1 only
/// for examples that were correct before and incorrect after — examples the
/// model never knew are not counted as forgotten.
pub fn build_row(
    before: &PerformanceSnapshot,
    after: &PerformanceSnapshot,
) -> Result<Vec<f64>, MatrixError> {
    if before.kind != after.kind {
        return Err(MatrixError::KindMismatch {
            before: before.kind,
            after: after.kind,
        });
    }
    if before.example_ids.len() != after.example_ids.len() {
        return Err(MatrixError::DimensionMismatch {
            context: "after snapshot",
            expected: before.example_ids.len(),
            got: after.example_ids.len(),
        });
    }
    for (idx, (b, a)) in before
        .example_ids
        .iter()
        .zip(after.example_ids.iter())
        .enumerate()
    {
        if b != a {
            return Err(MatrixError::IdMismatch {
                index: idx,
                before: b.clone(),
                after: a.clone(),
            });
        }
    }
    let row = match before.kind {
        MatrixKind::Continuous => before
            .scores
            .iter()
            .zip(&after.scores)
            .map(|(&b, &a)| a - b)
            .collect(),
        MatrixKind::Binary => before
            .scores
            .iter()
            .zip(&after.scores)
            .map(|(&b, &a)| if b == 1.0 && a == 0.0 { 1.0 } else { 0.0 })
            .collect(),
    };
    Ok(row)
}

/// The task-by-example forgetting record `Z`.
///
/// Immutable after construction; share it freely across threads. Entries
/// where `observed` is false carry no information (their stored value is
/// normalised to zero) and must be excluded from every fit and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    values: Array2<f64>,
    observed: Array2<bool>,
    kind: MatrixKind,
    task_ids: Vec<String>,
    example_ids: Vec<String>,
}

impl AssociationMatrix {
    /// Builds a fully observed matrix.
    pub fn new(
        values: Array2<f64>,
        kind: MatrixKind,
        task_ids: Vec<String>,
        example_ids: Vec<String>,
    ) -> Result<Self, MatrixError> {
        let observed = Array2::from_elem(values.dim(), true);
        Self::with_mask(values, observed, kind, task_ids, example_ids)
    }

    /// Builds a partially observed matrix. Unobserved values are normalised
    /// to zero so equality and serialization are well defined.
    pub fn with_mask(
        mut values: Array2<f64>,
        observed: Array2<bool>,
        kind: MatrixKind,
        task_ids: Vec<String>,
        example_ids: Vec<String>,
    ) -> Result<Self, MatrixError> {
        let (m, n) = values.dim();
        if m == 0 || n == 0 {
            return Err(MatrixError::Empty);
        }
        if task_ids.len() != m {
            return Err(MatrixError::DimensionMismatch {
                context: "task_ids",
                expected: m,
                got: task_ids.len(),
            });
        }
        if example_ids.len() != n {
            return Err(MatrixError::DimensionMismatch {
                context: "example_ids",
                expected: n,
                got: example_ids.len(),
            });
        }
        if observed.dim() != values.dim() {
            return Err(MatrixError::DimensionMismatch {
                context: "observed mask",
                expected: m * n,
                got: observed.len(),
            });
        }
        check_unique(&task_ids, "task")?;
        check_unique(&example_ids, "example")?;
        for ((i, j), v) in values.indexed_iter_mut() {
            if observed[(i, j)] {
                if !v.is_finite() {
                    return Err(MatrixError::NonFiniteValue { row: i, col: j });
                }
                if kind == MatrixKind::Binary && *v != 0.0 && *v != 1.0 {
                    return Err(MatrixError::NonBinaryValue {
                        row: i,
                        col: j,
                        value: *v,
                    });
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            observed,
            kind,
            task_ids,
            example_ids,
        })
    }

    /// Assembles a matrix from labelled rows sharing one example-id table.
    pub fn from_rows(
        kind: MatrixKind,
        example_ids: Vec<String>,
        rows: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, MatrixError> {
        let n = example_ids.len();
        let m = rows.len();
        if m == 0 || n == 0 {
            return Err(MatrixError::Empty);
        }
        let mut values = Array2::zeros((m, n));
        let mut task_ids = Vec::with_capacity(m);
        for (i, (id, row)) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(MatrixError::DimensionMismatch {
                    context: "row",
                    expected: n,
                    got: row.len(),
                });
            }
            values
                .row_mut(i)
                .iter_mut()
                .zip(row)
                .for_each(|(dst, v)| *dst = v);
            task_ids.push(id);
        }
        Self::new(values, kind, task_ids, example_ids)
    }

    pub fn num_tasks(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_examples(&self) -> usize {
        self.values.ncols()
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn observed(&self) -> ArrayView2<'_, bool> {
        self.observed.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == id)
    }

    /// Fraction of observed entries that are ≥ 0 (all of them, for binary
    /// matrices; for continuous ones this is the share of examples that did
    /// not improve).
    pub fn fraction_nonnegative(&self) -> f64 {
        let mut total = 0usize;
        let mut nonneg = 0usize;
        for ((i, j), &v) in self.values.indexed_iter() {
            if self.observed[(i, j)] {
                total += 1;
                if v >= 0.0 {
                    nonneg += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            nonneg as f64 / total as f64
        }
    }

    /// New matrix restricted to the given task rows, in the given order.
    pub fn select_tasks(&self, indices: &[usize]) -> Result<Self, MatrixError> {
        if indices.is_empty() {
            return Err(MatrixError::Empty);
        }
        let mut values = Array2::zeros((indices.len(), self.num_examples()));
        let mut observed = Array2::from_elem((indices.len(), self.num_examples()), true);
        let mut task_ids = Vec::with_capacity(indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            if src >= self.num_tasks() {
                return Err(MatrixError::TaskOutOfRange {
                    index: src,
                    tasks: self.num_tasks(),
                });
            }
            values.row_mut(dst).assign(&self.values.row(src));
            observed
                .row_mut(dst)
                .iter_mut()
                .zip(self.observed.row(src))
                .for_each(|(d, &s)| *d = s);
            task_ids.push(self.task_ids[src].clone());
        }
        Self::with_mask(
            values,
            observed,
            self.kind,
            task_ids,
            self.example_ids.clone(),
        )
    }
}

fn check_unique(ids: &[String], context: &'static str) -> Result<(), MatrixError> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(MatrixError::DuplicateId {
                context,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

/// Loads a matrix from `path`. CSV files carry no kind marker and are read
/// as continuous; use [`load_csv_with_kind`] when the file holds 0/1 drops.
pub fn load_matrix(path: &Path, format: FileFormat) -> Result<AssociationMatrix, MatrixError> {
    match format {
        FileFormat::Csv => load_csv_with_kind(path, MatrixKind::Continuous),
        FileFormat::Binary => read_binary(&mut BufReader::new(File::open(path)?)),
    }
}

pub fn save_matrix(
    m: &AssociationMatrix,
    path: &Path,
    format: FileFormat,
) -> Result<(), MatrixError> {
    match format {
        FileFormat::Csv => write_csv(m, &mut BufWriter::new(File::create(path)?)),
        FileFormat::Binary => {
            let mut w = BufWriter::new(File::create(path)?);
            write_binary(m, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Reads a CSV matrix, interpreting its values under the given kind. A
/// binary matrix re-validates the 0/1 invariant on load.
pub fn load_csv_with_kind(
    path: &Path,
    kind: MatrixKind,
) -> Result<AssociationMatrix, MatrixError> {
    read_csv(&mut BufReader::new(File::open(path)?), kind)
}

fn write_csv<W: Write>(m: &AssociationMatrix, w: &mut W) -> Result<(), MatrixError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = Vec::with_capacity(m.num_examples() + 1);
    header.push("task_id".to_string());
    header.extend(m.example_ids.iter().cloned());
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(m.num_examples() + 1);
    for i in 0..m.num_tasks() {
        record.clear();
        record.push(m.task_ids[i].clone());
        for j in 0..m.num_examples() {
            if m.observed[(i, j)] {
                record.push(m.values[(i, j)].to_string());
            } else {
                record.push(String::new());
            }
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_csv<R: Read>(r: &mut R, kind: MatrixKind) -> Result<AssociationMatrix, MatrixError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => return Err(MatrixError::MalformedHeader),
    };
    let mut fields = header.iter();
    if fields.next() != Some("task_id") {
        return Err(MatrixError::MalformedHeader);
    }
    let example_ids: Vec<String> = fields.map(str::to_string).collect();
    if example_ids.is_empty() {
        return Err(MatrixError::MalformedHeader);
    }
    let n = example_ids.len();

    let mut task_ids = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(MatrixError::RaggedRow {
                row: i + 1,
                expected: n + 1,
                got: rec.len(),
            });
        }
        task_ids.push(rec[0].to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                rows.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| MatrixError::BadCell {
                    row: i + 1,
                    col: j + 1,
                    content: cell.to_string(),
                })?;
                rows.push(v);
                mask.push(true);
            }
        }
    }
    let m = task_ids.len();
    if m == 0 {
        return Err(MatrixError::Empty);
    }
    let values =
        Array2::from_shape_vec((m, n), rows).expect("row count and length checked above");
    let observed =
        Array2::from_shape_vec((m, n), mask).expect("row count and length checked above");
    AssociationMatrix::with_mask(values, observed, kind, task_ids, example_ids)
}

fn write_binary<W: Write>(m: &AssociationMatrix, w: &mut W) -> Result<(), MatrixError> {
    w.write_all(BINARY_MAGIC)?;
    w.write_u32::<LittleEndian>(m.num_tasks() as u32)?;
    w.write_u32::<LittleEndian>(m.num_examples() as u32)?;
    w.write_u8(match m.kind {
        MatrixKind::Continuous => 0,
        MatrixKind::Binary => 1,
    })?;
    for id in m.task_ids.iter().chain(m.example_ids.iter()) {
        let bytes = id.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(bytes)?;
    }
    let mut buf = vec![0u8; m.num_examples() * 8];
    for i in 0..m.num_tasks() {
        for (chunk, &v) in buf.chunks_exact_mut(8).zip(m.values.row(i)) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    // Mask bits are packed row-major, least-significant bit first.
    let total = m.num_tasks() * m.num_examples();
    let mut packed = vec![0u8; total.div_ceil(8)];
    for (idx, &obs) in m.observed.iter().enumerate() {
        if obs {
            packed[idx / 8] |= 1 << (idx % 8);
        }
    }
    w.write_all(&packed)?;
    Ok(())
}

fn read_binary<R: Read>(r: &mut R) -> Result<AssociationMatrix, MatrixError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(MatrixError::BadMagic);
    }
    let m = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let kind = match r.read_u8()? {
        0 => MatrixKind::Continuous,
        1 => MatrixKind::Binary,
        b => return Err(MatrixError::BadKindByte(b)),
    };
    let read_ids = |r: &mut R, count: usize| -> Result<Vec<String>, MatrixError> {
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            ids.push(String::from_utf8(bytes).map_err(|_| MatrixError::BadFraming)?);
        }
        Ok(ids)
    };
    let task_ids = read_ids(r, m)?;
    let example_ids = read_ids(r, n)?;
    let mut raw = vec![0f64; m * n];
    r.read_f64_into::<LittleEndian>(&mut raw)?;
    let values = Array2::from_shape_vec((m, n), raw).expect("length fixed above");
    let total = m * n;
    let mut packed = vec![0u8; total.div_ceil(8)];
    r.read_exact(&mut packed)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(MatrixError::BadFraming);
    }
    let mask: Vec<bool> = (0..total)
        .map(|idx| packed[idx / 8] & (1 << (idx % 8)) != 0)
        .collect();
    let observed = Array2::from_shape_vec((m, n), mask).expect("length fixed above");
    AssociationMatrix::with_mask(values, observed, kind, task_ids, example_ids)
}

/// Renders the matrix as a P5 portable graymap, `N` wide by `M` tall.
/// Values are clamped into `[lo, hi]` and mapped linearly to 0..=255.
pub fn render_heatmap(
    m: &AssociationMatrix,
    lo: f64,
    hi: f64,
) -> Result<Vec<u8>, MatrixError> {
    if !(lo < hi) {
        return Err(MatrixError::BadHeatmapRange { lo, hi });
    }
    let mut out = Vec::with_capacity(32 + m.num_tasks() * m.num_examples());
    out.extend_from_slice(
        format!("P5\n{} {}\n255\n", m.num_examples(), m.num_tasks()).as_bytes(),
    );
    for &v in m.values.iter() {
        let clamped = v.clamp(lo, hi);
        let pixel = (255.0 * (clamped - lo) / (hi - lo)).round();
        out.push(pixel as u8);
    }
    Ok(out)
}

pub fn export_heatmap(
    m: &AssociationMatrix,
    path: &Path,
    lo: f64,
    hi: f64,
) -> Result<(), MatrixError> {
    let bytes = render_heatmap(m, lo, hi)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn snapshot(scores: &[f64], kind: MatrixKind) -> PerformanceSnapshot {
        PerformanceSnapshot::new(ids("x", scores.len()), scores.to_vec(), kind).unwrap()
    }

    #[test]
    fn continuous_row_is_score_increase() {
        let before = snapshot(&[2.00, 3.10], MatrixKind::Continuous);
        let after = snapshot(&[2.05, 3.10], MatrixKind::Continuous);
        let row = build_row(&before, &after).unwrap();
        assert_abs_diff_eq!(row[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(row[1], 0.00, epsilon = 1e-12);
    }

    #[test]
    fn binary_row_counts_only_correct_to_incorrect() {
        let before = snapshot(&[1.0, 1.0, 0.0], MatrixKind::Binary);
        let after = snapshot(&[0.0, 1.0, 0.0], MatrixKind::Binary);
        assert_eq!(build_row(&before, &after).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_forgetting_is_retained() {
        let before = snapshot(&[2.0], MatrixKind::Continuous);
        let after = snapshot(&[1.9], MatrixKind::Continuous);
        let row = build_row(&before, &after).unwrap();
        assert_abs_diff_eq!(row[0], -0.1, epsilon = 1e-12);
        assert!(row[0] < 0.0);
    }

    #[test]
    fn build_row_rejects_mismatched_ids_and_kinds() {
        let a = snapshot(&[1.0], MatrixKind::Continuous);
        let b = PerformanceSnapshot::new(
            vec!["y0".into()],
            vec![1.0],
            MatrixKind::Continuous,
        )
        .unwrap();
        assert!(matches!(
            build_row(&a, &b),
            Err(MatrixError::IdMismatch { .. })
        ));
        let c = snapshot(&[1.0], MatrixKind::Binary);
        assert!(matches!(
            build_row(&a, &c),
            Err(MatrixError::KindMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_rejects_non_binary_scores() {
        let err = PerformanceSnapshot::new(ids("x", 1), vec![0.5], MatrixKind::Binary);
        assert!(matches!(err, Err(MatrixError::NonBinaryValue { .. })));
    }

    #[test]
    fn constructor_rejects_duplicate_ids() {
        let values = array![[1.0, 2.0], [3.0, 4.0]];
        let err = AssociationMatrix::new(
            values.clone(),
            MatrixKind::Continuous,
            vec!["t".into(), "t".into()],
            ids("x", 2),
        );
        assert!(matches!(err, Err(MatrixError::DuplicateId { .. })));
        let err = AssociationMatrix::new(
            values,
            MatrixKind::Continuous,
            ids("t", 2),
            vec!["x".into(), "x".into()],
        );
        assert!(matches!(err, Err(MatrixError::DuplicateId { .. })));
    }

    #[test]
    fn constructor_rejects_nan_and_shape_mismatch() {
        let err = AssociationMatrix::new(
            array![[f64::NAN]],
            MatrixKind::Continuous,
            ids("t", 1),
            ids("x", 1),
        );
        assert!(matches!(err, Err(MatrixError::NonFiniteValue { .. })));
        let err = AssociationMatrix::new(
            array![[1.0, 2.0]],
            MatrixKind::Continuous,
            ids("t", 2),
            ids("x", 2),
        );
        assert!(matches!(err, Err(MatrixError::DimensionMismatch { .. })));
    }

    #[test]
    fn unobserved_values_are_normalised_to_zero() {
        let values = array![[7.5, 2.0]];
        let observed = array![[false, true]];
        let m = AssociationMatrix::with_mask(
            values,
            observed,
            MatrixKind::Continuous,
            ids("t", 1),
            ids("x", 2),
        )
        .unwrap();
        assert_eq!(m.values()[(0, 0)], 0.0);
        assert_eq!(m.observed_count(), 1);
        assert!(!m.is_fully_observed());
    }

    #[test]
    fn csv_round_trip_preserves_values_ids_and_mask() {
        let values = array![[0.1, -2.5e-17, 3.0], [4.0, 5.0, 6.25]];
        let observed = array![[true, true, false], [true, true, true]];
        let m = AssociationMatrix::with_mask(
            values,
            observed,
            MatrixKind::Continuous,
            vec!["task a".into(), "task,b".into()],
            ids("x", 3),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        save_matrix(&m, &path, FileFormat::Csv).unwrap();
        let back = load_matrix(&path, FileFormat::Csv).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn csv_rejects_duplicate_ragged_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let dup = dir.path().join("dup.csv");
        std::fs::write(&dup, "task_id,x0,x1\nt0,1,2\nt0,3,4\n").unwrap();
        assert!(matches!(
            load_matrix(&dup, FileFormat::Csv),
            Err(MatrixError::DuplicateId { .. })
        ));

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "task_id,x0,x1\nt0,1\n").unwrap();
        assert!(matches!(
            load_matrix(&ragged, FileFormat::Csv),
            Err(MatrixError::RaggedRow { .. })
        ));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "task_id,x0\nt0,oops\n").unwrap();
        assert!(matches!(
            load_matrix(&bad, FileFormat::Csv),
            Err(MatrixError::BadCell { .. })
        ));

        let header = dir.path().join("header.csv");
        std::fs::write(&header, "wrong,x0\nt0,1\n").unwrap();
        assert!(matches!(
            load_matrix(&header, FileFormat::Csv),
            Err(MatrixError::MalformedHeader)
        ));
    }

    #[test]
    fn binary_format_rejects_bad_magic_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.amx");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_matrix(&path, FileFormat::Binary),
            Err(MatrixError::BadMagic)
        ));

        let m = AssociationMatrix::new(
            array![[1.0]],
            MatrixKind::Continuous,
            ids("t", 1),
            ids("x", 1),
        )
        .unwrap();
        save_matrix(&m, &path, FileFormat::Binary).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_matrix(&path, FileFormat::Binary),
            Err(MatrixError::BadFraming)
        ));
    }

    #[test]
    fn heatmap_matches_hand_computed_pixels() {
        let m = AssociationMatrix::new(
            array![[0.0, 0.5], [1.0, 0.25]],
            MatrixKind::Continuous,
            ids("t", 2),
            ids("x", 2),
        )
        .unwrap();
        let pgm = render_heatmap(&m, 0.0, 1.0).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0u8, 128, 255, 64]);
    }

    #[test]
    fn heatmap_clamps_and_validates_range() {
        let m = AssociationMatrix::new(
            array![[-1.0, 2.0]],
            MatrixKind::Continuous,
            ids("t", 1),
            ids("x", 2),
        )
        .unwrap();
        let pgm = render_heatmap(&m, 0.0, 1.0).unwrap();
        let body = &pgm[pgm.len() - 2..];
        assert_eq!(body, &[0u8, 255]);
        assert!(matches!(
            render_heatmap(&m, 1.0, 1.0),
            Err(MatrixError::BadHeatmapRange { .. })
        ));
    }

    #[test]
    fn select_tasks_reorders_rows() {
        let m = AssociationMatrix::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            MatrixKind::Continuous,
            ids("t", 3),
            ids("x", 2),
        )
        .unwrap();
        let sub = m.select_tasks(&[2, 0]).unwrap();
        assert_eq!(sub.task_ids(), &["t2".to_string(), "t0".to_string()]);
        assert_eq!(sub.values()[(0, 0)], 5.0);
        assert!(matches!(
            m.select_tasks(&[9]),
            Err(MatrixError::TaskOutOfRange { .. })
        ));
    }

    #[test]
    fn large_binary_round_trip_is_fast() {
        // Scaled-down version of the acceptance-scale I/O check (the full
        // 85×141876 load is exercised by the acceptance suite).
        let (m, n) = (16, 20_000);
        let values = Array2::from_shape_fn((m, n), |(i, j)| (i * n + j) as f64 * 1e-6);
        let mat =
            AssociationMatrix::new(values, MatrixKind::Continuous, ids("t", m), ids("x", n))
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.amx");
        let start = std::time::Instant::now();
        save_matrix(&mat, &path, FileFormat::Binary).unwrap();
        let back = load_matrix(&path, FileFormat::Binary).unwrap();
        assert!(start.elapsed().as_secs() < 30);
        assert_eq!(mat, back);
    }

    proptest! {
        #[test]
        fn continuous_build_row_is_antisymmetric(
            scores in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
            let sa = snapshot(&a, MatrixKind::Continuous);
            let sb = snapshot(&b, MatrixKind::Continuous);
            let fwd = build_row(&sa, &sb).unwrap();
            let rev = build_row(&sb, &sa).unwrap();
            for (f, r) in fwd.iter().zip(&rev) {
                prop_assert_eq!(*f, -*r);
            }
        }

        #[test]
        fn round_trip_preserves_arbitrary_matrices(
            m in 1usize..8,
            n in 1usize..50,
            seed in 0u64..1000,
            binary in proptest::bool::ANY,
            masked in proptest::bool::ANY,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let kind = if binary { MatrixKind::Binary } else { MatrixKind::Continuous };
            let values = Array2::from_shape_fn((m, n), |_| match kind {
                MatrixKind::Binary => f64::from(rng.random_bool(0.3)),
                MatrixKind::Continuous => rng.random_range(-50.0..50.0),
            });
            let observed = Array2::from_shape_fn((m, n), |_| !masked || rng.random_bool(0.8));
            let mat = AssociationMatrix::with_mask(
                values, observed, kind, ids("t", m), ids("x", n),
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for format in [FileFormat::Csv, FileFormat::Binary] {
                let path = dir.path().join(match format {
                    FileFormat::Csv => "z.csv",
                    FileFormat::Binary => "z.amx",
                });
                save_matrix(&mat, &path, format).unwrap();
                let back = match (format, kind) {
                    (FileFormat::Csv, MatrixKind::Binary) =>
                        load_csv_with_kind(&path, MatrixKind::Binary).unwrap(),
                    _ => load_matrix(&path, format).unwrap(),
                };
                prop_assert_eq!(&mat, &back);
            }
        }

        #[test]
        fn heatmap_is_monotone_in_value(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let m = AssociationMatrix::new(
                array![[a, b]],
                MatrixKind::Continuous,
                ids("t", 1),
                ids("x", 2),
            ).unwrap();
            let pgm = render_heatmap(&m, -10.0, 10.0).unwrap();
            let px = &pgm[pgm.len() - 2..];
            if a <= b {
                prop_assert!(px[0] <= px[1]);
            } else {
                prop_assert!(px[0] >= px[1]);
            }
        }
    }
}
