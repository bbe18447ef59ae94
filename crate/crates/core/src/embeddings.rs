//! Word-vector tables and the stacked class matrices used by the semantic
//! heads: seen classes (with a background column), unseen classes, the
//! external vocabulary, and the trainable foreground/background pair.
//!
//! All vectors are ℓ2-normalized on load. The background column of the seen
//! matrix starts as the plain (unnormalized) mean of the seen-class vectors
//! and is later swapped for the vector learned by background-learnable RPN
//! training.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{BlcError, Result};

/// Tolerance on unit norms after normalization.
pub const NORM_TOL: f64 = 1e-6;

/// Named, ℓ2-normalized word vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    entries: BTreeMap<String, Array1<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            dim,
        }
    }

    /// Inserts a vector under `name`, normalizing it to unit length.
    pub fn insert(&mut self, name: &str, vector: Array1<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(BlcError::DimMismatch {
                expected: self.dim,
                got: vector.len(),
                context: format!("embedding '{name}'"),
            });
        }
        if self.entries.contains_key(name) {
            return Err(BlcError::DuplicateEntry(name.to_string()));
        }
        let norm = vector.dot(&vector).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(BlcError::ZeroNorm(name.to_string()));
        }
        self.entries.insert(name.to_string(), vector / norm);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        self.entries.get(name).map(|v| v.view())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ArrayView1<'_, f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.view()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Looks up every name in `classes`, erroring on the first missing one.
    pub fn lookup_all(&self, classes: &[String]) -> Result<Vec<ArrayView1<'_, f64>>> {
        classes
            .iter()
            .map(|c| {
                self.get(c)
                    .ok_or_else(|| BlcError::UnknownClass(c.clone()))
            })
            .collect()
    }
}

/// Parses a word-vector text file: one record per line, a name followed by
/// `dim` whitespace-separated decimals. Vectors are ℓ2-normalized.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path)?;
    parse_word_vectors(BufReader::new(file), dim)
}

/// Same as [`load_word_vectors`] but over any reader (used by tests and by
/// in-memory round-trips).
pub fn parse_word_vectors<R: BufRead>(reader: R, dim: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let name = parts.next().ok_or(BlcError::Parse {
            line: line_no,
            msg: "missing name".into(),
        })?;
        let values: Vec<f64> = parts
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| BlcError::Parse {
                    line: line_no,
                    msg: format!("bad number '{tok}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(BlcError::Parse {
                line: line_no,
                msg: format!(
                    "record '{name}' has {} values, expected {dim}",
                    values.len()
                ),
            });
        }
        table.insert(name, Array1::from(values))?;
    }
    Ok(table)
}

/// Serializes a table in the same text format `load_word_vectors` reads.
pub fn format_word_vectors(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (name, vec) in table.iter() {
        out.push_str(name);
        for v in vec.iter() {
            // Display emits the shortest exact round-trip representation
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

/// Plain elementwise mean of the given vectors. Deliberately not
/// re-normalized: the background vector is defined as the bare mean.
pub fn mean_background(seen_vectors: &[ArrayView1<'_, f64>]) -> Result<Array1<f64>> {
    if seen_vectors.is_empty() {
        return Err(BlcError::EmptyInput("mean_background".into()));
    }
    let dim = seen_vectors[0].len();
    let mut acc = Array1::<f64>::zeros(dim);
    for v in seen_vectors {
        if v.len() != dim {
            return Err(BlcError::DimMismatch {
                expected: dim,
                got: v.len(),
                context: "mean_background".into(),
            });
        }
        acc += v;
    }
    Ok(acc / seen_vectors.len() as f64)
}

/// Stacked word vectors of background and seen classes, shape d×(s+1).
/// Column 0 is the background vector; column i is `class_order[i-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeenMatrix {
    mat: Array2<f64>,
    class_order: Vec<String>,
}

/// Stacked word vectors of background and unseen classes, shape d×(u+1).
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenMatrix {
    mat: Array2<f64>,
    class_order: Vec<String>,
}

/// External vocabulary matrix D, shape d×v. Fixed in all training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyMatrix {
    mat: Array2<f64>,
}

/// The two-column trainable matrix of the foreground-background branch:
/// column 0 is the background vector v_b, column 1 the foreground vector v_f.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundBackgroundMatrix {
    pub mat: Array2<f64>,
}

fn stack_with_background(
    table: &EmbeddingTable,
    classes: &[String],
    background: ArrayView1<'_, f64>,
    what: &str,
) -> Result<Array2<f64>> {
    if classes.is_empty() {
        return Err(BlcError::EmptyInput(format!("{what} class list")));
    }
    let d = table.dim();
    if background.len() != d {
        return Err(BlcError::DimMismatch {
            expected: d,
            got: background.len(),
            context: format!("{what} background vector"),
        });
    }
    let vectors = table.lookup_all(classes)?;
    let mut mat = Array2::<f64>::zeros((d, classes.len() + 1));
    mat.column_mut(0).assign(&background);
    for (i, v) in vectors.iter().enumerate() {
        mat.column_mut(i + 1).assign(v);
    }
    Ok(mat)
}

impl SeenMatrix {
    pub fn build(
        table: &EmbeddingTable,
        seen_classes: &[String],
        background: ArrayView1<'_, f64>,
    ) -> Result<Self> {
        Ok(Self {
            mat: stack_with_background(table, seen_classes, background, "seen")?,
            class_order: seen_classes.to_vec(),
        })
    }

    /// Reassembles a matrix from checkpoint parts.
    pub fn from_parts(mat: Array2<f64>, class_order: Vec<String>) -> Result<Self> {
        if mat.ncols() != class_order.len() + 1 {
            return Err(BlcError::DimMismatch {
                expected: class_order.len() + 1,
                got: mat.ncols(),
                context: "seen matrix columns".into(),
            });
        }
        Ok(Self { mat, class_order })
    }

    /// Returns a copy with column 0 replaced by `learned`; `self` is untouched.
    pub fn replace_background(&self, learned: ArrayView1<'_, f64>) -> Result<Self> {
        if learned.len() != self.dim() {
            return Err(BlcError::DimMismatch {
                expected: self.dim(),
                got: learned.len(),
                context: "replace_background".into(),
            });
        }
        let mut out = self.clone();
        out.mat.column_mut(0).assign(&learned);
        Ok(out)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.mat
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.mat.column(0)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Number of seen classes s (columns minus the background).
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    /// 1-based class id for a name (0 is background).
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_order.iter().position(|c| c == name).map(|i| i + 1)
    }

    pub fn class_name(&self, id: usize) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.class_order.get(id - 1).map(|s| s.as_str())
    }
}

impl UnseenMatrix {
    pub fn build(
        table: &EmbeddingTable,
        unseen_classes: &[String],
        background: ArrayView1<'_, f64>,
    ) -> Result<Self> {
        Ok(Self {
            mat: stack_with_background(table, unseen_classes, background, "unseen")?,
            class_order: unseen_classes.to_vec(),
        })
    }

    pub fn from_parts(mat: Array2<f64>, class_order: Vec<String>) -> Result<Self> {
        if mat.ncols() != class_order.len() + 1 {
            return Err(BlcError::DimMismatch {
                expected: class_order.len() + 1,
                got: mat.ncols(),
                context: "unseen matrix columns".into(),
            });
        }
        Ok(Self { mat, class_order })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.mat
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.mat.column(0)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    pub fn class_name(&self, id: usize) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.class_order.get(id - 1).map(|s| s.as_str())
    }
}

impl VocabularyMatrix {
    pub fn from_matrix(mat: Array2<f64>) -> Result<Self> {
        if mat.is_empty() {
            return Err(BlcError::EmptyInput("vocabulary matrix".into()));
        }
        Ok(Self { mat })
    }

    /// Stacks every entry of `table` as a column, in sorted-name order.
    pub fn from_table(table: &EmbeddingTable) -> Result<Self> {
        if table.is_empty() {
            return Err(BlcError::EmptyInput("vocabulary table".into()));
        }
        let d = table.dim();
        let mut mat = Array2::<f64>::zeros((d, table.len()));
        for (i, (_, v)) in table.iter().enumerate() {
            mat.column_mut(i).assign(&v);
        }
        Ok(Self { mat })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn len(&self) -> usize {
        self.mat.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.ncols() == 0
    }
}

impl ForegroundBackgroundMatrix {
    pub fn new(v_b: Array1<f64>, v_f: Array1<f64>) -> Result<Self> {
        if v_b.len() != v_f.len() {
            return Err(BlcError::DimMismatch {
                expected: v_b.len(),
                got: v_f.len(),
                context: "foreground vector".into(),
            });
        }
        let d = v_b.len();
        let mut mat = Array2::<f64>::zeros((d, 2));
        mat.column_mut(0).assign(&v_b);
        mat.column_mut(1).assign(&v_f);
        Ok(Self { mat })
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.mat.column(0)
    }

    pub fn foreground(&self) -> ArrayView1<'_, f64> {
        self.mat.column(1)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }
}
