//! Datasets, distribution tags, expert constraints, and design encoding.
//!
//! A dataset is a named collection of equal-length columns, each tagged
//! with the distribution its node model will use. Categorical columns are
//! recoded to level indices at load time; the recode is a pure function of
//! the sorted distinct values so it never depends on row order.

use crate::linalg::Matrix;
use crate::scalar::{cast, Scalar};
use std::collections::BTreeMap;
use std::io::Read;

use thiserror::Error;

/// Distribution family of a column / node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    Gaussian,
    Binomial,
    Poisson,
    /// Categorical with `levels ≥ 3` observed categories.
    Multinomial { levels: usize },
}

impl DistributionKind {
    /// Design columns contributed when a variable of this kind enters a
    /// model as a covariate (dummy coding for categorical variables).
    pub fn encoding_width(&self) -> usize {
        match self {
            DistributionKind::Multinomial { levels } => levels - 1,
            _ => 1,
        }
    }

    /// Linear predictors needed when a variable of this kind is the
    /// response (softmax needs one per non-baseline level).
    pub fn response_dims(&self) -> usize {
        match self {
            DistributionKind::Multinomial { levels } => levels - 1,
            _ => 1,
        }
    }

    pub fn is_multinomial(&self) -> bool {
        matches!(self, DistributionKind::Multinomial { .. })
    }
}

impl std::fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistributionKind::Gaussian => write!(f, "gaussian"),
            DistributionKind::Binomial => write!(f, "binomial"),
            DistributionKind::Poisson => write!(f, "poisson"),
            DistributionKind::Multinomial { levels } => write!(f, "multinomial:{levels}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing value in column `{column}` at data row {row}")]
    MissingValue { column: String, row: usize },
    #[error("column `{0}` is not present in the dataset")]
    UnknownColumn(String),
    #[error("dataset column `{0}` has no distribution entry")]
    MissingSpec(String),
    #[error("column `{column}`: {detail}")]
    LevelMismatch { column: String, detail: String },
    #[error("column `{column}` row {row}: cannot parse `{value}` as a number")]
    InvalidValue {
        column: String,
        row: usize,
        value: String,
    },
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("column index {index} out of range for {k} variables")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("illegal parent specification: {0}")]
    IllegalParent(String),
    #[error("bad distribution spec: {0}")]
    BadDistSpec(String),
    #[error("constraint matrix: {0}")]
    MatrixShape(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Observational dataset: `k` named, tagged columns of common length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    names: Vec<String>,
    columns: Vec<Vec<T>>,
    dists: Vec<DistributionKind>,
    n: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Validated constructor. Checks lengths, name uniqueness, and the
    /// per-kind value invariants (observed level counts included).
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<T>>,
        dists: Vec<DistributionKind>,
    ) -> Result<Self, DataError> {
        let ds = Self::from_parts(names, columns, dists)?;
        for j in 0..ds.k() {
            ds.check_column_kind(j)?;
        }
        Ok(ds)
    }

    /// Structural checks only; used by the simulator, whose outputs obey
    /// the kind invariants by construction except for measure-zero draws
    /// (e.g. a constant Bernoulli column at tiny n).
    pub(crate) fn from_parts(
        names: Vec<String>,
        columns: Vec<Vec<T>>,
        dists: Vec<DistributionKind>,
    ) -> Result<Self, DataError> {
        assert_eq!(names.len(), columns.len());
        assert_eq!(names.len(), dists.len());
        let n = columns.first().map_or(0, |c| c.len());
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        for c in &columns {
            assert_eq!(c.len(), n, "columns must share one length");
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &names {
            if !seen.insert(name.clone()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
        }
        Ok(Dataset {
            names,
            columns,
            dists,
            n,
        })
    }

    fn check_column_kind(&self, j: usize) -> Result<(), DataError> {
        let col = &self.columns[j];
        let name = &self.names[j];
        let err = |detail: String| DataError::LevelMismatch {
            column: name.clone(),
            detail,
        };
        match self.dists[j] {
            DistributionKind::Gaussian => {
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(err("non-finite value in gaussian column".into()));
                }
            }
            DistributionKind::Poisson => {
                for v in col {
                    if !v.is_finite() || *v < T::zero() || v.fract() != T::zero() {
                        return Err(err(format!(
                            "poisson column must hold non-negative integers, found {v}"
                        )));
                    }
                }
            }
            DistributionKind::Binomial => {
                let distinct = distinct_sorted(col);
                if distinct.len() != 2
                    || distinct[0] != T::zero()
                    || distinct[1] != T::one()
                {
                    return Err(err(format!(
                        "binomial column must observe exactly the two levels 0 and 1, found {} distinct values",
                        distinct.len()
                    )));
                }
            }
            DistributionKind::Multinomial { levels } => {
                let distinct = distinct_sorted(col);
                if distinct.len() != levels {
                    return Err(err(format!(
                        "multinomial column declared {levels} levels but observed {}",
                        distinct.len()
                    )));
                }
                for (idx, v) in distinct.iter().enumerate() {
                    if *v != cast::<T>(idx as f64) {
                        return Err(err(
                            "multinomial column must hold level indices 0..levels".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn dist(&self, j: usize) -> DistributionKind {
        self.dists[j]
    }

    pub fn dists(&self) -> &[DistributionKind] {
        &self.dists
    }

    pub fn column(&self, j: usize) -> &[T] {
        &self.columns[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// RFC 4180 CSV with a header row; categorical columns are written as
    /// their recoded level indices, so a reload reproduces this dataset.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).expect("csv header");
        for i in 0..self.n {
            let row: Vec<String> = (0..self.k())
                .map(|j| format!("{}", self.columns[j][i]))
                .collect();
            w.write_record(&row).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }
}

fn distinct_sorted<T: Scalar>(col: &[T]) -> Vec<T> {
    let mut vals: Vec<T> = Vec::new();
    for v in col {
        if !vals.iter().any(|x| x == v) {
            vals.push(*v);
        }
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    vals
}

/// Parses a header CSV against a distribution spec, recoding binomial
/// columns to {0,1} and multinomial columns to level indices 0..C−1
/// (smaller / alphabetically earlier observed value first).
pub fn load_dataset<T: Scalar, R: Read>(
    reader: R,
    spec: &BTreeMap<String, DistributionKind>,
) -> Result<Dataset<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.clone()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
        if !spec.contains_key(h) {
            return Err(DataError::MissingSpec(h.clone()));
        }
    }
    for name in spec.keys() {
        if !headers.contains(name) {
            return Err(DataError::UnknownColumn(name.clone()));
        }
    }

    let k = headers.len();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); k];
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != k {
            return Err(DataError::MatrixShape(format!(
                "data row {row_idx} has {} fields, expected {k}",
                record.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    column: headers[j].clone(),
                    row: row_idx,
                });
            }
            raw[j].push(cell.to_string());
        }
    }
    if raw[0].is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let dists: Vec<DistributionKind> = headers.iter().map(|h| spec[h]).collect();
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        columns.push(decode_column(&headers[j], &raw[j], dists[j])?);
    }
    Dataset::new(headers, columns, dists)
}

fn decode_column<T: Scalar>(
    name: &str,
    cells: &[String],
    kind: DistributionKind,
) -> Result<Vec<T>, DataError> {
    let parse = |row: usize, cell: &str| -> Result<T, DataError> {
        cell.parse::<T>().map_err(|_| DataError::InvalidValue {
            column: name.to_string(),
            row,
            value: cell.to_string(),
        })
    };
    match kind {
        DistributionKind::Gaussian => cells
            .iter()
            .enumerate()
            .map(|(i, c)| parse(i, c))
            .collect(),
        DistributionKind::Poisson => {
            let col: Vec<T> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| parse(i, c))
                .collect::<Result<_, _>>()?;
            for v in &col {
                if !v.is_finite() || *v < T::zero() || v.fract() != T::zero() {
                    return Err(DataError::LevelMismatch {
                        column: name.to_string(),
                        detail: format!(
                            "poisson column must hold non-negative integers, found {v}"
                        ),
                    });
                }
            }
            Ok(col)
        }
        DistributionKind::Binomial | DistributionKind::Multinomial { .. } => {
            let levels = recode_levels(cells);
            let expected = match kind {
                DistributionKind::Binomial => 2,
                DistributionKind::Multinomial { levels } => levels,
                _ => unreachable!(),
            };
            if levels.len() != expected {
                return Err(DataError::LevelMismatch {
                    column: name.to_string(),
                    detail: format!(
                        "declared {} but observed {} distinct values",
                        kind,
                        levels.len()
                    ),
                });
            }
            Ok(cells
                .iter()
                .map(|c| {
                    let idx = levels
                        .iter()
                        .position(|l| level_eq(l, c))
                        .expect("observed value present in level table");
                    cast::<T>(idx as f64)
                })
                .collect())
        }
    }
}

/// Distinct observed values in recode order: numeric ascending when every
/// value parses as a number, lexicographic otherwise.
fn recode_levels(cells: &[String]) -> Vec<String> {
    let mut distinct: Vec<String> = Vec::new();
    for c in cells {
        if !distinct.iter().any(|d| level_eq(d, c)) {
            distinct.push(c.clone());
        }
    }
    let all_numeric = distinct.iter().all(|d| d.parse::<f64>().is_ok());
    if all_numeric {
        distinct.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .expect("finite values")
        });
    } else {
        distinct.sort();
    }
    distinct
}

fn level_eq(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Expert constraints over the dataset's columns plus the enumeration cap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    /// `ban[child][parent] = true` forbids the arc parent → child.
    pub ban: Vec<Vec<bool>>,
    /// `retain[child][parent] = true` forces the arc parent → child.
    pub retain: Vec<Vec<bool>>,
    /// Columns imposed as covariates on every node model and excluded
    /// from the learned structure.
    pub adjust: Vec<String>,
    pub max_parents: usize,
}

impl ConstraintSpec {
    pub fn unconstrained(k: usize, max_parents: usize) -> Self {
        ConstraintSpec {
            ban: vec![vec![false; k]; k],
            retain: vec![vec![false; k]; k],
            adjust: Vec::new(),
            max_parents,
        }
    }
}

/// One violated constraint invariant, with coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintViolation {
    /// ban and retain both set for the same arc.
    Conflict { child: usize, parent: usize },
    BanDiagonal { node: usize },
    RetainDiagonal { node: usize },
    /// More retained parents than `max_parents` allows.
    RetainOverflow { child: usize, count: usize },
    UnknownAdjust { name: String },
    /// A retained arc touches an adjustment column, which is not a node.
    RetainOnAdjust { child: usize, parent: usize },
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    ZeroMaxParents,
}

impl std::fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintViolation::Conflict { child, parent } => {
                write!(f, "ban and retain both set at (child {child}, parent {parent})")
            }
            ConstraintViolation::BanDiagonal { node } => {
                write!(f, "ban diagonal set at node {node}")
            }
            ConstraintViolation::RetainDiagonal { node } => {
                write!(f, "retain diagonal set at node {node}")
            }
            ConstraintViolation::RetainOverflow { child, count } => {
                write!(f, "child {child} retains {count} parents, over max_parents")
            }
            ConstraintViolation::UnknownAdjust { name } => {
                write!(f, "adjust column `{name}` not in dataset")
            }
            ConstraintViolation::RetainOnAdjust { child, parent } => {
                write!(f, "retained arc ({child} ← {parent}) touches an adjustment column")
            }
            ConstraintViolation::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what} matrix is {found}×{found}, expected {expected}×{expected}"),
            ConstraintViolation::ZeroMaxParents => write!(f, "max_parents must be ≥ 1"),
        }
    }
}

/// Checks every ConstraintSpec invariant; an empty list means valid.
pub fn validate_constraints<T: Scalar>(
    cs: &ConstraintSpec,
    ds: &Dataset<T>,
) -> Vec<ConstraintViolation> {
    let k = ds.k();
    let mut out = Vec::new();
    if cs.max_parents == 0 {
        out.push(ConstraintViolation::ZeroMaxParents);
    }
    for (what, m) in [("ban", &cs.ban), ("retain", &cs.retain)] {
        if m.len() != k || m.iter().any(|row| row.len() != k) {
            out.push(ConstraintViolation::DimensionMismatch {
                what,
                expected: k,
                found: m.len(),
            });
            return out;
        }
    }
    let mut adjust_idx = Vec::new();
    for name in &cs.adjust {
        match ds.index_of(name) {
            Some(i) => adjust_idx.push(i),
            None => out.push(ConstraintViolation::UnknownAdjust { name: name.clone() }),
        }
    }
    for i in 0..k {
        if cs.ban[i][i] {
            out.push(ConstraintViolation::BanDiagonal { node: i });
        }
        if cs.retain[i][i] {
            out.push(ConstraintViolation::RetainDiagonal { node: i });
        }
        let mut retained = 0usize;
        for j in 0..k {
            if cs.ban[i][j] && cs.retain[i][j] {
                out.push(ConstraintViolation::Conflict { child: i, parent: j });
            }
            if cs.retain[i][j] {
                retained += 1;
                if adjust_idx.contains(&i) || adjust_idx.contains(&j) {
                    out.push(ConstraintViolation::RetainOnAdjust { child: i, parent: j });
                }
            }
        }
        if retained > cs.max_parents {
            out.push(ConstraintViolation::RetainOverflow {
                child: i,
                count: retained,
            });
        }
    }
    out
}

/// Reads a ban/retain adjacency CSV (header row and leading name column,
/// row = child) and reorders it to the dataset's column order.
pub fn load_constraint_matrix<T: Scalar, R: Read>(
    reader: R,
    ds: &Dataset<T>,
) -> Result<Vec<Vec<bool>>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let k = ds.k();
    if headers.len() != k + 1 {
        return Err(DataError::MatrixShape(format!(
            "expected {} header fields (corner + {k} names), found {}",
            k + 1,
            headers.len()
        )));
    }
    let mut col_of = vec![0usize; k]; // file column -> dataset index
    for (file_j, name) in headers[1..].iter().enumerate() {
        col_of[file_j] = ds
            .index_of(name)
            .ok_or_else(|| DataError::UnknownColumn(name.clone()))?;
    }
    let mut matrix = vec![vec![false; k]; k];
    let mut rows_seen = vec![false; k];
    for record in rdr.records() {
        let record = record?;
        if record.len() != k + 1 {
            return Err(DataError::MatrixShape(format!(
                "constraint row has {} fields, expected {}",
                record.len(),
                k + 1
            )));
        }
        let child_name = record[0].trim();
        let child = ds
            .index_of(child_name)
            .ok_or_else(|| DataError::UnknownColumn(child_name.to_string()))?;
        rows_seen[child] = true;
        for file_j in 0..k {
            let cell = record[file_j + 1].trim();
            matrix[child][col_of[file_j]] = match cell {
                "0" => false,
                "1" => true,
                other => {
                    return Err(DataError::MatrixShape(format!(
                        "constraint cell must be 0 or 1, found `{other}`"
                    )))
                }
            };
        }
    }
    if let Some(missing) = rows_seen.iter().position(|seen| !seen) {
        return Err(DataError::MatrixShape(format!(
            "constraint matrix is missing a row for `{}`",
            ds.name(missing)
        )));
    }
    Ok(matrix)
}

/// Writes a constraint-style adjacency CSV (shared by DAG output).
pub fn adjacency_to_csv(names: &[String], cell: impl Fn(usize, usize) -> bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend_from_slice(names);
    w.write_record(&header).expect("csv header");
    for i in 0..names.len() {
        let mut row = vec![names[i].clone()];
        for j in 0..names.len() {
            row.push(if cell(i, j) { "1".into() } else { "0".into() });
        }
        w.write_record(&row).expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
}

/// Design matrix with intercept plus dummy-coded covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    pub values: Matrix<T>,
    /// Column labels; the first is always the intercept.
    pub column_labels: Vec<String>,
    /// Originating variable per column (`None` for the intercept).
    pub source_terms: Vec<Option<String>>,
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn p(&self) -> usize {
        self.values.cols()
    }

    /// Restriction to a column subset (used by rank reduction).
    pub fn restricted(&self, keep: &[usize]) -> DesignMatrix<T> {
        DesignMatrix {
            values: self.values.select_columns(keep),
            column_labels: keep.iter().map(|&j| self.column_labels[j].clone()).collect(),
            source_terms: keep.iter().map(|&j| self.source_terms[j].clone()).collect(),
        }
    }
}

pub const INTERCEPT_LABEL: &str = "intercept";

/// Builds the design matrix for one child: intercept, then parents in
/// ascending index order, then adjustment columns in ascending order.
/// The response is the child column.
pub fn encode_design<T: Scalar>(
    ds: &Dataset<T>,
    child: usize,
    parents: &[usize],
    adjust: &[usize],
) -> Result<(DesignMatrix<T>, Vec<T>), DataError> {
    let k = ds.k();
    for &idx in std::iter::once(&child).chain(parents).chain(adjust) {
        if idx >= k {
            return Err(DataError::IndexOutOfRange { index: idx, k });
        }
    }
    if parents.contains(&child) {
        return Err(DataError::IllegalParent(format!(
            "child `{}` listed in its own parent set",
            ds.name(child)
        )));
    }
    if adjust.contains(&child) {
        return Err(DataError::IllegalParent(format!(
            "child `{}` listed as an adjustment covariate",
            ds.name(child)
        )));
    }
    if let Some(&dup) = parents.iter().find(|p| adjust.contains(p)) {
        return Err(DataError::IllegalParent(format!(
            "`{}` appears both as parent and adjustment covariate",
            ds.name(dup)
        )));
    }

    let mut parents = parents.to_vec();
    parents.sort_unstable();
    parents.dedup();
    let mut adjust = adjust.to_vec();
    adjust.sort_unstable();
    adjust.dedup();

    let n = ds.n();
    let mut labels = vec![INTERCEPT_LABEL.to_string()];
    let mut sources = vec![None];
    let mut cols: Vec<Vec<T>> = vec![vec![T::one(); n]];
    for &v in parents.iter().chain(adjust.iter()) {
        match ds.dist(v) {
            DistributionKind::Multinomial { levels } => {
                for level in 1..levels {
                    let lv = cast::<T>(level as f64);
                    cols.push(
                        ds.column(v)
                            .iter()
                            .map(|&x| if x == lv { T::one() } else { T::zero() })
                            .collect(),
                    );
                    labels.push(format!("{}={}", ds.name(v), level));
                    sources.push(Some(ds.name(v).to_string()));
                }
            }
            _ => {
                cols.push(ds.column(v).to_vec());
                labels.push(ds.name(v).to_string());
                sources.push(Some(ds.name(v).to_string()));
            }
        }
    }

    let p = cols.len();
    let mut values = Matrix::zeros(n, p);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            values.set(i, j, v);
        }
    }
    Ok((
        DesignMatrix {
            values,
            column_labels: labels,
            source_terms: sources,
        },
        ds.column(child).to_vec(),
    ))
}

/// Parses the JSON distribution spec
/// `{"col": "gaussian" | "binomial" | "poisson" | {"multinomial": levels}}`.
pub fn parse_dist_spec(json: &str) -> Result<BTreeMap<String, DistributionKind>, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| DataError::BadDistSpec(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DataError::BadDistSpec("top level must be an object".into()))?;
    let mut out = BTreeMap::new();
    for (name, entry) in obj {
        let kind = match entry {
            serde_json::Value::String(s) => match s.as_str() {
                "gaussian" => DistributionKind::Gaussian,
                "binomial" => DistributionKind::Binomial,
                "poisson" => DistributionKind::Poisson,
                other => {
                    return Err(DataError::BadDistSpec(format!(
                        "unknown distribution `{other}` for `{name}`"
                    )))
                }
            },
            serde_json::Value::Object(m) => {
                let levels = m
                    .get("multinomial")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| {
                        DataError::BadDistSpec(format!(
                            "`{name}`: object form must be {{\"multinomial\": levels}}"
                        ))
                    })?;
                if levels < 3 {
                    return Err(DataError::BadDistSpec(format!(
                        "`{name}`: multinomial needs at least 3 levels, got {levels}"
                    )));
                }
                DistributionKind::Multinomial {
                    levels: levels as usize,
                }
            }
            _ => {
                return Err(DataError::BadDistSpec(format!(
                    "`{name}`: entry must be a string or {{\"multinomial\": levels}}"
                )))
            }
        };
        out.insert(name.clone(), kind);
    }
    Ok(out)
}

/// Serializes a distribution spec with sorted keys.
pub fn dist_spec_to_json(names: &[String], dists: &[DistributionKind]) -> String {
    let mut map = serde_json::Map::new();
    let mut pairs: Vec<(&String, &DistributionKind)> = names.iter().zip(dists.iter()).collect();
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    for (name, kind) in pairs {
        let v = match kind {
            DistributionKind::Gaussian => serde_json::Value::String("gaussian".into()),
            DistributionKind::Binomial => serde_json::Value::String("binomial".into()),
            DistributionKind::Poisson => serde_json::Value::String("poisson".into()),
            DistributionKind::Multinomial { levels } => {
                serde_json::json!({ "multinomial": levels })
            }
        };
        map.insert(name.clone(), v);
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec2() -> BTreeMap<String, DistributionKind> {
        BTreeMap::from([
            ("a".to_string(), DistributionKind::Binomial),
            ("b".to_string(), DistributionKind::Gaussian),
        ])
    }

    #[test]
    fn load_two_column_csv() {
        let csv = "a,b\n0,1.5\n1,2.5\n0,-0.5\n";
        let ds: Dataset<f64> = load_dataset(csv.as_bytes(), &spec2()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.column(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn poisson_negative_is_level_mismatch() {
        let spec = BTreeMap::from([("c".to_string(), DistributionKind::Poisson)]);
        let err = load_dataset::<f64, _>("c\n3\n-1\n".as_bytes(), &spec).unwrap_err();
        assert!(matches!(err, DataError::LevelMismatch { .. }), "{err}");
    }

    #[test]
    fn multinomial_recode_sorted() {
        let spec = BTreeMap::from([(
            "m".to_string(),
            DistributionKind::Multinomial { levels: 3 },
        )]);
        let ds: Dataset<f64> = load_dataset("m\ny\nz\nx\ny\n".as_bytes(), &spec).unwrap();
        // sorted x,y,z -> 0,1,2
        assert_eq!(ds.column(0), &[1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn binomial_numeric_recode_smaller_to_zero() {
        let spec = BTreeMap::from([("a".to_string(), DistributionKind::Binomial)]);
        let ds: Dataset<f64> = load_dataset("a\n2\n10\n2\n".as_bytes(), &spec).unwrap();
        // numeric order: 2 < 10
        assert_eq!(ds.column(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_value_rejected() {
        let err = load_dataset::<f64, _>("a,b\n0,\n1,2\n".as_bytes(), &spec2()).unwrap_err();
        assert!(matches!(err, DataError::MissingValue { .. }));
    }

    #[test]
    fn name_mismatch_errors() {
        let err = load_dataset::<f64, _>("a,z\n0,1\n1,2\n".as_bytes(), &spec2()).unwrap_err();
        assert!(matches!(err, DataError::MissingSpec(_)));
        let spec3 = BTreeMap::from([
            ("a".to_string(), DistributionKind::Binomial),
            ("b".to_string(), DistributionKind::Gaussian),
            ("c".to_string(), DistributionKind::Gaussian),
        ]);
        let err = load_dataset::<f64, _>("a,b\n0,1\n1,2\n".as_bytes(), &spec3).unwrap_err();
        assert!(matches!(err, DataError::UnknownColumn(_)));
    }

    fn gaussian_ds(k: usize) -> Dataset<f64> {
        let names = (0..k).map(|i| format!("x{i}")).collect();
        let columns = (0..k)
            .map(|j| (0..4).map(|i| (i * (j + 1)) as f64).collect())
            .collect();
        Dataset::new(names, columns, vec![DistributionKind::Gaussian; k]).unwrap()
    }

    #[test]
    fn encode_intercept_only() {
        let ds = gaussian_ds(2);
        let (design, y) = encode_design(&ds, 0, &[], &[]).unwrap();
        assert_eq!(design.p(), 1);
        assert_eq!(design.column_labels, vec![INTERCEPT_LABEL.to_string()]);
        assert!(design.values.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(y, ds.column(0));
    }

    #[test]
    fn encode_multinomial_parent_width() {
        let names = vec!["y".to_string(), "g".to_string(), "m".to_string()];
        let cols = vec![
            vec![0.5, 1.2, -0.3, 2.2, 0.0, 1.0],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0],
        ];
        let dists = vec![
            DistributionKind::Gaussian,
            DistributionKind::Gaussian,
            DistributionKind::Multinomial { levels: 3 },
        ];
        let ds = Dataset::new(names, cols, dists).unwrap();
        let (design, _) = encode_design(&ds, 0, &[1, 2], &[]).unwrap();
        // 1 intercept + 1 gaussian + 2 dummies
        assert_eq!(design.p(), 4);
        assert_eq!(design.column_labels[2], "m=1");
        assert_eq!(design.source_terms[2], Some("m".to_string()));
        // dummy for level 1 at rows 1 and 4
        assert_eq!(design.values.column(2), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_rejects_self_parent() {
        let ds = gaussian_ds(2);
        let err = encode_design(&ds, 0, &[0], &[]).unwrap_err();
        assert!(matches!(err, DataError::IllegalParent(_)));
        let err = encode_design(&ds, 0, &[5], &[]).unwrap_err();
        assert!(matches!(err, DataError::IndexOutOfRange { .. }));
    }

    #[test]
    fn validate_empty_constraints() {
        let ds = gaussian_ds(3);
        let cs = ConstraintSpec::unconstrained(3, 2);
        assert!(validate_constraints(&cs, &ds).is_empty());
    }

    #[test]
    fn validate_reports_conflict() {
        let ds = gaussian_ds(6);
        let mut cs = ConstraintSpec::unconstrained(6, 2);
        cs.ban[2][5] = true;
        cs.retain[2][5] = true;
        let violations = validate_constraints(&cs, &ds);
        assert_eq!(
            violations,
            vec![ConstraintViolation::Conflict { child: 2, parent: 5 }]
        );
    }

    #[test]
    fn validate_reports_retain_overflow() {
        let ds = gaussian_ds(4);
        let mut cs = ConstraintSpec::unconstrained(4, 2);
        cs.retain[0][1] = true;
        cs.retain[0][2] = true;
        cs.retain[0][3] = true;
        let violations = validate_constraints(&cs, &ds);
        assert!(violations
            .contains(&ConstraintViolation::RetainOverflow { child: 0, count: 3 }));
    }

    #[test]
    fn constraint_matrix_roundtrip() {
        let ds = gaussian_ds(3);
        let text = ",x0,x1,x2\nx0,0,1,0\nx1,0,0,0\nx2,1,0,0\n";
        let m = load_constraint_matrix(text.as_bytes(), &ds).unwrap();
        assert!(m[0][1] && m[2][0]);
        assert!(!m[1][0]);
        let out = adjacency_to_csv(
            &ds.names().to_vec(),
            |i, j| m[i][j],
        );
        assert_eq!(out, text);
    }

    #[test]
    fn dist_spec_json_roundtrip() {
        let json = r#"{"a":"gaussian","b":"binomial","c":{"multinomial":4},"d":"poisson"}"#;
        let spec = parse_dist_spec(json).unwrap();
        assert_eq!(spec["c"], DistributionKind::Multinomial { levels: 4 });
        let names: Vec<String> = spec.keys().cloned().collect();
        let dists: Vec<DistributionKind> = spec.values().copied().collect();
        let emitted = dist_spec_to_json(&names, &dists);
        let reparsed = parse_dist_spec(&emitted).unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let spec = BTreeMap::from([
            ("a".to_string(), DistributionKind::Binomial),
            ("b".to_string(), DistributionKind::Gaussian),
            ("m".to_string(), DistributionKind::Multinomial { levels: 3 }),
        ]);
        let csv = "a,b,m\nno,1.25,x\nyes,-2.5,z\nno,0.125,y\nyes,3.0,x\n";
        let ds: Dataset<f64> = load_dataset(csv.as_bytes(), &spec).unwrap();
        let emitted = ds.to_csv();
        let reloaded: Dataset<f64> = load_dataset(emitted.as_bytes(), &spec).unwrap();
        assert_eq!(ds, reloaded);
    }
}
