//! Delimited-table ingestion, covariate coding and offset construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{PlnError, Result};
use crate::model::{CountTable, Design};

/// How offsets are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    None,
    /// `O_ij = log Σ_k Y_ik` over the unfiltered table.
    LogRowTotals,
    /// `O_ij = log Σ_{k ∈ g(j)} Y_ik`, groups read from `--groups`.
    PerGroupLogTotals,
    /// Read from `--offsets`.
    File,
}

/// A parsed delimited table: header names, row names, raw cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub cells: Vec<Vec<String>>,
}

fn detect_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let bytes = std::fs::read(path).map_err(|e| PlnError::Input(format!("{}: {e}", path.display())))?;
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let delimiter = detect_delimiter(&String::from_utf8_lossy(first));
    parse_table(&bytes, delimiter, &path.display().to_string())
}

pub fn parse_table(bytes: &[u8], delimiter: u8, source: &str) -> Result<Table> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| PlnError::Input(format!("{source}: not valid UTF-8")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| PlnError::Input(format!("{source}: empty file")))?
        .map_err(|e| PlnError::Input(format!("{source}: {e}")))?;
    let mut header = header.iter().map(|s| s.trim().to_string());
    let corner = header.next().unwrap_or_default();
    let columns: Vec<String> = header.collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (line, record) in records.enumerate() {
        let record = record.map_err(|e| PlnError::Input(format!("{source}: {e}")))?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let mut it = record.iter().map(|s| s.trim().to_string());
        rows.push(it.next().unwrap_or_default());
        let row: Vec<String> = it.collect();
        if row.len() != columns.len() {
            return Err(PlnError::Input(format!(
                "{source}: line {} has {} values, header has {}",
                line + 2,
                row.len(),
                columns.len()
            )));
        }
        cells.push(row);
    }
    check_unique(&columns, "column", source)?;
    check_unique(&rows, "row", source)?;
    Ok(Table {
        corner,
        columns,
        rows,
        cells,
    })
}

fn check_unique(names: &[String], what: &str, source: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(PlnError::Input(format!("{source}: duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

/// Counts with `NA`/empty cells marked missing. With `integers`, every
/// observed value must be a non-negative integer.
pub fn counts_from_table(table: &Table, integers: bool) -> Result<CountTable> {
    let (n, p) = (table.rows.len(), table.columns.len());
    if n == 0 || p == 0 {
        return Err(PlnError::Input("count table has no rows or no columns".into()));
    }
    let mut values = DMatrix::zeros(n, p);
    for (i, row) in table.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            values[(i, j)] = if is_missing(cell) {
                f64::NAN
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    PlnError::Input(format!(
                        "count at sample {:?}, variable {:?} is not a number: {cell:?}",
                        table.rows[i], table.columns[j]
                    ))
                })?;
                if integers && (v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
                    return Err(PlnError::Input(format!(
                        "count at sample {:?}, variable {:?} is not a non-negative integer: {cell}",
                        table.rows[i], table.columns[j]
                    )));
                }
                v
            };
        }
    }
    CountTable::from_observations(values).with_names(table.rows.clone(), table.columns.clone())
}

/// Covariate columns coded for the design: numeric columns as is,
/// anything else as indicators against the lexicographically first level.
/// Rows follow `samples`.
pub fn code_covariates(
    table: &Table,
    samples: &[String],
    select: Option<&[String]>,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let index: HashMap<&str, usize> = table.rows.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let chosen: Vec<usize> = match select {
        None => (0..table.columns.len()).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                table
                    .columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| PlnError::Input(format!("covariate column {name:?} not found")))
            })
            .collect::<Result<_>>()?,
    };
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for &c in &chosen {
        let cells: Vec<&str> = samples
            .iter()
            .map(|s| {
                let i = index[s.as_str()];
                table.cells[i][c].as_str()
            })
            .collect();
        if let Some(k) = cells.iter().position(|v| is_missing(v)) {
            return Err(PlnError::Input(format!(
                "covariate {:?} is missing for sample {:?}",
                table.columns[c], samples[k]
            )));
        }
        let numeric: Option<Vec<f64>> = cells.iter().map(|v| v.parse::<f64>().ok()).collect();
        match numeric {
            Some(values) => {
                columns.push(values);
                names.push(table.columns[c].clone());
            }
            None => {
                let levels: BTreeSet<&str> = cells.iter().copied().collect();
                for level in levels.iter().skip(1) {
                    columns.push(cells.iter().map(|v| f64::from(v == level)).collect());
                    names.push(format!("{}={level}", table.columns[c]));
                }
            }
        }
    }
    let n = samples.len();
    let mut x = DMatrix::from_element(n, columns.len() + 1, 1.0);
    for (k, col) in columns.iter().enumerate() {
        for i in 0..n {
            x[(i, k + 1)] = col[i];
        }
    }
    let mut all_names = vec!["(Intercept)".to_string()];
    all_names.extend(names);
    Ok((x, all_names))
}

/// `log` of observed row totals over the given column set.
fn log_totals(counts: &CountTable, columns: &[usize], label: &str) -> Result<Vec<f64>> {
    (0..counts.nrows())
        .map(|i| {
            let total: f64 = columns
                .iter()
                .filter(|&&j| counts.is_observed(i, j))
                .map(|&j| counts.counts()[(i, j)])
                .sum();
            if total > 0.0 {
                Ok(total.ln())
            } else {
                Err(PlnError::Input(format!(
                    "sample {:?} has a zero {label} total; its log offset is undefined",
                    counts.row_names[i]
                )))
            }
        })
        .collect()
}

pub fn log_row_totals(counts: &CountTable) -> Result<DMatrix<f64>> {
    let all: Vec<usize> = (0..counts.ncols()).collect();
    let totals = log_totals(counts, &all, "row")?;
    Ok(DMatrix::from_fn(counts.nrows(), counts.ncols(), |i, _| totals[i]))
}

/// Group per variable from a two-column table (variable, group).
pub fn read_groups(table: &Table) -> Result<BTreeMap<String, String>> {
    if table.columns.is_empty() {
        return Err(PlnError::Input("group file needs a variable column and a group column".into()));
    }
    Ok(table
        .rows
        .iter()
        .zip(&table.cells)
        .map(|(v, cells)| (v.clone(), cells[0].clone()))
        .collect())
}

pub fn per_group_log_totals(counts: &CountTable, groups: &BTreeMap<String, String>) -> Result<DMatrix<f64>> {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, name) in counts.col_names.iter().enumerate() {
        let g = groups
            .get(name)
            .ok_or_else(|| PlnError::Input(format!("variable {name:?} has no offset group")))?;
        members.entry(g.as_str()).or_default().push(j);
    }
    let mut offsets = DMatrix::zeros(counts.nrows(), counts.ncols());
    for (group, cols) in &members {
        let totals = log_totals(counts, cols, &format!("group {group:?}"))?;
        for &j in cols {
            for i in 0..counts.nrows() {
                offsets[(i, j)] = totals[i];
            }
        }
    }
    Ok(offsets)
}

/// Offsets from a table keyed like the counts (samples × variables), or a
/// single column broadcast across variables.
pub fn offsets_from_table(table: &Table, counts: &CountTable) -> Result<DMatrix<f64>> {
    let rows: HashMap<&str, usize> = table.rows.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let parse = |i: usize, c: usize| -> Result<f64> {
        let cell = &table.cells[i][c];
        cell.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| PlnError::Input(format!("offset {cell:?} for sample {:?} is not a finite number", table.rows[i])))
    };
    let (n, p) = (counts.nrows(), counts.ncols());
    let mut offsets = DMatrix::zeros(n, p);
    let broadcast = table.columns.len() == 1;
    let col_index: HashMap<&str, usize> =
        table.columns.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect();
    for i in 0..n {
        let name = &counts.row_names[i];
        let r = *rows
            .get(name.as_str())
            .ok_or_else(|| PlnError::Input(format!("no offsets for sample {name:?}")))?;
        for j in 0..p {
            let c = if broadcast {
                0
            } else {
                *col_index.get(counts.col_names[j].as_str()).ok_or_else(|| {
                    PlnError::Input(format!("no offset column for variable {:?}", counts.col_names[j]))
                })?
            };
            offsets[(i, j)] = parse(r, c)?;
        }
    }
    Ok(offsets)
}

/// Inputs to [`ingest`].
#[derive(Debug, Clone, Serialize)]
pub struct IngestConfig {
    pub counts: PathBuf,
    pub covariates: Option<PathBuf>,
    pub covariate_columns: Option<Vec<String>>,
    pub offsets: Option<PathBuf>,
    pub offset_mode: OffsetMode,
    pub groups: Option<PathBuf>,
    pub min_abundance: f64,
    pub integer_counts: bool,
}

/// What ingestion kept and dropped.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub samples_in_counts: usize,
    pub samples_kept: usize,
    pub variables_in_counts: usize,
    pub variables_kept: usize,
    pub dropped_samples: Vec<String>,
    pub dropped_variables: Vec<String>,
}

/// Reads counts, covariates and offsets into an aligned `(CountTable, Design)`.
///
/// Offsets are computed on the full table; the min-abundance filter
/// (observed column total below the threshold) runs afterwards and never
/// re-normalizes them.
pub fn ingest(config: &IngestConfig) -> Result<(CountTable, Design, IngestReport)> {
    let count_table = read_table(&config.counts)?;
    let mut counts = counts_from_table(&count_table, config.integer_counts)?;
    let mut report = IngestReport {
        samples_in_counts: counts.nrows(),
        variables_in_counts: counts.ncols(),
        ..IngestReport::default()
    };

    let covariate_table = config.covariates.as_deref().map(read_table).transpose()?;
    if let Some(table) = &covariate_table {
        let known: BTreeSet<&str> = table.rows.iter().map(String::as_str).collect();
        let keep: Vec<usize> = (0..counts.nrows())
            .filter(|&i| known.contains(counts.row_names[i].as_str()))
            .collect();
        if keep.is_empty() {
            return Err(PlnError::Input(
                "no sample names are shared between the count and covariate tables".into(),
            ));
        }
        report.dropped_samples = (0..counts.nrows())
            .filter(|i| !keep.contains(i))
            .map(|i| counts.row_names[i].clone())
            .collect();
        if !report.dropped_samples.is_empty() {
            log::warn!(
                "{} samples without covariates dropped: {:?}",
                report.dropped_samples.len(),
                report.dropped_samples
            );
            counts = select_rows(&counts, &keep)?;
        }
    }

    let offsets = match config.offset_mode {
        OffsetMode::None => DMatrix::zeros(counts.nrows(), counts.ncols()),
        OffsetMode::LogRowTotals => log_row_totals(&counts)?,
        OffsetMode::PerGroupLogTotals => {
            let path = config
                .groups
                .as_deref()
                .ok_or_else(|| PlnError::Config("--offset-mode per-group-log-totals needs --groups".into()))?;
            per_group_log_totals(&counts, &read_groups(&read_table(path)?)?)?
        }
        OffsetMode::File => {
            let path = config
                .offsets
                .as_deref()
                .ok_or_else(|| PlnError::Config("--offset-mode file needs --offsets".into()))?;
            offsets_from_table(&read_table(path)?, &counts)?
        }
    };

    let (x, names) = match &covariate_table {
        Some(table) => code_covariates(table, &counts.row_names, config.covariate_columns.as_deref())?,
        None => (DMatrix::from_element(counts.nrows(), 1, 1.0), vec!["(Intercept)".to_string()]),
    };

    let keep: Vec<usize> = (0..counts.ncols())
        .filter(|&j| {
            let total: f64 = (0..counts.nrows())
                .filter(|&i| counts.is_observed(i, j))
                .map(|i| counts.counts()[(i, j)])
                .sum();
            total >= config.min_abundance
        })
        .collect();
    if keep.is_empty() {
        return Err(PlnError::Input(format!(
            "no variable reaches the minimum abundance {}",
            config.min_abundance
        )));
    }
    report.dropped_variables = (0..counts.ncols())
        .filter(|j| !keep.contains(j))
        .map(|j| counts.col_names[j].clone())
        .collect();
    let offsets = offsets.select_columns(&keep);
    let counts = select_columns(&counts, &keep)?;
    report.samples_kept = counts.nrows();
    report.variables_kept = counts.ncols();

    let design = Design::new(x, offsets)?.with_names(names)?;
    Ok((counts, design, report))
}

fn select_rows(counts: &CountTable, rows: &[usize]) -> Result<CountTable> {
    CountTable::with_mask(counts.counts().select_rows(rows), counts.mask().select_rows(rows))?
        .with_names(rows.iter().map(|&i| counts.row_names[i].clone()).collect(), counts.col_names.clone())
}

fn select_columns(counts: &CountTable, cols: &[usize]) -> Result<CountTable> {
    CountTable::with_mask(counts.counts().select_columns(cols), counts.mask().select_columns(cols))?
        .with_names(counts.row_names.clone(), cols.iter().map(|&j| counts.col_names[j].clone()).collect())
}

/// Writes a count table, `NA` for unobserved entries. Integers print
/// without a fractional part.
pub fn write_counts(counts: &CountTable, corner: &str) -> String {
    let mut out = String::from(corner);
    for c in &counts.col_names {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..counts.nrows() {
        out.push_str(&counts.row_names[i]);
        for j in 0..counts.ncols() {
            out.push(',');
            if counts.is_observed(i, j) {
                out.push_str(&format_count(counts.counts()[(i, j)]));
            } else {
                out.push_str("NA");
            }
        }
        out.push('\n');
    }
    out
}

fn format_count(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        crate::viz::format_value(v)
    }
}
