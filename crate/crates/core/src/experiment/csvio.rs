//! The CSV dialect shared by every emitted table.
//!
//! Line 1 is `# schema=1`, an optional `# config=<hash>` line follows, then a header row and
//! comma-separated records. Floats use 17 significant digits so they round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub config: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes via a temporary sibling and a rename, so concurrent writers of identical content never
/// leave a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_table(path: &Path, config: Option<&str>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = format!("# schema={SCHEMA}\n");
    if let Some(h) = config {
        out.push_str(&format!("# config={h}\n"));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let enc = |e: csv::Error| Error::Encoding(e.to_string());
    w.write_record(header).map_err(enc)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Dimension(format!(
                "{}: row of {} fields under a {}-column header",
                path.display(),
                r.len(),
                header.len()
            )));
        }
        w.write_record(r).map_err(enc)?;
    }
    let body = w.into_inner().map_err(|e| Error::Encoding(e.to_string()))?;
    out.push_str(std::str::from_utf8(&body).map_err(|e| Error::Encoding(e.to_string()))?);
    write_atomic(path, out.as_bytes())
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, name: &str) -> Result<Table> {
    let bad = |line: usize, r: String| Error::parse(format!("{name}:{line}"), r);
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().unwrap_or("").trim_end();
    if first != format!("# schema={SCHEMA}") {
        return Err(bad(1, format!("expected `# schema={SCHEMA}`, found `{first}`")));
    }
    let mut rest: Vec<&str> = lines.collect();
    let mut config = None;
    let mut skipped = 1;
    if let Some(l) = rest.first() {
        if let Some(h) = l.trim_end().strip_prefix("# config=") {
            config = Some(h.to_string());
            rest.remove(0);
            skipped += 1;
        }
    }
    let body = rest.concat();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(skipped + 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(skipped + 2 + k, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { config, header, rows })
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse("csv header", format!("missing column `{name}`")))
    }

    /// Parses field `col` of row `row`; `row` is zero-based over records.
    pub fn get<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T> {
        let v = &self.rows[row][col];
        v.parse().map_err(|_| {
            Error::parse(
                format!("record {}", row + 1),
                format!("cannot parse `{v}` in column `{}`", self.header[col]),
            )
        })
    }
}

/// Lower-case identifier form of a class name for column headers.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

const METRIC_COLUMNS: [&str; 7] = [
    "step",
    "labeled",
    "accuracy",
    "loc_mse",
    "calibration_error",
    "calibration_error_weighted",
    "error_sum",
];

pub fn write_metrics(path: &Path, config: &str, classes: &[String], records: &[MetricsRecord]) -> Result<()> {
    let queried: Vec<String> = classes.iter().map(|c| format!("queried_{}", slug(c))).collect();
    let mut header: Vec<&str> = METRIC_COLUMNS.to_vec();
    header.extend(queried.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.step.to_string(),
                r.labeled.to_string(),
                fmt_f64(r.accuracy),
                fmt_f64(r.loc_mse),
                fmt_f64(r.calibration_error),
                fmt_f64(r.calibration_error_weighted),
                fmt_f64(r.error_sum),
            ];
            row.extend(r.queried.iter().map(usize::to_string));
            row
        })
        .collect();
    write_table(path, Some(config), &header, &rows)
}

/// Metrics rows (wall time is not stored and reads back as 0), the config hash and the queried
/// column names.
pub fn read_metrics(path: &Path) -> Result<(Option<String>, Vec<String>, Vec<MetricsRecord>)> {
    let t = read_table(path)?;
    let named = |e: Error| Error::parse(path.display().to_string(), e.to_string());
    if t.header.len() < METRIC_COLUMNS.len() || t.header[..METRIC_COLUMNS.len()] != METRIC_COLUMNS {
        return Err(named(Error::Encoding(format!("unexpected header {:?}", t.header))));
    }
    let queried: Vec<String> = t.header[METRIC_COLUMNS.len()..].to_vec();
    if let Some(bad) = queried.iter().find(|q| !q.starts_with("queried_")) {
        return Err(named(Error::Encoding(format!("unexpected column `{bad}`"))));
    }
    let mut records = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let g = |c: usize| t.get::<f64>(i, c).map_err(named);
        records.push(MetricsRecord {
            step: t.get(i, 0).map_err(named)?,
            labeled: t.get(i, 1).map_err(named)?,
            accuracy: g(2)?,
            loc_mse: g(3)?,
            calibration_error: g(4)?,
            calibration_error_weighted: g(5)?,
            error_sum: g(6)?,
            queried: (METRIC_COLUMNS.len()..t.header.len())
                .map(|c| t.get(i, c).map_err(named))
                .collect::<Result<_>>()?,
            wall_time: 0.0,
        });
    }
    Ok((t.config, queried, records))
}

/// `<prefix>_<strategy>_<rep>.csv` -> `(strategy, rep)`.
pub fn split_run_name(file: &str, prefix: &str, ext: &str) -> Option<(String, usize)> {
    let stem = file.strip_prefix(prefix)?.strip_prefix('_')?.strip_suffix(ext)?;
    let (s, r) = stem.rsplit_once('_')?;
    Some((s.to_string(), r.parse().ok()?))
}

pub fn run_file(dir: &Path, prefix: &str, strategy: &str, rep: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{strategy}_{rep}{ext}"))
}
