use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const FINGERPRINT_COLUMN: &str = "config_fingerprint";

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Real(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    /// 12 significant digits for reals.
    pub fn render(&self) -> String {
        match self {
            Cell::Real(x) if x.is_finite() => format!("{x:.11e}"),
            Cell::Real(x) => x.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Real(x) => Some(*x),
            Cell::Int(i) => Some(*i as f64),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

/// Named columns plus the fingerprint of the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    pub fingerprint: String,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl ResultTable {
    pub fn new(experiment: &str, fingerprint: &str, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            fingerprint: fingerprint.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the header");
        self.rows.push(row);
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = Vec<Cell>>) {
        for r in rows {
            self.push(r);
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn cell(&self, row: usize, name: &str) -> Option<&Cell> {
        self.column_index(name).map(|c| &self.rows[row][c])
    }

    pub fn real(&self, row: usize, name: &str) -> Option<f64> {
        self.cell(row, name).and_then(Cell::as_f64)
    }

    pub fn text(&self, row: usize, name: &str) -> Option<String> {
        self.cell(row, name).map(Cell::render)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = format!(
            "# experiment: {}\n# config_fingerprint: {}\n# version: {} {}\n",
            self.experiment,
            self.fingerprint,
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        header.push(FINGERPRINT_COLUMN);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.iter().map(Cell::render).collect();
            rec.push(self.fingerprint.clone());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    /// Fixed-width rendering for terminals.
    pub fn to_aligned_text(&self) -> String {
        let rendered: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|c| match c {
                        Cell::Real(x) => format!("{x:.6e}"),
                        other => other.render(),
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                rendered
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.columns[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(self.columns.iter().map(String::as_str).collect());
        out.push('\n');
        for r in &rendered {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

/// A result file read back as text.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub metadata: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self> {
        let metadata = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l.trim_start_matches('#').split_once(':'))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { metadata, header, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column `{name}`")))
    }

    pub fn get_f64(&self, row: usize, name: &str) -> Result<f64> {
        let v = &self.rows[row][self.column(name)?];
        v.parse().map_err(|_| Error::Config(format!("`{v}` in column `{name}` is not a number")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResultTable {
        let mut t = ResultTable::new("demo", "abc123", &["x", "label", "flag", "n"]);
        t.push(vec![Cell::Real(0.1), "a,b".into(), true.into(), 3usize.into()]);
        t.push(vec![Cell::Real(-1.0 / 3.0), "c".into(), false.into(), Cell::Empty]);
        t
    }

    #[test]
    fn csv_layout() {
        let text = sample().to_csv_string().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# experiment: demo");
        assert_eq!(lines[1], "# config_fingerprint: abc123");
        assert!(lines[2].starts_with("# version: sttm "));
        assert_eq!(lines[3], "x,label,flag,n,config_fingerprint");
        assert_eq!(lines[4], "1.00000000000e-1,\"a,b\",true,3,abc123");
        assert_eq!(lines[5], "-3.33333333333e-1,c,false,,abc123");
    }

    #[test]
    fn round_trip_through_parser() {
        let t = sample();
        let parsed = CsvTable::parse(&t.to_csv_string().unwrap()).unwrap();
        assert_eq!(parsed.metadata["config_fingerprint"], "abc123");
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[0][1], "a,b");
        assert!((parsed.get_f64(1, "x").unwrap() + 1.0 / 3.0).abs() < 1e-12);
        assert!(parsed.rows.iter().all(|r| r.last().unwrap() == "abc123"));
        assert!(parsed.column("nope").is_err());
    }

    #[test]
    fn aligned_text_has_one_line_per_row() {
        let text = sample().to_aligned_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with("x "));
    }

    #[test]
    #[should_panic]
    fn ragged_rows_are_rejected() {
        let mut t = ResultTable::new("demo", "f", &["a", "b"]);
        t.push(vec![Cell::Empty]);
    }
}
