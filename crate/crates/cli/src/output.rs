//! Versioned CSV files: a `# schema: <name>/v<N>` line, then the column header.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub fn schema_line(name: &str) -> String {
    format!("# schema: metasaea.{name}/v{SCHEMA_VERSION}")
}

/// Creates `path` and writes the schema line and column header.
pub fn create_csv(path: &Path, schema: &str, header: &[String]) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{}", schema_line(schema))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

pub fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// A CSV file read back: schema name, header and raw records.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let first = text.lines().next().unwrap_or_default();
        let Some(schema) = first.strip_prefix("# schema: ") else {
            bail!("{} has no schema line", path.display());
        };
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            schema: schema.to_string(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column {name}"))
    }

    /// Parses one column as numbers.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().with_context(|| format!("column {name}: `{}`", r[j])))
            .collect()
    }
}

/// Reads numeric points from a CSV, skipping `#` lines and a non-numeric header.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => out.push(p),
            Err(_) if i == 0 => continue,
            Err(_) => bail!("{}: non-numeric row {}", path.display(), i + 1),
        }
    }
    if let Some(m) = out.first().map(Vec::len) {
        if out.iter().any(|p| p.len() != m) {
            bail!("{}: rows have differing lengths", path.display());
        }
    }
    Ok(out)
}
