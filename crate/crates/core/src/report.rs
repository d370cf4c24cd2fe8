//! Append-safe CSV files with a schema line.
//!
//! A new file starts with `# schema: <name>/<version>` followed by the header
//! row. Reopening an existing file checks the schema line and appends rows.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn open(path: &Path, schema: &str, header: &[&str]) -> Result<Self> {
        let schema_line = format!("# schema: {schema}");
        let exists = path.exists() && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        if exists {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut first = String::new();
            BufReader::new(f)
                .read_line(&mut first)
                .map_err(|e| Error::io(path, e))?;
            if first.trim_end() != schema_line {
                return Err(Error::Config(format!(
                    "{} has schema {:?}, expected {schema_line:?}",
                    path.display(),
                    first.trim_end()
                )));
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !exists {
            writeln!(file, "{schema_line}").map_err(|e| Error::io(path, e))?;
        }
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if !exists {
            writer.write_record(header)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a file written by [`CsvSink`]: the schema line and the records
/// (header excluded).
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<csv::StringRecord>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let schema = first
        .trim_end()
        .strip_prefix("# schema: ")
        .ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("{} lacks a schema line", path.display()),
        })?
        .to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((schema, header, rows))
}
