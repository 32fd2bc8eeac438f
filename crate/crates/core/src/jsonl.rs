//! JSON Lines helpers shared by the record, training and event-log writers.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Appends one record and fsyncs before returning.
pub fn append_synced<T: Serialize>(file: &mut File, record: &T) -> io::Result<()> {
    let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()
}

pub fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

/// Writes every record, replacing any existing file.
pub fn write_all<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> io::Result<usize> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut count = 0;
    for record in records {
        serde_json::to_writer(&mut out, &record).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
        count += 1;
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(count)
}

/// A parsed JSONL file that tolerates a torn final line.
///
/// `good_len` is the byte length of the prefix made of complete, parseable
/// lines; anything past it is a partial write from an interrupted process.
#[derive(Debug)]
pub struct Recovered<T> {
    pub records: Vec<T>,
    /// Byte offset at which each record's line starts.
    pub starts: Vec<u64>,
    pub good_len: u64,
    pub torn_tail: bool,
}

/// Reads a JSONL file written by [`append_synced`].
///
/// A final line that is unterminated or fails to parse is treated as a torn
/// write and reported through [`Recovered::torn_tail`]. A bad line anywhere
/// else is an error carrying its 1-based line number.
pub fn recover<T: DeserializeOwned>(path: &Path) -> io::Result<Recovered<T>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Ok(Recovered { records: Vec::new(), starts: Vec::new(), good_len: 0, torn_tail: false })
        }
        Err(e) => return Err(e),
    };
    let mut records = Vec::new();
    let mut starts = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
        let (line, next) = match end {
            Some(e) => (&bytes[offset..e], e + 1),
            None => {
                return Ok(Recovered { records, starts, good_len: offset as u64, torn_tail: true });
            }
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(r) => {
                records.push(r);
                starts.push(offset as u64);
            }
            Err(_) if is_last => {
                return Ok(Recovered { records, starts, good_len: offset as u64, torn_tail: true });
            }
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: line {line_no}: {e}", path.display()),
                ))
            }
        }
        offset = next;
    }
    Ok(Recovered { records, starts, good_len: offset as u64, torn_tail: false })
}

/// Reads every non-blank line, failing on the first unparseable one.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}
