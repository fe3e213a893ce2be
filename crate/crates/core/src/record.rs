//! Line-delimited record container.
//!
//! Every line is a JSON object `{schema_version, record_type, payload}`.
//! Reals are written as shortest round-trip decimals, so reading a file back
//! reproduces every `f64` bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    PairedRecord,
    EvalCase,
    Checkpoint,
    Metrics,
    ReportRow,
    Manifest,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    record_type: RecordType,
    payload: T,
}

pub fn encode_line<T: Serialize>(record_type: RecordType, payload: &T) -> Result<String> {
    Ok(serde_json::to_string(&Envelope {
        schema_version: SCHEMA_VERSION,
        record_type,
        payload,
    })?)
}

pub fn decode_line<T: DeserializeOwned>(expected: RecordType, line: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(line)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {}",
            env.schema_version
        )));
    }
    if env.record_type != expected {
        return Err(Error::Format(format!(
            "expected {expected:?} record, found {:?}",
            env.record_type
        )));
    }
    Ok(env.payload)
}

/// Buffered writer of one record type.
pub struct RecordWriter<W: Write> {
    inner: W,
    record_type: RecordType,
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: &Path, record_type: RecordType) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(RecordWriter {
            inner: BufWriter::new(File::create(path)?),
            record_type,
        })
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W, record_type: RecordType) -> Self {
        RecordWriter { inner, record_type }
    }

    pub fn write<T: Serialize>(&mut self, payload: &T) -> Result<()> {
        let line = encode_line(self.record_type, payload)?;
        self.inner.write_all(line.as_bytes())?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn read_records<T: DeserializeOwned>(path: &Path, record_type: RecordType) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            decode_line(record_type, &line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, record_type: RecordType, items: &[T]) -> Result<()> {
    let mut w = RecordWriter::create(path, record_type)?;
    for item in items {
        w.write(item)?;
    }
    w.flush()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
