//! On-disk formats: observation sequences (binary or CSV), parameter JSON,
//! traces as NDJSON plus a CSV summary, and run manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sghmm::{Epoch, Error, HmmParams, ObservationSequence, Result, TraceSample};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 6] = b"SGHMM1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// `SGHMM1`, `u32` length, `u32` dimension, then row-major little-endian `f64`.
pub fn write_sequence(path: &Path, y: &ObservationSequence<f64>) -> Result<()> {
    let mut w = create(path)?;
    let len = u32::try_from(y.len()).map_err(|_| format_err(path, "sequence too long"))?;
    let dim = u32::try_from(y.dim()).map_err(|_| format_err(path, "dimension too large"))?;
    let mut buf = Vec::with_capacity(14 + 8 * y.as_slice().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for v in y.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// Reads the binary format, or CSV with one observation per row (an optional
/// non-numeric header row is skipped).
pub fn read_sequence(path: &Path) -> Result<ObservationSequence<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.starts_with(MAGIC) {
        if bytes.len() < 14 {
            return Err(format_err(path, "truncated header"));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != 8 * len * dim {
            return Err(format_err(
                path,
                format!("expected {} values, found {} bytes", len * dim, body.len()),
            ));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return ObservationSequence::new(data, dim);
    }
    read_csv_sequence(path, &bytes)
}

fn read_csv_sequence(path: &Path, bytes: &[u8]) -> Result<ObservationSequence<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(format_err(path, format!("row {}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(format_err(path, "no observations"));
    }
    ObservationSequence::from_rows(&rows).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_err(path, e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_params(path: &Path) -> Result<HmmParams<f64>> {
    read_json(path)
}

/// One JSON object per sample.
pub fn write_trace_ndjson(path: &Path, samples: &[TraceSample<f64>]) -> Result<()> {
    let mut w = create(path)?;
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| format_err(path, e.to_string()))?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trace_ndjson(path: &Path) -> Result<Vec<TraceSample<f64>>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// `iteration, wall_ms, log_pred, a_0_0, a_1_0, …` with `A` flattened column-major.
pub fn write_trace_summary(path: &Path, samples: &[TraceSample<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let k = samples.first().map_or(0, |s| s.params.num_states());
    let mut header = vec!["iteration".to_string(), "wall_ms".into(), "log_pred".into()];
    for j in 0..k {
        for i in 0..k {
            header.push(format!("a_{i}_{j}"));
        }
    }
    let fail = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(&header).map_err(fail)?;
    for s in samples {
        let mut row = vec![
            s.iteration.to_string(),
            format!("{:.3}", s.wall_ms),
            s.log_pred.map_or(String::new(), |v| v.to_string()),
        ];
        row.extend(s.params.transition().column_major().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_epochs(path: &Path, epochs: &[Epoch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| format_err(path, e.to_string());
    w.write_record([
        "iteration",
        "buffer",
        "nu",
        "lyapunov",
        "lyapunov_se",
        "nu_clamped",
        "buffer_warning",
    ])
    .map_err(fail)?;
    for e in epochs {
        w.write_record([
            e.iteration.to_string(),
            e.buffer.to_string(),
            e.nu.to_string(),
            e.lyapunov.map_or(String::new(), |l| l.exponent.to_string()),
            e.lyapunov.map_or(String::new(), |l| l.std_error.to_string()),
            e.nu_clamped.to_string(),
            e.buffer_warning.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Rows of string cells under a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// SHA-256 over `blob <len>\0<content>`, the object hash git uses.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.to_path_buf(),
            hash: content_hash(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileHash {
            path: path.to_path_buf(),
            hash: content_hash(path)?,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}
