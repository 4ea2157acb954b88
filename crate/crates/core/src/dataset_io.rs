//! Self-describing binary dataset files.
//!
//! Layout: magic `CDTMDS1`, a length-prefixed (u32 LE) UTF-8 JSON header
//! embedding the full schema and the domain id, the row count as u64 LE, then
//! fixed-width rows of u32 LE value indices in schema field order followed by
//! one label byte. The embedded schema makes the trainer independent of any
//! side channel.

use crate::data::{DataError, Dataset, GroundTruth};
use crate::schema::GlobalSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 7] = b"CDTMDS1";

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file: magic bytes missing")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error(transparent)]
    Invalid(#[from] DataError),
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: GlobalSchema,
    domain_id: usize,
    field_count: usize,
}

pub fn write_dataset(
    schema: &GlobalSchema,
    dataset: &Dataset,
    path: &Path,
) -> Result<(), DatasetIoError> {
    let domain = schema
        .domain(dataset.domain_id)
        .map_err(|e| DatasetIoError::MalformedHeader(e.to_string()))?;
    dataset.validate(domain)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    let header = serde_json::to_vec(&DatasetHeader {
        schema: schema.clone(),
        domain_id: dataset.domain_id,
        field_count: dataset.field_count,
    })
    .expect("header serializes");
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(dataset.n_rows() as u64).to_le_bytes())?;
    for row in 0..dataset.n_rows() {
        for &v in dataset.row_values(row) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[dataset.labels[row]])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(GlobalSchema, Dataset), DatasetIoError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 7];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetIoError::BadMagic);
    }

    let mut len_bytes = [0u8; 4];
    read_exact_or(&mut r, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut r, &mut header_bytes, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| DatasetIoError::MalformedHeader(e.to_string()))?;

    let mut count_bytes = [0u8; 8];
    read_exact_or(&mut r, &mut count_bytes, "row count")?;
    let n_rows = u64::from_le_bytes(count_bytes) as usize;

    let f = header.field_count;
    let mut values = Vec::with_capacity(n_rows * f);
    let mut labels = Vec::with_capacity(n_rows);
    let mut row_buf = vec![0u8; f * 4 + 1];
    for _ in 0..n_rows {
        read_exact_or(&mut r, &mut row_buf, "row data")?;
        for field in 0..f {
            let b = &row_buf[field * 4..field * 4 + 4];
            values.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        labels.push(row_buf[f * 4]);
    }

    let dataset = Dataset {
        domain_id: header.domain_id,
        field_count: f,
        values,
        labels,
    };
    let domain = header
        .schema
        .domain(header.domain_id)
        .map_err(|e| DatasetIoError::MalformedHeader(e.to_string()))?;
    dataset.validate(domain)?;
    Ok((header.schema, dataset))
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), DatasetIoError> {
    r.read_exact(buf)
        .map_err(|_| DatasetIoError::Truncated { what })
}

pub fn write_ground_truth(gt: &GroundTruth, path: &Path) -> Result<(), DatasetIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, gt)
        .map_err(|e| DatasetIoError::MalformedHeader(e.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, DatasetIoError> {
    let f = File::open(path)?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| DatasetIoError::MalformedHeader(e.to_string()))
}

/// SHA-256 of a file's bytes, for manifests.
pub fn sha256_hex_of_file(path: &Path) -> Result<String, DatasetIoError> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    Ok(crate::schema::hex_lower(&hasher.finalize()))
}
