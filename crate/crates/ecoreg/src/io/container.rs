//! Binary containers for fitted models and embedding matrices.
//!
//! Layout: 8 magic bytes, a u64 little-endian JSON metadata length, the
//! metadata JSON, a little-endian f64 payload, and a trailing sha256 of
//! everything before it. Floats travel as raw bits, so save-then-load is
//! bit-exact.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::RowKind;
use crate::featurizer::{EmbeddingMatrix, FeatureLayout, FittedMaps};
use crate::solver::{CvEntry, ModelFit};

use super::IoError;

const FIT_MAGIC: &[u8; 8] = b"ECOREG01";
const EMB_MAGIC: &[u8; 8] = b"ECOEMB01";
const HASH_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct FitMetadata {
    n_features: usize,
    alpha: f64,
    lambda: f64,
    lambda_path: Vec<f64>,
    nonzero_groups: usize,
    cv_table: Vec<CvEntry>,
    layout: FeatureLayout,
    converged: bool,
    final_change: f64,
}

fn write_container(
    magic: &[u8; 8],
    metadata: &impl Serialize,
    payload: &[f64],
) -> Result<Vec<u8>, IoError> {
    let meta = serde_json::to_vec(metadata).expect("metadata serializes");
    let mut buf = Vec::with_capacity(8 + 8 + meta.len() + payload.len() * 8 + HASH_LEN);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let hash = Sha256::digest(&buf);
    buf.extend_from_slice(&hash);
    Ok(buf)
}

fn read_container(magic: &[u8; 8], bytes: &[u8]) -> Result<(Vec<u8>, Vec<f64>), IoError> {
    if bytes.len() < 8 + 8 + HASH_LEN {
        return Err(IoError::IncompatibleVersion("file too short".into()));
    }
    if &bytes[..8] != magic {
        return Err(IoError::IncompatibleVersion(format!(
            "bad magic bytes, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let body_len = bytes.len() - HASH_LEN;
    let expected = Sha256::digest(&bytes[..body_len]);
    if expected.as_slice() != &bytes[body_len..] {
        return Err(IoError::HashMismatch);
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + meta_len;
    if payload_start > body_len || (body_len - payload_start) % 8 != 0 {
        return Err(IoError::IncompatibleVersion("truncated metadata".into()));
    }
    let meta = bytes[16..payload_start].to_vec();
    let payload = bytes[payload_start..body_len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, payload))
}

/// Serialize a fit to the container format.
pub fn fit_to_bytes(fit: &ModelFit) -> Result<Vec<u8>, IoError> {
    let p = fit.beta.nrows();
    let metadata = FitMetadata {
        n_features: p,
        alpha: fit.alpha,
        lambda: fit.lambda,
        lambda_path: fit.lambda_path.clone(),
        nonzero_groups: fit.nonzero_groups,
        cv_table: fit.cv_table.clone(),
        layout: fit.layout.clone(),
        converged: fit.converged,
        final_change: fit.final_change,
    };
    let mut payload = Vec::with_capacity(3 + p * 3);
    payload.extend_from_slice(&fit.intercepts);
    payload.extend(fit.beta.iter().copied());
    write_container(FIT_MAGIC, &metadata, &payload)
}

pub fn load_fit_bytes(bytes: &[u8]) -> Result<ModelFit, IoError> {
    let (meta, payload) = read_container(FIT_MAGIC, bytes)?;
    let metadata: FitMetadata = serde_json::from_slice(&meta)
        .map_err(|e| IoError::IncompatibleVersion(format!("bad metadata: {e}")))?;
    let p = metadata.n_features;
    if payload.len() != 3 + p * 3 {
        return Err(IoError::IncompatibleVersion(format!(
            "payload length {} does not match {} features",
            payload.len(),
            p
        )));
    }
    let intercepts = [payload[0], payload[1], payload[2]];
    let beta = Array2::from_shape_vec((p, 3), payload[3..].to_vec())
        .expect("length checked above");
    Ok(ModelFit {
        beta,
        intercepts,
        alpha: metadata.alpha,
        lambda: metadata.lambda,
        lambda_path: metadata.lambda_path,
        nonzero_groups: metadata.nonzero_groups,
        cv_table: metadata.cv_table,
        layout: metadata.layout,
        converged: metadata.converged,
        final_change: metadata.final_change,
    })
}

pub fn save_fit(path: &Path, fit: &ModelFit) -> Result<(), IoError> {
    let bytes = fit_to_bytes(fit)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_fit(path: &Path) -> Result<ModelFit, IoError> {
    load_fit_bytes(&std::fs::read(path)?)
}

/// An embedding matrix plus the fitted maps that produced it, so new
/// records and subgroups can be embedded consistently later.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArtifact {
    pub matrix: EmbeddingMatrix,
    pub maps: FittedMaps,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingMetadata {
    n_rows: usize,
    n_features: usize,
    row_ids: Vec<String>,
    row_kinds: Vec<RowKind>,
    layout: FeatureLayout,
    maps: FittedMaps,
}

pub fn embedding_to_bytes(artifact: &EmbeddingArtifact) -> Result<Vec<u8>, IoError> {
    let m = &artifact.matrix;
    let metadata = EmbeddingMetadata {
        n_rows: m.rows.nrows(),
        n_features: m.rows.ncols(),
        row_ids: m.row_ids.clone(),
        row_kinds: m.row_kinds.clone(),
        layout: m.layout.clone(),
        maps: artifact.maps.clone(),
    };
    let mut payload = Vec::with_capacity(m.rows.len() + m.row_weight_totals.len());
    payload.extend(m.rows.iter().copied());
    payload.extend(m.row_weight_totals.iter().copied());
    write_container(EMB_MAGIC, &metadata, &payload)
}

pub fn load_embedding_bytes(bytes: &[u8]) -> Result<EmbeddingArtifact, IoError> {
    let (meta, payload) = read_container(EMB_MAGIC, bytes)?;
    let metadata: EmbeddingMetadata = serde_json::from_slice(&meta)
        .map_err(|e| IoError::IncompatibleVersion(format!("bad metadata: {e}")))?;
    let (n, p) = (metadata.n_rows, metadata.n_features);
    if payload.len() != n * p + n || metadata.row_ids.len() != n || metadata.row_kinds.len() != n {
        return Err(IoError::IncompatibleVersion(
            "payload length does not match metadata shape".into(),
        ));
    }
    let rows = Array2::from_shape_vec((n, p), payload[..n * p].to_vec()).expect("checked");
    let row_weight_totals = Array1::from(payload[n * p..].to_vec());
    Ok(EmbeddingArtifact {
        matrix: EmbeddingMatrix {
            rows,
            row_weight_totals,
            row_ids: metadata.row_ids,
            row_kinds: metadata.row_kinds,
            layout: metadata.layout,
        },
        maps: metadata.maps,
    })
}

pub fn save_embedding(path: &Path, artifact: &EmbeddingArtifact) -> Result<(), IoError> {
    let bytes = embedding_to_bytes(artifact)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingArtifact, IoError> {
    load_embedding_bytes(&std::fs::read(path)?)
}
