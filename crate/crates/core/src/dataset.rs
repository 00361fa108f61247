//! Owner datasets and the contracted computation over them.
//!
//! A dataset is a small numeric table plus a unique canary value. The canary
//! never appears in any legitimate output, so finding it anywhere outside an
//! enclave or a ciphertext proves a plaintext leak.

use crate::crypto::{aead_decrypt, aead_encrypt, Ciphertext, CryptoError, KeyRole, SymmetricKey};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("tables disagree on column count: {left} vs {right}")]
    ColumnMismatch { left: usize, right: usize },
    #[error("malformed dataset bytes: {0}")]
    Malformed(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// One owner's table. Rows are `columns` floats each, quantized to cents so
/// the canonical text form round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnerDataset {
    pub descriptor: String,
    canary: [u8; 16],
    columns: usize,
    rows: Vec<Vec<f64>>,
}

impl OwnerDataset {
    pub fn generate(
        descriptor: impl Into<String>,
        rows: usize,
        columns: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut canary = [0u8; 16];
        rng.fill(&mut canary);
        let rows = (0..rows)
            .map(|_| {
                (0..columns)
                    .map(|_| rng.gen_range(0..1_000_000) as f64 / 100.0)
                    .collect()
            })
            .collect();
        OwnerDataset {
            descriptor: descriptor.into(),
            canary,
            columns,
            rows,
        }
    }

    pub fn canary(&self) -> [u8; 16] {
        self.canary
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Canonical text form: a canary line, then one comma-separated row per
    /// line. Float formatting is shortest-roundtrip, so parsing is exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str("canary,");
        out.push_str(&hex::encode(self.canary));
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn from_bytes(descriptor: impl Into<String>, bytes: &[u8]) -> Result<Self, DatasetError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| DatasetError::Malformed("not utf-8".into()))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| DatasetError::Malformed("empty".into()))?;
        let canary_hex = header
            .strip_prefix("canary,")
            .ok_or_else(|| DatasetError::Malformed("missing canary line".into()))?;
        let raw = hex::decode(canary_hex)
            .map_err(|_| DatasetError::Malformed("bad canary hex".into()))?;
        let canary: [u8; 16] = raw
            .try_into()
            .map_err(|_| DatasetError::Malformed("bad canary length".into()))?;

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut columns = 0usize;
        for line in lines {
            let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let row = row.map_err(|_| DatasetError::Malformed("bad float".into()))?;
            if rows.is_empty() {
                columns = row.len();
            } else if row.len() != columns {
                return Err(DatasetError::ColumnMismatch {
                    left: columns,
                    right: row.len(),
                });
            }
            rows.push(row);
        }
        Ok(OwnerDataset {
            descriptor: descriptor.into(),
            canary,
            columns,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub count: u64,
    pub mean: f64,
    pub std_dev: f64,
}

/// Output of the contracted operation: per-column count, mean, and population
/// standard deviation over the concatenation of the input tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResult {
    pub columns: Vec<ColumnSummary>,
}

impl StatsResult {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("stats serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        serde_json::from_slice(bytes).map_err(|e| DatasetError::Malformed(e.to_string()))
    }
}

/// A dataset at rest: ciphertext under the owner's data key, bound to its
/// descriptor. This is the only form in which data leaves an owner's host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataCapsule {
    pub descriptor: String,
    pub ct: Ciphertext,
}

pub fn seal_dataset(
    ds: &OwnerDataset,
    key: &SymmetricKey,
    nonce: [u8; crate::crypto::NONCE_LEN],
) -> Result<DataCapsule, DatasetError> {
    key.require_role(KeyRole::Data)?;
    let ct = aead_encrypt(key, nonce, &ds.to_bytes(), ds.descriptor.as_bytes());
    Ok(DataCapsule {
        descriptor: ds.descriptor.clone(),
        ct,
    })
}

pub fn open_capsule(capsule: &DataCapsule, key: &SymmetricKey) -> Result<OwnerDataset, DatasetError> {
    key.require_role(KeyRole::Data)?;
    let plain = aead_decrypt(key, &capsule.ct, capsule.descriptor.as_bytes())?;
    OwnerDataset::from_bytes(capsule.descriptor.clone(), &plain)
}

/// The operation enclaves run. Tables are concatenated in the order given;
/// callers pass them sorted by descriptor so every party computes the same
/// thing. Column counts must agree across all tables.
pub fn column_stats(tables: &[&OwnerDataset]) -> Result<StatsResult, DatasetError> {
    let columns = match tables.first() {
        Some(t) => t.columns,
        None => return Ok(StatsResult { columns: vec![] }),
    };
    for t in tables {
        if t.columns != columns {
            return Err(DatasetError::ColumnMismatch {
                left: columns,
                right: t.columns,
            });
        }
    }

    let mut out = Vec::with_capacity(columns);
    for c in 0..columns {
        let mut count = 0u64;
        let mut sum = 0.0f64;
        for t in tables {
            for row in &t.rows {
                sum += row[c];
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let mut sq_dev = 0.0f64;
        for t in tables {
            for row in &t.rows {
                let d = row[c] - mean;
                sq_dev += d * d;
            }
        }
        let std_dev = if count == 0 {
            0.0
        } else {
            (sq_dev / count as f64).sqrt()
        };
        out.push(ColumnSummary {
            count,
            mean,
            std_dev,
        });
    }
    Ok(StatsResult { columns: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn table(descriptor: &str, rows: Vec<Vec<f64>>) -> OwnerDataset {
        let columns = rows.first().map(|r| r.len()).unwrap_or(0);
        OwnerDataset {
            descriptor: descriptor.into(),
            canary: [0xAB; 16],
            columns,
            rows,
        }
    }

    #[test]
    fn stats_match_hand_computed_values() {
        // Column 0: 1,2,3,4 -> mean 2.5, population variance 1.25.
        // Column 1: 10,10,10,10 -> mean 10, std 0.
        let a = table("a", vec![vec![1.0, 10.0], vec![2.0, 10.0]]);
        let b = table("b", vec![vec![3.0, 10.0], vec![4.0, 10.0]]);
        let stats = column_stats(&[&a, &b]).unwrap();
        assert_eq!(stats.columns.len(), 2);
        assert_eq!(stats.columns[0].count, 4);
        assert_eq!(stats.columns[0].mean, 2.5);
        assert_eq!(stats.columns[0].std_dev, 1.25f64.sqrt());
        assert_eq!(stats.columns[1].count, 4);
        assert_eq!(stats.columns[1].mean, 10.0);
        assert_eq!(stats.columns[1].std_dev, 0.0);
    }

    #[test]
    fn column_mismatch_is_an_error() {
        let a = table("a", vec![vec![1.0, 2.0]]);
        let b = table("b", vec![vec![1.0, 2.0, 3.0]]);
        assert_eq!(
            column_stats(&[&a, &b]),
            Err(DatasetError::ColumnMismatch { left: 2, right: 3 })
        );
    }

    #[test]
    fn empty_input_yields_empty_stats() {
        assert_eq!(column_stats(&[]).unwrap().columns.len(), 0);
        let empty = table("e", vec![]);
        let stats = column_stats(&[&empty]).unwrap();
        assert!(stats.columns.is_empty());
    }

    #[test]
    fn dataset_bytes_roundtrip_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ds = OwnerDataset::generate("t0", 13, 4, &mut rng);
        let parsed = OwnerDataset::from_bytes("t0", &ds.to_bytes()).unwrap();
        assert_eq!(parsed, ds);
    }

    #[test]
    fn generated_values_print_with_at_most_two_decimals() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let ds = OwnerDataset::generate("t0", 20, 3, &mut rng);
        for row in ds.rows() {
            for v in row {
                let text = format!("{v}");
                if let Some((_, frac)) = text.split_once('.') {
                    assert!(frac.len() <= 2, "{text} has more than two decimals");
                }
            }
        }
    }

    #[test]
    fn stats_bytes_roundtrip() {
        let a = table("a", vec![vec![1.5, -2.25], vec![0.75, 4.0]]);
        let stats = column_stats(&[&a]).unwrap();
        let parsed = StatsResult::from_bytes(&stats.to_bytes()).unwrap();
        assert_eq!(parsed, stats);
    }

    #[test]
    fn capsule_roundtrips_and_is_bound_to_its_descriptor() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let ds = OwnerDataset::generate("t0", 4, 2, &mut rng);
        let key = crate::crypto::SymmetricKey::generate(&mut rng, KeyRole::Data);
        let capsule = seal_dataset(&ds, &key, [1u8; 12]).unwrap();
        assert_eq!(open_capsule(&capsule, &key).unwrap(), ds);

        // Relabeled capsule: associated data no longer matches.
        let mut moved = capsule.clone();
        moved.descriptor = "t1".into();
        assert!(matches!(
            open_capsule(&moved, &key),
            Err(DatasetError::Crypto(_))
        ));

        // Non-data key is refused before any bytes move.
        let channel_key = crate::crypto::SymmetricKey::generate(&mut rng, KeyRole::Channel);
        assert!(matches!(
            open_capsule(&capsule, &channel_key),
            Err(DatasetError::Crypto(CryptoError::RoleMismatch { .. }))
        ));
    }

    #[test]
    fn canary_roundtrips_and_is_seed_stable() {
        let mut r1 = ChaCha20Rng::seed_from_u64(99);
        let mut r2 = ChaCha20Rng::seed_from_u64(99);
        let a = OwnerDataset::generate("t", 2, 2, &mut r1);
        let b = OwnerDataset::generate("t", 2, 2, &mut r2);
        assert_eq!(a.canary(), b.canary());
        assert_eq!(a, b);
    }
}
