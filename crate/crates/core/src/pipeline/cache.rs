//! Binary store of optimized embedding schedules.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header,
//! then every embedding as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{EmbeddingSchedule, OptimizationReport, Provenance};

const MAGIC: &[u8; 8] = b"AKEMB001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    seed: u64,
    schedule_hash: String,
    key: String,
    shape: [usize; 2],
    schedules: Vec<ScheduleHeader>,
    reports: Vec<OptimizationReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleHeader {
    frame_index: usize,
    provenance: Provenance,
    timesteps: Vec<usize>,
}

/// Embedding schedules and their optimization reports, tagged with what
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub seed: u64,
    pub schedule_hash: String,
    /// Digest of every input the optimization depends on.
    pub key: String,
    pub schedules: Vec<EmbeddingSchedule>,
    pub reports: Vec<OptimizationReport>,
}

impl EmbeddingCache {
    pub fn matches(&self, seed: u64, schedule_hash: &str, key: &str) -> bool {
        self.seed == seed && self.schedule_hash == schedule_hash && self.key == key
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let shape = self
            .schedules
            .iter()
            .flat_map(|s| s.iter())
            .map(|(_, e)| [e.nrows(), e.ncols()])
            .next()
            .unwrap_or([0, 0]);
        let header = Header {
            seed: self.seed,
            schedule_hash: self.schedule_hash.clone(),
            key: self.key.clone(),
            shape,
            schedules: self
                .schedules
                .iter()
                .map(|s| ScheduleHeader {
                    frame_index: s.frame_index,
                    provenance: s.provenance,
                    timesteps: s.iter().map(|(t, _)| t).collect(),
                })
                .collect(),
            reports: self.reports.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Cache(e.to_string()))?;
        let mut buf = Vec::with_capacity(12 + json.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for s in &self.schedules {
            for (_, e) in s.iter() {
                if [e.nrows(), e.ncols()] != shape {
                    return Err(Error::shape(&shape, e.shape()));
                }
                e.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::Cache(format!("{}: {what}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("not an embedding cache"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&e.to_string()))?;
        let [rows, cols] = header.shape;
        let mut data = bytes[12 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected: usize = header.schedules.iter().map(|s| s.timesteps.len() * rows * cols).sum();
        if bytes.len() - 12 - len != expected * 8 {
            return Err(corrupt("payload size does not match header"));
        }
        let schedules = header
            .schedules
            .iter()
            .map(|h| {
                let mut s = EmbeddingSchedule::new(h.frame_index, h.provenance);
                for &t in &h.timesteps {
                    let values: Vec<f64> = data.by_ref().take(rows * cols).collect();
                    s.push(t, Array2::from_shape_vec((rows, cols), values).expect("sized above"));
                }
                s
            })
            .collect();
        Ok(Self {
            seed: header.seed,
            schedule_hash: header.schedule_hash,
            key: header.key,
            schedules,
            reports: header.reports,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut a = EmbeddingSchedule::new(0, Provenance::SourceOptimized);
        a.push(981, Array2::from_shape_fn((2, 3), |(r, c)| (r as f64 + 0.1) / (c as f64 + 3.0)));
        a.push(1, Array2::from_elem((2, 3), -1e-300));
        let mut b = EmbeddingSchedule::new(1, Provenance::PoseAware);
        b.push(981, Array2::from_elem((2, 3), f64::MAX));
        b.push(1, Array2::zeros((2, 3)));
        let cache = EmbeddingCache {
            seed: 7,
            schedule_hash: "abc".into(),
            key: "k".into(),
            schedules: vec![a, b],
            reports: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        cache.save(&path).unwrap();
        let back = EmbeddingCache::load(&path).unwrap();
        assert_eq!(back, cache);
        assert!(back.matches(7, "abc", "k"));
        assert!(!back.matches(8, "abc", "k"));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        std::fs::write(&path, b"AKEMB001\x02\x00\x00\x00{}").unwrap();
        assert!(matches!(EmbeddingCache::load(&path), Err(Error::Cache(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(EmbeddingCache::load(&path).is_err());
    }
}
