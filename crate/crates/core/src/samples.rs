//! Steady-state sample sets with their reproducibility metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    QueueLength,
    Sojourn,
    Rbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub kind: SampleKind,
    pub dim: usize,
    pub warmup: f64,
    pub spacing: f64,
    pub samples_per_replication: usize,
    pub replications: usize,
    pub seeds: Vec<u64>,
    pub spec_hash: String,
    /// Samples are raw values divided by this factor.
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visits: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    replication: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderRecord {
    metadata: SampleMetadata,
}

/// Matrix of samples (one row per sample) tagged with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySampleSet {
    pub metadata: SampleMetadata,
    pub rows: Vec<Vec<f64>>,
    /// Replication index of each row.
    pub replication: Vec<usize>,
}

impl StationarySampleSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.metadata.dim
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn replication_column(&self, rep: usize, j: usize) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.replication)
            .filter(|(_, &r)| r == rep)
            .map(|(row, _)| row[j])
            .collect()
    }

    /// Divides every sample by `factor` (e.g. sqrt(n) for diffusion scaling).
    pub fn scaled(mut self, factor: f64) -> Self {
        for row in &mut self.rows {
            for v in row.iter_mut() {
                *v /= factor;
            }
        }
        self.metadata.scale *= factor;
        self
    }

    /// Concatenates two sets drawn from the same model and sampling plan.
    /// Replication indices of `other` are shifted past those of `self`.
    pub fn merge(mut self, other: StationarySampleSet) -> Result<Self> {
        let (a, b) = (&self.metadata, &other.metadata);
        if a.kind != b.kind || a.dim != b.dim || a.spec_hash != b.spec_hash || a.scale != b.scale {
            return Err(Error::InvalidArgument(
                "cannot merge sample sets from different models".to_string(),
            ));
        }
        let offset = self.metadata.replications;
        self.metadata.replications += other.metadata.replications;
        self.metadata.seeds.extend(other.metadata.seeds);
        self.rows.extend(other.rows);
        self.replication
            .extend(other.replication.into_iter().map(|r| r + offset));
        Ok(self)
    }

    /// Line-delimited JSON: one metadata header record, then one record per sample.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderRecord {
            metadata: self.metadata.clone(),
        })
        .expect("metadata serializes");
        out.push('\n');
        for (row, &rep) in self.rows.iter().zip(&self.replication) {
            let rec = SampleRecord {
                replication: rep,
                values: row.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty sample file".to_string()))?;
        let header: HeaderRecord =
            serde_json::from_str(header).map_err(|e| Error::Config(format!("bad header: {e}")))?;
        let mut rows = Vec::new();
        let mut replication = Vec::new();
        for line in lines {
            let rec: SampleRecord =
                serde_json::from_str(line).map_err(|e| Error::Config(format!("bad record: {e}")))?;
            if rec.values.len() != header.metadata.dim {
                return Err(Error::DimensionMismatch {
                    expected: header.metadata.dim,
                    actual: rec.values.len(),
                });
            }
            rows.push(rec.values);
            replication.push(rec.replication);
        }
        Ok(StationarySampleSet {
            metadata: header.metadata,
            rows,
            replication,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>, seed: u64) -> StationarySampleSet {
        let n = rows.len();
        StationarySampleSet {
            metadata: SampleMetadata {
                kind: SampleKind::QueueLength,
                dim: rows[0].len(),
                warmup: 10.0,
                spacing: 1.0,
                samples_per_replication: n,
                replications: 1,
                seeds: vec![seed],
                spec_hash: "abc".to_string(),
                scale: 1.0,
                step: None,
                station: None,
                visits: None,
            },
            rows,
            replication: vec![0; n],
        }
    }

    #[test]
    fn merge_is_associative() {
        let a = set(vec![vec![1.0, 2.0]], 1);
        let b = set(vec![vec![3.0, 4.0]], 2);
        let c = set(vec![vec![5.0, 6.0]], 3);
        let left = a.clone().merge(b.clone()).unwrap().merge(c.clone()).unwrap();
        let right = a.merge(b.merge(c).unwrap()).unwrap();
        assert_eq!(left, right);
        assert_eq!(left.replication, vec![0, 1, 2]);
    }

    #[test]
    fn merge_rejects_foreign_sets() {
        let a = set(vec![vec![1.0]], 1);
        let mut b = set(vec![vec![1.0]], 2);
        b.metadata.spec_hash = "other".to_string();
        assert!(a.merge(b).is_err());
    }

    #[test]
    fn jsonl_has_header_then_records() {
        let s = set(vec![vec![1.0, 2.5], vec![0.0, 1e-3]], 9).scaled(2.0);
        let text = s.to_jsonl();
        assert!(text.starts_with("{\"metadata\":"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(StationarySampleSet::from_jsonl(&text).unwrap(), s);
    }
}
