use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::net::params::{GradStore, LayerGrads};
use crate::net::spec::NetworkSpec;

/// One CSV row: a subnet's numbers for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub subnet: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub avg_val_acc: f64,
    pub realloc_flag: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    /// Epochs whose weights and masks were kept as the best so far.
    pub snapshot_epochs: Vec<usize>,
    /// Epochs after which the layer-wise allocation was recomputed.
    pub realloc_epochs: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub best_avg: Option<f64>,
}

impl RunRecord {
    /// Appends one epoch: per-subnet losses and accuracies, 1-based subnets.
    pub fn push_epoch(&mut self, epoch: usize, losses: &[f64], accs: &[f64], realloc: bool) -> f64 {
        let avg = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        for (k, (&loss, &acc)) in losses.iter().zip(accs).enumerate() {
            self.rows.push(EpochRow {
                epoch,
                subnet: k + 1,
                loss,
                val_acc: acc,
                avg_val_acc: avg,
                realloc_flag: realloc as u8,
            });
        }
        avg
    }

    /// Mean training loss per epoch of `subnet`.
    pub fn loss_trace(&self, subnet: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.subnet == subnet).map(|r| r.loss).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRow>> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>()?;
        Ok(rows)
    }
}

pub const METADATA_SCHEMA: u32 = 1;

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// SHA-256 of the training data.
    pub data_hash: String,
    pub snapshot_epochs: Vec<usize>,
    pub best_epoch: Option<usize>,
    /// Final accuracies per level on the test split, when measured.
    #[serde(default)]
    pub test_accuracy: Vec<f64>,
}

impl RunMetadata {
    pub fn new(command: &str, config: &TrainConfig, data_hash: String, record: &RunRecord) -> Self {
        RunMetadata {
            schema_version: METADATA_SCHEMA,
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            data_hash,
            snapshot_epochs: record.snapshot_epochs.clone(),
            best_epoch: record.best_epoch,
            test_accuracy: Vec::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Cosine of the angle between two vectors; `None` if either has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSample {
    pub iteration: usize,
    pub layer: String,
    pub level: usize,
    /// Missing when a gradient had zero norm.
    pub value: Option<f64>,
}

/// Per layer and level: cosine between the masked gradient of subnet `k`
/// and that of subnet 1, at every logged iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineTrace {
    pub samples: Vec<CosineSample>,
}

impl CosineTrace {
    /// Logs one iteration from the per-subnet masked gradients (level order).
    pub fn record(&mut self, iteration: usize, net: &NetworkSpec, parts: &[GradStore<f32>]) {
        let Some(first) = parts.first() else { return };
        for i in net.sampled_layers() {
            let LayerGrads::Dense { weight: g1, .. } = &first.layers[i] else {
                continue;
            };
            for (k, part) in parts.iter().enumerate() {
                if let LayerGrads::Dense { weight: gk, .. } = &part.layers[i] {
                    self.samples.push(CosineSample {
                        iteration,
                        layer: net.layers[i].name.clone(),
                        level: k + 1,
                        value: cosine(gk, g1),
                    });
                }
            }
        }
    }

    /// Median over logged iterations for every `(layer, level)`, skipping
    /// undefined samples. Ordered by first appearance.
    pub fn medians(&self) -> Vec<(String, usize, Option<f64>)> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for s in &self.samples {
            let key = (s.layer.clone(), s.level);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(layer, level)| {
                let mut v: Vec<f64> = self
                    .samples
                    .iter()
                    .filter(|s| s.layer == layer && s.level == level)
                    .filter_map(|s| s.value)
                    .collect();
                v.sort_by(f64::total_cmp);
                let m = match v.len() {
                    0 => None,
                    n if n % 2 == 1 => Some(v[n / 2]),
                    n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
                };
                (layer, level, m)
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "layer", "level", "cosine"])?;
        for s in &self.samples {
            w.write_record([
                s.iteration.to_string(),
                s.layer.clone(),
                s.level.to_string(),
                s.value.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), Some(0.0));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert!((cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn medians_skip_undefined() {
        let t = CosineTrace {
            samples: [Some(0.2), None, Some(0.6), Some(0.4)]
                .into_iter()
                .enumerate()
                .map(|(i, value)| CosineSample {
                    iteration: i,
                    layer: "fc".into(),
                    level: 2,
                    value,
                })
                .collect(),
        };
        let m = t.medians();
        assert_eq!(m.len(), 1);
        assert!((m[0].2.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunRecord::default();
        let avg = r.push_epoch(0, &[0.5, 0.7], &[0.9, 0.8], true);
        assert!((avg - 0.85).abs() < 1e-12);
        let path = dir.path().join("run.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,subnet,loss,val_acc,avg_val_acc,realloc_flag"));
        assert_eq!(RunRecord::read_csv(&path).unwrap(), r.rows);
    }
}
