use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PatchMode;
use crate::error::{LabError, Result};

/// Mean Δ per (layer, column); columns are heads or trigger positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub mode: PatchMode,
    pub columns: Vec<String>,
    /// `values[layer][column]`.
    pub values: Vec<Vec<f64>>,
    pub n_examples: usize,
    /// Mean `log p(y | clean) − log p(y | corrupted)` over the examples.
    pub mean_gap: f64,
}

/// JSON written next to a grid CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub mode: PatchMode,
    pub n_examples: usize,
    pub model_checkpoint_hash: String,
    pub seed: u64,
    pub mean_gap: f64,
    /// SHA-256 of the CSV bytes.
    pub grid_hash: String,
}

impl PatchGrid {
    pub fn new(
        mode: PatchMode,
        columns: Vec<String>,
        values: Vec<Vec<f64>>,
        n_examples: usize,
        mean_gap: f64,
    ) -> Self {
        PatchGrid {
            mode,
            columns,
            values,
            n_examples,
            mean_gap,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, layer: usize, col: usize) -> f64 {
        self.values[layer][col]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Header `layer,<col>,..`; one row per layer. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (layer, row) in self.values.iter().enumerate() {
            let mut rec = vec![layer.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn sidecar(&self, model_checkpoint_hash: &str, seed: u64) -> GridSidecar {
        GridSidecar {
            mode: self.mode,
            n_examples: self.n_examples,
            model_checkpoint_hash: model_checkpoint_hash.to_string(),
            seed,
            mean_gap: self.mean_gap,
            grid_hash: self.content_hash(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, csv_path: &Path, model_checkpoint_hash: &str, seed: u64) -> Result<GridSidecar> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| LabError::io(csv_path, e))?;
        let side = self.sidecar(model_checkpoint_hash, seed);
        let json_path = csv_path.with_extension("json");
        let text = serde_json::to_string_pretty(&side)?;
        std::fs::write(&json_path, text).map_err(|e| LabError::io(&json_path, e))?;
        Ok(side)
    }

    /// Reads a grid and its sidecar, checking the recorded hash.
    pub fn load(csv_path: &Path) -> Result<(Self, GridSidecar)> {
        let text = std::fs::read_to_string(csv_path).map_err(|e| LabError::io(csv_path, e))?;
        let json_path = csv_path.with_extension("json");
        let side_text = std::fs::read_to_string(&json_path).map_err(|e| LabError::io(&json_path, e))?;
        let side: GridSidecar = serde_json::from_str(&side_text)?;

        let bad = |m: String| LabError::MissingArtifact(format!("{}: {m}", csv_path.display()));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        let grid = PatchGrid::new(side.mode, columns, values, side.n_examples, side.mean_gap);
        if grid.content_hash() != side.grid_hash {
            return Err(bad("grid does not match the hash in its sidecar".into()));
        }
        Ok((grid, side))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PatchGrid {
        PatchGrid::new(
            PatchMode::TriggerHeads,
            vec!["0".into(), "1".into(), "2".into()],
            vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 0.0, -1.25]],
            17,
            2.5,
        )
    }

    #[test]
    fn csv_layout() {
        let csv = grid().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,0,1,2"));
        assert!(lines.next().unwrap().starts_with("0,0.1,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let g = grid();
        let side = g.save(&path, "abc", 9).unwrap();
        let (back, side_back) = PatchGrid::load(&path).unwrap();
        assert_eq!(back, g);
        assert_eq!(side_back, side);
        assert_eq!(side.model_checkpoint_hash, "abc");
    }

    #[test]
    fn tampered_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        grid().save(&path, "abc", 9).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("3,", "4,");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(PatchGrid::load(&path), Err(LabError::MissingArtifact(_))));
    }
}
