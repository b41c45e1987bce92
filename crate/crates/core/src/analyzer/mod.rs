//! Top-k head sets, Jaccard overlap against a shuffled baseline, heatmaps
//! and the run report.

mod report;
mod svg;

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::patcher::{PatchGrid, PatchMode};

pub use report::{report, AcceptanceLine, ReportInputs};
pub use svg::{emit_grid_heatmap, emit_matrix_heatmap, grid_svg, matrix_svg};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TRIALS: usize = 10_000;
pub const MIN_TRIALS: usize = 1000;

pub type Head = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub label: String,
    pub k: usize,
    /// `(layer, head)`, strongest first.
    pub heads: Vec<Head>,
    pub grid_hash: String,
}

/// The `k` cells with the largest mean Δ; ties go to the lower
/// `(layer, head)`.
pub fn top_k_heads(grid: &PatchGrid, k: usize, label: &str) -> Result<HeadSet> {
    if grid.mode == PatchMode::LayerwiseTrigger {
        return Err(LabError::InvalidArgument(
            "top-k needs a layers × heads grid".into(),
        ));
    }
    let cells = grid.n_layers() * grid.n_cols();
    if k > cells {
        return Err(LabError::KExceedsGridSize { k, cells });
    }
    if !grid.is_finite() {
        return Err(LabError::InvalidArgument("grid has non-finite values".into()));
    }
    let mut ranked: Vec<Head> = (0..grid.n_layers())
        .flat_map(|l| (0..grid.n_cols()).map(move |h| (l, h)))
        .collect();
    // stable sort keeps (layer, head) order among equal values
    ranked.sort_by(|a, b| grid.get(b.0, b.1).total_cmp(&grid.get(a.0, a.1)));
    ranked.truncate(k);
    Ok(HeadSet {
        label: label.to_string(),
        k,
        heads: ranked,
        grid_hash: grid.content_hash(),
    })
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn jaccard(a: &HeadSet, b: &HeadSet) -> Result<f64> {
    jaccard_of(&a.heads, &b.heads)
}

pub fn jaccard_of(a: &[Head], b: &[Head]) -> Result<f64> {
    let sa: HashSet<&Head> = a.iter().collect();
    let sb: HashSet<&Head> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return Err(LabError::BothEmpty);
    }
    Ok(sa.intersection(&sb).count() as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub k: usize,
    pub cells: usize,
}

impl BaselineStats {
    /// `mean + 3·std`, the bar an observed overlap must clear.
    pub fn threshold(&self) -> f64 {
        self.mean + 3.0 * self.std
    }
}

/// Monte-Carlo Jaccard between two independent uniform `k`-subsets of the
/// `n_layers × n_heads` cells.
pub fn shuffled_baseline(n_layers: usize, n_heads: usize, k: usize, trials: usize, seed: u64) -> Result<BaselineStats> {
    let cells = n_layers * n_heads;
    if k > cells {
        return Err(LabError::KExceedsGridSize { k, cells });
    }
    if k == 0 {
        return Err(LabError::InvalidArgument("k must be >= 1".into()));
    }
    if trials < MIN_TRIALS {
        return Err(LabError::InvalidArgument(format!(
            "trials must be >= {MIN_TRIALS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mark = vec![false; cells];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let a = sample(&mut rng, cells, k);
        for i in a.iter() {
            mark[i] = true;
        }
        let shared = sample(&mut rng, cells, k).iter().filter(|&i| mark[i]).count();
        for i in a.iter() {
            mark[i] = false;
        }
        let j = shared as f64 / (2 * k - shared) as f64;
        sum += j;
        sum_sq += j * j;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(BaselineStats {
        mean,
        std: var.sqrt(),
        trials,
        k,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `values[row][col]`.
    pub values: Vec<Vec<f64>>,
    pub baseline_mean: f64,
    pub baseline_std: f64,
}

impl JaccardMatrix {
    /// Entries off the diagonal (square matrices) or all entries
    /// (rectangular ones), row-major.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let square = self.row_labels == self.col_labels;
        let mut out = Vec::new();
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(square && i == j) {
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| LabError::io(path, e))
    }
}

/// All pairwise overlaps among `sets`.
pub fn overlap_matrix(sets: &[HeadSet], baseline: &BaselineStats) -> Result<JaccardMatrix> {
    if sets.len() < 2 {
        return Err(LabError::InvalidArgument(
            "an overlap matrix needs at least two sets".into(),
        ));
    }
    cross_overlap(sets, sets, baseline)
}

/// Overlap of every row set with every column set.
pub fn cross_overlap(rows: &[HeadSet], cols: &[HeadSet], baseline: &BaselineStats) -> Result<JaccardMatrix> {
    let values = rows
        .iter()
        .map(|r| cols.iter().map(|c| jaccard(r, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(JaccardMatrix {
        row_labels: rows.iter().map(|s| s.label.clone()).collect(),
        col_labels: cols.iter().map(|s| s.label.clone()).collect(),
        values,
        baseline_mean: baseline.mean,
        baseline_std: baseline.std,
    })
}

/// Overlap of two grids' top-k sets, for one `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSensitivity {
    pub k: usize,
    pub jaccard: f64,
    pub baseline: BaselineStats,
}

pub fn k_sensitivity_of(a: &PatchGrid, b: &PatchGrid, ks: &[usize], trials: usize, seed: u64) -> Result<Vec<KSensitivity>> {
    ks.iter()
        .map(|&k| {
            let sa = top_k_heads(a, k, "a")?;
            let sb = top_k_heads(b, k, "b")?;
            Ok(KSensitivity {
                k,
                jaccard: jaccard(&sa, &sb)?,
                baseline: shuffled_baseline(a.n_layers(), a.n_cols(), k, trials, seed)?,
            })
        })
        .collect()
}

/// Head sets, overlap matrices and baseline for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStudy {
    pub k: usize,
    pub baseline: BaselineStats,
    pub trigger_sets: Vec<HeadSet>,
    pub language_sets: Vec<HeadSet>,
    /// Rows are trigger sets, columns language sets.
    pub trigger_vs_language: JaccardMatrix,
    pub language_vs_language: JaccardMatrix,
    /// Per `(trigger, same-language)` pair.
    pub k_sensitivity: Vec<(String, Vec<KSensitivity>)>,
}

impl OverlapStudy {
    /// Trigger-vs-language overlap for the pair labelled `trigger`/`language`.
    pub fn pair(&self, trigger: &str, language: &str) -> Option<f64> {
        let m = &self.trigger_vs_language;
        let r = m.row_labels.iter().position(|l| l == trigger)?;
        let c = m.col_labels.iter().position(|l| l == language)?;
        Some(m.values[r][c])
    }
}

/// Ranks every grid at `k`, then compares trigger sets with language sets
/// and language sets with each other. Grids are `(label, grid)`; a trigger
/// grid and a language grid are paired for the sensitivity table when
/// `pair_of` maps one label to the other.
pub fn overlap_study(
    trigger: &[(String, PatchGrid)],
    language: &[(String, PatchGrid)],
    k: usize,
    trials: usize,
    seed: u64,
    k_grid: &[usize],
    pair_of: impl Fn(&str) -> Option<String>,
) -> Result<OverlapStudy> {
    let first = trigger
        .first()
        .or(language.first())
        .ok_or_else(|| LabError::InvalidArgument("no grids to compare".into()))?;
    let (n_layers, n_heads) = (first.1.n_layers(), first.1.n_cols());
    if trigger.iter().chain(language).any(|(_, g)| (g.n_layers(), g.n_cols()) != (n_layers, n_heads)) {
        return Err(LabError::InvalidArgument("grids differ in shape".into()));
    }
    let rank = |grids: &[(String, PatchGrid)]| {
        grids
            .iter()
            .map(|(label, g)| top_k_heads(g, k, label))
            .collect::<Result<Vec<_>>>()
    };
    let trigger_sets = rank(trigger)?;
    let language_sets = rank(language)?;
    let baseline = shuffled_baseline(n_layers, n_heads, k, trials, seed)?;
    let trigger_vs_language = cross_overlap(&trigger_sets, &language_sets, &baseline)?;
    let language_vs_language = overlap_matrix(&language_sets, &baseline)?;
    let mut k_sensitivity = Vec::new();
    for (label, tg) in trigger {
        let Some(other) = pair_of(label) else { continue };
        if let Some((_, lg)) = language.iter().find(|(l, _)| *l == other) {
            let ks = k_grid.iter().copied().filter(|&kk| kk <= n_layers * n_heads).collect::<Vec<_>>();
            k_sensitivity.push((format!("{label} / {other}"), k_sensitivity_of(tg, lg, &ks, trials, seed)?));
        }
    }
    Ok(OverlapStudy {
        k,
        baseline,
        trigger_sets,
        language_sets,
        trigger_vs_language,
        language_vs_language,
        k_sensitivity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<Vec<f64>>) -> PatchGrid {
        let cols = (0..values[0].len()).map(|h| h.to_string()).collect();
        PatchGrid::new(PatchMode::TriggerHeads, cols, values, 1, 0.0)
    }

    fn set(label: &str, heads: &[Head]) -> HeadSet {
        HeadSet {
            label: label.into(),
            k: heads.len(),
            heads: heads.to_vec(),
            grid_hash: String::new(),
        }
    }

    #[test]
    fn single_positive_cell_wins() {
        let g = grid(vec![vec![0.0, 0.0], vec![0.0, 0.7]]);
        assert_eq!(top_k_heads(&g, 1, "x").unwrap().heads, vec![(1, 1)]);
    }

    #[test]
    fn ties_break_by_layer_then_head() {
        let g = grid(vec![vec![0.5; 3]; 2]);
        assert_eq!(top_k_heads(&g, 3, "x").unwrap().heads, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn ranking_uses_signed_values() {
        let g = grid(vec![vec![-5.0, 0.1], vec![0.2, -0.1]]);
        assert_eq!(top_k_heads(&g, 2, "x").unwrap().heads, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn top_k_is_scale_invariant() {
        let vals = vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.8, 0.0]];
        let scaled: Vec<Vec<f64>> = vals.iter().map(|r| r.iter().map(|v| v * 17.5).collect()).collect();
        assert_eq!(
            top_k_heads(&grid(vals), 4, "x").unwrap().heads,
            top_k_heads(&grid(scaled), 4, "x").unwrap().heads
        );
    }

    #[test]
    fn k_larger_than_grid() {
        let g = grid(vec![vec![0.0; 2]; 2]);
        assert!(matches!(top_k_heads(&g, 5, "x"), Err(LabError::KExceedsGridSize { k: 5, cells: 4 })));
        assert!(matches!(shuffled_baseline(2, 2, 5, 1000, 0), Err(LabError::KExceedsGridSize { .. })));
    }

    #[test]
    fn jaccard_basics() {
        let a = set("a", &[(0, 0), (1, 2)]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &set("b", &[(3, 3)])).unwrap(), 0.0);
        assert!(matches!(jaccard(&set("e", &[]), &set("f", &[])), Err(LabError::BothEmpty)));
        assert_eq!(jaccard(&set("e", &[]), &a).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_five_shared_of_ten() {
        let a: Vec<Head> = (0..10).map(|i| (0, i)).collect();
        let b: Vec<Head> = (5..15).map(|i| (0, i)).collect();
        let j = jaccard_of(&a, &b).unwrap();
        assert!((j - 5.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn forced_overlap_baseline() {
        let b = shuffled_baseline(4, 8, 32, 1000, 3).unwrap();
        assert_eq!(b.mean, 1.0);
        assert_eq!(b.std, 0.0);
    }

    #[test]
    fn too_few_trials() {
        assert!(shuffled_baseline(4, 8, 10, 999, 0).is_err());
    }

    #[test]
    fn self_overlap_matrix_is_all_ones() {
        let s = set("s", &[(0, 1), (2, 3)]);
        let base = shuffled_baseline(4, 8, 2, 1000, 0).unwrap();
        let m = overlap_matrix(&[s.clone(), s], &base).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(m.baseline_mean, base.mean);
        assert!(overlap_matrix(&[set("x", &[(0, 0)])], &base).is_err());
    }

    #[test]
    fn cross_overlap_is_rectangular() {
        let base = shuffled_baseline(4, 8, 1, 1000, 0).unwrap();
        let rows = [set("t", &[(0, 0)])];
        let cols = [set("a", &[(0, 0)]), set("b", &[(1, 1)])];
        let m = cross_overlap(&rows, &cols, &base).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 0.0]]);
        assert_eq!(m.off_diagonal(), vec![1.0, 0.0]);
    }
}
