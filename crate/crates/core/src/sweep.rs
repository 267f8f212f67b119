//! Skip-layer and skip-head sweeps and their summary table.
//!
//! The reference grids are defined for 12 layers and 12 heads and are
//! rescaled to the configured depth and head count.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const LAYER_GRID_12: [usize; 6] = [0, 1, 3, 6, 9, 11];
pub const HEAD_GRID_12: [usize; 5] = [0, 3, 6, 9, 12];
/// Skip heads held fixed while sweeping layers, and vice versa.
pub const LAYER_SWEEP_HEADS_12: usize = 6;
pub const HEAD_SWEEP_LAYERS_12: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    SkipLayer,
    SkipHead,
    Both,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skiplayer" => Ok(Grid::SkipLayer),
            "skiphead" => Ok(Grid::SkipHead),
            "both" => Ok(Grid::Both),
            other => Err(Error::Config(format!(
                "unknown grid {other:?} (expected skiplayer, skiphead or both)"
            ))),
        }
    }
}

/// `round(point * units / 12)` with halves rounded up.
pub fn scale_point(point: usize, units: usize) -> usize {
    (2 * point * units + 12) / 24
}

fn push_unique(out: &mut Vec<(usize, usize)>, p: (usize, usize)) {
    if !out.contains(&p) {
        out.push(p);
    }
}

/// `(n_skip_layer, n_skip_head)` pairs for a sweep over `n_layer` x `n_head`.
pub fn grid_points(grid: Grid, n_layer: usize, n_head: usize) -> Vec<(usize, usize)> {
    let max_l = n_layer.saturating_sub(1);
    let mut out = Vec::new();
    if matches!(grid, Grid::SkipLayer | Grid::Both) {
        let nh = scale_point(LAYER_SWEEP_HEADS_12, n_head).min(n_head);
        for &g in &LAYER_GRID_12 {
            let nl = scale_point(g, n_layer).min(max_l);
            push_unique(&mut out, if nl == 0 { (0, 0) } else { (nl, nh) });
        }
    }
    if matches!(grid, Grid::SkipHead | Grid::Both) {
        let nl = scale_point(HEAD_SWEEP_LAYERS_12, n_layer).min(max_l);
        for &g in &HEAD_GRID_12 {
            let nh = scale_point(g, n_head).min(n_head);
            push_unique(&mut out, if nh == 0 || nl == 0 { (0, 0) } else { (nl, nh) });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_skip_layer: usize,
    pub n_skip_head: usize,
    /// Final validation loss, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

impl SweepRow {
    pub fn is_baseline(&self) -> bool {
        self.n_skip_layer == 0 || self.n_skip_head == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn baseline_loss(&self) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.is_baseline())
            .and_then(|r| r.outcome.as_ref().ok().copied())
    }

    /// Baseline loss minus row loss; `None` for the baseline row itself.
    pub fn abs_impr(&self, row: &SweepRow) -> Option<f64> {
        if row.is_baseline() {
            return None;
        }
        Some(self.baseline_loss()? - *row.outcome.as_ref().ok()?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10}  {:>9}  {:>8}  {:>10}", "#SkipLayer", "#SkipHead", "Loss", "Abs. Impr.");
        for r in &self.rows {
            let loss = match &r.outcome {
                Ok(l) => format!("{l:.4}"),
                Err(_) => "failed".into(),
            };
            let impr = if r.is_baseline() {
                "-".to_string()
            } else {
                self.abs_impr(r).map_or("n/a".into(), |d| format!("{d:+.4}"))
            };
            let _ = writeln!(s, "{:>10}  {:>9}  {:>8}  {:>10}", r.n_skip_layer, r.n_skip_head, loss, impr);
        }
        for r in &self.rows {
            if let Err(e) = &r.outcome {
                let _ = writeln!(s, "({}, {}) failed: {e}", r.n_skip_layer, r.n_skip_head);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("skip_layer,skip_head,loss,abs_impr,error\n");
        for r in &self.rows {
            let (loss, err) = match &r.outcome {
                Ok(l) => (format!("{l}"), String::new()),
                Err(e) => (String::new(), e.replace([',', '\n'], " ")),
            };
            let impr = if r.is_baseline() {
                "-".into()
            } else {
                self.abs_impr(r).map_or(String::new(), |d| format!("{d}"))
            };
            let _ = writeln!(s, "{},{},{loss},{impr},{err}", r.n_skip_layer, r.n_skip_head);
        }
        s
    }
}

/// Runs `run` once per grid point in order. A failing member is recorded
/// and the sweep moves on.
pub fn run_sweep<F>(base: &ModelConfig, grid: Grid, mut run: F) -> SweepTable
where
    F: FnMut(&ModelConfig) -> Result<f64>,
{
    let rows = grid_points(grid, base.n_layer, base.n_head)
        .into_iter()
        .map(|(nl, nh)| SweepRow {
            n_skip_layer: nl,
            n_skip_head: nh,
            outcome: run(&base.with_skip(nl, nh)).map_err(|e| e.to_string()),
        })
        .collect();
    SweepTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_unit_grids_are_unchanged() {
        let layers: Vec<usize> = grid_points(Grid::SkipLayer, 12, 12).iter().map(|p| p.0).collect();
        assert_eq!(layers, vec![0, 1, 3, 6, 9, 11]);
        let heads: Vec<usize> = grid_points(Grid::SkipHead, 12, 12).iter().map(|p| p.1).collect();
        assert_eq!(heads, vec![0, 3, 6, 9, 12]);
        assert!(grid_points(Grid::SkipLayer, 12, 12)[1..].iter().all(|p| p.1 == 6));
        assert!(grid_points(Grid::SkipHead, 12, 12)[1..].iter().all(|p| p.0 == 9));
    }

    #[test]
    fn six_unit_grids_round_half_up_and_dedup() {
        // 0, 0.5, 1.5, 3, 4.5, 5.5 -> 0, 1, 2, 3, 5, 6 -> clamp to 5 and dedup
        assert_eq!(
            grid_points(Grid::SkipLayer, 6, 6),
            vec![(0, 0), (1, 3), (2, 3), (3, 3), (5, 3)]
        );
        assert_eq!(
            grid_points(Grid::SkipHead, 6, 6),
            vec![(0, 0), (5, 2), (5, 3), (5, 5), (5, 6)]
        );
        let both = grid_points(Grid::Both, 6, 6);
        // (5, 3) appears in both grids
        assert_eq!(both.len(), 5 + 3);
        assert_eq!(both.iter().filter(|p| **p == (0, 0)).count(), 1);
    }

    #[test]
    fn every_point_is_valid() {
        for l in 1..=24 {
            for h in 1..=16 {
                for (nl, nh) in grid_points(Grid::Both, l, h) {
                    assert!(nl < l && nh <= h, "L={l} h={h} -> ({nl},{nh})");
                }
            }
        }
    }

    #[test]
    fn table_baseline_dash_and_improvement() {
        let base = ModelConfig::desk_default();
        let table = run_sweep(&base, Grid::SkipLayer, |c| {
            if c.n_skip_layer == 2 {
                Err(Error::Numeric("diverged".into()))
            } else {
                Ok(3.0 - 0.1 * c.n_skip_layer as f64)
            }
        });
        let text = table.to_text();
        let first = text.lines().nth(1).unwrap();
        assert!(first.trim_end().ends_with('-'), "{first}");
        assert!(text.contains("failed: numeric failure: diverged"));
        for r in &table.rows {
            if let (false, Ok(l)) = (r.is_baseline(), &r.outcome) {
                assert!((table.abs_impr(r).unwrap() - (3.0 - l)).abs() < 1e-6);
            }
        }
        let csv = table.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,3,-,"));
        assert_eq!(csv.lines().count(), 1 + table.rows.len());
    }
}
