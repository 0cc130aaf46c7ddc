//! Experiment sweeps over hyperparameter grids, with CSV/JSON reports.
//!
//! Runtime cells report the trimmed-mean wall-clock milliseconds to the
//! first difference-inducing input (the minimum and maximum repetitions
//! are dropped); coverage cells report the mean neuron-coverage ratio
//! across the three models. Cells run sequentially; runtime cells run
//! their campaign on a single worker so measurements do not interfere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{run_campaign, time_to_first_divergence, GenerationConfig};
use crate::tensor::Tensor;
use crate::zoo::ModelEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Lambda,
    Threshold,
    Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis1: f64,
    pub axis2: Option<f64>,
    /// `None` marks a failed cell (no divergence within budget).
    pub value: Option<f64>,
    /// Smallest value in its row (fixed axis2, varying axis1).
    pub row_min: bool,
    /// Smallest value in its column (fixed axis1, varying axis2).
    pub col_min: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub axis1_name: String,
    pub axis2_name: Option<String>,
    pub repetitions: usize,
    pub aggregation: String,
    pub cells: Vec<SweepCell>,
    pub warnings: Vec<String>,
}

/// Mean after dropping one minimum and one maximum; plain mean when
/// fewer than three samples.
pub fn trimmed_mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    if samples.len() < 3 {
        return Some(samples.iter().sum::<f64>() / samples.len() as f64);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let kept = &sorted[1..sorted.len() - 1];
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Runtime grid over lambda1 (columns) and lambda2 (rows). Each cell is
/// repeated `reps` times with a per-repetition seed stream; a cell where
/// any repetition fails to produce a divergence is marked failed.
pub fn sweep_lambda(
    ensemble: &ModelEnsemble,
    seeds: &[(Tensor, usize)],
    base: &GenerationConfig,
    lambda1_grid: &[f64],
    lambda2_grid: &[f64],
    reps: usize,
) -> Result<SweepReport> {
    if lambda1_grid.is_empty() || lambda2_grid.is_empty() {
        return Err(Error::usage("lambda sweep requires nonempty grids"));
    }
    if reps == 0 {
        return Err(Error::usage("lambda sweep requires at least one repetition"));
    }
    let mut cells = Vec::with_capacity(lambda1_grid.len() * lambda2_grid.len());
    for &lambda2 in lambda2_grid {
        for &lambda1 in lambda1_grid {
            let mut samples = Vec::with_capacity(reps);
            let mut failed = false;
            for rep in 0..reps {
                let config = GenerationConfig {
                    lambda1,
                    lambda2,
                    rng_seed: crate::seeds::derive(base.rng_seed, 0x4e9 + rep as u64),
                    ..base.clone()
                };
                match time_to_first_divergence(ensemble, seeds, &config)? {
                    Some(ms) => samples.push(ms),
                    None => {
                        failed = true;
                        break;
                    }
                }
            }
            cells.push(SweepCell {
                axis1: lambda1,
                axis2: Some(lambda2),
                value: if failed { None } else { trimmed_mean(&samples) },
                row_min: false,
                col_min: false,
            });
        }
    }
    mark_minima(&mut cells);
    Ok(SweepReport {
        kind: SweepKind::Lambda,
        axis1_name: "lambda1".into(),
        axis2_name: Some("lambda2".into()),
        repetitions: reps,
        aggregation: "trimmed_mean_runtime_ms".into(),
        cells,
        warnings: Vec::new(),
    })
}

fn mark_minima(cells: &mut [SweepCell]) {
    let rows: Vec<f64> = dedup_axis(cells.iter().filter_map(|c| c.axis2));
    let cols: Vec<f64> = dedup_axis(cells.iter().map(|c| c.axis1));
    for &row in &rows {
        let min = cells
            .iter()
            .filter(|c| c.axis2 == Some(row))
            .filter_map(|c| c.value)
            .fold(f64::INFINITY, f64::min);
        for cell in cells.iter_mut() {
            if cell.axis2 == Some(row) && cell.value == Some(min) {
                cell.row_min = true;
            }
        }
    }
    for &col in &cols {
        let min = cells
            .iter()
            .filter(|c| c.axis1 == col)
            .filter_map(|c| c.value)
            .fold(f64::INFINITY, f64::min);
        for cell in cells.iter_mut() {
            if cell.axis1 == col && cell.value == Some(min) {
                cell.col_min = true;
            }
        }
    }
}

fn dedup_axis(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Coverage as a function of the activation threshold; one campaign per
/// grid entry over the same seeds. Rows come out sorted by threshold
/// ascending, so the coverage column reads monotonically.
pub fn sweep_threshold(
    ensemble: &ModelEnsemble,
    seeds: &[(Tensor, usize)],
    base: &GenerationConfig,
    threshold_grid: &[f64],
    workers: usize,
) -> Result<SweepReport> {
    if threshold_grid.is_empty() {
        return Err(Error::usage("threshold sweep requires a nonempty grid"));
    }
    let mut grid = threshold_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    let mut cells = Vec::with_capacity(grid.len());
    for &threshold in &grid {
        let config = GenerationConfig {
            threshold,
            ..base.clone()
        };
        let result = run_campaign(ensemble, seeds, &config, workers)?;
        cells.push(SweepCell {
            axis1: threshold,
            axis2: None,
            value: Some(result.stats.coverage_ratio),
            row_min: false,
            col_min: false,
        });
    }
    Ok(SweepReport {
        kind: SweepKind::Threshold,
        axis1_name: "threshold".into(),
        axis2_name: None,
        repetitions: 1,
        aggregation: "mean_coverage_ratio".into(),
        cells,
        warnings: Vec::new(),
    })
}

/// Coverage as a function of the number of processed seeds. Counts are
/// deduplicated (with a warning), sorted ascending, and evaluated as
/// prefixes of one seed pool, so the coverage column is non-decreasing
/// by construction.
pub fn sweep_seeds(
    ensemble: &ModelEnsemble,
    seed_pool: &[(Tensor, usize)],
    base: &GenerationConfig,
    counts: &[usize],
    workers: usize,
) -> Result<SweepReport> {
    if counts.is_empty() {
        return Err(Error::usage("seed sweep requires a nonempty count list"));
    }
    let mut warnings = Vec::new();
    let mut unique: Vec<usize> = Vec::new();
    for &c in counts {
        if unique.contains(&c) {
            warnings.push(format!("duplicate seed count {c} dropped"));
        } else {
            unique.push(c);
        }
    }
    unique.sort_unstable();
    let max = unique.iter().copied().max().unwrap_or(0);
    if max > seed_pool.len() {
        return Err(Error::usage(format!(
            "seed count {max} exceeds the pool of {}",
            seed_pool.len()
        )));
    }
    let mut cells = Vec::with_capacity(unique.len());
    for &count in &unique {
        let value = if count == 0 {
            0.0
        } else {
            run_campaign(ensemble, &seed_pool[..count], base, workers)?
                .stats
                .coverage_ratio
        };
        cells.push(SweepCell {
            axis1: count as f64,
            axis2: None,
            value: Some(value),
            row_min: false,
            col_min: false,
        });
    }
    Ok(SweepReport {
        kind: SweepKind::Seeds,
        axis1_name: "seed_count".into(),
        axis2_name: None,
        repetitions: 1,
        aggregation: "mean_coverage_ratio".into(),
        cells,
        warnings,
    })
}

// ---------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<SweepReport> {
        serde_json::from_str(text).map_err(|e| Error::CorruptRecord(format!("sweep json: {e}")))
    }

    /// CSV with `# key=value` header comments carrying the metadata, so
    /// the full report round-trips. Floats print in shortest round-trip
    /// form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# kind={}\n",
            serde_json::to_value(self.kind)
                .expect("kind serializes")
                .as_str()
                .expect("kind is a string")
        ));
        out.push_str(&format!("# axis1_name={}\n", self.axis1_name));
        if let Some(axis2) = &self.axis2_name {
            out.push_str(&format!("# axis2_name={axis2}\n"));
        }
        out.push_str(&format!("# repetitions={}\n", self.repetitions));
        out.push_str(&format!("# aggregation={}\n", self.aggregation));
        for w in &self.warnings {
            out.push_str(&format!("# warning={w}\n"));
        }
        out.push_str("axis1,axis2,value,row_min,col_min\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.axis1,
                cell.axis2.map(|v| v.to_string()).unwrap_or_default(),
                cell.value.map(|v| v.to_string()).unwrap_or_default(),
                cell.row_min,
                cell.col_min
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepReport> {
        let bad = |msg: String| Error::CorruptRecord(format!("sweep csv: {msg}"));
        let mut kind = None;
        let mut axis1_name = String::new();
        let mut axis2_name = None;
        let mut repetitions = 0usize;
        let mut aggregation = String::new();
        let mut warnings = Vec::new();
        let mut cells = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            if let Some(comment) = line.strip_prefix('#') {
                let (key, value) = comment
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad comment '{comment}'")))?;
                match key {
                    "kind" => {
                        kind = Some(
                            serde_json::from_value(serde_json::Value::String(value.into()))
                                .map_err(|e| bad(format!("bad kind: {e}")))?,
                        )
                    }
                    "axis1_name" => axis1_name = value.into(),
                    "axis2_name" => axis2_name = Some(value.to_string()),
                    "repetitions" => {
                        repetitions = value.parse().map_err(|_| bad("bad repetitions".into()))?
                    }
                    "aggregation" => aggregation = value.into(),
                    "warning" => warnings.push(value.to_string()),
                    other => return Err(bad(format!("unknown comment key '{other}'"))),
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                saw_header = true; // column header row
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let parse_opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("bad float '{s}'")))
                }
            };
            cells.push(SweepCell {
                axis1: fields[0]
                    .parse()
                    .map_err(|_| bad(format!("bad float '{}'", fields[0])))?,
                axis2: parse_opt(fields[1])?,
                value: parse_opt(fields[2])?,
                row_min: fields[3].parse().map_err(|_| bad("bad bool".into()))?,
                col_min: fields[4].parse().map_err(|_| bad("bad bool".into()))?,
            });
        }
        Ok(SweepReport {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            axis1_name,
            axis2_name,
            repetitions,
            aggregation,
            cells,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimmed_mean_drops_extremes() {
        assert_eq!(trimmed_mean(&[10.0, 20.0, 90.0]), Some(20.0));
        assert_eq!(trimmed_mean(&[5.0]), Some(5.0));
        assert_eq!(trimmed_mean(&[4.0, 8.0]), Some(6.0));
        assert_eq!(trimmed_mean(&[]), None);
        assert_eq!(trimmed_mean(&[1.0, 2.0, 3.0, 100.0]), Some(2.5));
    }

    fn sample_report() -> SweepReport {
        SweepReport {
            kind: SweepKind::Lambda,
            axis1_name: "lambda1".into(),
            axis2_name: Some("lambda2".into()),
            repetitions: 3,
            aggregation: "trimmed_mean_runtime_ms".into(),
            cells: vec![
                SweepCell {
                    axis1: 0.5,
                    axis2: Some(1.0),
                    value: Some(311.25),
                    row_min: true,
                    col_min: false,
                },
                SweepCell {
                    axis1: 1.0,
                    axis2: Some(1.0),
                    value: None,
                    row_min: false,
                    col_min: false,
                },
            ],
            warnings: vec!["duplicate seed count 10 dropped".into()],
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let report = sample_report();
        let back = SweepReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let report = sample_report();
        let back = SweepReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_round_trip_preserves_full_float_precision() {
        let mut report = sample_report();
        report.cells[0].value = Some(0.1 + 0.2); // not representable tidily
        report.cells[0].axis1 = 1.0 / 3.0;
        let back = SweepReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn minima_marking() {
        let mut cells = vec![
            SweepCell { axis1: 1.0, axis2: Some(1.0), value: Some(30.0), row_min: false, col_min: false },
            SweepCell { axis1: 2.0, axis2: Some(1.0), value: Some(10.0), row_min: false, col_min: false },
            SweepCell { axis1: 1.0, axis2: Some(2.0), value: Some(5.0), row_min: false, col_min: false },
            SweepCell { axis1: 2.0, axis2: Some(2.0), value: None, row_min: false, col_min: false },
        ];
        mark_minima(&mut cells);
        assert!(!cells[0].row_min && cells[1].row_min); // row lambda2=1
        assert!(cells[2].row_min); // row lambda2=2: only finite value
        assert!(cells[2].col_min); // column lambda1=1
        assert!(cells[1].col_min); // column lambda1=2: only finite value
    }

    #[test]
    fn single_cell_grid_has_no_extra_cells() {
        // 1x1 grid: exactly one cell; it is trivially its own row/col min.
        let mut cells = vec![SweepCell {
            axis1: 2.5,
            axis2: Some(2.0),
            value: Some(100.0),
            row_min: false,
            col_min: false,
        }];
        mark_minima(&mut cells);
        assert_eq!(cells.len(), 1);
        assert!(cells[0].row_min && cells[0].col_min);
    }
}
