//! Plain-text tables for the terminal and the `report` subcommand.

use deeprobe_core::augment::RetrainReport;
use deeprobe_core::generator::CampaignStats;
use deeprobe_core::sweep::{SweepKind, SweepReport};
use deeprobe_core::zoo::AccuracyReport;

use crate::commands::{ComparisonReport, CoverageSummary};

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

pub fn train_table(report: &AccuracyReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>12}\n",
        "model", "train", "test", "final loss"
    ));
    for m in &report.per_model {
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>12.4}\n",
            m.name,
            pct(m.train_accuracy),
            pct(m.test_accuracy),
            m.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ));
    }
    out
}

pub fn stats_table(stats: &CampaignStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("seeds processed    {}\n", stats.seeds));
    out.push_str(&format!("corner cases       {}\n", stats.corner_cases));
    out.push_str(&format!(
        "conversion rate    {}\n",
        stats
            .conversion_rate
            .map(pct)
            .unwrap_or_else(|| "n/a".into())
    ));
    out.push_str(&format!("avg coverage       {}\n", pct(stats.coverage_ratio)));
    let diverged_ms: Vec<f64> = stats.first_divergence_ms.iter().flatten().copied().collect();
    if !diverged_ms.is_empty() {
        let mean = diverged_ms.iter().sum::<f64>() / diverged_ms.len() as f64;
        out.push_str(&format!("mean divergence    {mean:.1} ms\n"));
    }
    out.push_str(&format!("total wall clock   {:.0} ms\n", stats.total_ms));
    out
}

/// Lambda sweeps render as the classic grid (rows lambda2, columns
/// lambda1); `*` marks the row minimum, `+` the column minimum.
pub fn sweep_table(report: &SweepReport) -> String {
    let mut out = String::new();
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    match report.kind {
        SweepKind::Lambda => {
            let mut cols: Vec<f64> = Vec::new();
            let mut rows: Vec<f64> = Vec::new();
            for cell in &report.cells {
                if !cols.contains(&cell.axis1) {
                    cols.push(cell.axis1);
                }
                if let Some(axis2) = cell.axis2 {
                    if !rows.contains(&axis2) {
                        rows.push(axis2);
                    }
                }
            }
            out.push_str(&format!("runtime ms ({})\n", report.aggregation));
            out.push_str(&format!("{:>10}", format!("l2\\l1")));
            for c in &cols {
                out.push_str(&format!("{c:>10}"));
            }
            out.push('\n');
            for r in &rows {
                out.push_str(&format!("{r:>10}"));
                for c in &cols {
                    let cell = report
                        .cells
                        .iter()
                        .find(|x| x.axis1 == *c && x.axis2 == Some(*r));
                    let text = match cell {
                        Some(cell) => match cell.value {
                            Some(v) => format!(
                                "{:.1}{}{}",
                                v,
                                if cell.row_min { "*" } else { "" },
                                if cell.col_min { "+" } else { "" }
                            ),
                            None => "failed".into(),
                        },
                        None => "-".into(),
                    };
                    out.push_str(&format!("{text:>10}"));
                }
                out.push('\n');
            }
        }
        SweepKind::Threshold | SweepKind::Seeds => {
            out.push_str(&format!(
                "{:>12} {:>12}\n",
                report.axis1_name, report.aggregation
            ));
            for cell in &report.cells {
                let value = match cell.value {
                    Some(v) => pct(v),
                    None => "failed".into(),
                };
                out.push_str(&format!("{:>12} {:>12}\n", cell.axis1, value));
            }
        }
    }
    out
}

pub fn retrain_table(report: &RetrainReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "model", "aug before", "aug after", "test before", "test after", "improve"
    ));
    for m in &report.per_model {
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            m.name,
            pct(m.augmented_before),
            pct(m.augmented_after),
            pct(m.test_before),
            pct(m.test_after),
            m.relative_improvement_pct
                .map(|p| format!("{p:+.1}%"))
                .unwrap_or_else(|| "n/a".into())
        ));
    }
    out
}

pub fn comparison_table(report: &ComparisonReport) -> String {
    let mut out = String::new();
    if report.corner_case_count > 0 {
        out.push_str(&format!(
            "corner-case set: {} images\n",
            report.corner_case_count
        ));
    }
    for outcome in &report.strategies {
        out.push_str(&format!("\nstrategy: {}\n", outcome.strategy));
        out.push_str(&retrain_table(&outcome.report));
        out.push_str("corner-case accuracy after: ");
        let row: Vec<String> = outcome
            .report
            .per_model
            .iter()
            .zip(&outcome.corner_after)
            .map(|(m, a)| format!("{} {}", m.name, pct(*a)))
            .collect();
        out.push_str(&row.join(", "));
        out.push('\n');
    }
    out
}

pub fn coverage_table(report: &CoverageSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("average coverage  {}\n", pct(report.average_ratio)));
    for (i, model) in report.per_model.iter().enumerate() {
        out.push_str(&format!(
            "model {i}: {}/{} neurons ({}) at t={}\n",
            model.activated,
            model.total_neurons,
            pct(model.ratio),
            model.threshold
        ));
        for layer in &model.per_layer {
            out.push_str(&format!(
                "  layer {:>2}: {:>4}/{:<4}\n",
                layer.layer, layer.activated, layer.units
            ));
        }
    }
    out
}
