//! Aggregation of run metrics into a per-mode, per-task table with few-shot,
//! normal, and overall averages.

use std::collections::BTreeMap;

use gfca_core::eval::{cross_task_average, MetricsReport};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    mean: f64,
    std: Option<f64>,
}

fn stats(values: &[f64]) -> Stats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    Stats { mean, std }
}

impl Stats {
    fn render(&self) -> String {
        match self.std {
            Some(s) => format!("{:.1}±{:.1}", self.mean, s),
            None => format!("{:.1}", self.mean),
        }
    }
}

/// One row per mode, one few-shot-accuracy column per task, then the
/// cross-task averages of few-shot, normal, and overall accuracy.
#[derive(Debug)]
pub struct ReportTable {
    tasks: Vec<String>,
    rows: Vec<RowData>,
}

#[derive(Debug)]
struct RowData {
    mode: String,
    cells: Vec<Option<Stats>>,
    avg_few: f64,
    avg_normal: f64,
    avg_overall: f64,
}

fn mode_rank(mode: &str) -> usize {
    ["source-only", "mmd-only", "gfca-2stage", "gfca-wofc", "gfca"]
        .iter()
        .position(|m| *m == mode)
        .unwrap_or(usize::MAX)
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<ReportTable, CliError> {
    let first = &reports[0];
    for r in reports {
        let same = r.class_count == first.class_count
            && r.few_shot_classes == first.few_shot_classes
            && r.shots_per_class == first.shots_per_class;
        if !same {
            return Err(CliError::Runtime(format!(
                "inconsistent class protocols across runs: {}/{:?}/{} vs {}/{:?}/{}",
                r.class_count,
                r.few_shot_classes,
                r.shots_per_class,
                first.class_count,
                first.few_shot_classes,
                first.shots_per_class,
            )));
        }
    }
    let mut tasks: Vec<String> = reports.iter().map(|r| r.task.clone()).collect();
    tasks.sort();
    tasks.dedup();
    // (mode, task) -> accuracy samples across seeds
    let mut few: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut normal: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut overall: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let key = (r.mode.clone(), r.task.clone());
        let (Some(f), Some(n), Some(o)) =
            (r.few_shot_accuracy, r.normal_accuracy, r.overall_accuracy)
        else {
            return Err(CliError::Runtime(format!(
                "run (mode {}, task {}, seed {}) has no accuracy metrics; cannot aggregate",
                r.mode, r.task, r.seed
            )));
        };
        few.entry(key.clone()).or_default().push(f);
        normal.entry(key.clone()).or_default().push(n);
        overall.entry(key).or_default().push(o);
    }
    let mut modes: Vec<String> = reports.iter().map(|r| r.mode.clone()).collect();
    modes.sort_by_key(|m| (mode_rank(m), m.clone()));
    modes.dedup();

    let mut rows = Vec::new();
    for mode in modes {
        let mut cells = Vec::new();
        let mut task_few = Vec::new();
        let mut task_normal = Vec::new();
        let mut task_overall = Vec::new();
        for task in &tasks {
            let key = (mode.clone(), task.clone());
            match few.get(&key) {
                Some(values) => {
                    let s = stats(values);
                    task_few.push(s.mean);
                    task_normal.push(stats(&normal[&key]).mean);
                    task_overall.push(stats(&overall[&key]).mean);
                    cells.push(Some(s));
                }
                None => cells.push(None),
            }
        }
        let avg_few = cross_task_average(&task_few).map_err(|e| CliError::Runtime(e.to_string()))?;
        let avg_normal =
            cross_task_average(&task_normal).map_err(|e| CliError::Runtime(e.to_string()))?;
        let avg_overall =
            cross_task_average(&task_overall).map_err(|e| CliError::Runtime(e.to_string()))?;
        rows.push(RowData { mode, cells, avg_few, avg_normal, avg_overall });
    }
    Ok(ReportTable { tasks, rows })
}

impl ReportTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Method |");
        for t in &self.tasks {
            out.push_str(&format!(" {t} |"));
        }
        out.push_str(" Avg_l | Avg_n | Avg |\n|---|");
        for _ in &self.tasks {
            out.push_str("---|");
        }
        out.push_str("---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.mode));
            for cell in &row.cells {
                match cell {
                    Some(s) => out.push_str(&format!(" {} |", s.render())),
                    None => out.push_str(" - |"),
                }
            }
            out.push_str(&format!(
                " {:.1} | {:.1} | {:.1} |\n",
                row.avg_few, row.avg_normal, row.avg_overall
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("method");
        for t in &self.tasks {
            out.push_str(&format!(",{t}"));
        }
        out.push_str(",avg_l,avg_n,avg\n");
        for row in &self.rows {
            out.push_str(&row.mode);
            for cell in &row.cells {
                match cell {
                    Some(s) => out.push_str(&format!(",{}", s.render())),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(
                ",{:.1},{:.1},{:.1}\n",
                row.avg_few, row.avg_normal, row.avg_overall
            ));
        }
        out
    }
}
