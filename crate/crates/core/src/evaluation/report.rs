use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::GainScheme;
use crate::datasets::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdcgRow {
    pub model: String,
    pub task: Task,
    /// `all`, a platform name, or `region<N>`.
    pub slice: String,
    pub mean_ndcg: f64,
    /// Percent change against the reference; absent when the reference
    /// scores 0 or lacks the task.
    pub delta_pct: Option<f64>,
    pub groups: usize,
    /// Groups with no positive label for the task.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdcgReport {
    pub depth: usize,
    pub gains: GainScheme,
    pub reference: String,
    pub rows: Vec<NdcgRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomesticRow {
    pub model: String,
    pub slice: String,
    pub share: f64,
    /// Percentage-point change against the reference.
    pub delta_pp: Option<f64>,
    /// Top-N positions pooled into `share`.
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomesticShareReport {
    pub top_n: usize,
    pub reference: String,
    pub rows: Vec<DomesticRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |d| format!("{d:.6}"))
}

fn signed(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "n/a".into(), |d| format!("{d:+.3}{unit}"))
}

/// Left-aligned first column, right-aligned rest.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn models_in_order<'a>(names: impl Iterator<Item = &'a String>) -> Vec<&'a String> {
    let mut out: Vec<&String> = Vec::new();
    for n in names {
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

impl NdcgReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,task,slice,mean_ndcg,delta_pct,groups,excluded\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model,
                r.task,
                r.slice,
                // no scored groups: the mean is undefined
                if r.groups == 0 { String::new() } else { format!("{:.6}", r.mean_ndcg) },
                opt(r.delta_pct),
                r.groups,
                r.excluded
            );
        }
        s
    }

    pub fn row(&self, model: &str, task: Task, slice: &str) -> Option<&NdcgRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.task == task && r.slice == slice)
    }

    fn grid(&self, slices: &[String]) -> String {
        let models = models_in_order(self.rows.iter().map(|r| &r.model));
        let tasks: Vec<Task> = Task::FUNNEL
            .into_iter()
            .filter(|t| self.rows.iter().any(|r| r.task == *t))
            .collect();
        let mut header = vec!["model".to_string()];
        for t in &tasks {
            for s in slices {
                header.push(format!("{t}/{s}"));
            }
        }
        let mut rows = vec![header];
        for m in models {
            let mut row = vec![m.clone()];
            for &t in &tasks {
                for s in slices {
                    row.push(match self.row(m, t, s) {
                        Some(r) if r.groups > 0 => format!("{:.4} ({})", r.mean_ndcg, signed(r.delta_pct, "%")),
                        _ => "-".into(),
                    });
                }
            }
            rows.push(row);
        }
        align(&rows)
    }

    /// Models by task x platform, then models by task x region.
    pub fn to_table(&self) -> String {
        let regions: Vec<String> = {
            let mut r: Vec<String> = Vec::new();
            for row in &self.rows {
                if row.slice.starts_with("region") && !r.contains(&row.slice) {
                    r.push(row.slice.clone());
                }
            }
            r
        };
        let mut out = self.grid(&["all".into(), "web".into(), "app".into()]);
        if !regions.is_empty() {
            out.push('\n');
            out.push_str(&self.grid(&regions));
        }
        out.push('\n');
        out.push_str(&self.footer());
        out
    }

    pub fn footer(&self) -> String {
        let gains = match self.gains {
            GainScheme::Binary => "binary per-task labels",
            GainScheme::Graded => "graded 0/1/2/4 funnel ladder",
        };
        format!(
            "# cells: mean NDCG@{} (change vs {} in %)\n\
             # gains: {gains}; truncation depth {}\n\
             # groups without a positive label for a task are excluded from its mean (see CSV 'excluded')\n\
             # evaluation groups come from a query-hash holdout, not a time-based split\n",
            self.depth, self.reference, self.depth
        )
    }
}

impl DomesticShareReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,slice,share,delta_pp,slots\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{},{}", r.model, r.slice, r.share, opt(r.delta_pp), r.slots);
        }
        s
    }

    pub fn row(&self, model: &str, slice: &str) -> Option<&DomesticRow> {
        self.rows.iter().find(|r| r.model == model && r.slice == slice)
    }

    pub fn to_table(&self) -> String {
        let models = models_in_order(self.rows.iter().map(|r| &r.model));
        let slices = models_in_order(self.rows.iter().map(|r| &r.slice));
        let mut rows = vec![std::iter::once("model".to_string())
            .chain(slices.iter().map(|s| s.to_string()))
            .collect::<Vec<_>>()];
        for m in models {
            let mut row = vec![m.clone()];
            for s in &slices {
                row.push(match self.row(m, s) {
                    Some(r) => format!("{:.3} ({})", r.share, signed(r.delta_pp, "pp")),
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        let mut out = align(&rows);
        let _ = write!(
            out,
            "\n# cells: share of top-{} purchase-ranked results from the buyer's region (change vs {} in percentage points)\n",
            self.top_n, self.reference
        );
        out
    }
}
