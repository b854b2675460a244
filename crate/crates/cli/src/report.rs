//! Summaries recomputed from the raw result table alone.

use std::fmt::Write as _;

use serde::Serialize;
use tsap_core::analysis::{mean_stderr, paired_t_test, TTestReport};
use tsap_core::pipeline::{difference_from_optimal, ModelSpec, ResultTable};

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    /// 1 for the best mean in its column, 2 for the runner-up.
    pub rank: Option<u8>,
    /// Paired t-test against the matched fixed-length model: higher and p < 0.05.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub model: String,
    /// Aligned with `TaskReport::lengths_s`; `None` where the model was not evaluated.
    pub cells: Vec<Option<Cell>>,
}

/// TSAP minus the matched fixed-length model at one interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalTest {
    pub eval_length_s: f64,
    pub model: String,
    pub baseline: String,
    pub test: TTestReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: String,
    pub lengths_s: Vec<f64>,
    pub rows: Vec<Row>,
    pub tests: Vec<IntervalTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub tasks: Vec<TaskReport>,
}

/// Models in display order: non-pretrained, fixed lengths ascending, TSAP,
/// then anything unrecognized by name.
pub fn ordered_models(table: &ResultTable) -> Vec<String> {
    let mut known: Vec<ModelSpec> = Vec::new();
    let mut other = Vec::new();
    for m in table.models() {
        match m.parse::<ModelSpec>() {
            Ok(s) => known.push(s),
            Err(_) => other.push(m),
        }
    }
    known.sort_by(|a, b| a.partial_cmp(b).expect("lengths are finite"));
    known.iter().map(ToString::to_string).chain(other).collect()
}

fn distinct_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn matched_test(table: &ResultTable, model: &str, task: &str, l: f64) -> Option<TTestReport> {
    let baseline = ModelSpec::Fixed(l).to_string();
    if model == baseline {
        return None;
    }
    let d = difference_from_optimal(table, model, task, l).ok()?;
    paired_t_test(&d).ok()
}

pub fn build_report(table: &ResultTable) -> Report {
    let models = ordered_models(table);
    let tasks: Vec<String> = {
        let mut t: Vec<String> = table.entries.keys().map(|k| k.task.clone()).collect();
        t.sort();
        t.dedup();
        t
    };
    let mut out = Vec::new();
    for task in tasks {
        let lengths = distinct_sorted(
            table.entries.keys().filter(|k| k.task == task).map(|k| k.eval_length_s).collect(),
        );
        let mut rows: Vec<Row> = models
            .iter()
            .map(|m| Row {
                model: m.clone(),
                cells: lengths
                    .iter()
                    .map(|&l| {
                        table.summary(m, &task, l).ok().map(|s| Cell {
                            mean: s.mean,
                            stderr: s.stderr,
                            n: s.n,
                            rank: None,
                            significant: matched_test(table, m, &task, l)
                                .is_some_and(|t| t.mean_diff > 0.0 && t.p < SIGNIFICANCE),
                        })
                    })
                    .collect(),
            })
            .collect();
        for j in 0..lengths.len() {
            // stable sort keeps display order among equal means
            let mut order: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].cells[j].is_some()).collect();
            order.sort_by(|&a, &b| {
                let (x, y) = (rows[a].cells[j].as_ref().unwrap(), rows[b].cells[j].as_ref().unwrap());
                y.mean.total_cmp(&x.mean)
            });
            for (r, &i) in order.iter().take(2).enumerate() {
                rows[i].cells[j].as_mut().unwrap().rank = Some(r as u8 + 1);
            }
        }
        let tsap = ModelSpec::Tsap.to_string();
        let tests = lengths
            .iter()
            .filter_map(|&l| {
                matched_test(table, &tsap, &task, l).map(|test| IntervalTest {
                    eval_length_s: l,
                    model: tsap.clone(),
                    baseline: ModelSpec::Fixed(l).to_string(),
                    test,
                })
            })
            .collect();
        out.push(TaskReport {
            task,
            lengths_s: lengths,
            rows,
            tests,
        });
    }
    Report { tasks: out }
}

fn format_cell(c: &Option<Cell>) -> String {
    let Some(c) = c else { return "-".into() };
    let mut s = format!("{:.3}±{:.3}", c.mean, c.stderr);
    match c.rank {
        Some(1) => s.push_str(" [1]"),
        Some(2) => s.push_str(" [2]"),
        _ => {}
    }
    if c.significant {
        s.push('*');
    }
    s
}

pub fn render_text(report: &Report) -> String {
    let mut s = String::new();
    for t in &report.tasks {
        let _ = writeln!(s, "task: {}  (test ROC-AUC, mean ± stderr over subjects x seeds)", t.task);
        let _ = write!(s, "{:<16}", "model");
        for l in &t.lengths_s {
            let _ = write!(s, "{:>19}", format!("{l}s"));
        }
        s.push('\n');
        for r in &t.rows {
            let _ = write!(s, "{:<16}", r.model);
            for c in &r.cells {
                let _ = write!(s, "{:>19}", format_cell(c));
            }
            s.push('\n');
        }
        s.push_str("[1] best, [2] second best per column; * higher than the matched fixed-length model, paired t-test p < 0.05\n\n");
        if !t.tests.is_empty() {
            let _ = writeln!(s, "paired t-test, tsap minus matched fixed-length model");
            let _ = writeln!(
                s,
                "{:<10}{:>12}{:>12}{:>10}{:>6}{:>10}",
                "interval", "mean diff", "std err", "t", "df", "p"
            );
            for it in &t.tests {
                let r = &it.test;
                let _ = writeln!(
                    s,
                    "{:<10}{:>12.4}{:>12.4}{:>10.3}{:>6}{:>10.4}",
                    format!("{}s", it.eval_length_s),
                    r.mean_diff,
                    r.std_err,
                    r.t,
                    r.n - 1,
                    r.p
                );
            }
            s.push('\n');
        }
    }
    s
}

/// Per-cell difference from the matched fixed-length model, averaged over
/// `(subject, seed)` pairs.
pub fn difference_tsv(table: &ResultTable) -> String {
    let mut s = String::from("model\ttask\teval_length_s\tmean_diff\tstderr\tn\n");
    for m in ordered_models(table) {
        let mut cells: Vec<(String, f64)> = table
            .entries
            .keys()
            .filter(|k| k.model == m)
            .map(|k| (k.task.clone(), k.eval_length_s))
            .collect();
        cells.dedup();
        for (task, l) in cells {
            if let Ok(d) = difference_from_optimal(table, &m, &task, l) {
                let (mean, se) = mean_stderr(&d);
                let _ = writeln!(s, "{m}\t{task}\t{l}\t{mean}\t{se}\t{}", d.len());
            }
        }
    }
    s
}
