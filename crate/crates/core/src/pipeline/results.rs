use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::data::{is_pretrain_session, DownstreamSet};
use super::finetune::finetune;
use super::{ExperimentConfig, ModelSpec, PipelineError, Result};
use crate::analysis::mean_stderr;
use crate::datagen::Recording;
use crate::encoder::TemporalEncoder;
use crate::popt::PoptWeights;

pub const RESULTS_HEADER: &str = "model\ttask\teval_length_s\tsubject\tseed\ttest_auc";

#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub model: String,
    pub task: String,
    pub eval_length_s: f64,
    pub subject: u32,
    pub seed: u64,
}

impl Eq for CellKey {}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.model
            .cmp(&other.model)
            .then_with(|| self.task.cmp(&other.task))
            .then_with(|| self.eval_length_s.total_cmp(&other.eval_length_s))
            .then_with(|| self.subject.cmp(&other.subject))
            .then_with(|| self.seed.cmp(&other.seed))
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Test ROC-AUC per `(model, task, eval length, subject, seed)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub entries: BTreeMap<CellKey, f64>,
}

impl ResultTable {
    pub fn insert(&mut self, key: CellKey, auc: f64) {
        self.entries.insert(key, auc);
    }

    pub fn get(&self, model: &str, task: &str, eval_length_s: f64, subject: u32, seed: u64) -> Option<f64> {
        self.entries
            .get(&CellKey {
                model: model.to_string(),
                task: task.to_string(),
                eval_length_s,
                subject,
                seed,
            })
            .copied()
    }

    /// Values of one `(model, task, length)` ordered by `(subject, seed)`.
    pub fn cell_values(&self, model: &str, task: &str, eval_length_s: f64) -> Vec<((u32, u64), f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.model == model && k.task == task && k.eval_length_s == eval_length_s)
            .map(|(k, &v)| ((k.subject, k.seed), v))
            .collect()
    }

    /// Mean and standard error over subjects x seeds.
    pub fn summary(&self, model: &str, task: &str, eval_length_s: f64) -> Result<CellSummary> {
        let v: Vec<f64> = self
            .cell_values(model, task, eval_length_s)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        if v.is_empty() {
            return Err(PipelineError::MissingCell(format!("{model}/{task}/{eval_length_s}s")));
        }
        let (mean, stderr) = mean_stderr(&v);
        Ok(CellSummary {
            mean,
            stderr,
            n: v.len(),
        })
    }

    /// Paired differences `a - b` over the `(subject, seed)` pairs of one cell.
    pub fn paired_diffs(&self, a: &str, b: &str, task: &str, eval_length_s: f64) -> Result<Vec<f64>> {
        let va = self.cell_values(a, task, eval_length_s);
        let vb: BTreeMap<_, _> = self.cell_values(b, task, eval_length_s).into_iter().collect();
        if va.is_empty() || va.len() != vb.len() {
            return Err(PipelineError::MissingCell(format!("{a} vs {b} at {task}/{eval_length_s}s")));
        }
        va.iter()
            .map(|(k, x)| {
                vb.get(k)
                    .map(|y| x - y)
                    .ok_or_else(|| PipelineError::MissingCell(format!("{b} {k:?} at {eval_length_s}s")))
            })
            .collect()
    }

    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.entries.keys().map(|k| k.model.clone()).collect();
        m.dedup();
        m
    }

    /// Errors on the first missing cell of the declared grid.
    pub fn check_complete(&self, cfg: &ExperimentConfig) -> Result<()> {
        for model in cfg.models() {
            for task in &cfg.finetune.tasks {
                for &l in &cfg.finetune.eval_lengths_s {
                    for subject in 0..cfg.corpus.n_subjects as u32 {
                        for &seed in &cfg.finetune.seeds {
                            if self.get(&model.to_string(), task, l, subject, seed).is_none() {
                                return Err(PipelineError::MissingCell(format!(
                                    "{model}/{task}/{l}s/subject {subject}/seed {seed}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for (k, v) in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                k.model, k.task, k.eval_length_s, k.subject, k.seed, v
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RESULTS_HEADER) {
            return Err(PipelineError::Format("missing or wrong header".into()));
        }
        let mut t = Self::default();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || PipelineError::Format(format!("line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let key = CellKey {
                model: f[0].to_string(),
                task: f[1].to_string(),
                eval_length_s: f[2].parse().map_err(|_| bad())?,
                subject: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
            };
            let auc: f64 = f[5].parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&auc) {
                return Err(bad());
            }
            t.insert(key, auc);
        }
        Ok(t)
    }
}

/// Each `(subject, seed)` difference of `model` minus the matched fixed-length
/// model at `eval_length_s`.
pub fn difference_from_optimal(table: &ResultTable, model: &str, task: &str, eval_length_s: f64) -> Result<Vec<f64>> {
    table.paired_diffs(model, &ModelSpec::Fixed(eval_length_s).to_string(), task, eval_length_s)
}

/// Finetunes every model on every `(task, subject, eval length, seed)`.
///
/// `models` pairs each spec with its selected pretrained weights (`None` for
/// the non-pretrained baseline). `on_cell` sees every finished cell.
pub fn cross_eval(
    cfg: &ExperimentConfig,
    corpus: &[Recording],
    encoder: &TemporalEncoder,
    models: &[(ModelSpec, Option<PoptWeights>)],
    on_cell: &mut dyn FnMut(&CellKey, f64),
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for task in &cfg.finetune.tasks {
        for subject in 0..cfg.corpus.n_subjects as u32 {
            let rec = corpus
                .iter()
                .find(|r| r.subject_id == subject && !is_pretrain_session(cfg, r))
                .ok_or_else(|| PipelineError::MissingCell(format!("downstream session of subject {subject}")))?;
            for &l in &cfg.finetune.eval_lengths_s {
                let set = DownstreamSet::build(cfg, rec, encoder, task, l)?;
                for (spec, weights) in models {
                    let name = spec.to_string();
                    for &seed in &cfg.finetune.seeds {
                        let out = finetune(cfg, weights.as_ref(), &set, seed, &name)?;
                        let key = CellKey {
                            model: name.clone(),
                            task: task.clone(),
                            eval_length_s: l,
                            subject,
                            seed,
                        };
                        on_cell(&key, out.test_auc);
                        table.insert(key, out.test_auc);
                    }
                }
            }
        }
    }
    Ok(table)
}
