//! Resumable stages over a run directory.
//!
//! Each stage records a digest of its inputs (the config sections it reads
//! plus the checksums of upstream artifacts) and the checksums of what it
//! wrote. A stage is skipped when its input digest is unchanged and all of
//! its artifacts are still on disk with the recorded checksums.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use tsap_core::datagen::{generate_corpus, read_corpus, write_corpus, Recording, MANIFEST_NAME};
use tsap_core::encoder::TemporalEncoder;
use tsap_core::numerics::{load_checkpoint, save_checkpoint};
use tsap_core::pipeline::{
    cross_eval, embedding_analysis, finetune, is_pretrain_session, pretrain, pretrain_tables, DownstreamSet,
    ExperimentConfig, ModelSpec, ResultTable,
};
use tsap_core::popt::PoptWeights;

use crate::config::to_toml;
use crate::error::StageContext;
use crate::manifest::{sha256_bytes, sha256_file, Artifact, RunManifest, StageRecord};
use crate::report::{build_report, difference_tsv, render_text};
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.tsv";

pub fn pretrain_stage(spec: ModelSpec) -> String {
    format!("pretrain/{spec}")
}

pub fn cross_eval_stage(spec: ModelSpec) -> String {
    format!("cross-eval/{spec}")
}

pub fn checkpoint_path(spec: ModelSpec) -> String {
    format!("checkpoints/{spec}.ckpt")
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub manifest: RunManifest,
    /// Stage names run (not skipped) by this process, in order.
    pub executed: Vec<String>,
    pub quiet: bool,
    corpus: OnceCell<Vec<Recording>>,
}

impl Run {
    /// Opens `dir`, snapshotting `config` into it when given and reading the
    /// existing snapshot otherwise.
    pub fn open(dir: &Path, config: Option<ExperimentConfig>) -> Result<Self> {
        let cfg = match config {
            Some(c) => {
                fs::create_dir_all(dir).map_err(|e| {
                    CliError::Validation(format!("cannot create run directory {}: {e}", dir.display()))
                })?;
                fs::write(dir.join(CONFIG_FILE), to_toml(&c)).map_err(|e| {
                    CliError::Validation(format!("run directory {} is not writable: {e}", dir.display()))
                })?;
                c
            }
            None => {
                let path = dir.join(CONFIG_FILE);
                if !path.exists() {
                    return Err(CliError::Validation(format!(
                        "{} has no {CONFIG_FILE}; pass --config",
                        dir.display()
                    )));
                }
                crate::config::load_config(&path)?
            }
        };
        let mut manifest = RunManifest::load(dir)?.unwrap_or_else(|| RunManifest::new(&cfg));
        manifest.config = cfg.clone();
        manifest.master_seed = cfg.seed;
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.save(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            manifest,
            executed: Vec::new(),
            quiet: false,
            corpus: OnceCell::new(),
        })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>, stage: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).stage(stage)?;
        }
        fs::write(&path, bytes).stage(stage)?;
        Ok(PathBuf::from(rel))
    }

    /// Runs `body` unless the stage is up to date. `config` is the slice of
    /// the config the stage depends on; `deps` are upstream stage names.
    /// Returns whether the body ran.
    fn stage<F>(&mut self, name: &str, config: serde_json::Value, deps: &[String], body: F) -> Result<bool>
    where
        F: FnOnce(&Self) -> Result<Vec<PathBuf>>,
    {
        let mut digest_input = format!("{name}\n{config}\n");
        for d in deps {
            let rec = self.manifest.stages.get(d).ok_or_else(|| CliError::Runtime {
                stage: name.to_string(),
                message: format!("upstream stage {d} has not run"),
            })?;
            for a in &rec.artifacts {
                digest_input.push_str(&format!("{} {}\n", a.path, a.sha256));
            }
        }
        let inputs_sha256 = sha256_bytes(digest_input.as_bytes());
        if let Some(rec) = self.manifest.stages.get(name) {
            if rec.inputs_sha256 == inputs_sha256 && rec.intact(&self.dir) {
                self.note(format!("{name}: up to date"));
                return Ok(false);
            }
        }
        self.note(format!("{name}: running"));
        let t = Instant::now();
        let outputs = body(self)?;
        let wall_clock_s = t.elapsed().as_secs_f64();
        let artifacts = outputs
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&self.dir.join(p)).stage(name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                inputs_sha256,
                artifacts,
                wall_clock_s,
            },
        );
        self.manifest.save(&self.dir)?;
        self.executed.push(name.to_string());
        self.note(format!("{name}: done in {wall_clock_s:.1}s"));
        Ok(true)
    }

    pub fn corpus(&self) -> Result<&[Recording]> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let c = read_corpus(&self.dir.join("corpus")).stage("load corpus")?;
        Ok(self.corpus.get_or_init(|| c))
    }

    pub fn encoder(&self) -> Result<TemporalEncoder> {
        TemporalEncoder::new(self.cfg.encoder.clone()).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn generate(&mut self) -> Result<()> {
        let c = &self.cfg;
        let config = json!({ "seed": c.seed, "corpus": c.corpus });
        let ran = self.stage("generate", config, &[], |run| {
            let corpus = generate_corpus(&run.cfg.corpus, run.cfg.seed).stage("generate")?;
            let dir = run.dir.join("corpus");
            if dir.exists() {
                fs::remove_dir_all(&dir).stage("generate")?;
            }
            let mut files: Vec<PathBuf> = write_corpus(&dir, &corpus)
                .stage("generate")?
                .iter()
                .map(|p| Path::new("corpus").join(p.file_name().expect("session file")))
                .collect();
            files.push(Path::new("corpus").join(MANIFEST_NAME));
            Ok(files)
        })?;
        if ran {
            // a regenerated corpus invalidates any cached copy
            self.corpus = OnceCell::new();
        }
        Ok(())
    }

    fn pretrain_config(&self) -> serde_json::Value {
        let c = &self.cfg;
        json!({ "seed": c.seed, "encoder": c.encoder, "model": c.model, "pretrain": c.pretrain })
    }

    pub fn pretrain(&mut self, spec: ModelSpec) -> Result<()> {
        if spec == ModelSpec::NonPretrained {
            return Ok(());
        }
        self.generate()?;
        let name = pretrain_stage(spec);
        let stage_name = name.clone();
        self.stage(&name, self.pretrain_config(), &["generate".to_string()], move |run| {
            let s = stage_name.as_str();
            let cfg = &run.cfg;
            let enc = run.encoder()?;
            let lengths = cfg.pretrain_lengths(spec);
            let tables = pretrain_tables(cfg, run.corpus()?, &enc, &lengths).stage(s)?;
            let out = pretrain(cfg, &tables, spec).stage(s)?;
            let mut meta = out.weights.metadata(&out.lengths_s);
            meta.insert("selected_step".into(), out.best.step.to_string());
            meta.insert("validation_loss".into(), format!("{:e}", out.best.validation_metric));
            let ckpt = checkpoint_path(spec);
            fs::create_dir_all(run.dir.join("checkpoints")).stage(s)?;
            save_checkpoint(&run.dir.join(&ckpt), &out.weights.params, &meta).stage(s)?;
            let log: String = out.log.iter().map(|r| format!("{r}\n")).collect();
            let log_path = run.write(&format!("logs/pretrain-{spec}.log"), log, s)?;
            Ok(vec![PathBuf::from(ckpt), log_path])
        })?;
        Ok(())
    }

    pub fn pretrain_all(&mut self) -> Result<()> {
        for spec in self.cfg.models() {
            self.pretrain(spec)?;
        }
        Ok(())
    }

    /// Selected weights of a pretrained model; `None` for the baseline.
    pub fn weights(&self, spec: ModelSpec) -> Result<Option<PoptWeights>> {
        if spec == ModelSpec::NonPretrained {
            return Ok(None);
        }
        let stage = format!("load {spec}");
        let ck = load_checkpoint(&self.dir.join(checkpoint_path(spec))).stage(&stage)?;
        let (w, lengths) = PoptWeights::from_checkpoint(ck.params, &ck.metadata, Some(&self.cfg.model)).stage(&stage)?;
        if lengths != self.cfg.pretrain_lengths(spec) {
            return Err(CliError::runtime(
                &stage,
                format!("checkpoint was pretrained on {lengths:?}, config expects {:?}", self.cfg.pretrain_lengths(spec)),
            ));
        }
        Ok(Some(w))
    }

    fn finetune_config(&self) -> serde_json::Value {
        let c = &self.cfg;
        json!({ "seed": c.seed, "encoder": c.encoder, "model": c.model,
                "pretrain_sessions": c.pretrain.pretrain_sessions, "finetune": c.finetune })
    }

    fn upstream(&self, spec: ModelSpec) -> Vec<String> {
        let mut deps = vec!["generate".to_string()];
        if spec != ModelSpec::NonPretrained {
            deps.push(pretrain_stage(spec));
        }
        deps
    }

    /// Finetunes one model over the whole grid into `results/<model>.tsv`.
    pub fn cross_eval(&mut self, spec: ModelSpec) -> Result<()> {
        self.pretrain(spec)?;
        let name = cross_eval_stage(spec);
        let stage_name = name.clone();
        let deps = self.upstream(spec);
        self.stage(&name, self.finetune_config(), &deps, move |run| {
            let s = stage_name.as_str();
            let enc = run.encoder()?;
            let models = [(spec, run.weights(spec)?)];
            let mut log = String::new();
            let quiet = run.quiet;
            let table = cross_eval(&run.cfg, run.corpus()?, &enc, &models, &mut |k, auc| {
                let line = format!("{}\t{}\t{}\t{}\t{}\t{auc}", k.model, k.task, k.eval_length_s, k.subject, k.seed);
                if !quiet {
                    eprintln!("  {line}");
                }
                log.push_str(&line);
                log.push('\n');
            })
            .stage(s)?;
            let log_path = run.write(&format!("logs/cross-eval-{spec}.log"), log, s)?;
            let tsv = run.write(&format!("results/{spec}.tsv"), table.to_tsv(), s)?;
            Ok(vec![tsv, log_path])
        })?;
        Ok(())
    }

    /// Every model through cross-evaluation, then the merged table.
    pub fn cross_eval_all(&mut self) -> Result<ResultTable> {
        let models = self.cfg.models();
        for &spec in &models {
            self.cross_eval(spec)?;
        }
        let deps: Vec<String> = models.iter().map(|&m| cross_eval_stage(m)).collect();
        self.stage("results", self.finetune_config(), &deps, |run| {
            let mut merged = ResultTable::default();
            for &m in &models {
                let text = fs::read_to_string(run.dir.join(format!("results/{m}.tsv"))).stage("results")?;
                let part = ResultTable::from_tsv(&text).stage("results")?;
                merged.entries.extend(part.entries);
            }
            merged.check_complete(&run.cfg).stage("results")?;
            let a = run.write(RESULTS_FILE, merged.to_tsv(), "results")?;
            let b = run.write("differences.tsv", difference_tsv(&merged), "results")?;
            Ok(vec![a, b])
        })?;
        self.results()
    }

    /// The merged table, checked against the configured grid.
    pub fn results(&self) -> Result<ResultTable> {
        let path = self.dir.join(RESULTS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::runtime("report", format!("incomplete run directory: {}: {e}", path.display()))
        })?;
        let table = ResultTable::from_tsv(&text).stage("report")?;
        table
            .check_complete(&self.cfg)
            .map_err(|e| CliError::runtime("report", format!("incomplete run directory: {e}")))?;
        Ok(table)
    }

    /// One finetuning cell, outside the stage bookkeeping.
    pub fn finetune_cell(&mut self, spec: ModelSpec, task: &str, length_s: f64, subject: u32, seed: u64) -> Result<f64> {
        if !self.cfg.finetune.tasks.iter().any(|t| t == task) {
            return Err(CliError::Validation(format!("task {task:?} is not configured")));
        }
        if !self.cfg.models().contains(&spec) {
            return Err(CliError::Validation(format!("model {spec} is not configured")));
        }
        if subject as usize >= self.cfg.corpus.n_subjects {
            return Err(CliError::Validation(format!("no subject {subject}")));
        }
        self.pretrain(spec)?;
        let enc = self.encoder()?;
        let rec = self
            .corpus()?
            .iter()
            .find(|r| r.subject_id == subject && !is_pretrain_session(&self.cfg, r))
            .ok_or_else(|| CliError::runtime("finetune", format!("subject {subject} has no downstream session")))?;
        let set = DownstreamSet::build(&self.cfg, rec, &enc, task, length_s).stage("finetune")?;
        let w = self.weights(spec)?;
        let out = finetune(&self.cfg, w.as_ref(), &set, seed, &spec.to_string()).stage("finetune")?;
        Ok(out.test_auc)
    }

    pub fn analyze(&mut self) -> Result<()> {
        let reference = ModelSpec::Fixed(self.cfg.analysis.reference_length_s);
        let specs = [reference, ModelSpec::Tsap];
        for s in specs {
            self.pretrain(s)?;
        }
        let c = &self.cfg;
        let config = json!({ "seed": c.seed, "encoder": c.encoder, "pretrain_sessions": c.pretrain.pretrain_sessions,
                             "analysis": c.analysis });
        let deps: Vec<String> = std::iter::once("generate".to_string())
            .chain(specs.iter().map(|&s| pretrain_stage(s)))
            .collect();
        self.stage("analyze", config, &deps, |run| {
            let enc = run.encoder()?;
            let weights: Vec<(String, PoptWeights)> = specs
                .iter()
                .map(|&s| Ok((s.to_string(), run.weights(s)?.expect("pretrained"))))
                .collect::<Result<_>>()?;
            let named: Vec<(String, &PoptWeights)> = weights.iter().map(|(n, w)| (n.clone(), w)).collect();
            let an = embedding_analysis(&run.cfg, run.corpus()?, &enc, &named).stage("analyze")?;
            let mut files = Vec::new();
            let mut summary = String::from("embedding\tpurity\texplained_variance_1\texplained_variance_2\tempty_clusters\n");
            for rep in std::iter::once(&an.temporal).chain(&an.cls) {
                let empty: Vec<String> = rep.confusion.empty_clusters.iter().map(ToString::to_string).collect();
                summary.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    rep.name,
                    rep.purity,
                    rep.explained_variance[0],
                    rep.explained_variance[1],
                    empty.join(",")
                ));
                files.push(run.write(&format!("analysis/{}.confusion.tsv", rep.name), rep.confusion.to_tsv(), "analyze")?);
                files.push(run.write(&format!("analysis/{}.points.tsv", rep.name), rep.points_tsv(), "analyze")?);
            }
            files.insert(0, run.write("analysis/summary.tsv", summary, "analyze")?);
            Ok(files)
        })?;
        Ok(())
    }

    /// Writes `report.txt` and `report.json` from the merged table and
    /// returns the text.
    pub fn report(&mut self) -> Result<String> {
        let table = self.results()?;
        let report = build_report(&table);
        let text = render_text(&report);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        // keyed on the table itself so hand-assembled result files report too
        let digest = json!({ "results": sha256_bytes(table.to_tsv().as_bytes()) });
        self.stage("report", digest, &[], |run| {
            Ok(vec![
                run.write("report.txt", &text, "report")?,
                run.write("report.json", &json, "report")?,
            ])
        })?;
        Ok(text)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<String> {
        self.generate()?;
        self.pretrain_all()?;
        self.cross_eval_all()?;
        self.analyze()?;
        self.report()
    }

    /// Wall-clock seconds per stage, as recorded.
    pub fn timings(&self) -> BTreeMap<String, f64> {
        self.manifest.stages.iter().map(|(k, v)| (k.clone(), v.wall_clock_s)).collect()
    }
}
