use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tsap_cli::config::{parse_config, preset, to_toml, PRESETS};
use tsap_cli::report::build_report;
use tsap_cli::run::{Run, CONFIG_FILE, RESULTS_FILE};
use tsap_core::analysis::mean_stderr;
use tsap_core::pipeline::{CellKey, ExperimentConfig, ResultTable};

fn tsap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn quiet_run(dir: &Path, cfg: ExperimentConfig) -> Run {
    let mut r = Run::open(dir, Some(cfg)).unwrap();
    r.quiet = true;
    r
}

#[test]
fn printed_configs_parse_back_unchanged() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg, "{name}");
    }
    let out = tsap(&["print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(parse_config(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn bad_configs_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "seed = 1\n[corpus]\nn_subject = 3\n", "n_subject"),
        ("zero.toml", "[corpus]\nn_subjects = 0\n", "n_subjects"),
        ("type.toml", "[pretrain]\nsteps = \"many\"\n", "steps"),
        ("lengths.toml", "[finetune]\neval_lengths_s = [1.0, 7.0]\n", "eval_lengths_s"),
    ];
    for (file, body, field) in cases {
        let path = dir.path().join(file);
        fs::write(&path, body).unwrap();
        let run = dir.path().join("run");
        let out = tsap(&["generate", "--run", run.to_str().unwrap(), "--config", path.to_str().unwrap()]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(1), "{file}: {err}");
        assert!(err.contains(field), "{file}: {err}");
    }
    // bad arguments are validation errors too
    assert_eq!(tsap(&["pretrain"]).status.code(), Some(1));
    assert_eq!(tsap(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, to_toml(&ExperimentConfig::smoke())).unwrap();
    let run = blocker.join("run");
    let out = tsap(&["generate", "--run", run.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_is_reproducible_and_counts_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    fs::write(&cfg_path, to_toml(&ExperimentConfig::default())).unwrap();
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = tsap(&[
            "-q",
            "generate",
            "--run",
            run.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        listings.push(String::from_utf8(out.stdout).unwrap());
    }
    assert_eq!(listings[0], listings[1]);
    let c = ExperimentConfig::default();
    let sessions = listings[0].lines().filter(|l| l.ends_with(".bin")).count();
    assert_eq!(sessions, c.corpus.n_subjects * c.corpus.sessions_per_subject);
    let snap = parse_config(&fs::read_to_string(dir.path().join("a").join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(snap.seed, 11);

    // another seed gives another corpus
    let run = dir.path().join("c");
    let out = tsap(&["-q", "generate", "--run", run.to_str().unwrap(), "--config", cfg_path.to_str().unwrap()]);
    assert_ne!(String::from_utf8(out.stdout).unwrap(), listings[0]);
}

#[test]
fn smoke_run_end_to_end_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke();

    // interrupted after pretraining
    let first = dir.path().join("first");
    let t = Instant::now();
    let mut run = quiet_run(&first, cfg.clone());
    run.pretrain_all().unwrap();
    let pretrained = run.executed.clone();
    assert!(pretrained.iter().any(|s| s == "pretrain/tsap"));
    let mut run = quiet_run(&first, cfg.clone());
    let text = run.run_all().unwrap();
    assert!(t.elapsed().as_secs() < 600, "smoke run took {:?}", t.elapsed());
    assert!(
        run.executed.iter().all(|s| !pretrained.contains(s)),
        "completed stages re-ran: {:?}",
        run.executed
    );
    assert!(run.executed.iter().any(|s| s == "report"));

    // one row per configured model
    let report = build_report(&run.results().unwrap());
    let rows: Vec<&str> = report.tasks[0].rows.iter().map(|r| r.model.as_str()).collect();
    let want: Vec<String> = cfg.models().iter().map(ToString::to_string).collect();
    assert_eq!(rows, want);
    assert!(text.contains("paired t-test"));
    for a in run.manifest.inventory() {
        assert!(first.join(&a.path).exists(), "{}", a.path);
    }
    assert!(run.timings().contains_key("analyze"));

    // a clean re-run does nothing; a damaged artifact re-runs only its stage
    let mut again = quiet_run(&first, cfg.clone());
    again.run_all().unwrap();
    assert!(again.executed.is_empty(), "{:?}", again.executed);
    fs::write(first.join("results/tsap.tsv"), "corrupted").unwrap();
    let mut again = quiet_run(&first, cfg.clone());
    again.run_all().unwrap();
    assert_eq!(again.executed, ["cross-eval/tsap"]);

    // an independent run from scratch reproduces every checksum
    let second = dir.path().join("second");
    let mut other = quiet_run(&second, cfg.clone());
    other.run_all().unwrap();
    let sums = |r: &Run| -> Vec<(String, String)> {
        r.manifest.inventory().iter().map(|a| (a.path.clone(), a.sha256.clone())).collect()
    };
    assert_eq!(sums(&again), sums(&other));

    // changing a finetuning setting keeps the corpus and pretrained models
    let mut changed = cfg.clone();
    changed.finetune.epochs += 1;
    let mut third = quiet_run(&first, changed);
    third.cross_eval_all().unwrap();
    assert!(third.executed.iter().all(|s| s.starts_with("cross-eval/") || s == "results"));
    assert_eq!(third.executed.len(), cfg.models().len() + 1);
}

fn synthetic_table(cfg: &ExperimentConfig, auc: impl Fn(&str, f64, u32, u64) -> f64) -> ResultTable {
    let mut t = ResultTable::default();
    for m in cfg.models() {
        let m = m.to_string();
        for &l in &cfg.finetune.eval_lengths_s {
            for subject in 0..cfg.corpus.n_subjects as u32 {
                for &seed in &cfg.finetune.seeds {
                    let key = CellKey {
                        model: m.clone(),
                        task: cfg.finetune.tasks[0].clone(),
                        eval_length_s: l,
                        subject,
                        seed,
                    };
                    t.insert(key, auc(&m, l, subject, seed));
                }
            }
        }
    }
    t
}

fn report_dir(cfg: &ExperimentConfig, table: &ResultTable) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(CONFIG_FILE), to_toml(cfg)).unwrap();
    fs::write(dir.path().join(RESULTS_FILE), table.to_tsv()).unwrap();
    let out = tsap(&["-q", "report", "--run", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, String::from_utf8(out.stdout).unwrap())
}

fn noise(subject: u32, seed: u64) -> f64 {
    ((subject as f64 * 7.3 + seed as f64 * 3.1).sin()) * 0.03
}

#[test]
fn tied_results_have_no_asterisks_and_zero_differences() {
    let cfg = ExperimentConfig::acceptance();
    let table = synthetic_table(&cfg, |_, l, s, r| 0.8 - 0.01 * l + noise(s, r));
    let (dir, text) = report_dir(&cfg, &table);
    let models: Vec<String> = cfg.models().iter().map(ToString::to_string).collect();
    let rows = text.lines().filter(|l| models.iter().any(|m| l.starts_with(m.as_str())));
    assert_eq!(rows.clone().count(), models.len());
    assert!(rows.clone().all(|l| !l.contains('*')), "{text}");
    let report = build_report(&table);
    for t in &report.tasks[0].tests {
        assert_eq!(t.test.mean_diff, 0.0);
        assert_eq!(t.test.p, 1.0);
    }
    let diffs = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(diffs.contains("\"significant\": false"));
    assert!(!diffs.contains("\"significant\": true"));
}

#[test]
fn dominant_model_ranks_first_everywhere() {
    let cfg = ExperimentConfig::acceptance();
    let table = synthetic_table(&cfg, |m, _, s, r| {
        let base = 0.7 + noise(s, r);
        match m {
            "tsap" => base + 0.1,
            "fixed-2s" => base + 0.05,
            _ => base,
        }
    });
    let (_dir, text) = report_dir(&cfg, &table);
    let tsap_line = text.lines().find(|l| l.starts_with("tsap")).unwrap();
    assert_eq!(tsap_line.matches("[1]").count(), cfg.finetune.eval_lengths_s.len(), "{text}");
    // strictly above the matched fixed-length model at every interval
    assert_eq!(tsap_line.matches('*').count(), cfg.finetune.eval_lengths_s.len());
    let runner_up = text.lines().find(|l| l.starts_with("fixed-2s")).unwrap();
    assert_eq!(runner_up.matches("[2]").count(), cfg.finetune.eval_lengths_s.len());
    assert_eq!(text.lines().filter(|l| l.starts_with("non-pretrained")).count(), 1);
    assert_eq!(build_report(&table).tasks[0].rows.len(), 7);
}

#[test]
fn report_numbers_match_recomputation() {
    let cfg = ExperimentConfig::acceptance();
    let table = synthetic_table(&cfg, |m, l, s, r| 0.5 + 0.02 * l + m.len() as f64 * 0.01 + noise(s, r) * (1.0 + l));
    let (dir, _) = report_dir(&cfg, &table);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let task = &json["tasks"][0];
    let lengths: Vec<f64> = task["lengths_s"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for row in task["rows"].as_array().unwrap() {
        let model = row["model"].as_str().unwrap();
        for (j, &l) in lengths.iter().enumerate() {
            let raw: Vec<f64> = table.cell_values(model, &cfg.finetune.tasks[0], l).into_iter().map(|(_, v)| v).collect();
            let (mean, se) = mean_stderr(&raw);
            let cell = &row["cells"][j];
            assert!((cell["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
            assert!((cell["stderr"].as_f64().unwrap() - se).abs() < 1e-12);
        }
    }
    for t in task["tests"].as_array().unwrap() {
        let l = t["eval_length_s"].as_f64().unwrap();
        let d = table.paired_diffs("tsap", &format!("fixed-{l}s"), &cfg.finetune.tasks[0], l).unwrap();
        let (mean, se) = mean_stderr(&d);
        assert!((t["test"]["mean_diff"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((t["test"]["std_err"].as_f64().unwrap() - se).abs() < 1e-12);
    }
}

#[test]
fn report_on_incomplete_run_is_a_runtime_failure() {
    let cfg = ExperimentConfig::acceptance();
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(CONFIG_FILE), to_toml(&cfg)).unwrap();
    let out = tsap(&["report", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incomplete"));

    // a missing cell is also incomplete
    let mut table = synthetic_table(&cfg, |_, _, _, _| 0.7);
    let first = table.entries.keys().next().unwrap().clone();
    table.entries.remove(&first);
    fs::write(dir.path().join(RESULTS_FILE), table.to_tsv()).unwrap();
    let out = tsap(&["report", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
