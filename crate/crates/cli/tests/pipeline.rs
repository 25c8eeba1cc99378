use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use mel_cli::compare::compare_files;
use mel_cli::config::{PipelineConfig, Precision, Profile};
use mel_cli::pipeline::{run_all, run_stage, write_synthetic, Manifest, Stage};
use mel_cli::synthetic::{gen_synthetic, SyntheticSpec, ZipfSampler};
use mel_cli::CliError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
seed = 3
[synthetic]
n_entities = 60
mentions_per_language = 400
[model]
vocab_size = 300
[toggles]
aux_task = true
hard_negatives = true
[train]
steps = 30
phase2_steps = 10
[rerank]
steps = 20
[eval]
per_lang = 100
"#;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(Profile::Desk, TINY).unwrap();
    cfg.workdir = dir.to_path_buf();
    cfg
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_is_byte_identical_across_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let mut cfg = tiny(dir.path());
        cfg.precision = Precision::F64;
        write_synthetic(&cfg).unwrap();
        let outcomes = run_all(&cfg).unwrap();
        assert_eq!(outcomes.len(), Stage::ALL.len());
        assert!(outcomes.iter().all(|o| o.warnings.is_empty()));
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key("model.ckpt") && ta.contains_key("reranker.ckpt"));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(tb[name] == *bytes, "{name} differs");
    }
}

#[test]
fn missing_input_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    match run_stage(&cfg, Stage::Train) {
        Err(e @ CliError::MissingInput { .. }) => {
            let line = e.machine_line();
            assert!(line.starts_with("error kind=missing-input path="), "{line}");
        }
        other => panic!("expected a missing input, got {other:?}"),
    }
}

#[test]
fn changed_inputs_are_reported_as_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.toggles.hard_negatives = false;
    write_synthetic(&cfg).unwrap();
    for s in [Stage::KbIngest, Stage::Extract, Stage::Split] {
        run_stage(&cfg, s).unwrap();
    }
    let train = cfg.path(&cfg.paths.train);
    let mut text = std::fs::read_to_string(&train).unwrap();
    let first = text.find('\n').unwrap() + 1;
    text.replace_range(..first, "");
    std::fs::write(&train, text).unwrap();
    let out = run_stage(&cfg, Stage::Vocab).unwrap();
    assert_eq!(out.warnings.len(), 1, "{:?}", out.warnings);
    assert!(out.warnings[0].contains("stage split"));
    let manifest = Manifest::load(&cfg.path(&cfg.paths.manifest)).unwrap();
    assert!(manifest.stages.contains_key("vocab"));
}

#[test]
fn cli_reports_errors_and_compares_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let mel = env!("CARGO_BIN_EXE_mel");
    let out = Command::new(mel)
        .args(["--config", config.to_str().unwrap(), "--workdir", dir.path().to_str().unwrap(), "index"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error kind=missing-input")), "{stderr}");

    let run = |args: &[&str]| {
        let out = Command::new(mel)
            .args(["--config", config.to_str().unwrap(), "--workdir", dir.path().to_str().unwrap()])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-synthetic"]);
    run(&["run-all"]);
    let report = dir.path().join("report.json");
    let table = run(&["compare", report.to_str().unwrap(), report.to_str().unwrap()]);
    assert!(table.contains("micro-avg") && !table.contains("-0.") && table.contains("+0.000"), "{table}");
    let cfg = tiny(dir.path());
    let delta = compare_files(&cfg.path(&cfg.paths.alias_report), &report).unwrap();
    let dense = mel_core::eval::EvalReport::load(&report).unwrap();
    let alias = mel_core::eval::EvalReport::load(&cfg.path(&cfg.paths.alias_report)).unwrap();
    assert_eq!(delta.micro.r1, dense.micro.r1 - alias.micro.r1);
    assert!(run(&["show-config"]).contains("[toggles]"));
}

#[test]
fn default_synthetic_spec_has_fifty_zero_shot_entities() {
    let spec = SyntheticSpec::default();
    let s = gen_synthetic(&spec).unwrap();
    assert_eq!(s.zero_shot.len(), 50);
    assert_eq!(s, gen_synthetic(&spec).unwrap());
    assert_ne!(s, gen_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap());
}

#[test]
fn zipf_sampler_fits_its_distribution() {
    // Pearson chi-squared over the first 20 ranks plus the tail, 20 degrees
    // of freedom; 45.3 is the 0.999 quantile.
    let (n, draws) = (500, 50_000);
    let z = ZipfSampler::new(n, 1.1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = vec![0usize; 21];
    for _ in 0..draws {
        counts[z.sample(&mut rng).min(20)] += 1;
    }
    let expected: Vec<f64> = (0..20)
        .map(|r| z.probability(r) * draws as f64)
        .chain([(20..n).map(|r| z.probability(r)).sum::<f64>() * draws as f64])
        .collect();
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    assert!(chi2 < 45.3, "chi-squared {chi2}");
    let h1: f64 = (1..=n).map(|r| (r as f64).powf(-1.1)).sum();
    assert!((z.probability(0) - 1.0 / h1).abs() < 1e-12);
}
