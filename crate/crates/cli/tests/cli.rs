//! End-to-end tests of the `gamma-unmix` binary: subcommand plumbing, exit
//! codes, and the determinism contract of `simulate`.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

/// Command for the compiled binary with the seed override scrubbed from the
/// inherited environment, so tests control it explicitly.
fn gamma_unmix() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gamma-unmix"));
    cmd.env_remove("GAMMA_UNMIX_SEED");
    cmd
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Generate a small known-scenario dataset, asserting success.
fn simulate(dir: &Path, n: usize, seed: u64) -> Output {
    let out = gamma_unmix()
        .args(["simulate", "--scenario", "known", "--jobs", "1"])
        .args(["--n", &n.to_string(), "--seed", &seed.to_string()])
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawning gamma-unmix");
    assert!(out.status.success(), "simulate failed: {}", stderr_of(&out));
    out
}

#[test]
fn simulate_reruns_reproduce_identical_datasets() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    let banner = simulate(&a, 20, 7);
    simulate(&b, 20, 7);
    simulate(&c, 20, 8);

    assert!(stdout_of(&banner).contains("wrote 20"));
    for file in [
        "spectra.csv",
        "truth.jsonl",
        "signatures.csv",
        "manifest.json",
    ] {
        assert_eq!(
            read(&a.join(file)),
            read(&b.join(file)),
            "{file} differs between reruns with the same seed"
        );
    }
    assert_ne!(
        read(&a.join("spectra.csv")),
        read(&c.join("spectra.csv")),
        "different seeds produced identical spectra"
    );
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let tmp = TempDir::new().unwrap();
    let (by_env, by_flag) = (tmp.path().join("env"), tmp.path().join("flag"));

    let out = gamma_unmix()
        .env("GAMMA_UNMIX_SEED", "2")
        .args([
            "simulate",
            "--scenario",
            "known",
            "--n",
            "15",
            "--seed",
            "1",
            "--jobs",
            "1",
        ])
        .arg("--out")
        .arg(&by_env)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    simulate(&by_flag, 15, 2);

    assert_eq!(
        read(&by_env.join("spectra.csv")),
        read(&by_flag.join("spectra.csv")),
        "GAMMA_UNMIX_SEED=2 should match --seed 2"
    );

    let bad = gamma_unmix()
        .env("GAMMA_UNMIX_SEED", "not-a-number")
        .args(["simulate", "--scenario", "known", "--n", "5"])
        .arg("--out")
        .arg(tmp.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(
        stderr_of(&bad).contains("GAMMA_UNMIX_SEED"),
        "stderr should name the bad variable: {}",
        stderr_of(&bad)
    );
}

#[test]
fn identify_then_report_writes_outputs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, 30, 11);

    let fits = tmp.path().join("fits");
    let out = gamma_unmix()
        .args(["identify", "--jobs", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&fits)
        .output()
        .unwrap();
    assert!(out.status.success(), "identify failed: {}", stderr_of(&out));
    let summary = stdout_of(&out);
    assert!(summary.contains("n=30"), "unexpected summary: {summary}");
    for field in ["threshold=", "accuracy=", "ppr=", "fpr=", "fnr="] {
        assert!(summary.contains(field), "summary lacks {field}: {summary}");
    }
    for file in ["results.jsonl", "predictions.csv", "run.json"] {
        assert!(fits.join(file).is_file(), "identify did not write {file}");
    }

    let report = tmp.path().join("report");
    let out = gamma_unmix()
        .arg("report")
        .arg("--data")
        .arg(&data)
        .arg("--results")
        .arg(fits.join("results.jsonl"))
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "report failed: {}", stderr_of(&out));
    for file in ["report.json", "report_bins.csv", "recall_curves.csv"] {
        assert!(report.join(file).is_file(), "report did not write {file}");
    }

    // The prediction file identify wrote scores cleanly against the same
    // split: its index column carries dataset indices, not row numbers.
    let split_fits = tmp.path().join("split-fits");
    let out = gamma_unmix()
        .args(["identify", "--jobs", "1", "--split", "test"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&split_fits)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = gamma_unmix()
        .args(["score", "--split", "test"])
        .arg("--data")
        .arg(&data)
        .arg("--predictions")
        .arg(split_fits.join("predictions.csv"))
        .arg("--out")
        .arg(tmp.path().join("split-scored"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "scoring identify's own split predictions failed: {}",
        stderr_of(&out)
    );
}

/// Build a prediction CSV that mirrors the dataset truth exactly.
fn perfect_predictions(data: &Path) -> String {
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&data.join("manifest.json"))).unwrap();
    let names: Vec<&str> = manifest["names"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1) // the leading background column has no presence label
        .map(|v| v.as_str().unwrap())
        .collect();
    let mut csv = format!("index,{}\n", names.join(","));
    let truth = String::from_utf8(read(&data.join("truth.jsonl"))).unwrap();
    for (row, line) in truth.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let labels: Vec<&str> = record["labels"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| if l.as_bool().unwrap() { "1" } else { "0" })
            .collect();
        csv.push_str(&format!("{row},{}\n", labels.join(",")));
    }
    csv
}

#[test]
fn perfect_external_predictions_score_cleanly() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, 20, 13);

    let pred = tmp.path().join("predictions.csv");
    fs::write(&pred, perfect_predictions(&data)).unwrap();
    let out = gamma_unmix()
        .arg("score")
        .arg("--data")
        .arg(&data)
        .arg("--predictions")
        .arg(&pred)
        .arg("--out")
        .arg(tmp.path().join("scored"))
        .output()
        .unwrap();
    assert!(out.status.success(), "score failed: {}", stderr_of(&out));
    let summary = stdout_of(&out);
    for field in ["accuracy=100.00%", "ppr=100.00%", "fpr=0.00%", "fnr=0.00%"] {
        assert!(summary.contains(field), "summary lacks {field}: {summary}");
    }
    assert!(tmp.path().join("scored").join("report.json").is_file());
}

#[test]
fn malformed_prediction_files_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, 10, 17);
    let run = |pred: &Path| {
        gamma_unmix()
            .arg("score")
            .arg("--data")
            .arg(&data)
            .arg("--predictions")
            .arg(pred)
            .arg("--out")
            .arg(tmp.path().join("scored"))
            .output()
            .unwrap()
    };

    let missing = tmp.path().join("nope.csv");
    let out = run(&missing);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("--predictions"),
        "stderr should name the flag: {}",
        stderr_of(&out)
    );

    // Rows out of order: the index column must count up from zero.
    let good = perfect_predictions(&data);
    let mut lines: Vec<&str> = good.lines().collect();
    lines.swap(1, 2);
    let shuffled = tmp.path().join("shuffled.csv");
    fs::write(&shuffled, lines.join("\n")).unwrap();
    let out = run(&shuffled);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    // A value outside [0, 1] is not a probability.
    let out_of_range = tmp.path().join("range.csv");
    fs::write(&out_of_range, good.replacen(",1", ",1.5", 1)).unwrap();
    let out = run(&out_of_range);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn nonconvergence_above_the_tolerated_fraction_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = gamma_unmix()
        .args(["simulate", "--scenario", "deformed", "--n", "6", "--seed", "6", "--jobs", "1"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    // Fitting across the deformation family stops on a round budget for some
    // of these spectra; with the default 5% tolerance that must surface as
    // exit code 3, a warning, and still-usable per-spectrum results.
    let fits = tmp.path().join("fits");
    let run = |extra: &[&str]| {
        gamma_unmix()
            .args(["unmix", "--variability", "manifold", "--jobs", "1"])
            .args(extra)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&fits)
            .output()
            .unwrap()
    };
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("did not converge"));
    let results = String::from_utf8(read(&fits.join("results.jsonl"))).unwrap();
    assert_eq!(results.lines().count(), 6, "results were not written");

    let out = run(&["--max-nonconverged-frac", "1.0"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
}

#[test]
fn missing_inputs_exit_with_usage_errors() {
    let tmp = TempDir::new().unwrap();

    let out = gamma_unmix()
        .args(["unmix", "--jobs", "1"])
        .arg("--data")
        .arg(tmp.path().join("no-such-dataset"))
        .arg("--out")
        .arg(tmp.path().join("fits"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("--data"),
        "stderr should name the flag: {}",
        stderr_of(&out)
    );

    // A clap-level contract violation reports usage on the same exit code.
    let out = gamma_unmix()
        .args(["simulate", "--scenario", "known"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--n"), "{}", stderr_of(&out));
}
