use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdat_core::sweep::{aggregate, read_sweep_csv};
use serde_json::Value;

const TINY: &[&str] = &[
    "--epochs",
    "2",
    "--batch",
    "10",
    "--set",
    "moons_n=40",
    "--set",
    "hidden=6",
    "--set",
    "latent=3",
];

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdat-lab"))
        .args(args)
        .env("MDAT_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The run directory is the last line on stdout.
fn run_dir(o: &Output) -> PathBuf {
    PathBuf::from(
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .last()
            .expect("run dir printed"),
    )
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

#[test]
fn train_writes_a_complete_run() {
    let out = tempfile::tempdir().unwrap();
    let o = lab(out.path(), &with_tiny(&["train", "--export", "boundary,embeddings"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = run_dir(&o);
    assert!(dir.starts_with(out.path()));
    for f in [
        "manifest.json",
        "config.txt",
        "epochs.csv",
        "checkpoint.txt",
        "boundary.csv",
        "embeddings.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let m = manifest(&dir);
    assert_eq!(m["status"], "success");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["run_dir"], dir.display().to_string());
    assert!(m["wall_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(m["config"]["epochs"], "2");
    assert_eq!(m["results"]["epochs"], 2);
    let boundary = fs::read_to_string(dir.join("boundary.csv")).unwrap();
    assert_eq!(boundary.lines().count(), 1 + 101 * 101);
}

#[test]
fn identical_config_reproduces_the_log_byte_for_byte() {
    let out = tempfile::tempdir().unwrap();
    let a = run_dir(&lab(out.path(), &with_tiny(&["train", "--seed", "3"])));
    let b = run_dir(&lab(out.path(), &with_tiny(&["train", "--seed", "3"])));
    assert_ne!(a, b, "each invocation gets its own directory");
    assert_eq!(
        fs::read(a.join("epochs.csv")).unwrap(),
        fs::read(b.join("epochs.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.txt")).unwrap(),
        fs::read(b.join("checkpoint.txt")).unwrap()
    );
}

#[test]
fn source_only_leaves_adversarial_columns_empty() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_dir(&lab(out.path(), &with_tiny(&["train", "--method", "source_only"])));
    let log = fs::read_to_string(dir.join("epochs.csv")).unwrap();
    for row in log.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        // recon_src, recon_tgt, hinge_tgt, decoder_obj, dat_domain
        assert!(f[2..7].iter().all(|c| c.is_empty()), "{row}");
        assert!(!f[1].is_empty());
    }
}

#[test]
fn config_file_and_flags_combine() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.cfg");
    fs::write(&cfg, "# toy run\nalpha = 0.3\nmethod = arn_no_mdat\nseed = 9\n").unwrap();
    let o = lab(
        out.path(),
        &with_tiny(&["train", "--config", cfg.to_str().unwrap(), "--alpha", "0.7"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&run_dir(&o));
    assert_eq!(m["config"]["alpha"], "0.7");
    assert_eq!(m["config"]["method"], "arn_no_mdat");
    assert_eq!(m["config"]["seed"], "9");
}

#[test]
fn config_errors_exit_1_and_name_the_line() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("bad.cfg");
    fs::write(&cfg, "alpha = 0.3\n\nlearning_rate = 0.1\n").unwrap();
    let o = lab(out.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    for args in [
        &["train", "--alpha", "-1"][..],
        &["train", "--margin", "0"],
        &["train", "--method", "dann"],
        &["train", "--no-such-flag"],
        &["train", "--set", "nokey"],
        &["train", "--task", "glyphs", "--export", "boundary"],
        &["train", "--export", "reconstructions"],
        &["sweep", "--grid", "bogus: 1,2"],
        &["sweep", "--grid", "alpha: 0.1", "--jobs", "0"],
    ] {
        let o = lab(out.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
    }
    // nothing was trained, so no run directories were left behind
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 1);
}

#[test]
fn divergence_exits_2_with_a_manifest() {
    let out = tempfile::tempdir().unwrap();
    let o = lab(out.path(), &with_tiny(&["train", "--set", "lr=100000"]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let m = manifest(&run_dir(&o));
    assert_eq!(m["status"], "diverged");
    assert_eq!(m["exit_code"], 2);
}

#[test]
fn unwritable_output_exits_4() {
    let out = tempfile::tempdir().unwrap();
    let blocker = out.path().join("file");
    fs::write(&blocker, "").unwrap();
    let target = blocker.join("runs");
    let o = lab(out.path(), &with_tiny(&["train", "--out", target.to_str().unwrap()]));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn alpha_sweep_counts_rows_and_aggregates_recompute() {
    let out = tempfile::tempdir().unwrap();
    let o = lab(
        out.path(),
        &with_tiny(&[
            "sweep",
            "--grid",
            "alpha: 0.01,0.03,0.07,0.1,0.2,0.3,0.5,1.0",
            "--repeats",
            "3",
            "--jobs",
            "2",
        ]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = run_dir(&o);
    let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 24);
    assert_eq!(csv.lines().filter(|l| l.starts_with("mean,")).count(), 8);
    let (runs, written) = read_sweep_csv(csv.as_bytes()).unwrap();
    for (a, b) in aggregate(&runs).iter().zip(&written) {
        assert!((a.target_mean - b.target_mean).abs() <= 1e-12);
        assert!((a.target_std - b.target_std).abs() <= 1e-12);
        assert!((a.source_mean - b.source_mean).abs() <= 1e-12);
        assert!((a.source_std - b.source_std).abs() <= 1e-12);
    }
    assert!(dir.join("runs/alpha=0.2/seed-3/epochs.csv").is_file());
    let m = manifest(&dir);
    assert_eq!(m["results"]["runs"], 24);
    assert_eq!(m["results"]["aggregates"].as_array().unwrap().len(), 8);
}

#[test]
fn margin_sweep_accepts_zero_and_flags_it() {
    let out = tempfile::tempdir().unwrap();
    let o = lab(
        out.path(),
        &with_tiny(&["sweep", "--grid", "margin: 0,0.1,0.3,0.5,1,2,5,10", "--repeats", "1"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&run_dir(&o));
    let aggs = m["results"]["aggregates"].as_array().unwrap();
    let flagged: Vec<&str> = aggs
        .iter()
        .filter(|a| a["degenerate"] == true)
        .map(|a| a["value"].as_str().unwrap())
        .collect();
    assert_eq!(flagged, ["0"]);
}

#[test]
fn gradcheck_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = lab(out.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&run_dir(&o));
    assert_eq!(m["results"]["checks"], 14);
    assert!(m["results"]["failed"].as_array().unwrap().is_empty());
}

#[test]
fn export_reproduces_training_artifacts_from_a_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let glyphs = [
        "--task",
        "glyphs",
        "--set",
        "glyph_n=40",
        "--set",
        "hidden=8",
        "--set",
        "latent=4",
    ];
    let mut args = vec![
        "train",
        "--epochs",
        "1",
        "--batch",
        "10",
        "--export",
        "embeddings,reconstructions",
    ];
    args.extend(glyphs);
    let o = lab(out.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trained = run_dir(&o);
    assert!(trained.join("reconstructions/target_00_recon.pgm").is_file());

    let ckpt = trained.join("checkpoint.txt");
    let o = lab(
        out.path(),
        &[
            "export",
            ckpt.to_str().unwrap(),
            "--export",
            "embeddings,reconstructions",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let exported = run_dir(&o);
    for f in [
        "embeddings.csv",
        "reconstructions/source_07_input.pgm",
        "reconstructions/target_03_recon.pgm",
    ] {
        assert_eq!(
            fs::read(trained.join(f)).unwrap(),
            fs::read(exported.join(f)).unwrap(),
            "{f}"
        );
    }

    let o = lab(out.path(), &["export", ckpt.to_str().unwrap(), "--export", "boundary"]);
    assert_eq!(code(&o), 1);
    let o = lab(
        out.path(),
        &["export", "/no/such/checkpoint.txt", "--export", "embeddings"],
    );
    assert_eq!(code(&o), 1);
}
