//! Command-line behavior: exit codes and diagnostics, thread-count
//! insensitivity of outputs, and the configuration echo embedded in every
//! artifact.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mts"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning the binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read_bytes(path))
        .unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

/// Small dataset and 2-epoch model shared by the tests below.
struct Fixture {
    dataset: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        std::fs::create_dir_all(&dir).expect("creating fixture directory");
        let dataset = dir.join("small.mtsd");
        let model = dir.join("small.model.json");
        let out = run(bin().args(["gen-data", "--trajectories", "3", "--seed", "7", "--out"]).arg(&dataset));
        assert!(out.status.success(), "fixture gen-data failed: {}", stderr(&out));
        let out = run(
            bin()
                .args(["train", "--data"])
                .arg(&dataset)
                .args(["--epochs", "2", "--out"])
                .arg(&model),
        );
        assert!(out.status.success(), "fixture train failed: {}", stderr(&out));
        Fixture { dataset, model }
    })
}

// ---------------------------------------------------------------------------
// Exit codes.
// ---------------------------------------------------------------------------

#[test]
fn help_and_version_exit_zero() {
    let out = run(bin().arg("--help"));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for subcommand in ["gen-data", "train", "servo", "eval", "render"] {
        assert!(text.contains(subcommand), "--help must list {subcommand}:\n{text}");
    }
    assert_eq!(code(&run(bin().arg("--version"))), 0);
    assert_eq!(code(&run(bin().args(["gen-data", "--help"]))), 0);
}

#[test]
fn usage_errors_exit_one() {
    let out = run(bin().arg("--bogus"));
    assert_eq!(code(&out), 1);
    assert!(!stderr(&out).is_empty(), "unknown flag must print a diagnostic");

    assert_eq!(code(&run(bin().arg("frobnicate"))), 1, "unknown subcommand");
    assert_eq!(code(&run(&mut bin())), 1, "missing subcommand");
    assert_eq!(
        code(&run(bin().args(["gen-data", "--trajectories", "1"]))),
        1,
        "missing required --out"
    );
    assert_eq!(
        code(&run(bin().args(["gen-data", "--trajectories", "1", "--threads", "0", "--out", "x.mtsd"]))),
        1,
        "--threads 0 is out of range"
    );
    assert_eq!(
        code(&run(bin().args(["eval", "--series", "3", "--model", "m.json", "--out", "r.json"]))),
        1,
        "--series outside 1..=2"
    );

    let out = run(bin().args(["servo", "--mode", "deep", "--seed", "1", "--out", "t.json"]));
    assert_eq!(code(&out), 1, "deep servo without --model is a usage error");
    assert!(stderr(&out).contains("--model"), "diagnostic must mention --model: {}", stderr(&out));
}

#[test]
fn runtime_errors_exit_two() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");

    let out = run(
        bin()
            .args(["train", "--data"])
            .arg(dir.path().join("missing.mtsd"))
            .args(["--epochs", "1", "--out"])
            .arg(dir.path().join("m.json")),
    );
    assert_eq!(code(&out), 2, "missing dataset is a runtime error: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "diagnostic prefix: {}", stderr(&out));

    let corrupt = dir.path().join("corrupt.mtsd");
    std::fs::write(&corrupt, b"MTSDgarbage").expect("writing corrupt dataset");
    let out = run(
        bin()
            .args(["train", "--data"])
            .arg(&corrupt)
            .args(["--epochs", "1", "--out"])
            .arg(dir.path().join("m.json")),
    );
    assert_eq!(code(&out), 2, "corrupt dataset is a runtime error: {}", stderr(&out));

    let not_a_model = dir.path().join("not-a-model.json");
    std::fs::write(&not_a_model, b"{]").expect("writing invalid model");
    let out = run(
        bin()
            .args(["eval", "--series", "1", "--trials", "1", "--model"])
            .arg(&not_a_model)
            .arg("--out")
            .arg(dir.path().join("r.json")),
    );
    assert_eq!(code(&out), 2, "unreadable model is a runtime error: {}", stderr(&out));

    // An output path whose parent is an existing file cannot be created.
    let out = run(bin().args(["render", "--seed", "1", "--out"]).arg(f.dataset.join("x.ppm")));
    assert_eq!(code(&out), 2, "unwritable output path is a runtime error: {}", stderr(&out));
}

// ---------------------------------------------------------------------------
// Thread-count insensitivity: parallel runs must be byte-identical to serial.
// ---------------------------------------------------------------------------

#[test]
fn thread_count_does_not_change_outputs() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");

    let serial = dir.path().join("serial.mtsd");
    let parallel = dir.path().join("parallel.mtsd");
    for (path, threads) in [(&serial, "1"), (&parallel, "3")] {
        let out = run(
            bin()
                .args(["gen-data", "--trajectories", "3", "--seed", "7", "--threads", threads, "--out"])
                .arg(path),
        );
        assert!(out.status.success(), "gen-data --threads {threads}: {}", stderr(&out));
    }
    assert_eq!(read_bytes(&serial), read_bytes(&parallel), "gen-data output depends on --threads");

    let r1 = dir.path().join("serial.report.json");
    let r2 = dir.path().join("parallel.report.json");
    for (path, threads) in [(&r1, "1"), (&r2, "4")] {
        let out = run(
            bin()
                .args(["eval", "--series", "1", "--trials", "3", "--threads", threads, "--model"])
                .arg(&f.model)
                .arg("--out")
                .arg(path),
        );
        assert!(out.status.success(), "eval --threads {threads}: {}", stderr(&out));
    }
    assert_eq!(read_bytes(&r1), read_bytes(&r2), "eval output depends on --threads");
}

// ---------------------------------------------------------------------------
// Configuration echo: every artifact records the effective settings and
// seeds that produced it.
// ---------------------------------------------------------------------------

#[test]
fn dataset_manifest_embeds_configuration() {
    let f = fixture();
    let manifest = read_json(&f.dataset.with_extension("mtsd.manifest.json"));
    let generation = &manifest["generation"];
    assert_eq!(generation["gen"]["master_seed"], 7);
    assert_eq!(generation["gen"]["n_trajectories"], 3);
    assert_eq!(generation["gen"]["split_ratio"], 0.7);
    assert_eq!(generation["gen"]["jitter_px"], 0);
    assert!(generation["sim"]["servo"].is_object(), "simulation config echoed");
    for key in ["scene_stream", "split", "jitter"] {
        assert!(generation["derived_seeds"][key].is_u64(), "derived seed {key} recorded");
    }
    assert_eq!(
        generation["trajectory_seeds"].as_array().map(Vec::len),
        Some(3),
        "per-trajectory scene seeds recorded"
    );
}

#[test]
fn model_file_embeds_training_configuration() {
    let f = fixture();
    let model = read_json(&f.model);
    let metadata = &model["metadata"];
    assert_eq!(metadata["train_config"]["epochs"], 2);
    assert_eq!(metadata["train_config"]["batch_size"], 64);
    assert!(metadata["train_config"]["shuffle_seed"].is_u64());
    assert!(metadata["train_config"]["init_seed"].is_u64());
    assert!(
        metadata["dataset_manifest"]["generation"]["gen"]["master_seed"].is_u64(),
        "training metadata chains the dataset provenance"
    );
    assert!(model["input_normalization"]["mean"].is_array());
    assert!(model["input_normalization"]["std"].is_array());
}

#[test]
fn trajectory_report_and_render_embed_configuration() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");

    let traj = dir.path().join("traj.json");
    let out = run(bin().args(["servo", "--mode", "baseline", "--seed", "11", "--out"]).arg(&traj));
    assert!(out.status.success(), "servo: {}", stderr(&out));
    let doc = read_json(&traj);
    assert_eq!(doc["config"]["mode"], "baseline");
    assert_eq!(doc["config"]["seed"], 11);
    assert!(doc["config"]["sim"]["servo"]["step_size"].is_number());
    assert!(doc["config"]["scene_seed"].is_u64());
    assert_eq!(doc["trajectory"]["controller"], "baseline");

    let report_path = dir.path().join("report.json");
    let out = run(
        bin()
            .args(["eval", "--series", "1", "--trials", "2", "--model"])
            .arg(&f.model)
            .arg("--out")
            .arg(&report_path),
    );
    assert!(out.status.success(), "eval: {}", stderr(&out));
    let report = read_json(&report_path);
    assert_eq!(report["config"]["eval"]["master_seed"], 99);
    assert_eq!(report["config"]["eval"]["n_trials"], 2);
    assert!(report["config"]["sim"]["intrinsics"].is_object());
    assert_eq!(report["n_trials"], 2);

    let ppm = dir.path().join("view.ppm");
    let out = run(bin().args(["render", "--seed", "5", "--out"]).arg(&ppm));
    assert!(out.status.success(), "render: {}", stderr(&out));
    let bytes = read_bytes(&ppm);
    assert!(bytes.starts_with(b"P6\n"), "binary PPM header");
    let text = String::from_utf8_lossy(&bytes);
    let config_line = text
        .lines()
        .find_map(|l| l.strip_prefix("# config: "))
        .expect("render output carries a config comment");
    let config: serde_json::Value = serde_json::from_str(config_line).expect("config comment is JSON");
    assert_eq!(config["seed"], 5);
    assert!(config["scene"]["leaf_center"].is_object() || config["scene"]["leaf_center"].is_array());
    assert!(config["sim"]["intrinsics"].is_object());
}

#[test]
fn offset_series_report_has_bounded_start_offsets() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");
    let report_path = dir.path().join("series2.json");
    let out = run(
        bin()
            .args(["eval", "--series", "2", "--trials", "12", "--model"])
            .arg(&f.model)
            .arg("--out")
            .arg(&report_path),
    );
    assert!(out.status.success(), "eval series 2: {}", stderr(&out));
    let report = read_json(&report_path);
    assert_eq!(report["series"], 2);
    let trials = report["trials"].as_array().expect("trials array");
    assert_eq!(trials.len(), 12, "exactly the requested number of trials");
    // Nominal start position with per-component offsets within +/- 0.05 m.
    let nominal = [0.04, 0.59, 0.68];
    for trial in trials {
        let p = trial["start_position"].as_array().expect("start position [x, y, z]");
        for (axis, &base) in p.iter().zip(&nominal) {
            let v = axis.as_f64().expect("start component");
            assert!(
                (v - base).abs() <= 0.05 + 1e-12,
                "start offset {} exceeds 0.05 m from {base}",
                v - base
            );
        }
    }
}

#[test]
fn csv_report_writes_config_manifest() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");
    let report_path = dir.path().join("report.csv");
    let out = run(
        bin()
            .args(["eval", "--series", "1", "--trials", "2", "--format", "csv", "--model"])
            .arg(&f.model)
            .arg("--out")
            .arg(&report_path),
    );
    assert!(out.status.success(), "eval csv: {}", stderr(&out));
    let text = String::from_utf8(read_bytes(&report_path)).expect("utf-8 CSV");
    assert!(
        text.starts_with("series,seed,steps_deep,"),
        "CSV header row expected, got: {}",
        text.lines().next().unwrap_or_default()
    );
    assert_eq!(text.lines().count(), 3, "header plus one row per trial");
    let manifest = read_json(&dir.path().join("report.csv.manifest.json"));
    assert_eq!(manifest["eval"]["master_seed"], 99);
    assert!(manifest["sim"]["scenario"].is_object());
}

// ---------------------------------------------------------------------------
// Scene-stream behavior shared by servo runs.
// ---------------------------------------------------------------------------

#[test]
fn servo_reports_scene_and_termination() {
    let f = fixture();
    let dir = tempfile::tempdir().expect("temp dir");
    let traj = dir.path().join("deep.json");
    let out = run(
        bin()
            .args(["servo", "--mode", "deep", "--seed", "11", "--model"])
            .arg(&f.model)
            .arg("--out")
            .arg(&traj),
    );
    assert!(out.status.success(), "deep servo: {}", stderr(&out));
    let doc = read_json(&traj);
    assert_eq!(doc["config"]["mode"], "deep");
    assert!(doc["config"]["model"].is_string(), "model path echoed");
    assert_eq!(doc["trajectory"]["controller"], "deep");
    let steps = doc["trajectory"]["steps"].as_array().expect("steps recorded");
    assert!(!steps.is_empty());
    assert!(
        ["GradientSmall", "FruitLarge", "MaxSteps"]
            .contains(&doc["trajectory"]["termination"].as_str().unwrap_or_default()),
        "termination recorded"
    );
}
