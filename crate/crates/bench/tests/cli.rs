use std::path::Path;
use std::process::{Command, Output};

use truffle_bench::summary::{read_csv, read_records, RECORDS_FILE, SUMMARY_CSV, SUMMARY_JSON};
use truffle_bench::SummaryRow;
use truffle_sim::Mode;

fn bench(args: &[&str], scale_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_truffle-bench"));
    cmd.args(args);
    match scale_env {
        Some(v) => cmd.env("TRUFFLE_SCALE", v),
        None => cmd.env_remove("TRUFFLE_SCALE"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_records_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        r#"
        workload = "chain"
        storage_kind = "direct"
        input_sizes_mb = [1, 128]
        repetitions = 3
        scale_factor = 0.02
        "#,
    );
    let o = bench(&["run", "--config", &config, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("improv%"));

    let records = read_records(&out.join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 2 * 2 * 3);
    let rows = read_csv(&out.join(SUMMARY_CSV)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.mean_ms.is_some() && r.comparable()));
    let json: Vec<SummaryRow> = serde_json::from_slice(&std::fs::read(out.join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(json, rows);

    // Summaries are a pure function of the records.
    std::fs::remove_file(out.join(SUMMARY_CSV)).unwrap();
    let o = bench(&["summarize", "--in", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_csv(&out.join(SUMMARY_CSV)).unwrap(), rows);
}

#[test]
fn single_repetition_has_zero_stddev_and_mode_filter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        r#"
        workload = "video"
        storage_kind = "kvs"
        input_sizes_mb = [1]
        scale_factor = 0.05
        "#,
    );
    let o = bench(
        &["run", "--config", &config, "--out", out.to_str().unwrap(), "--mode", "truffle"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&out.join(SUMMARY_CSV)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mode, Mode::Truffle);
    assert_eq!(rows[0].stddev_ms, Some(0.0));
    assert!(!rows[0].comparable());
}

#[test]
fn scale_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        r#"
        workload = "chain"
        storage_kind = "direct"
        input_sizes_mb = [0]
        scale_factor = 0.05
        "#,
    );
    let out = out.to_str().unwrap();
    assert_eq!(bench(&["run", "--config", &config, "--out", out], Some("zero")).status.code(), Some(2));
    assert_eq!(bench(&["run", "--config", &config, "--out", out], Some("0")).status.code(), Some(2));
    let o = bench(&["run", "--config", &config, "--out", out, "--scale", "0.05"], Some("0"));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        bench(&["run", "--config", missing.to_str().unwrap()], None).status.code(),
        Some(2)
    );
    for body in [
        "workload = \"chain\"\nstorage_kind = \"direct\"\ninput_sizes_mb = []",
        "workload = \"chain\"\nstorage_kind = \"direct\"\ninput_sizes_mb = [1]\nrepetitions = 0",
        "workload = \"pipeline\"\nstorage_kind = \"direct\"\ninput_sizes_mb = [1]",
        "workload = \"video\"\nstorage_kind = \"direct\"\ninput_sizes_mb = [1]\n[cluster]\nnodes = 2",
    ] {
        let config = write_config(dir.path(), body);
        let o = bench(&["run", "--config", &config], None);
        assert_eq!(o.status.code(), Some(2), "{body}: {}", stderr(&o));
    }
}

#[test]
fn all_failed_point_exits_with_one_and_keeps_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        r#"
        workload = "chain"
        storage_kind = "direct"
        input_sizes_mb = [1]
        modes = ["baseline"]
        scale_factor = 1.0

        [cluster.timeouts]
        scheduling_ms = 1
        "#,
    );
    let o = bench(&["run", "--config", &config, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("every repetition failed"));
    let records = read_records(&out.join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0].failed());
    let rows = read_csv(&out.join(SUMMARY_CSV)).unwrap();
    assert_eq!(rows[0].mean_ms, None);
}

#[test]
fn summarize_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = bench(&["summarize", "--in", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        truffle_bench::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
