use std::path::Path;
use std::process::{Command, Output};

fn ctact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctact")).args(args).env_remove("CTACT_OUT_DIR").output().unwrap()
}

fn ctact_out(args: &[&str], out: &Path) -> Output {
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--out", out.to_str().unwrap()]);
    ctact(&full)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["errors", "--step", "0"][..],
        &["errors", "--interval", "1", "-1"],
        &["errors", "--kinds", "relu"],
        &["traces", "--kinds", ""],
        &["bench", "--reps", "0"],
        &["bench", "--clock", "sundial"],
        &["attack", "--delay", "uniform"],
        &["attack", "--delay", "gaussian:1"],
        &["attack", "--countermeasure", "prayer"],
        &["thresholds", "--tolerance", "0"],
        &["thresholds", "--tolerance", "-1e-9"],
        &["errors", "--no-such-flag"],
    ] {
        let o = ctact(args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn errors_single_grid_writes_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    for (lo, hi, step, points) in [("-8", "8", "0.01", "1601"), ("-500", "500", "1.0", "1001")] {
        let out = tmp.path().join(step);
        let o = ctact_out(&["errors", "--interval", lo, hi, "--step", step], &out);
        assert_eq!(code(&o), 0);
        let rows = read_rows(&out.join("errors.csv"));
        assert_eq!(rows.len(), 4);
        let kinds: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
        assert_eq!(kinds, ["sigmoid", "tanh", "gelu", "swish"]);
        assert!(rows.iter().all(|r| &r[4] == points));
        assert!(out.join("errors_table.txt").exists());
    }
}

#[test]
fn errors_bounds_block_sets_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let strict = write_config(tmp.path(), "[errors.bounds.sigmoid]\nmax_abs = 1e-9\n");
    let o = ctact_out(&["errors", "--config", &strict], &tmp.path().join("strict"));
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmoid max_abs"));

    let loose = write_config(tmp.path(), "[errors.bounds.tanh]\nmax_abs = 1.5e-4\nrmse = 3.8e-5\n");
    let o = ctact_out(&["errors", "--config", &loose], &tmp.path().join("loose"));
    assert_eq!(code(&o), 0);
}

#[test]
fn config_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[errors]\nstep = 0.01\ngrid = 3\n");
    assert_eq!(code(&ctact(&["errors", "--config", &cfg])), 2);
    let cfg = write_config(tmp.path(), "[errors.bounds.softplus]\nmax_abs = 1.0\n");
    assert_eq!(code(&ctact(&["errors", "--config", &cfg])), 2);
    assert_eq!(code(&ctact(&["errors", "--config", "/nonexistent/ctact.toml"])), 2);
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[errors]\ninterval = [-500.0, 500.0]\nstep = 0.5\nkinds = [\"tanh\"]\n");
    let out = tmp.path().join("o");
    let o = ctact_out(&["errors", "--config", &cfg, "--step", "1"], &out);
    assert_eq!(code(&o), 0);
    let rows = read_rows(&out.join("errors.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!((&rows[0][0], &rows[0][3], &rows[0][4]), ("tanh", "1.0", "1001"));
}

#[test]
fn config_seed_matches_flag_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 99\n[attack]\ntrials = 3\nn_max = 50\nn_prof = 200\n");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&ctact_out(&["attack", "--config", &cfg], &a)), 0);
    assert_eq!(
        code(&ctact_out(&["attack", "--seed", "99", "--trials", "3", "--n-max", "50", "--n-prof", "200"], &b)),
        0
    );
    for f in ["attack_scores.csv", "attack_summary.json", "attack_trials.csv", "attack_templates.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["thresholds"], &out)), 0);
    let o = ctact_out(&["thresholds"], &out);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("already exists"));
    assert_eq!(code(&ctact_out(&["thresholds", "--force"], &out)), 0);
}

#[test]
fn environment_sets_default_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ctact"))
        .args(["thresholds"])
        .env("CTACT_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("thresholds.json").exists());

    let o = ctact(&["thresholds"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("# thresholds.json\n"), "{stdout}");
}

#[test]
fn csv_schemas_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&ctact_out(&["errors"], &d.join("e"))), 0);
    assert_eq!(
        code(&ctact_out(&["traces", "--interval", "-1", "1", "--step", "0.5", "--unprotected", "tanh"], &d.join("t"))),
        0
    );
    assert_eq!(
        code(&ctact_out(
            &["bench", "--clock", "trace", "--interval", "-1", "1", "--step", "1", "--reps", "2"],
            &d.join("b")
        )),
        0
    );
    assert_eq!(
        code(&ctact_out(
            &["bench", "--clock", "host", "--interval", "-1", "1", "--step", "1", "--reps", "1"],
            &d.join("h")
        )),
        0
    );
    assert_eq!(
        code(&ctact_out(
            &["bench", "--clock", "model", "--interval", "-1", "1", "--step", "1", "--reps", "1"],
            &d.join("m")
        )),
        0
    );
    assert_eq!(code(&ctact_out(&["attack", "--trials", "2", "--n-max", "20", "--n-prof", "100"], &d.join("a"))), 0);
    assert_eq!(code(&ctact_out(&["thresholds", "--sweep"], &d.join("s"))), 0);

    let expect = |path: &Path, cols: &[&str]| assert_eq!(header(path), cols, "{}", path.display());
    let grid = ["lo", "hi", "step"];
    expect(
        &d.join("e/errors.csv"),
        &["kind", "lo", "hi", "step", "points", "threshold", "mse", "rmse", "max_abs", "argmax_input"],
    );
    expect(
        &d.join("t/traces_report.csv"),
        &[
            &grid[..],
            &[
                "kind",
                "variant",
                "points",
                "uniform",
                "canonical_length",
                "distinct_lengths",
                "control_flow",
                "deviating_inputs",
            ],
        ]
        .concat(),
    );
    expect(&d.join("t/traces_alignment.csv"), &[&grid[..], &["kinds", "aligned", "trace_len"]].concat());
    expect(&d.join("t/trace_lengths.csv"), &[&grid[..], &["kind", "variant", "input", "trace_len"]].concat());
    expect(&d.join("b/bench_samples.csv"), &["kind", "variant", "input", "repetition", "trace_len"]);
    expect(&d.join("h/bench_samples.csv"), &["kind", "variant", "input", "repetition", "elapsed_ns"]);
    expect(&d.join("m/bench_samples.csv"), &["kind", "variant", "input", "repetition", "cycles"]);
    expect(
        &d.join("b/bench_summary.csv"),
        &["kind", "variant", "unit", "samples", "min", "mean", "median", "std", "max"],
    );
    expect(&d.join("a/attack_scores.csv"), &["true_class", "trial", "n", "class", "score"]);
    expect(&d.join("a/attack_trials.csv"), &["true_class", "trial", "success", "separation_n", "final_leader"]);
    expect(&d.join("a/attack_templates.csv"), &["true_class", "trial", "class", "mu", "sigma_sq", "n_prof"]);
    expect(
        &d.join("s/threshold_sweep.csv"),
        &["kind", "tau", "is_default", "lo", "hi", "step", "rmse", "max_abs", "argmax_input"],
    );
}

#[test]
fn csv_floats_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["errors", "--interval", "-8", "8", "--step", "0.01"], &out)), 0);
    let rows = read_rows(&out.join("errors.csv"));
    let sigmoid_max: f64 = rows[0][8].parse().unwrap();
    let direct = ctact::error_analysis::error_metrics(ctact::ActivationKind::Sigmoid, &ctact::Grid::NARROW).unwrap();
    assert_eq!(sigmoid_max.to_bits(), direct.max_abs.to_bits());
    let argmax: f32 = rows[1][9].parse().unwrap();
    let tanh = ctact::error_analysis::error_metrics(ctact::ActivationKind::Tanh, &ctact::Grid::NARROW).unwrap();
    assert_eq!(argmax.to_bits(), tanh.argmax_input.to_bits());
}

#[test]
fn traces_protected_passes_unprotected_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let o = ctact_out(&["traces", "--interval", "-500", "500", "--step", "1"], &out);
    assert_eq!(code(&o), 0);
    let rows = read_rows(&out.join("traces_report.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| &r[6] == "true"));
    assert!(!out.join("deviating_inputs.csv").exists());

    let out = tmp.path().join("u");
    let o =
        ctact_out(&["traces", "--kinds", "", "--unprotected", "tanh", "--interval", "-8", "8", "--step", "0.01"], &out);
    assert_eq!(code(&o), 0);
    let rows = read_rows(&out.join("traces_report.csv"));
    assert_eq!((&rows[0][3], &rows[0][4], &rows[0][6]), ("tanh", "unprotected", "false"));
}

#[test]
fn bench_default_sample_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["bench", "--clock", "trace"], &out)), 0);
    assert_eq!(read_rows(&out.join("bench_samples.csv")).len(), 25_025);
    let summary = read_rows(&out.join("bench_summary.csv"));
    assert_eq!(summary.len(), 5);
    // trace clock: every protected sample is the common trace length
    assert!(summary.iter().all(|r| &r[4] == "35.0" && &r[8] == "35.0" && &r[7] == "0.0"));
}

#[test]
fn json_format_switches_record_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["errors", "--format", "json", "--interval", "-8", "8", "--step", "0.01"], &out)), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("errors.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
    assert_eq!(v[1]["kind"], "tanh");
    assert!(!out.join("errors.csv").exists());
}

#[test]
fn thresholds_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["thresholds"], &out)), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("thresholds.json")).unwrap()).unwrap();
    let t = v["thresholds"].as_array().unwrap();
    let find = |name: &str| t.iter().find(|r| r["parameter"] == name).unwrap().clone();
    let tanh = find("tau_tanh");
    assert_eq!(tanh["provenance"], "solved");
    assert!((tanh["value"].as_f64().unwrap() - 4.97).abs() < 0.01);
    let sig = find("tau_sigmoid");
    assert_eq!(sig["provenance"], "derived");
    assert!((sig["value"].as_f64().unwrap() - 9.94).abs() < 0.01);
    assert_eq!(find("tau_gelu")["provenance"], "empirical");
    assert_eq!(find("tau_gelu")["value"], 3.6);
    assert_eq!(find("tau_swish")["provenance"], "empirical");
    assert!(v["solver"]["residual"].as_f64().unwrap().abs() <= 1e-9);
}

#[test]
fn attack_summary_contents() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&ctact_out(&["attack", "--trials", "10", "--history-trials", "2"], &out)), 0);
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("attack_summary.json")).unwrap()).unwrap();
    assert!(v["rng"].as_str().unwrap().starts_with("ChaCha8"));
    assert_eq!(v["n_prof"], 10_000);
    assert_eq!(v["n_max"], 8_000);
    assert!(v["median_separation_n"].as_f64().unwrap() <= 5000.0);
    assert_eq!(v["per_class"].as_array().unwrap().len(), 3);
    // 2 trials x 3 true classes x 3 candidate classes x 8000 observations
    assert_eq!(read_rows(&out.join("attack_scores.csv")).len(), 2 * 3 * 3 * 8000);
    assert_eq!(read_rows(&out.join("attack_trials.csv")).len(), 30);
}
