use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn genkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genkit"))
        .args(args)
        .env_remove("GENKIT_SEED")
        .output()
        .unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn small_fixture_difference_in_means() {
    let o = genkit(&[
        "estimate",
        "--data",
        fixture("small.csv").to_str().unwrap(),
        "--estimator",
        "dm",
        "--bootstrap",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "dm");
    let v: f64 = rows[0][1].parse().unwrap();
    assert!((v - ((10.5 + 12.0) / 2.0 - 8.1)).abs() < 1e-12);
    assert_eq!(rows[0][2], "");
}

#[test]
fn missing_outcome_column_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noy.csv");
    std::fs::write(&path, "S,A,X1\n1,1,0.5\n1,0,0.2\nNA,NA,0.1\n").unwrap();
    let o = genkit(&["estimate", "--data", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing column `Y`"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(genkit(&["simulate", "--reps", "0"]).status.code(), Some(2));
    assert_eq!(
        genkit(&["simulate", "--scenario", "nope"]).status.code(),
        Some(2)
    );
    assert_eq!(
        genkit(&["simulate", "--estimators", "dm,bogus", "--reps", "1"])
            .status
            .code(),
        Some(2)
    );
    let data = fixture("small.csv");
    assert_eq!(
        genkit(&[
            "estimate",
            "--data",
            data.to_str().unwrap(),
            "--bootstrap",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        genkit(&["estimate", "--data", "/nonexistent.csv"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn computation_failure_exits_one() {
    // Calibration cannot balance a target outside the trial's range.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hull.csv");
    std::fs::write(
        &path,
        "S,A,Y,X1\n1,1,1,0.0\n1,0,2,1.0\n1,1,3,0.5\n1,0,1,0.2\nNA,NA,NA,5.0\nNA,NA,NA,6.0\n",
    )
    .unwrap();
    let o = genkit(&[
        "estimate",
        "--data",
        path.to_str().unwrap(),
        "--estimator",
        "cw",
        "--bootstrap",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn identify_canonical_diagrams() {
    let cases = [
        (
            "shift_on_x.dsl",
            "Transportable: P(Y|do(a)) = Σ_x P(Y|do(a),x,S=1) P(x)",
            0,
        ),
        (
            "post.dsl",
            "PostTreatmentTransportable: P(Y|do(a)) = Σ_x P(Y|do(a),x,S=1) P(x|a)",
            1,
        ),
        ("shift_on_y.dsl", "NotTransportable, witness: S → Y", 2),
    ];
    for (file, line, code) in cases {
        let o = genkit(&["identify", "--graph", fixture(file).to_str().unwrap()]);
        assert_eq!(stdout(&o).trim_end(), line);
        assert_eq!(o.status.code(), Some(code));
    }
}

#[test]
fn identify_with_explicit_set_and_json() {
    let g = fixture("shift_on_x.dsl");
    let o = genkit(&[
        "identify",
        "--graph",
        g.to_str().unwrap(),
        "--set",
        "",
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["status"], "NotTransportable");
    assert_eq!(v["witness"], "S → X → Y");

    let o = genkit(&[
        "identify",
        "--graph",
        g.to_str().unwrap(),
        "--set",
        "X",
        "--json",
        "--backdoor",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["formula"], "P(Y|do(a)) = Σ_x P(Y|do(a),x,S=1) P(x)");
    assert_eq!(v["backdoor_sets"], serde_json::json!([["X"]]));
}

#[test]
fn identify_parse_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.dsl");
    std::fs::write(&path, "A -> \nselection S\n").unwrap();
    let o = genkit(&[
        "identify",
        "--graph",
        path.to_str().unwrap(),
        "--treatment",
        "A",
        "--outcome",
        "Y",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_genkit"));
        c.args([
            "generate",
            "--scenario",
            "homogeneous",
            "--m",
            "200",
            "--superpopulation",
            "5000",
        ])
        .args(args);
        match env {
            Some(s) => c.env("GENKIT_SEED", s),
            None => c.env_remove("GENKIT_SEED"),
        };
        c.output().unwrap().stdout
    };
    assert_eq!(run(Some("42"), &[]), run(None, &["--seed", "42"]));
    assert_ne!(run(Some("42"), &[]), run(None, &["--seed", "43"]));
    assert_eq!(
        run(Some("42"), &["--seed", "43"]),
        run(None, &["--seed", "43"])
    );
}

#[test]
fn simulate_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = genkit(&[
        "simulate",
        "--scenario",
        "s1",
        "--reps",
        "3",
        "--seed",
        "5",
        "--estimators",
        "gformula,dm",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["dm", "gformula"]
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap())
            .unwrap();
    for (row, j) in rows.iter().zip(json["rows"].as_array().unwrap()) {
        let mean: f64 = row[1].parse().unwrap();
        let bias: f64 = row[2].parse().unwrap();
        assert_eq!(mean, j["mean"].as_f64().unwrap());
        assert_eq!(bias, mean - j["truth"].as_f64().unwrap());
    }
}

#[test]
fn nested_design_routes_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nested.csv");
    let o = genkit(&[
        "generate",
        "--scenario",
        "nested",
        "--seed",
        "3",
        "--output",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = genkit(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--design",
        "nested",
        "--estimator",
        "dm,ipsw,gformula",
        "--bootstrap",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = csv_rows(&stdout(&o))
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    assert_eq!(names, ["dm", "nested_ipsw", "nested_gformula"]);
}

#[test]
fn scenario_one_aipsw_interval_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s1.csv");
    assert!(genkit(&[
        "generate",
        "--scenario",
        "s1",
        "--seed",
        "1",
        "--output",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let o = genkit(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--estimator",
        "aipsw",
        "--bootstrap",
        "100",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = csv_rows(&stdout(&o));
    let golden = csv_rows(&std::fs::read_to_string(fixture("s1_aipsw_seed1.csv")).unwrap());
    assert_eq!(got.len(), 1);
    let (lower, upper): (f64, f64) = (got[0][2].parse().unwrap(), got[0][3].parse().unwrap());
    assert!(lower < 27.4 && 27.4 < upper, "[{lower}, {upper}]");
    for k in 1..4 {
        let (a, b): (f64, f64) = (got[0][k].parse().unwrap(), golden[0][k].parse().unwrap());
        assert!((a - b).abs() < 1e-9 * b.abs(), "column {k}: {a} vs {b}");
    }
    assert_eq!(got[0][4..], golden[0][4..]);
}
