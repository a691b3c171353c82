use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE: &str = "\
HID,PID,visit_date,age,test_result,work_pf,pattern
123,456,2020-10-02,8,Negative,No,NA
123,457,2020-10-02,38,Negative,No,NA
123,456,2020-10-10,8,Negative,No,NA
123,457,2020-10-10,38,Positive,No,OR+N+S
123,456,2020-10-17,9,Positive,No,OR+N+S
123,457,2020-10-17,38,Negative,No,NA
124,458,2021-02-15,53,Negative,Yes,NA
124,458,2021-03-15,53,Negative,Yes,NA
";

fn housefs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_housefs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

const SIM_SPEC: &str = r#"
seed = 11
replicates = 2000

[features]
features = []

[truth]
external_prob = 0.03
sitp_2 = 0.35
period_variance = 1.0
size_exponent = -0.2

[population]
households = 1500

[[template]]
features = [[], [], []]
"#;

#[test]
fn explore_fixture_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "visits.csv", FIXTURE);
    let out = dir.path().join("out");
    ok(&housefs(&[
        "explore",
        "--input",
        s(&input),
        "--out",
        s(&out),
    ]));

    for t in ["T1", "T2", "T3", "T4", "T5", "T6"] {
        for kind in ["hist", "density", "pairs", "residuals"] {
            assert!(
                out.join(format!("{kind}_{t}.csv")).exists(),
                "{kind}_{t}.csv missing"
            );
        }
    }

    let summary = csv_rows(&out.join("features_summary.csv"));
    let row = |label: &str| -> Vec<&str> {
        summary
            .iter()
            .find(|r| r[1] == label)
            .unwrap_or_else(|| panic!("row {label}"))
            .iter()
            .skip(2)
            .map(String::as_str)
            .collect()
    };
    // Household 123 belongs to T2 with both members positive; 124 is an all-negative T5 household.
    assert_eq!(
        row("Number of households"),
        ["0", "1", "0", "0", "1", "0", "2"]
    );
    assert_eq!(
        row("Number of participants"),
        ["0", "2", "0", "0", "1", "0", "3"]
    );
    assert_eq!(
        row("Number of positive individuals"),
        ["0", "2", "0", "0", "0", "0", "2"]
    );
    assert_eq!(row("Children <12"), ["0", "1", "0", "0", "0", "0", "1"]);
    assert_eq!(row("OR+N+S positives"), ["0", "2", "0", "0", "0", "0", "2"]);
    assert_eq!(
        row("Patient-facing participants"),
        ["0", "0", "0", "0", "1", "0", "1"]
    );

    let hist = csv_rows(&out.join("hist_T2.csv"));
    let both = hist.iter().find(|r| r[1] == "2" && r[2] == "2").unwrap();
    assert_eq!(both[3], "1");

    // T1 holds no households: header only.
    for kind in ["hist", "density", "pairs", "residuals"] {
        let text = fs::read_to_string(out.join(format!("{kind}_T1.csv"))).unwrap();
        assert_eq!(text.lines().count(), 1, "{kind}_T1.csv");
        assert!(text.starts_with("schema_version,"));
    }
}

#[test]
fn explore_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "sim.toml", SIM_SPEC);
    let sim = dir.path().join("sim");
    ok(&housefs(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&sim),
    ]));
    let input = sim.join("synthetic_visits.csv");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&housefs(&[
        "--threads",
        "1",
        "explore",
        "--input",
        s(&input),
        "--out",
        s(&a),
    ]));
    ok(&housefs(&[
        "--threads",
        "4",
        "explore",
        "--input",
        s(&input),
        "--out",
        s(&b),
    ]));
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
}

#[test]
fn simulate_is_deterministic_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "sim.toml", SIM_SPEC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&housefs(&[
        "--threads",
        "1",
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&a),
    ]));
    ok(&housefs(&[
        "--threads",
        "3",
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&b),
    ]));
    let files = read_dir_sorted(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["frequencies.csv", "synthetic_visits.csv", "truth.json"]
    );
    assert_eq!(files, read_dir_sorted(&b));

    let c = dir.path().join("c");
    ok(&housefs(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&c),
        "--seed",
        "12",
    ]));
    assert_ne!(
        fs::read(a.join("synthetic_visits.csv")).unwrap(),
        fs::read(c.join("synthetic_visits.csv")).unwrap()
    );

    let freqs = csv_rows(&a.join("frequencies.csv"));
    assert_eq!(freqs.len(), 8);
    let total: f64 = freqs.iter().map(|r| r[5].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-7);
    let exact: f64 = freqs.iter().map(|r| r[6].parse::<f64>().unwrap()).sum();
    assert!((exact - 1.0).abs() < 1e-7);
}

#[test]
fn simulate_without_external_force_has_no_positives() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "sim.toml",
        &SIM_SPEC.replace("external_prob = 0.03", "external_prob = 0.0"),
    );
    let out = dir.path().join("out");
    ok(&housefs(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&out),
    ]));
    let visits = csv_rows(&out.join("synthetic_visits.csv"));
    assert!(!visits.is_empty());
    assert!(visits.iter().all(|r| r[4] == "Negative"));
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    assert!(truth["theta"].is_null());
}

#[test]
fn fit_without_features_reports_baseline_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "sim.toml", SIM_SPEC);
    let sim = dir.path().join("sim");
    ok(&housefs(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&sim),
    ]));
    let features = write(dir.path(), "features.toml", "features = []\n");
    let input = sim.join("synthetic_visits.csv");
    let run = |threads: &str, out: &Path| {
        ok(&housefs(&[
            "--threads",
            threads,
            "fit",
            "--input",
            s(&input),
            "--features",
            s(&features),
            "--out",
            s(out),
            "--restarts",
            "2",
            "--ci-samples",
            "4000",
            "--seed",
            "3",
            "--tranche",
            "T2",
        ]))
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run("1", &a);
    run("4", &b);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));

    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("fit_T2.json")).unwrap()).unwrap();
    assert_eq!(fit["schema_version"], 1);
    assert_eq!(fit["theta_map"].as_array().unwrap().len(), 4);
    assert_eq!(fit["covariance"].as_array().unwrap().len(), 4);
    let labels: Vec<&str> = fit["report"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["1-q", "p_2", "p_3", "p_4", "p_5", "p_6"]);
    assert!(!a.join("fit_T3.json").exists());

    let baseline = csv_rows(&a.join("baseline_by_tranche.csv"));
    assert_eq!(baseline.len(), 6);
    let p2 = &baseline[1];
    let (lower, upper): (f64, f64) = (p2[6].parse().unwrap(), p2[7].parse().unwrap());
    assert!(
        lower < 35.0 && 35.0 < upper,
        "p_2 interval ({lower}, {upper})"
    );
    assert_eq!(csv_rows(&a.join("effects_by_tranche.csv")).len(), 0);
}

#[test]
fn malformed_feature_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "visits.csv", FIXTURE);
    let out = dir.path().join("out");
    for bad in [
        "features = [\"age_2_11\"]\nexternal = [\"region\"]\n",
        "features = [\"age_2_11\", \"age_2_11\"]\n",
        "features = 3\n",
        "schema_version = 9\nfeatures = []\n",
    ] {
        let features = write(dir.path(), "features.toml", bad);
        let res = housefs(&[
            "fit",
            "--input",
            s(&input),
            "--features",
            s(&features),
            "--out",
            s(&out),
        ]);
        assert_eq!(res.status.code(), Some(2), "config {bad:?}");
        assert!(!res.stderr.is_empty());
    }
}

#[test]
fn unknown_feature_name_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "visits.csv", FIXTURE);
    let features = write(
        dir.path(),
        "features.toml",
        "features = [\"region\"]\nexternal = [\"region\"]\n",
    );
    let res = housefs(&[
        "fit",
        "--input",
        s(&input),
        "--features",
        s(&features),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn malformed_input_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "visits.csv",
        &FIXTURE.replace("2020-10-10,38", "2020-13-10,38"),
    );
    let res = housefs(&[
        "explore",
        "--input",
        s(&input),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("data row 4"));

    let res = housefs(&[
        "explore",
        "--input",
        s(&dir.path().join("missing.csv")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(1));

    let res = housefs(&["explore", "--bogus"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn solve_prints_full_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let features = write(dir.path(), "features.toml", "features = []\n");
    let res = housefs(&[
        "solve",
        "--features",
        s(&features),
        "--theta=-3,-1,0,0",
        "--household",
        "4",
    ]);
    ok(&res);
    let text = String::from_utf8(res.stdout).unwrap();
    let probs: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 16);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // Exchangeable members: every single-positive outcome is equally likely.
    for y in [2, 4, 8] {
        assert!((probs[y] - probs[1]).abs() < 1e-15);
    }

    let res = housefs(&[
        "solve",
        "--features",
        s(&features),
        "--theta=1,2",
        "--household",
        "2",
    ]);
    assert_eq!(res.status.code(), Some(2));
}
