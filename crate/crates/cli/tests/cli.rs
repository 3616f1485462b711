use std::path::Path;
use std::process::{Command, Output};

use episcan::io::{read_field, read_report, read_table_json};

fn episcan(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_episcan"))
        .args(args)
        .current_dir(dir)
        .env_remove("EPISCAN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn generate(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["generate", "--n", "10", "--d", "2", "--a", "0.2", "--seed", "1", "--out", name];
    args.extend_from_slice(extra);
    let out = episcan(&args, dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_the_full_lattice_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--n", "30", "--d", "2", "--a", "0.2", "--seed", "1", "--out", "a.csv"];
    assert_eq!(code(&episcan(&args, dir.path())), 0);
    let mut again = args;
    again[10] = "b.csv";
    assert_eq!(code(&episcan(&again, dir.path())), 0);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 901);
    let field = read_field(dir.path().join("a.csv")).unwrap();
    assert_eq!(field.shape().dims(), &[30, 30]);
}

#[test]
fn generated_change_set_has_the_expected_volume() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["generate", "--n", "30", "--d", "2", "--a", "0.2", "--seed", "4"];
    let mut plain = base.to_vec();
    plain.extend(["--out", "plain.csv"]);
    let mut shifted = base.to_vec();
    shifted.extend(["--delta", "1", "--change-set", "0.05,0.1:0.95,1.0", "--out", "shift.csv"]);
    assert_eq!(code(&episcan(&plain, dir.path())), 0);
    assert_eq!(code(&episcan(&shifted, dir.path())), 0);
    let a = read_field(dir.path().join("plain.csv")).unwrap();
    let b = read_field(dir.path().join("shift.csv")).unwrap();
    let changed = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    assert_eq!(changed, 27 * 27);
}

#[test]
fn test_exit_codes_follow_the_decision() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "null.csv", &[]);
    generate(dir.path(), "shift.csv", &["--delta", "3", "--change-set", "0.1,0.1:0.9,0.85"]);
    let common = ["--stat", "cvm", "--kernel", "ar", "--q", "2", "--reps", "99", "--alpha", "0.05", "--mu", "global", "--seed", "3"];

    let mut args = vec!["test", "--input", "shift.csv", "--out", "shift.json"];
    args.extend(common);
    let out = episcan(&args, dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(dir.path().join("shift.json")).unwrap();
    assert_eq!(report.decision, episcan::Decision::Reject);
    assert!(report.statistic >= report.threshold);

    let mut args = vec!["test", "--input", "null.csv", "--out", "null.json"];
    args.extend(common);
    let out = episcan(&args, dir.path());
    let report = read_report(dir.path().join("null.json")).unwrap();
    let want = if report.decision == episcan::Decision::Reject { 3 } else { 0 };
    assert_eq!(code(&out), want);
    assert_eq!(report.decision, report.recomputed_decision());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "f.csv", &[]);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--alpha", "1.5"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--stat", "median"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--q", "0"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--eps1", "0.1"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--weight", "cauchy:0:1"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test"], dir.path())), 1);
    assert_eq!(code(&episcan(&["test", "--input", "f.csv", "--reps", "many"], dir.path())), 1);
    assert_eq!(code(&episcan(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&episcan(&["--help"], dir.path())), 0);

    assert_eq!(code(&episcan(&["test", "--input", "absent.csv"], dir.path())), 2);
    std::fs::write(dir.path().join("dup.csv"), "i1,i2,x1\n1,1,0\n1,2,1\n1,1,2\n2,1,0\n2,2,1\n").unwrap();
    let out = episcan(&["test", "--input", "dup.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate lattice point [1, 1]"));
    std::fs::write(dir.path().join("nan.csv"), "i1,x1\n1,0\n2,nan\n").unwrap();
    assert_eq!(code(&episcan(&["test", "--input", "nan.csv"], dir.path())), 2);
}

#[test]
fn reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "f.csv", &[]);
    let run = |out: &str| {
        let args = ["test", "--input", "f.csv", "--kernel", "ma", "--q", "2", "--reps", "49", "--seed", "42", "--emit-bootstrap", "--out", out];
        assert!([0, 3].contains(&code(&episcan(&args, dir.path()))));
        let mut r = read_report(dir.path().join(out)).unwrap();
        r.runtime_ms = 0;
        r
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    assert_eq!(a.bootstrap_sample.as_ref().map(Vec::len), Some(49));
}

#[test]
fn config_file_sits_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "f.csv", &[]);
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[test]\ninput = \"f.csv\"\nreps = 19\nalpha = 0.2\nkernel = \"ma\"\nq = 4\nweight = [\"uniform:-3:3\"]\n",
    )
    .unwrap();
    let out = episcan(&["--config", "cfg.toml", "test", "--alpha", "0.1", "--out", "r.json"], dir.path());
    assert!([0, 3].contains(&code(&out)), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_report(dir.path().join("r.json")).unwrap();
    assert_eq!(r.replicates, 19);
    assert_eq!(r.alpha, 0.1);
    assert_eq!(r.kernel.q, 4);
    assert_eq!(r.kernel.kind, episcan::KernelKind::BartlettMa);
    assert_eq!(r.weight.unwrap().coords[0], episcan::CoordinateWeight::Uniform { lo: -3.0, hi: 3.0 });

    std::fs::write(dir.path().join("bad.toml"), "[test]\nreplicates = 19\n").unwrap();
    assert_eq!(code(&episcan(&["--config", "bad.toml", "test"], dir.path())), 1);
}

#[test]
fn simulate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate", "--scenario", "mean", "--delta", "1", "--change-set", "0.1,0.1:0.9,0.85", "--n", "8", "--a", "0.2",
        "--kernel", "ar,ma", "--q", "2,3", "--alpha", "0.05,0.1", "--mu", "global", "--runs", "2", "--reps", "19", "--seed", "7",
        "--out", "tables",
    ];
    let out = episcan(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("tables/rejections.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scenario,estimator,kernel,a,n,q,alpha,rejections,runs,frequency"));
    assert_eq!(lines.count(), 8);
    let table = read_table_json(dir.path().join("tables/rejections.json")).unwrap();
    assert_eq!(table.config.runs, 2);
    assert!(table.shared_data_across_grid);
}

#[test]
fn simulate_smoke_and_grid_errors() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = ["simulate", "--scenario", "null", "--n", "8", "--a", "0.2", "--q", "2", "--alpha", "0.05", "--runs", "1", "--reps", "9"];
    let out = episcan(&smoke, dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    for bad in [
        vec!["simulate", "--scenario", "null", "--n", "8", "--a", "0.2", "--q", "0", "--runs", "1"],
        vec!["simulate", "--scenario", "null", "--n", "8", "--a", "1.5", "--runs", "1"],
        vec!["simulate", "--scenario", "mean", "--n", "8", "--a", "0.2", "--runs", "1"],
        vec!["simulate", "--scenario", "skew", "--n", "8", "--a", "0.2", "--change-set", "0.5:0.4", "--runs", "1"],
        vec!["simulate", "--scenario", "null", "--n", "8", "--a", "0.2", "--alpha", "0,0.1", "--runs", "1"],
    ] {
        assert_eq!(code(&episcan(&bad, dir.path())), 1, "{bad:?}");
    }
}

#[test]
fn generate_rejects_inconsistent_flags() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        vec!["generate", "--n", "5", "--a", "0.2", "--delta", "1"],
        vec!["generate", "--n", "5", "--a", "0.2", "--skew"],
        vec!["generate", "--n", "5", "--a", "0.2", "--change-set", "0.1,0.1:0.5,0.5"],
        vec!["generate", "--n", "5", "--a", "1.0"],
        vec!["generate", "--n", "0", "--a", "0.2"],
    ] {
        assert_eq!(code(&episcan(&bad, dir.path())), 1, "{bad:?}");
    }
    let out = episcan(&["generate", "--n", "5", "--a", "0.2", "--skew", "--change-set", "0.2,0.2:0.8,0.8"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 26);
}

#[test]
fn thread_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_episcan"))
            .args(["generate", "--n", "4", "--a", "0.1"])
            .current_dir(dir.path())
            .env("EPISCAN_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("zero")), 1);
}
