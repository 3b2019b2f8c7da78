use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_interpolant-lab");
const SUBCOMMANDS: [&str; 7] = [
    "schedule",
    "drift-check",
    "lip",
    "kl",
    "gmm-bench",
    "grf-bench",
    "sde-check",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("INTERPOLANT_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let cases = std::iter::once(("help", vec!["--help"])).chain(SUBCOMMANDS.iter().map(|s| (*s, vec![*s, "--help"])));
    for (name, args) in cases {
        let o = run(&args);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &text).unwrap();
        } else {
            let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(
                text, expected,
                "help text of '{name}' changed; rerun with UPDATE_GOLDEN=1"
            );
        }
    }
}

#[test]
fn subcommand_help_lists_defaults() {
    for sub in SUBCOMMANDS {
        let text = String::from_utf8(run(&[sub, "--help"]).stdout).unwrap();
        for flag in ["--seed", "--threads", "--out", "--config"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
        let options = text.lines().filter(|l| l.trim_start().starts_with("--")).count();
        let defaults = text.matches("[default: ").count();
        assert_eq!(
            options - 1,
            defaults,
            "{sub}: every key except --config shows a default"
        );
    }
}

#[test]
fn designed_gaussian_table_has_boundary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&[
        "schedule",
        "--kind",
        "designed-gaussian",
        "--lambda-star",
        "0.01",
        "--grid",
        "101",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("schedule.csv"));
    assert_eq!(header, ["t", "alpha", "beta", "alpha_dot", "beta_dot", "epsilon"]);
    assert_eq!(rows.len(), 101);
    let alpha = column(&header, &rows, "alpha");
    let beta = column(&header, &rows, "beta");
    assert_eq!((alpha[0], beta[0]), (1.0, 0.0));
    assert_eq!((alpha[100], beta[100]), (0.0, 1.0));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["subcommand"], "schedule");
    assert_eq!(cfg["params"]["lambda-star"], 0.01);
}

#[test]
fn approx_minlip_beta_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&[
        "schedule",
        "--kind",
        "approx-minlip-gmm",
        "--scale-m",
        "5",
        "--grid",
        "201",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("schedule.csv"));
    assert_eq!(rows.len(), 201);
    let t = column(&header, &rows, "t");
    let beta = column(&header, &rows, "beta");
    let m: f64 = 5.0;
    for (ti, bi) in t.iter().zip(&beta) {
        let exact = (-((1.0 - ti) + ti * (-m * m).exp()).ln()).sqrt() / m;
        assert!((bi - exact).abs() < 1e-12, "t = {ti}: {bi} vs {exact}");
    }
}

#[test]
fn gmm_bench_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&[
        "gmm-bench",
        "--seed",
        "7",
        "--threads",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(
        header,
        [
            "schedule",
            "rk4_steps",
            "seed",
            "minor_weight",
            "em_iterations",
            "separation"
        ]
    );
    assert_eq!(rows.len(), 6);
    for w in column(&header, &rows, "minor_weight") {
        assert!((0.0..=0.5).contains(&w));
    }
    assert!(out.join("config.json").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "grid = 11\nkind = \"linear\"\n").unwrap();
    let a = dir.path().join("a");
    let o = run(&[
        "schedule",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_csv(&a.join("schedule.csv")).1.len(), 11);
    let b = dir.path().join("b");
    let o = run(&[
        "schedule",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "21",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&b.join("schedule.csv"));
    assert_eq!(rows.len(), 21);
    assert_eq!(column(&header, &rows, "beta")[10], 0.5);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "grid = 11\nbogus = 1\n").unwrap();
    let o = run(&[
        "schedule",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "schedule",
        "--kind",
        "designed-gaussian",
        "--lambda-star=-1",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda-star"), "{}", stderr(&o));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let o = run(&["schedule", "--out", file.join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn single_thread_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(&[
                "sde-check",
                "--seed",
                "11",
                "--threads",
                "1",
                "--n",
                "2000",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read_to_string(out.join("results.csv")).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn threads_fall_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let o = Command::new(BIN)
        .args([
            "kl",
            "--mc-per-node",
            "64",
            "--quad-nodes",
            "33",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("INTERPOLANT_LAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["threads"], 1);
}
