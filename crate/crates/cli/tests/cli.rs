use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const COARSE_CANONICAL: &str = "model = lq
param.s_x = 0
param.kappa_f = 0.1
param.q0 = 1
stopping = canonical
n_x = 6
n_y = 11
T = 0.5
dt = 0.004
";

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_major-mfg"));
    cmd.env_remove("MFGMP_OUT");
    cmd
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], file: &Path, out: &Path) -> Output {
    bin().args(args).arg(file).arg("--out").arg(out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn zero_model_writes_all_zero_snapshots() {
    let tmp = TempDir::new().unwrap();
    let file = write(tmp.path(), "zero.scenario", "mode = SYSTEM\nmodel = zero\nn_x = 3\nn_y = 5\nT = 0.05\ndt = 0.01\nsnapshot_every = 2\n");
    let out = tmp.path().join("out");
    let o = run(&["run"], &file, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(out.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["step_000000.csv", "step_000002.csv", "step_000004.csv", "step_000005.csv"]);
    for name in &names {
        let text = fs::read_to_string(out.join("snapshots").join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# k=2 d=1 n_x=3 3 n_y=5"));
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header, ["node", "x1", "x2", "y1", "phi", "u1", "u2", "alpha1", "beta"]);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 45);
        for row in rows {
            let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
            assert!(cells[4..].iter().all(|v| *v == 0.0), "{row}");
        }
    }
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 7);
    assert!(out.join("manifest.txt").exists());
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("final_sup_phi = 0"));
}

#[test]
fn two_lambdas_are_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let file = write(tmp.path(), "l.scenario", "mode = LAMBDA_SWEEP\nmodel = lq\nn_x = 4\nn_y = 5\nT = 0.2\ndt = 0.004\nlambdas = 1 10\n");
    let o = run(&["sweep"], &file, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 3 values"), "{}", stderr(&o));
}

#[test]
fn parse_errors_exit_with_two_and_name_the_line() {
    let tmp = TempDir::new().unwrap();
    let file = write(tmp.path(), "typo.scenario", "mode = SYSTEM\nmodel = lq\n# comment\nsnapshot_evry = 3\n");
    let o = run(&["run"], &file, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4, key `snapshot_evry`: unknown key"), "{}", stderr(&o));
    let file = write(tmp.path(), "param.scenario", "mode = SYSTEM\nmodel = lq\nparam.kapa_f = 3\n");
    let o = run(&["check"], &file, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    let file = write(tmp.path(), "sys.scenario", "mode = SYSTEM\nmodel = zero\n");
    let o = run(&["sweep"], &file, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn obstacle_run_respects_the_obstacle() {
    let tmp = TempDir::new().unwrap();
    let file = write(tmp.path(), "obs.scenario", &format!("mode = OBSTACLE\n{COARSE_CANONICAL}"));
    let out = tmp.path().join("out");
    let o = run(&["run", "--quiet"], &file, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let report = fs::read_to_string(out.join("obstacle_report.csv")).unwrap();
    let footer = report.lines().last().unwrap();
    let violation: f64 = footer
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("max_violation="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(violation <= 1e-12, "{footer}");
    assert_eq!(report.lines().next().unwrap(), "node,x1,x2,y1,contact,residual");
}

#[test]
fn blow_up_exits_with_one_and_keeps_the_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let file = write(
        tmp.path(),
        "boom.scenario",
        "mode = SYSTEM\nmodel = scalar\nk = 1\nn_x = 3\nn_y = 5\nT = 1\ndt = 0.01\nparam.f0 = -1e9\n",
    );
    let out = tmp.path().join("out");
    let o = run(&["run"], &file, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("blow-up"), "{}", stderr(&o));
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(diag.lines().count() > 2);
    assert!(out.join("snapshots/step_000000.csv").exists());
}

#[test]
fn check_reports_cfl_fd_and_passes_valid_scenarios() {
    let tmp = TempDir::new().unwrap();
    let base = "mode = SYSTEM\nmodel = lq\nn_x = 6\nn_y = 11\nT = 0.2\n";
    let good = write(tmp.path(), "good.scenario", &format!("{base}dt = 0.004\n"));
    let o = bin().arg("check").arg(&good).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")), "{}", stdout(&o));

    let fast = write(tmp.path(), "fast.scenario", &format!("{base}dt = 0.1\n"));
    let o = bin().arg("check").arg(&fast).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("FAIL cfl: dt = 0.1 exceeds dt_max ="), "{text}");

    let corrupt = write(tmp.path(), "corrupt.scenario", &format!("{base}dt = 0.004\nparam.grad_scale = 1.1\n"));
    let o = bin().arg("check").arg(&corrupt).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL fd_gradp"), "{}", stdout(&o));
}

#[test]
fn output_root_comes_from_the_environment_and_manifests_rerun() {
    let tmp = TempDir::new().unwrap();
    let file = write(tmp.path(), "pen.scenario", &format!("mode = PENALIZED\n{COARSE_CANONICAL}seed = 4\n"));
    let root = tmp.path().join("root");
    let o = bin().arg("run").arg(&file).arg("--seed").arg("11").env("MFGMP_OUT", &root).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = root.join("pen");
    let manifest = fs::read_to_string(first.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 11\n"));
    assert!(manifest.contains("stop.epsilon = 0.01\n"));

    let second = tmp.path().join("again");
    let o = run(&["run"], &first.join("manifest.txt"), &second);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["manifest.txt", "diagnostics.csv", "summary.txt", "snapshots/step_000125.csv"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
}
