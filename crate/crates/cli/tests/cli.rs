use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynakey_core::pipeline::PipelineParams;
use dynakey_core::sim::SceneConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynakey"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn simulate(cfg: &str, dir: &Path) {
    let o = run(&["simulate", s(&config(cfg)), s(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bundled_configs_match_presets() {
    let load = |n: &str| SceneConfig::from_toml_str(&fs::read_to_string(config(n)).unwrap()).unwrap();
    assert_eq!(load("walking.toml"), SceneConfig::benchmark(42));
    assert_eq!(load("carrying.toml"), SceneConfig::carried_object(1));
    assert_eq!(load("static.toml"), SceneConfig::static_only(7, 50, 200));
    let params = PipelineParams::from_toml_str(&fs::read_to_string(config("params.toml")).unwrap()).unwrap();
    assert_eq!(params, PipelineParams::default());
}

#[test]
fn simulate_exports_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = run(&["simulate", s(&config("walking.toml")), s(a.path())]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("dynamic fraction"));
    simulate("walking.toml", b.path());
    for needed in ["groundtruth.txt", "depth.txt", "camera.txt"] {
        assert!(a.path().join(needed).is_file(), "{needed}");
    }
    assert!(fs::read_dir(a.path().join("masks")).unwrap().count() == 30);
    assert_eq!(files(a.path()), files(b.path()));

    let c = tempfile::tempdir().unwrap();
    let o = run(&["simulate", s(&config("walking.toml")), s(c.path()), "--seed", "7"]);
    assert!(o.status.success());
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn malformed_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(config("walking.toml")).unwrap().replace("outlier_rate = 0.1", "outlier_rate = 1.5");
    fs::write(&bad, text).unwrap();
    let o = run(&["simulate", s(&bad), s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outlier_rate"));

    fs::write(&bad, "schema_version = 1\nseed = 1\nframes = 3\nframez = 4\n").unwrap();
    let o = run(&["simulate", s(&bad), s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("framez"));
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", s(&dir.path().join("nope.toml")), s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["classify", s(&dir.path().join("nope")), s(&dir.path().join("out.csv"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn classify_static_scene_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate("static.toml", &data);
    let out = dir.path().join("run.csv");
    let o = run(&["classify", s(&data), s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_observation"]["static"]["precision"], 1.0);
    assert_eq!(summary["per_observation"]["static"]["recall"], 1.0);
    assert_eq!(summary["config"]["seed"], 42);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("frame_ts,idx,u,v,z,reproj_error,p_s,p_g,omega,p_move,bel,state,provenance,flags\n"));
    let statics = fs::read_to_string(dir.path().join("run.static.csv")).unwrap();
    assert_eq!(statics.lines().count(), csv.lines().count());
}

#[test]
fn classify_is_deterministic_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate("walking.toml", &data);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&["classify", s(&data), s(out), "--seed", "42"]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("c.csv");
    let o = run(&["classify", s(&data), s(&c), "--epsilon", "0.05", "--rho", "0.5", "--decision-threshold", "0.6"]);
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["classifier"]["epsilon"], 0.05);
    assert_eq!(summary["config"]["oim"]["rho"], 0.5);

    let o = run(&["classify", s(&data), s(&c), "--epsilon", "0.9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon"));
}

#[test]
fn no_oim_flag_removes_oim_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate("carrying.toml", &data);
    let with = dir.path().join("with.csv");
    let without = dir.path().join("without.csv");
    assert!(run(&["classify", s(&data), s(&with)]).status.success());
    assert!(run(&["classify", s(&data), s(&without), "--no-oim"]).status.success());
    let provenance = |p: &Path| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').nth(12).unwrap().to_string()).collect()
    };
    assert!(provenance(&with).iter().any(|p| p == "oim"));
    assert!(provenance(&without).iter().all(|p| p == "classifier"));
}

#[test]
fn ransac_path_runs_when_poses_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate("carrying.toml", &data);
    let out = dir.path().join("r.csv");
    let o = run(&["classify", s(&data), s(&out), "--ignore-poses", "--ransac-iters", "500"]);
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["f_from_ransac"], 11);
    assert_eq!(summary["config"]["ransac"]["iterations"], 500);
}

const GT: &str = "# ground truth
1.0 0.0 0.0 0.0 0 0 0 1
1.1 0.1 0.0 0.0 0 0 0 1
1.2 0.2 0.1 0.0 0 0 0.0499792 0.9987503
1.3 0.3 0.1 0.1 0 0 0.0998334 0.9950042
";

const EST: &str = "1.0 0.0 0.0 0.0 0 0 0 1
1.1 0.11 0.0 0.0 0 0 0 1
1.2 0.2 0.12 0.0 0 0 0.0499792 0.9987503
1.3 0.3 0.1 0.1 0 0 0.0998334 0.9950042
";

const BASE: &str = "1.0 0.0 0.0 0.0 0 0 0 1
1.1 0.2 0.0 0.0 0 0 0 1
1.2 0.2 0.3 0.0 0 0 0.0499792 0.9987503
1.3 0.5 0.1 0.1 0 0 0 1
";

#[test]
fn evaluate_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let est = dir.path().join("est.txt");
    let base = dir.path().join("base.txt");
    fs::write(&gt, GT).unwrap();
    fs::write(&est, EST).unwrap();
    fs::write(&base, BASE).unwrap();

    let o = run(&["evaluate", s(&gt), s(&gt), "--json"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["ate_rmse"], 0.0);
    assert_eq!(r["rpe_trans_rmse"], 0.0);
    assert_eq!(r["rpe_rot_rmse"], 0.0);
    assert!(r["improvement_vs_baseline"].is_null());

    let report = dir.path().join("report.json");
    let o = run(&["evaluate", s(&est), s(&gt), "--baseline", s(&base), "--sequence", "walking", "--out", s(&report)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(text.contains("walking"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["sequence", "ate_rmse", "rpe_trans_rmse", "rpe_rot_rmse", "improvement_vs_baseline"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    for key in ["ate", "rpe_trans", "rpe_rot"] {
        assert!(r["improvement_vs_baseline"][key].as_f64().unwrap() > 0.0, "{key}");
    }

    let o = run(&["report", s(&report), s(&report)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("walking").count(), 2);

    fs::write(&est, "1.0 0.0 zero 0.0 0 0 0 1\n").unwrap();
    let o = run(&["evaluate", s(&est), s(&gt)]);
    assert_eq!(o.status.code(), Some(2));
}
