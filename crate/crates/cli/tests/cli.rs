use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "study": {"scenario": "acc", "grid": [[25, 0.0, 120.0], [15, 0.0, 35.0], [21, 0.0, 100.0]]},
  "sim": {"dt": 0.01, "horizon": 10.0}
}"#;

fn hcbf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcbf"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    fs::write(&path, config).unwrap();
    (dir, path)
}

#[test]
fn pipeline_writes_every_artifact_and_summarizes() {
    let (dir, _) = setup(TINY);
    let o = hcbf(&["pipeline", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = dir.path().join("out");
    for f in [
        "S_dry_ice.hcbf",
        "U_dry_ice.hcbf",
        "backunsafe_dry_ice.hcbf",
        "h_dry_ice.hcbf",
        "h_dry_ice.json",
        "preconditions.json",
        "traj_nominal.csv",
        "traj_refined.csv",
        "traj_switch-unaware.csv",
        "traj_global-cbf.csv",
        "verdict_refined.json",
        "phase.svg",
        "h.svg",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    for row in ["refined", "switch-unaware", "global-cbf", "position_at_horizon", "assumption 3"] {
        assert!(stdout.contains(row), "summary lacks {row}:\n{stdout}");
    }
    let verdict: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verdict_switch-unaware.json")).unwrap()).unwrap();
    assert_eq!(verdict["safe"], false);
    let verdict: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verdict_refined.json")).unwrap()).unwrap();
    assert_eq!(verdict["safe"], true);
}

#[test]
fn refine_reuses_matching_artifacts_unless_forced() {
    let (dir, _) = setup(TINY);
    let first = hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", text(&first));
    let h = dir.path().join("out/h_dry_ice.hcbf");
    let bytes = fs::read(&h).unwrap();

    let again = hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert!(text(&again).contains("cache hit"), "{}", text(&again));

    let forced = hcbf(&["refine", "--config", "tiny.json", "--out", "out", "--force"], dir.path());
    assert_eq!(forced.status.code(), Some(0));
    assert!(!text(&forced).contains("cache hit"));
    assert_eq!(fs::read(&h).unwrap(), bytes, "refinement is deterministic");
}

#[test]
fn simulate_without_refine_names_the_missing_step() {
    let (dir, _) = setup(TINY);
    let o = hcbf(&["simulate", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("hcbf refine --config tiny.json"), "{}", text(&o));
}

#[test]
fn simulate_rejects_artifacts_from_another_configuration() {
    let (dir, path) = setup(TINY);
    assert_eq!(hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path()).status.code(), Some(0));
    fs::write(&path, TINY.replace("\"scenario\": \"acc\"", "\"scenario\": \"acc\", \"t_h\": 2.0")).unwrap();
    let o = hcbf(&["simulate", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("different configuration"), "{}", text(&o));
}

#[test]
fn simulation_output_is_byte_identical_across_runs() {
    let (dir, _) = setup(TINY);
    assert_eq!(hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path()).status.code(), Some(0));
    let sim = |seed: &str| {
        let o = hcbf(&["simulate", "--config", "tiny.json", "--out", "out", "--policy", "refined", "--seed", seed], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        fs::read(dir.path().join("out/traj_refined.csv")).unwrap()
    };
    assert_eq!(sim("1"), sim("2"));
    let verdict = fs::read_to_string(dir.path().join("out/verdict_refined.json")).unwrap();
    assert!(verdict.contains("\"seed\": 2"));
    assert!(!dir.path().join("out/traj_global-cbf.csv").exists());
}

#[test]
fn provided_grids_skip_refinement() {
    let (dir, _) = setup(TINY);
    assert_eq!(hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path()).status.code(), Some(0));
    fs::copy(dir.path().join("out/h_dry_ice.hcbf"), dir.path().join("given.hcbf")).unwrap();
    let with_grid = TINY.replacen('{', r#"{"grids": {"dry->ice": "given.hcbf"}, "#, 1);
    fs::write(dir.path().join("given.json"), with_grid).unwrap();
    let o = hcbf(&["pipeline", "--config", "given.json", "--out", "other"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("using provided grid"));
    assert!(!dir.path().join("other/h_dry_ice.hcbf").exists());
    assert!(dir.path().join("other/traj_refined.csv").is_file());
}

#[test]
fn bad_configs_exit_with_status_two() {
    let (dir, _) = setup(r#"{"study": {"scenario": "acc"}, "typo": true}"#);
    let o = hcbf(&["refine", "--config", "tiny.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("tiny.json"), r#"{"study": {"scenario": "acc"}, "grids": {"ice->dry": "x.hcbf"}}"#).unwrap();
    let o = hcbf(&["refine", "--config", "tiny.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("not a transition"), "{}", text(&o));

    let o = hcbf(&["refine", "--scenario", "boat"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = hcbf(&["refine", "--config", "absent.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_marks_switches_and_leaves_nothing_behind_on_bad_input() {
    let (dir, _) = setup(TINY);
    assert_eq!(hcbf(&["pipeline", "--config", "tiny.json", "--out", "out"], dir.path()).status.code(), Some(0));
    let out = dir.path().join("out");
    let svg = fs::read_to_string(out.join("phase.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed svg");
    let switch_t: f64 = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("switch") && n.attribute("data-policy") == Some("refined"))
        .and_then(|n| n.attribute("data-t"))
        .expect("refined switch marker")
        .parse()
        .unwrap();
    let verdict: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verdict_refined.json")).unwrap()).unwrap();
    let guard_t = verdict["switch_states"][0]["t"].as_f64().unwrap();
    assert!((switch_t - guard_t).abs() < 1e-9, "{switch_t} vs {guard_t}");
    roxmltree::Document::parse(&fs::read_to_string(out.join("h.svg")).unwrap()).expect("well-formed svg");

    let fresh = dir.path().join("bad");
    fs::create_dir(&fresh).unwrap();
    fs::copy(out.join("traj_refined.csv"), fresh.join("traj_refined.csv")).unwrap();
    fs::write(fresh.join("traj_nominal.csv"), "").unwrap();
    let o = hcbf(&["plot", "--config", "tiny.json", "--out", "bad"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(!fresh.join("phase.svg").exists() && !fresh.join("h.svg").exists());
}

#[test]
fn check_reports_preconditions() {
    let (dir, _) = setup(TINY);
    assert_eq!(hcbf(&["refine", "--config", "tiny.json", "--out", "out"], dir.path()).status.code(), Some(0));
    let o = hcbf(&["check", "--config", "tiny.json", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/preconditions.json")).unwrap()).unwrap();
    assert_eq!(report["all_passed"], true);
    assert_eq!(report["assumptions"].as_array().unwrap().len(), 3);
}
