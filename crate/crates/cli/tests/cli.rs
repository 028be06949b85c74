use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn metaforge(ws: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metaforge"));
    cmd.env("METAFORGE_WORKSPACE", ws).env("RUST_LOG", "warn").arg("--threads").arg("1");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

/// Small, quick settings for the end-to-end runs.
const SMALL: &str = r#"
[tmm]
decimal_digits = 30

[sampler]
samples = 12
seed = 3

[surrogate]
max_iterations = 5

[pso]
population = 4
max_iterations = 2

[mass_search]
retries = 0

[band_plan]
widths_hz = [1000.0]
centers_per_width = 3

[inn]
max_iterations = 3
min_rows = 1
batch_size = 4
"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn sweep_finds_the_first_axial_resonance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[tmm]\ndecimal_digits = 30\n").unwrap();
    let csv = ok(metaforge(dir.path(), Some(&cfg), &["sweep", "--mode", "axial"]));
    let peaks: Vec<f64> = csv.lines().skip(1).filter(|l| l.ends_with(",true")).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(peaks.len(), 1);
    let expected = (193e9f64 / 1800.0).sqrt() / 18.0;
    assert!((peaks[0] - expected).abs() < 800.0 / 79.0, "{peaks:?} vs {expected}");
    assert!(fs::read_dir(dir.path().join("runs")).unwrap().count() >= 1);
}

#[test]
fn sweep_of_a_flush_design_file_matches_the_bare_pipe_peak() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[tmm]\ndecimal_digits = 30\n").unwrap();
    let design = dir.path().join("uniform.json");
    let d = r#"{"d":[0.16,0.16,0.16,0.16,0.16,0.16,0.16,0.16,0.16,0.16],"w_ring":[0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1],"w_gap":[0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.01]}"#;
    fs::write(&design, d).unwrap();
    let a = ok(metaforge(dir.path(), Some(&cfg), &["sweep", "--mode", "axial", "--design", design.to_str().unwrap()]));
    let peak_rows = |csv: &str| csv.lines().filter(|l| l.ends_with(",true")).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    let b = ok(metaforge(dir.path(), Some(&cfg), &["sweep", "--mode", "axial"]));
    assert_eq!(peak_rows(&a), peak_rows(&b));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[tmm]\ndecimal_digits = 8\n").unwrap();
    let o = metaforge(dir.path(), Some(&cfg), &["sweep", "--mode", "axial"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tmm.decimal_digits"));
    fs::write(&cfg, "mystery = true\n").unwrap();
    assert_eq!(metaforge(dir.path(), Some(&cfg), &["sweep", "--mode", "axial"]).status.code(), Some(2));
    assert_eq!(metaforge(dir.path(), None, &["verify", "--design", "x.json", "--band", "9:1"]).status.code(), Some(2));
    assert_eq!(metaforge(dir.path(), None, &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn infeasible_designs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("d.json");
    fs::write(&design, r#"{"d":[0.5],"w_ring":[0.1],"w_gap":[0.01]}"#).unwrap();
    let o = metaforge(dir.path(), None, &["verify", "--design", design.to_str().unwrap(), "--band", "100:200"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_inputs_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = metaforge(dir.path(), None, &["train-surrogates", "--dataset", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn last_line(s: &str) -> String {
    s.lines().last().unwrap().trim().to_string()
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ws_a = dir.path().join("a");
    let ws_b = dir.path().join("b");

    let data_a = last_line(&ok(metaforge(&ws_a, Some(&cfg), &["gen-samples"])));
    let data_b = last_line(&ok(metaforge(&ws_b, Some(&cfg), &["gen-samples"])));
    for f in ["inputs.csv", "targets.bin", "targets.json"] {
        assert_eq!(fs::read(Path::new(&data_a).join(f)).unwrap(), fs::read(Path::new(&data_b).join(f)).unwrap(), "{f}");
    }
    assert!(Path::new(&data_a).starts_with(ws_a.join("datasets")));

    let suite = last_line(&ok(metaforge(&ws_a, Some(&cfg), &["train-surrogates", "--dataset", &data_a])));
    let suite_b = last_line(&ok(metaforge(&ws_b, Some(&cfg), &["train-surrogates", "--dataset", &data_b])));
    for entry in fs::read_dir(&suite).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(Path::new(&suite).join(&name)).unwrap(), fs::read(Path::new(&suite_b).join(&name)).unwrap());
    }

    let design = last_line(&ok(metaforge(&ws_a, Some(&cfg), &["optimize-band", "--surrogates", &suite])));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&design).with_file_name("result.json")).unwrap()).unwrap();
    assert_eq!(result["verified"].as_array().unwrap().len(), 3);

    let inverse = last_line(&ok(metaforge(&ws_a, Some(&cfg), &["gen-inverse-samples", "--surrogates", &suite])));
    let text = fs::read_to_string(&inverse).unwrap();
    assert!(text.starts_with("x_1,"));
    assert!(text.lines().next().unwrap().ends_with("omega_lo,omega_hi,mass_kg,verified"));
    assert!(ws_a.join("runs").read_dir().unwrap().any(|e| e.unwrap().path().join("manifest.json").exists()));
}

/// Rows of in-bounds designs with made-up bands, enough to drive
/// the INN commands.
fn handmade_inverse(path: &Path) {
    let mut text: Vec<String> = vec![(1..=30).map(|i| format!("x_{i}")).chain(["omega_lo", "omega_hi", "mass_kg", "verified"].map(String::from)).collect::<Vec<_>>().join(",")];
    for r in 0..8 {
        let t = r as f64 / 7.0;
        let mut fields: Vec<String> = Vec::new();
        fields.extend((0..10).map(|k| format!("{}", 0.17 + 0.01 * ((r + k) % 10) as f64)));
        fields.extend((0..10).map(|k| format!("{}", 0.08 + 0.02 * ((r * 3 + k) % 10) as f64)));
        fields.extend((0..10).map(|k| format!("{}", 0.002 + 0.001 * ((r + 2 * k) % 10) as f64)));
        fields.push(format!("{}", 6000.0 + 500.0 * t));
        fields.push(format!("{}", 6500.0 + 800.0 * t));
        fields.push("10.0".into());
        fields.push("true".into());
        text.push(fields.join(","));
    }
    fs::write(path, text.join("\n") + "\n").unwrap();
}

#[test]
fn inn_commands_train_retrieve_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let csv = dir.path().join("inverse.csv");
    handmade_inverse(&csv);
    let model = last_line(&ok(metaforge(dir.path(), Some(&cfg), &["train-inn", "--inverse", csv.to_str().unwrap()])));
    assert!(Path::new(&model).join("weights.bin").exists());
    let again = last_line(&ok(metaforge(&dir.path().join("b"), Some(&cfg), &["train-inn", "--inverse", csv.to_str().unwrap()])));
    assert_eq!(fs::read(Path::new(&model).join("weights.bin")).unwrap(), fs::read(Path::new(&again).join("weights.bin")).unwrap());

    let out = ok(metaforge(dir.path(), Some(&cfg), &["retrieve", "--band", "6500:7000", "--model", &format!("{model}/manifest.json"), "--z", "samples:3:1"]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["oracle"], "tmm");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(summary["report"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(report["candidates"].as_array().unwrap().len(), 3);
    let retrieved = summary["design"].as_str().unwrap().to_string();
    let verified: serde_json::Value = serde_json::from_str(&ok(metaforge(dir.path(), Some(&cfg), &["verify", "--design", &retrieved, "--band", "6500:7000"]))).unwrap();
    assert_eq!(verified["feasible"], summary["feasible"]);
    assert_eq!(verified["oracle"], "tmm");

    let o = metaforge(dir.path(), Some(&cfg), &["retrieve", "--band", "20000:30000", "--model", &model]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn rerun_reuses_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = last_line(&ok(metaforge(dir.path(), Some(&cfg), &["gen-samples", "--samples", "2"])));
    let stamp = fs::metadata(Path::new(&first).join("targets.bin")).unwrap().modified().unwrap();
    let second = last_line(&ok(metaforge(dir.path(), Some(&cfg), &["gen-samples", "--samples", "2"])));
    assert_eq!(first, second);
    assert_eq!(fs::metadata(Path::new(&second).join("targets.bin")).unwrap().modified().unwrap(), stamp);
    let manifests: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifests[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["reused"], true);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 0);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}
