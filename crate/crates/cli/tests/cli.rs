use std::path::Path;
use std::process::{Command, Output};

fn sobomap(args: &[&str], out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sobomap"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(t) = threads {
        cmd.env("SOBOMAP_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn retraction_demo_writes_set_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobomap(&["retraction-demo"], dir.path(), None);
    assert!(o.status.success(), "{}", stderr(&o));
    let obj = std::fs::read_to_string(dir.path().join("retraction_g.obj")).unwrap();
    assert!(obj.contains("g singular_set") && obj.contains("g edge_skeleton"));
    let lines = obj.lines().filter(|l| l.starts_with("l ")).count();
    assert_eq!(lines, 5 + 12);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["components"], 5);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["experiment"], "retraction-demo");
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn mu_out_of_range_exits_with_schema_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobomap(&["uncross", "--mu", "0.6"], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("mu[0]") && e.contains("mu < 1/2"), "{e}");
}

#[test]
fn config_file_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"samples": 100, "sede": 3}"#).unwrap();
    let o = sobomap(&["energy", "--config", cfg.to_str().unwrap()], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
    std::fs::write(&cfg, r#"{"eta": [0.1, "x"]}"#).unwrap();
    let o = sobomap(&["energy", "--config", cfg.to_str().unwrap()], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta[1]"), "{}", stderr(&o));
}

#[test]
fn divergent_energy_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobomap(&["energy", "--m", "2", "--field", "radial", "--p", "2.6", "--samples", "100000"], dir.path(), None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
}

#[test]
fn energy_csv_is_reproducible_across_threads_and_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = ["energy", "--m", "2", "--field", "vortex", "--p", "1.5", "--samples", "20000", "--seed", "7"];
    let oa = sobomap(&args, a.path(), Some("1"));
    assert!(oa.status.success(), "{}", stderr(&oa));
    let ob = sobomap(&args, b.path(), Some("3"));
    assert!(ob.status.success(), "{}", stderr(&ob));
    let csv_a = std::fs::read(a.path().join("energy.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.path().join("energy.csv")).unwrap());
    let manifest = a.path().join("manifest.json");
    let oc = Command::new(env!("CARGO_BIN_EXE_sobomap")).args(["energy", "--config", manifest.to_str().unwrap()]).arg("--out").arg(c.path()).output().unwrap();
    assert!(oc.status.success(), "{}", stderr(&oc));
    // the manifest's own "out" wins over the flag, so the rerun overwrote run a
    assert_eq!(csv_a, std::fs::read(a.path().join("energy.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("experiment_id,quantity,s,p,sigma,value,stderr,samples,seed\n"));
    assert!(text.contains("energy,grad1_energy_p,1,1.5,0,"));
}

#[test]
fn class_verify_rigid_vortex_and_uncrossed_composition() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobomap(&["class-verify", "--class", "cros", "--mu", "0.2", "--per-band", "300"], dir.path(), None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("class.csv")).unwrap();
    assert!(csv.contains("c1[u]") && csv.contains("c1[u_phi[mu=0.2]]"));
    let o = sobomap(&["class-verify", "--class", "uncr", "--per-band", "100"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("crossings"));
}

#[test]
fn plane_uncrossing_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = sobomap(&["uncross", "--l", "0", "--target", "sphere:0", "--mu", "0.2"], dir.path(), None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("planes_mu0.2.obj").exists());
    let csv = std::fs::read_to_string(dir.path().join("ladder.csv")).unwrap();
    assert!(csv.contains("crossings_after_pass2[mu=0.2],1,1.5,0,0e0"), "{csv}");
}
