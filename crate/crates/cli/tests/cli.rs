use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn amg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amg")).args(args).output().expect("spawn amg")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
schema_version = 1
name = "small"
seed = 3
trajectories = 4
traces = "binary"

[corpus.generator]
kind = "sphere"
n = 4
d = 4
tokens = 2
radius = 2.0
symmetric = true

[sampler]
steps = 8

[metrics.guidance]
kind = "nl2"
k = 3

[metrics.evaluation]
kind = "nl2"
k = 3

[reference]
n = 20

[kde]
points = 16
"#;

#[test]
fn sample_report_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    let o = amg(&["sample", &config("minimal.toml"), "--output-dir", &out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.json").exists());
    assert!(out.join("corpus.csv").exists());
    for v in ["baseline", "amg"] {
        for f in ["samples.csv", "memorization.json", "utility.json", "kde.csv"] {
            assert!(out.join(v).join(f).exists(), "{v}/{f}");
        }
        assert_eq!(std::fs::read_dir(out.join(v).join("traces")).unwrap().count(), 5);
    }
    let before = std::fs::read(out.join("amg/memorization.json")).unwrap();
    let o = amg(&["report", &config("minimal.toml"), "--output-dir", &out_s]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("amg/memorization.json")).unwrap(), before);

    let csv = tmp.path().join("cmp.csv");
    let o = amg(&["compare", &out.join("manifest.json").display().to_string(), "--csv", &csv.display().to_string()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("baseline") && text.contains("amg"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn seed_override_changes_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cfg = cfg.display().to_string();
    let a = tmp.path().join("a").display().to_string();
    let b = tmp.path().join("b").display().to_string();
    assert!(amg(&["sample", &cfg, "--output-dir", &a]).status.success());
    assert!(amg(&["sample", &cfg, "--output-dir", &b, "--seed", "99"]).status.success());
    let sa = std::fs::read(Path::new(&a).join("main/samples.csv")).unwrap();
    let sb = std::fs::read(Path::new(&b).join("main/samples.csv")).unwrap();
    assert_ne!(sa, sb);
    let names: Vec<String> = std::fs::read_dir(Path::new(&b).join("main/traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().all(|n| n.ends_with(".bin")));
    assert!(names.iter().any(|n| n.starts_with("trace_seed99_")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "schema_version = 1\n[sampler]\nsteps = 0\n");
    assert_eq!(amg(&["sample", &bad.display().to_string()]).status.code(), Some(2));
    assert_eq!(amg(&["sample", "/definitely/not/here.toml"]).status.code(), Some(2));
    assert_eq!(amg(&["compare"]).status.code(), Some(2));
    let missing = tmp.path().join("none/manifest.json").display().to_string();
    assert_eq!(amg(&["compare", &missing]).status.code(), Some(3));

    // A gated unguided variant on a two-point corpus always lands on a training point.
    let gated = format!(
        "{SMALL}\n[[variants]]\nname = \"copy\"\ngate = true\nguidance = {{ enabled = false }}\n"
    );
    let gated = gated.replace("n = 4\nd = 4\ntokens = 2", "n = 2\nd = 4\ntokens = 2").replace("k = 3", "k = 2");
    let cfg = write_config(tmp.path(), &format!("{gated}\n[denoiser]\nbandwidth = 0.0\n"));
    let out = tmp.path().join("g").display().to_string();
    let o = amg(&["sample", &cfg.display().to_string(), "--output-dir", &out]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corpus_and_trace_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.csv");
    let o = amg(&["corpus", &config("default.toml"), "--out", &out.display().to_string()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 257);
    assert!(text.starts_with("id,token,multiplicity,x0,"));

    let dir = tmp.path().join("t").display().to_string();
    let o = amg(&["-v", "trace", &config("minimal.toml"), "--output-dir", &dir]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert_eq!(s.lines().filter(|l| l.trim_start().starts_with("t=")).count(), 20);
}
