use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn evtex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evtex")).args(args).output().expect("spawn evtex")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("c.toml");
    fs::write(
        &path,
        "preset = \"desk\"\n[sensor]\nwidth = 32\nheight = 32\n[scenes]\ntrain = 2\ntest = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn static_scene_gives_header_only_event_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = evtex(&["render", "--config", &cfg, "--out", out.to_str().unwrap(), "--static"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("frames/frame_003.pgm").exists());
    assert!(out.join("gt_boxes.csv").exists());
    assert!(out.join("manifest-render.json").exists());

    let ev = dir.path().join("ev.evtx");
    let frames = out.join("frames");
    let o = evtex(&["v2e", "--config", &cfg, "--frames", frames.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&ev).unwrap();
    assert_eq!(&bytes[..4], b"EVTX");
    assert_eq!(bytes.len(), 16, "header only");
    let counts = fs::read_to_string(dir.path().join("ev.counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest-v2e.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "v2e");
    assert!(manifest["inputs"].as_object().unwrap().len() >= 5);
}

#[test]
fn moving_scene_produces_events_and_per_bin_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    assert!(evtex(&["render", "--config", &cfg, "--out", out]).status.success());
    let frames = dir.path().join("frames");
    let o = evtex(&["v2e", "--config", &cfg, "--frames", frames.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev = dir.path().join("events.evtx");
    assert!(fs::metadata(&ev).unwrap().len() > 16);
    let o = evtex(&["visualize", "--config", &cfg, "--out", out, "--events", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("viz/events_bin_09.pgm").exists());
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        assert!(evtex(&["render", "--config", &cfg, "--out", out.to_str().unwrap(), "--scene", "1"]).status.success());
    }
    for f in ["frames/frame_000.pgm", "frames/frame_003.pgm", "gt_boxes.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn selftest_passes() {
    let o = evtex(&["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert_eq!(stdout.matches("PASS").count(), 6);
}

#[test]
fn unknown_config_field_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[v2e]\ntheta = 0.2\nthreshold = 3\n").unwrap();
    let o = evtex(&["render", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshold"));
}

#[test]
fn invalid_values_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("neg.toml");
    fs::write(&cfg, "[v2e]\ntheta = -1.0\n").unwrap();
    let o = evtex(&["render", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("v2e.theta"));

    let good = small_config(dir.path());
    let o = evtex(&["attack", "--config", &good, "--out", dir.path().to_str().unwrap(), "--detector", "/nonexistent.evdt"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));

    let o = evtex(&["render", "--config", &good, "--bogus-flag"]);
    assert!(!o.status.success());
}
