use std::path::Path;
use std::process::{Command, Output};

use sslcd::raster::{write_raster, Raster};

const TINY: &str = "\
scales = 4,8
steps = 5
batch_size = 8
widths = 4,8
blocks_per_stage = 1,1
stage_strides = 1,2
embed_dim = 8
projector_hidden = 16
predictor_hidden = 16
synth_scenes = 2
synth_dates = 3
synth_size = 32
change_objects = 2
change_size_min = 3
change_size_max = 6
stride = 2
";

fn sslcd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslcd"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tiny_dir();
    let o = sslcd(&["pipeline", "--config", "tiny.txt", "--out", "run", "--archive", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout).unwrap();
    for line in printed.lines() {
        assert!(dir.path().join(line).exists(), "printed path {line} missing");
    }
    for rel in [
        "run/config.txt",
        "run/models/p4_r0.ssck",
        "run/models/p8_r0.loss.tsv",
        "run/maps/scene_000/map_p4.rsrb",
        "run/maps/scene_001/fused.rsrb",
        "run/maps/scene_001/mask.rsrb",
        "run/metrics/scene_000.json",
        "run/metrics.json",
    ] {
        assert!(printed.lines().any(|l| l == rel), "{rel} not printed");
    }
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    for key in ["pre", "rec", "oa", "f1", "kappa", "tp", "fp", "fn", "tn"] {
        assert!(doc["pooled"].get(key).is_some(), "pooled report lacks {key}");
    }
    let scenes = doc["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 2);
    assert!(scenes.iter().all(|s| s["auc"].as_f64().is_some()));
}

#[test]
fn stages_run_separately_and_rerun_identically() {
    let dir = tiny_dir();
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", "tiny.txt", "--out", "run", "--archive", "data"]);
        let o = sslcd(&full, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    for stage in ["synth", "train", "infer", "threshold", "eval"] {
        run(&[stage]);
    }
    let mask = dir.path().join("run/maps/scene_000/mask.rsrb");
    let metrics = dir.path().join("run/metrics.json");
    let first = (std::fs::read(&mask).unwrap(), std::fs::read(&metrics).unwrap());
    run(&["pipeline", "--no-synth"]);
    assert_eq!(first, (std::fs::read(&mask).unwrap(), std::fs::read(&metrics).unwrap()));
}

#[test]
fn eval_of_mismatched_masks_fails() {
    let dir = tempfile::tempdir().unwrap();
    write_raster(&Raster::new_u8(4, 4, 1, vec![0; 16]).unwrap(), dir.path().join("a.rsrb")).unwrap();
    write_raster(&Raster::new_u8(5, 4, 1, vec![1; 20]).unwrap(), dir.path().join("b.rsrb")).unwrap();
    let o = sslcd(&["eval", "--pred", "a.rsrb", "--gt", "b.rsrb"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR eval "), "{}", stderr(&o));
}

#[test]
fn eval_of_two_masks_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    write_raster(&Raster::new_u8(2, 2, 1, vec![1, 1, 0, 0]).unwrap(), dir.path().join("p.rsrb")).unwrap();
    write_raster(&Raster::new_u8(2, 2, 1, vec![1, 0, 1, 0]).unwrap(), dir.path().join("g.rsrb")).unwrap();
    let o = sslcd(&["eval", "--pred", "p.rsrb", "--gt", "g.rsrb"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["tp"], 1);
    assert_eq!(report["oa"], 0.5);
}

#[test]
fn infer_without_checkpoint_names_it() {
    let dir = tiny_dir();
    let o = sslcd(&["synth", "--config", "tiny.txt", "--archive", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sslcd(&["infer", "--config", "tiny.txt", "--archive", "data", "--out", "empty"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR infer "), "{err}");
    assert!(err.contains("p4_r0.ssck"), "{err}");
}

#[test]
fn bad_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sslcd(&["nonsense"], dir.path()).status.code(), Some(2));
    assert_eq!(sslcd(&["train", "--steps", "many"], dir.path()).status.code(), Some(2));
    assert_eq!(sslcd(&["eval", "--pred", "a.rsrb"], dir.path()).status.code(), Some(2));
    assert_eq!(sslcd(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sslcd(&["synth", "--set", "colour=blue"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR synth "), "{}", stderr(&o));
}
