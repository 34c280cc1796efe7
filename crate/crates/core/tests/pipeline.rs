use std::fs;
use std::path::{Path, PathBuf};

use sceneflow::cli::{cmd_eval, cmd_synth, cmd_train, run, Split};
use sceneflow::dataset::Dataset;
use sceneflow::fields::{FieldArch, FnStaticField, StaticFieldOutput};
use sceneflow::metrics::EvalSpec;
use sceneflow::model::{render_view, FieldScene};
use sceneflow::synth::{CameraPath, SynthConfig};
use sceneflow::train::{load_checkpoint, train, TrainConfig};
use tempfile::TempDir;

type NoStatic = FnStaticField<fn([f64; 3], [f64; 3]) -> StaticFieldOutput<f64>>;

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        frames: 3,
        camera: CameraPath {
            width: 12,
            height: 12,
            ..CameraPath::default()
        },
        n_fine: 96,
        ..SynthConfig::default()
    }
}

fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        rays_per_batch: 8,
        samples_per_ray: 8,
        learning_rate: 5e-3,
        deterministic: true,
        dynamic_arch: FieldArch::dynamic().with_size(2, 8),
        static_arch: FieldArch::static_field().with_size(2, 8),
        ..TrainConfig::default()
    }
}

fn write_config<T: serde::Serialize>(dir: &Path, name: &str, cfg: &T) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, sceneflow::cli::config_json(cfg).unwrap()).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    let mut all = vec!["sceneflow"];
    all.extend_from_slice(args);
    run(all)
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cli_synth_train_render_interpolate_eval() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let s = root.to_str().unwrap();
    let synth = write_config(root, "synth.json", &tiny_synth());
    let trainc = write_config(root, "train.json", &tiny_train(2));
    let data = format!("{s}/data");
    let run_dir = format!("{s}/run");
    let ckpt = format!("{run_dir}/final.nsfc");
    assert_eq!(cli(&["synth", "--config", synth.to_str().unwrap(), "--out", &data]), 0);
    assert_eq!(
        cli(&["train", "--config", trainc.to_str().unwrap(), "--data", &data, "--out", &run_dir]),
        0
    );
    for f in ["final.nsfc", "log.csv", "config.json"] {
        assert!(Path::new(&run_dir).join(f).is_file(), "{f} missing");
    }
    let render = format!("{s}/render");
    let args = ["render", "--checkpoint", &ckpt, "--data", &data, "--view", "1", "--frame", "1.5"];
    assert_eq!(cli(&[&args[..], &["--samples", "8", "--out", &render]].concat()), 0);
    assert!(Path::new(&render).join("rgb.png").is_file());
    assert!(Path::new(&render).join("depth.pfm").is_file());
    let interp = format!("{s}/interp");
    let args = ["interpolate", "--checkpoint", &ckpt, "--data", &data, "--view", "0", "--frame", "0"];
    assert_eq!(cli(&[&args[..], &["--samples", "8", "--deltas", "0,0.5,1", "--out", &interp]].concat()), 0);
    for mode in ["splat", "blend"] {
        for k in 0..3 {
            assert!(Path::new(&interp).join(mode).join(format!("{k:04}.png")).is_file());
        }
    }
    let csv = format!("{s}/eval.csv");
    assert_eq!(cli(&["eval", "--checkpoint", &ckpt, "--data", &data, "--out", &csv]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 + 1);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let s = root.to_str().unwrap();
    // unknown subcommand and missing files are validation errors
    assert_eq!(cli(&["bogus"]), 2);
    assert_eq!(cli(&["train", "--data", &format!("{s}/none"), "--out", &format!("{s}/o")]), 2);
    fs::write(root.join("bad.json"), r#"{"version": 1, "iterationz": 3}"#).unwrap();
    let bad = root.join("bad.json");
    assert_eq!(cli(&["synth", "--config", bad.to_str().unwrap(), "--out", s]), 2);
    fs::write(root.join("old.json"), r#"{"version": 7}"#).unwrap();
    let old = root.join("old.json");
    assert_eq!(cli(&["synth", "--config", old.to_str().unwrap(), "--out", s]), 2);
    // a frame outside the sequence is a runtime domain error
    let data = root.join("data");
    cmd_synth(&tiny_synth(), &data).unwrap();
    cmd_train(&tiny_train(0), &data, &root.join("run")).unwrap();
    let ckpt = root.join("run/final.nsfc");
    let args = ["render", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()];
    let code = cli(&[&args[..], &["--view", "0", "--frame", "9", "--out", &format!("{s}/r")]].concat());
    assert_eq!(code, 3);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn synthesis_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = SynthConfig {
        flow_noise_px: 0.3,
        depth_noise_rel: 0.05,
        ..tiny_synth()
    };
    cmd_synth(&cfg, &tmp.path().join("a")).unwrap();
    cmd_synth(&cfg, &tmp.path().join("b")).unwrap();
    let a = files_under(&tmp.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, files_under(&tmp.path().join("b")));
}

#[test]
fn dataset_round_trips_through_disk() {
    let tmp = TempDir::new().unwrap();
    let ds = cmd_synth(&tiny_synth(), tmp.path()).unwrap();
    let back = Dataset::read(tmp.path()).unwrap();
    assert_eq!(back.frame_count, ds.frame_count);
    assert_eq!(back.train.cameras, ds.train.cameras);
    assert_eq!(back.flow_fwd.len(), ds.frame_count - 1);
    assert_eq!(back.flow_bwd.len(), ds.frame_count - 1);
    assert_eq!(back.train.masks, ds.train.masks);
}

#[test]
fn exact_scene_outscores_an_untrained_model() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let ds = cmd_synth(&SynthConfig { n_fine: 256, ..tiny_synth() }, &data).unwrap();
    cmd_train(&tiny_train(0), &data, &tmp.path().join("run")).unwrap();
    let spec = EvalSpec {
        samples: 128,
        oracle_samples: 256,
    };
    let untrained = cmd_eval(&tmp.path().join("run/final.nsfc"), &data, Split::Heldout, &spec, &tmp.path().join("e.csv"))
        .unwrap()
        .aggregate();
    let scene = sceneflow::synth::scene_from_meta(ds.meta.as_ref().unwrap()).unwrap();
    let exact = FieldScene::<NoStatic, _> {
        static_field: None,
        dynamic: scene.field(),
        frame_count: scene.frame_count,
    };
    let views = ds.heldout.as_ref().unwrap();
    let good = sceneflow::metrics::evaluate(&exact, views, ds.bounds, Some(&scene), &spec)
        .unwrap()
        .aggregate();
    // 8-bit targets bound the achievable PSNR
    assert!(good[0].unwrap() > 35.0, "{good:?}");
    assert!(good[0].unwrap() > untrained[0].unwrap() + 10.0);
    assert!(good[4].unwrap() < 0.02, "{good:?}");
}

#[test]
fn frozen_time_weights_render_identically_at_every_time() {
    let ds = sceneflow::synth::generate_dataset(&SynthConfig {
        heldout: false,
        ..tiny_synth()
    })
    .unwrap();
    let cfg = TrainConfig {
        time_invariant_init: true,
        ..tiny_train(0)
    };
    let model = train(&ds, &cfg, None).unwrap().model;
    let cam = &ds.train.cameras[0];
    let a = render_view(&model, cam, 0.0, ds.bounds, 16).unwrap();
    let b = render_view(&model, cam, 2.0, ds.bounds, 16).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.depth, b.depth);
}

#[test]
fn checkpoints_load_back_to_the_trained_model() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&tiny_synth(), &data).unwrap();
    let r = cmd_train(&tiny_train(3), &data, &tmp.path().join("run")).unwrap();
    let ck = load_checkpoint(&tmp.path().join("run/final.nsfc")).unwrap();
    assert_eq!(ck.iteration, 3);
    assert_eq!(ck.model.tensors().collect::<Vec<_>>(), r.model.tensors().collect::<Vec<_>>());
}
