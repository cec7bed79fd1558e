use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use atnf_core::checkpoint::Checkpoint;
use atnf_core::dataset;
use atnf_core::denoiser::{Denoiser, DenoiserConfig};
use atnf_core::diffusion::ScheduleConfig;
use atnf_core::image_io::load_png;
use atnf_core::rng::{gaussian, StreamId};
use atnf_core::trainer::{psnr, TrainConfig};

const PROMPT: &str = "a big red square on a white background";

fn atnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atnf")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Full-size network with noise added to every parameter.
fn checkpoint(dir: &Path) -> PathBuf {
    let mut net = Denoiser::new(DenoiserConfig::default(), 2).unwrap();
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let shape = net.params().value(id).shape().to_vec();
        let noise = gaussian::<f32>(2, StreamId(900 + id.0 as u64), &shape);
        let v = net.params_mut().value_mut(id);
        *v = v.zip_map(&noise, |a, n| a + 0.05 * n).unwrap();
    }
    let p = dir.join("model.atnf");
    Checkpoint::new(net, ScheduleConfig::default()).save(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(ck: &Path, dir: &Path, name: &str, prompt: &str, seed: &str) -> (PathBuf, PathBuf) {
    let out = dir.join(format!("{name}.png"));
    let o = atnf(&["generate", "--prompt", prompt, "--seed", seed, "--steps", "6", "--checkpoint", s(ck), "--out", s(&out)]);
    let v = stdout_json(&o);
    (out, PathBuf::from(v["session"].as_str().unwrap()))
}

#[test]
fn missing_checkpoint_exits_2_and_names_it() {
    let o = atnf(&["generate", "--prompt", PROMPT, "--checkpoint", "/nonexistent/model.atnf", "--out", "/tmp/x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/model.atnf"));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(atnf(&["generate"]).status.code(), Some(2));
    assert_eq!(atnf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn generation_is_reproducible_and_prints_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (a, session) = generate(&ck, dir.path(), "a", PROMPT, "7");
    let (b, _) = generate(&ck, dir.path(), "b", PROMPT, "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let sess: Value = serde_json::from_str(&std::fs::read_to_string(session).unwrap()).unwrap();
    assert_eq!(sess["seed"], 7);
    assert_eq!(sess["prompt"], PROMPT);
    let o = atnf(&["generate", "--prompt", PROMPT, "--seed", "7", "--steps", "6", "--checkpoint", s(&ck), "--out", s(&a)]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("# atnf generate v") && err.contains("# seed: 7"), "{err}");
    let o = atnf(&["generate", "--prompt", "a purple square", "--checkpoint", s(&ck), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("purple"));
}

#[test]
fn identity_fader_returns_the_source_png() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (img, session) = generate(&ck, dir.path(), "src", PROMPT, "3");
    let out = dir.path().join("edit");
    let o = atnf(&["edit", "--session", s(&session), "--checkpoint", s(&ck), "--reweight", "square=1.0", "--out-dir", s(&out)]);
    let m = stdout_json(&o);
    assert_eq!(m["l2_to_source"], 0.0);
    let edited = std::fs::read(out.join("edited.png")).unwrap();
    assert_eq!(edited, std::fs::read(out.join("source.png")).unwrap());
    assert_eq!(edited, std::fs::read(img).unwrap());
}

#[test]
fn edit_errors_exit_2_with_locations() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (_, session) = generate(&ck, dir.path(), "src", PROMPT, "3");
    let out = dir.path().join("edit");
    let base = ["edit", "--session", s(&session), "--checkpoint", s(&ck), "--out-dir", s(&out)];
    let run = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        atnf(&args)
    };
    let o = run(&["--edit-json", r#"{"type":"swap","target_prompt":"a big blue square on a white background","tau":"high"}"#]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/tau"), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["--reweight", "circle=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3:square"));
    let o = run(&["--swap", "--target", "a big blue zebra on a white background"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("zebra"));
    let other = dir.path().join("other.atnf");
    Checkpoint::new(Denoiser::new(DenoiserConfig::default(), 9).unwrap(), ScheduleConfig::default())
        .save(&other)
        .unwrap();
    let o = atnf(&["edit", "--session", s(&session), "--checkpoint", s(&other), "--reweight", "square=1", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_tau_sweep_equals_plain_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let target = "a big blue square on a white background";
    let (src, session) = generate(&ck, dir.path(), "src", PROMPT, "5");
    let (plain, _) = generate(&ck, dir.path(), "plain", target, "5");
    let sheet = dir.path().join("sheet.png");
    let o = atnf(&["sweep-tau", "--session", s(&session), "--checkpoint", s(&ck), "--target", target, "--taus", "0", "--out", s(&sheet)]);
    let m = stdout_json(&o);
    assert_eq!(m.as_array().unwrap().len(), 1);
    let sheet = load_png(&sheet).unwrap();
    assert_eq!(sheet.shape(), &[3, 32, 66]);
    let (src, plain) = (load_png(&src).unwrap(), load_png(&plain).unwrap());
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(sheet.data()[(c * 32 + y) * 66 + x], src.data()[(c * 32 + y) * 32 + x]);
                assert_eq!(sheet.data()[(c * 32 + y) * 66 + 34 + x], plain.data()[(c * 32 + y) * 32 + x]);
            }
        }
    }
    assert!(dir.path().join("sheet.json").exists());
}

#[test]
fn attn_dump_writes_one_map_per_token_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (_, session) = generate(&ck, dir.path(), "src", PROMPT, "1");
    let out = dir.path().join("maps");
    let o = atnf(&["attn-dump", "--session", s(&session), "--checkpoint", s(&ck), "--step", "0", "--step", "5", "--out-dir", s(&out)]);
    let m = stdout_json(&o);
    assert_eq!(m["files"], 16);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 16);
    assert!(out.join("token03_square_step005.png").exists());
    let o = atnf(&["attn-dump", "--session", s(&session), "--checkpoint", s(&ck), "--step", "6", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inversion_psnr_is_recomputable_and_blending_is_local() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let out = dir.path().join("inv");
    let o = atnf(&["invert", "--dataset-seed", "4", "--steps", "10", "--checkpoint", s(&ck), "--out-dir", s(&out)]);
    let m = stdout_json(&o);
    let recon = load_png(&out.join("reconstruction.png")).unwrap();
    let again = psnr(&dataset::gen_scene(4).image, &recon).unwrap();
    assert!((m["psnr"].as_f64().unwrap() - again).abs() < 1e-6);

    let prompt = dataset::gen_scene(4).prompt;
    let color = prompt.split_whitespace().nth(2).unwrap().to_string();
    let other = if color == "blue" { "red" } else { "blue" };
    let target = prompt.replacen(&color, other, 1);
    let edit = dir.path().join("edit");
    let o = atnf(&[
        "edit", "--session", s(&out.join("session.json")), "--checkpoint", s(&ck),
        "--swap", "--target", &target, "--blend", &color, "--heatmaps", "--out-dir", s(&edit),
    ]);
    let m = stdout_json(&o);
    assert_eq!(m["blend"]["outside_mask_l2"], 0.0);
    assert!(edit.join("mask.png").exists() && edit.join("blended.png").exists());
    assert!(edit.join("heatmap_03_".to_string() + prompt.split_whitespace().nth(3).unwrap() + ".png").exists());
}

#[test]
fn eval_reports_localization_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let out = dir.path().join("eval.json");
    let o = atnf(&["eval", "--checkpoint", s(&ck), "--samples", "2", "--out", s(&out)]);
    let m = stdout_json(&o);
    assert_eq!(m["samples"], 2);
    assert_eq!(m["per_sample"].as_array().unwrap().len(), 2);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(file, m);
}

#[test]
fn short_training_run_writes_a_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckp = dir.path().join("t.atnf");
    let cfg = dir.path().join("t.toml");
    let config = TrainConfig {
        steps: 2,
        batch_size: 2,
        log_every: 1,
        eval_every: 0,
        checkpoint_every: 1,
        checkpoint: ckp.clone(),
        model: DenoiserConfig {
            base_channels: 8,
            head_dim: 8,
            time_dim: 16,
            text_dim: 16,
            norm_groups: 4,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    };
    std::fs::write(&cfg, toml::to_string(&config).unwrap()).unwrap();
    let m = stdout_json(&atnf(&["train", s(&cfg)]));
    assert_eq!(m["steps"], 2);
    let m = stdout_json(&atnf(&["train", s(&cfg), "--resume", "--steps", "3"]));
    assert_eq!(m["steps"], 3);
    let ck = Checkpoint::load(&ckp).unwrap();
    assert_eq!(ck.train.unwrap().losses.len(), 3);
}
