use std::path::Path;
use std::process::{Command, Output};

use meshvr::io::image::Image;
use meshvr::io::obj::read_obj;

const FIXTURE: &str = "width = 48\nheight = 48\nfocal = 56.0\nviews = 4\nsupersample = 2\ntemplate_subdivisions = 2\n";

const TRAIN: &str = "landmark_iterations = 3
silhouette_iterations = 3
appearance_epochs = 2
joint_epochs = 2
workers = 2
checkpoint_every = 0

[appearance]
resolution = 16
";

fn meshvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshvr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = meshvr(args);
    assert!(
        out.status.success(),
        "meshvr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_the_micro_scene() {
    let stdout = ok(&["gradcheck", "--seed", "7"]);
    assert!(stdout.contains("vertices"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn unknown_flags_print_usage() {
    let out = meshvr(&["fit", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!meshvr(&["teleport"]).status.success());
}

#[test]
fn missing_scene_is_an_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshvr(&[
        "fit",
        "--scene",
        s(&dir.path().join("nope")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_fit_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fixture.toml"), FIXTURE).unwrap();
    std::fs::write(d.join("train.toml"), TRAIN).unwrap();
    let scene = d.join("scene");
    let run = d.join("run");

    ok(&[
        "synth",
        "--config",
        s(&d.join("fixture.toml")),
        "--out",
        s(&scene),
    ]);
    assert!(scene.join("scene.toml").exists());

    let stdout = ok(&[
        "fit",
        "--scene",
        s(&scene),
        "--config",
        s(&d.join("train.toml")),
        "--out",
        s(&run),
        "--seed",
        "3",
        "--stride",
        "2",
    ]);
    assert!(stdout.contains("geometry error"));
    let template = read_obj(&scene.join("template.obj")).unwrap();
    let fitted = read_obj(&run.join("final.obj")).unwrap();
    assert_eq!(template.faces(), fitted.faces());
    assert!(run.join("log.jsonl").exists());
    assert!(run.join("checkpoints/3_end.ckpt").exists());

    let renders = d.join("renders");
    let stdout = ok(&[
        "render",
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--scene",
        s(&scene),
        "--config",
        s(&d.join("train.toml")),
        "--out",
        s(&renders),
    ]);
    assert!(stdout.contains("psnr"));
    let img = Image::read(&renders.join("holdout_000.png")).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (48, 48, 3));

    let csv = d.join("geometry.csv");
    ok(&[
        "eval",
        "--geometry",
        s(&scene.join("template.obj")),
        "--reference",
        s(&scene.join("template.obj")),
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mesh,geometry_error");
    assert_eq!(
        lines[1].rsplit(',').next().unwrap().parse::<f64>().unwrap(),
        0.0
    );

    let stdout = ok(&[
        "eval",
        "--image",
        s(&renders.join("holdout_000.png")),
        "--reference",
        s(&renders.join("holdout_000.png")),
    ]);
    assert!(stdout.starts_with("image,psnr,ssim\n"));
    assert!(stdout.contains(",inf,1"));
}

#[test]
fn fit_can_stop_after_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fixture.toml"), FIXTURE).unwrap();
    std::fs::write(d.join("train.toml"), TRAIN).unwrap();
    ok(&[
        "synth",
        "--config",
        s(&d.join("fixture.toml")),
        "--out",
        s(&d.join("scene")),
        "--views",
        "3",
    ]);
    ok(&[
        "fit",
        "--scene",
        s(&d.join("scene/scene.toml")),
        "--config",
        s(&d.join("train.toml")),
        "--out",
        s(&d.join("run")),
        "--stage",
        "1",
        "--views",
        "0,2",
    ]);
    assert!(d.join("run/stage1.obj").exists());
    assert!(!d.join("run/checkpoints/2_end.ckpt").exists());
    let a = std::fs::read(d.join("run/stage1.obj")).unwrap();
    let b = std::fs::read(d.join("run/final.obj")).unwrap();
    assert_eq!(a, b);
}
