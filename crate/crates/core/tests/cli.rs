use std::path::Path;
use std::process::{Command, Output};

use drcn::imaging::{load_image, save_planes_png, DecodedImage, ImagePlane};
use drcn::model::{write_checkpoint, Checkpoint, DrcnParams, ModelConfig};

fn drcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drcn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn textured(w: usize, h: usize, phase: f64) -> ImagePlane {
    ImagePlane::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 + phase, y as f64);
        0.5 + 0.2 * (u * 0.31).sin() * (v * 0.17).cos() + 0.1 * ((u + v) * 0.9).sin()
    })
    .unwrap()
}

/// A model whose final convolution is zero predicts its input unchanged.
fn identity_checkpoint(path: &Path, recursions: usize) {
    let mut params = DrcnParams::<f32>::init(&ModelConfig::luminance(recursions, 4), 1).unwrap();
    params.recon2.weight.data_mut().fill(0.0);
    params.recon2.bias.fill(0.0);
    write_checkpoint(path, &Checkpoint::new(params, 2)).unwrap();
}

fn write_dataset(dir: &Path, count: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let plane = textured(size, size, i as f64 * 3.0);
        save_planes_png(&dir.join(format!("img_{i}.png")), &[&plane]).unwrap();
    }
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(drcn(&["--help"]).status.code(), Some(0));
    assert_eq!(drcn(&["sr", "--help"]).status.code(), Some(0));
    assert_eq!(drcn(&[]).status.code(), Some(1));
    assert_eq!(drcn(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        drcn(&["analyze", "--recursions", "0", "--filters", "8"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        drcn(&[
            "eval",
            "--dataset",
            "x",
            "--scale",
            "2",
            "--report",
            "r.csv"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        drcn(&[
            "eval",
            "--bicubic",
            "--model",
            "m",
            "--dataset",
            "x",
            "--scale",
            "2",
            "--report",
            "r.csv"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        drcn(&[
            "eval",
            "--bicubic",
            "--dataset",
            "x",
            "--scale",
            "5",
            "--report",
            "r.csv"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn analyze_reports_receptive_field_and_counts() {
    let out = drcn(&["analyze", "--recursions", "16", "--filters", "256"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text
        .lines()
        .find(|l| l.trim_start().starts_with("16 "))
        .unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[1], "41x41");
    assert_eq!(cols[2], "1775121");
    assert_eq!(cols[5], "136");
}

#[test]
fn sr_with_zero_reconstruction_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input, output, dumps) = (
        dir.path().join("m.drcn"),
        dir.path().join("in.png"),
        dir.path().join("out.png"),
        dir.path().join("dumps"),
    );
    identity_checkpoint(&model, 3);
    save_planes_png(&input, &[&textured(23, 17, 0.0)]).unwrap();
    let out = drcn(&[
        "sr",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--output",
        p(&output),
        "--dump-intermediate",
        p(&dumps),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (DecodedImage::Gray(a), DecodedImage::Gray(b)) =
        (load_image(&input).unwrap(), load_image(&output).unwrap())
    else {
        panic!("expected grayscale images");
    };
    assert_eq!(a.quantized(), b.quantized());
    let mut dumped: Vec<String> = std::fs::read_dir(&dumps)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    dumped.sort();
    assert_eq!(dumped, ["rec_01.png", "rec_02.png", "rec_03.png"]);
}

#[test]
fn sr_keeps_colour_and_upscales_first() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input, output) = (
        dir.path().join("m.drcn"),
        dir.path().join("in.png"),
        dir.path().join("out.png"),
    );
    identity_checkpoint(&model, 1);
    let (r, g, b) = (
        textured(10, 8, 0.0),
        textured(10, 8, 5.0),
        textured(10, 8, 9.0),
    );
    save_planes_png(&input, &[&r, &g, &b]).unwrap();
    let out = drcn(&[
        "sr",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--output",
        p(&output),
        "--upscale-first",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    match load_image(&output).unwrap() {
        DecodedImage::Rgb(planes) => assert_eq!(planes[0].dims(), (20, 16)),
        DecodedImage::Gray(_) => panic!("colour was dropped"),
    }
}

#[test]
fn sr_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input) = (dir.path().join("m.drcn"), dir.path().join("in.png"));
    identity_checkpoint(&model, 1);
    save_planes_png(&input, &[&textured(8, 8, 0.0)]).unwrap();

    let jpg = dir.path().join("out.jpg");
    let out = drcn(&[
        "sr",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--output",
        p(&jpg),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let corrupt = dir.path().join("corrupt.drcn");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(&corrupt, bytes).unwrap();
    let out = drcn(&[
        "sr",
        "--model",
        p(&corrupt),
        "--input",
        p(&input),
        "--output",
        p(&dir.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.png");
    let out = drcn(&[
        "sr",
        "--model",
        p(&model),
        "--input",
        p(&missing),
        "--output",
        p(&dir.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.png"));
}

#[test]
fn eval_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("set");
    write_dataset(&data, 3, 30);
    let run = |crop: &str, name: &str| {
        let report = dir.path().join(name);
        let out = drcn(&[
            "eval",
            "--bicubic",
            "--dataset",
            p(&data),
            "--scale",
            "2",
            "--crop",
            crop,
            "--report",
            p(&report),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(report.with_extension("json").exists());
        std::fs::read(report).unwrap()
    };
    let a = run("2", "a.csv");
    let b = run("2", "b.csv");
    let c = run("0", "c.csv");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);

    let model = dir.path().join("m.drcn");
    identity_checkpoint(&model, 2);
    let out = drcn(&[
        "eval",
        "--model",
        p(&model),
        "--dataset",
        p(&data),
        "--scale",
        "2",
        "--report",
        p(&dir.path().join("m.csv")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(
        drcn(&[
            "eval",
            "--bicubic",
            "--dataset",
            p(&empty),
            "--scale",
            "2",
            "--report",
            p(&dir.path().join("e.csv")),
        ])
        .status
        .code(),
        Some(2)
    );
}

fn tiny_config(train_dir: &Path, recursions: usize) -> String {
    serde_json::json!({
        "recursions": recursions,
        "filters": 4,
        "scale": 2,
        "train_dir": train_dir,
        "patch_size": 16,
        "patch_stride": 16,
        "batch_size": 4,
        "lr_init": 1e-4,
        "lr_floor": 1e-8,
        "max_epochs": 2
    })
    .to_string()
}

#[test]
fn train_writes_checkpoint_and_checks_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train");
    write_dataset(&data, 3, 32);
    let config = dir.path().join("config.json");
    std::fs::write(&config, tiny_config(&data, 2)).unwrap();
    let out_dir = dir.path().join("run");
    let out = drcn(&["train", "--config", p(&config), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out_dir.join("best.drcn").exists());
    let log = std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // Resuming with a different depth is a configuration mismatch.
    let other = dir.path().join("other.json");
    std::fs::write(&other, tiny_config(&data, 3)).unwrap();
    let out = drcn(&[
        "train",
        "--config",
        p(&other),
        "--out",
        p(&dir.path().join("run2")),
        "--resume",
        p(&out_dir.join("best.drcn")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    let missing = dir.path().join("no_such_dir");
    std::fs::write(&config, tiny_config(&missing, 2)).unwrap();
    let out = drcn(&[
        "train",
        "--config",
        p(&config),
        "--out",
        p(&dir.path().join("run3")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_dir"));

    std::fs::write(
        &config,
        "{\"scale\": 2, \"train_dir\": \"x\", \"unknown\": 1}",
    )
    .unwrap();
    let out = drcn(&[
        "train",
        "--config",
        p(&config),
        "--out",
        p(&dir.path().join("run4")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = drcn(&[
        "train",
        "--config",
        p(&dir.path().join("nope.json")),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
