use std::path::Path;
use std::process::{Command, Output};

use monovit::io::{read_pfm, read_pgm};

fn monovit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monovit"))
        .args(args)
        .env("MONOVIT_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = monovit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "[model]
stage_channels = 4,8,8,8,8
input_size = 32x32

[train]
epochs = 1
batch_size = 1

[bench]
trials = 2
steps = 1
";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "gen",
            "--out",
            p(d),
            "--n",
            "2",
            "--seed",
            "7",
            "--size",
            "32x64",
        ]);
    }
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 1 + 2 * 5);
    assert_eq!(files, dir_bytes(&b));

    let c = dir.path().join("c");
    ok(&[
        "gen",
        "--out",
        p(&c),
        "--n",
        "2",
        "--seed",
        "8",
        "--size",
        "32x64",
    ]);
    assert_ne!(files, dir_bytes(&c));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&monovit(&["gen", "--out", p(&out), "--n", "0"])), 1);
    assert_eq!(
        code(&monovit(&[
            "gen",
            "--out",
            p(&out),
            "--n",
            "1",
            "--size",
            "1x32"
        ])),
        1
    );
    assert_eq!(
        code(&monovit(&[
            "gen",
            "--out",
            p(&out),
            "--n",
            "1",
            "--motion",
            "-1"
        ])),
        1
    );
    assert_eq!(
        code(&monovit(&[
            "gen",
            "--out",
            p(&out),
            "--n",
            "1",
            "--size",
            "64"
        ])),
        1
    );
    assert_eq!(code(&monovit(&["frobnicate"])), 1);
    assert_eq!(code(&monovit(&["--help"])), 0);
    assert!(!out.exists());

    let run = dir.path().join("run");
    let missing = monovit(&["train", "--config", p(&dir.path().join("nope.toml"))]);
    assert_ne!(code(&missing), 0);
    assert!(!run.exists());

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nepoch = 2\n").unwrap();
    let bad = monovit(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.epoch"));
    assert!(!run.exists());
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["default-config"]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, &text).unwrap();
    let parsed = monovit::config::RunConfig::load(&cfg).unwrap();
    assert_eq!(parsed.data, dir.path().join("data"));
    assert_eq!(parsed.model, monovit::config::RunConfig::default().model);
}

#[test]
fn train_resume_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "gen",
        "--out",
        p(&d.join("data")),
        "--n",
        "2",
        "--size",
        "32x32",
    ]);
    std::fs::write(d.join("run.cfg"), SMALL).unwrap();
    let text = ok(&["train", "--config", p(&d.join("run.cfg"))]);
    assert!(text.contains("2 steps, 1 epochs"), "{text}");
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.lines().next().unwrap(), monovit::train::LOG_HEADER);
    let ckpt = d.join("run/final.ckpt");

    std::fs::write(
        d.join("more.cfg"),
        SMALL.replace("epochs = 1", "epochs = 2"),
    )
    .unwrap();
    let text = ok(&[
        "train",
        "--config",
        p(&d.join("more.cfg")),
        "--resume",
        p(&ckpt),
    ]);
    assert!(text.contains("4 steps, 2 epochs"), "{text}");
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["0", "1", "2", "3"]);

    let csv = d.join("metrics.csv");
    let table = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&d.join("data")),
        "--csv",
        p(&csv),
    ]);
    assert!(
        table.contains("Abs Rel") && table.contains("mean"),
        "{table}"
    );
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for c in 0..7 {
        let mean = (rows[0][c] + rows[1][c]) / 2.0;
        assert!(
            (rows[2][c] - mean).abs() <= 1e-12 * mean.abs().max(1.0),
            "column {c}"
        );
    }

    let disp = d.join("disp.pfm");
    let attn = d.join("attn");
    ok(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&d.join("data/000_target.ppm")),
        "--out",
        p(&disp),
        "--attn",
        p(&attn),
    ]);
    let map = read_pfm(&disp).unwrap();
    assert_eq!(&map.shape()[map.shape().len() - 2..], &[32, 32]);
    assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
    for (i, side) in [16, 8, 4, 2, 1].into_iter().enumerate() {
        let m = read_pgm(&attn.join(format!("stage_{}.pgm", i + 1))).unwrap();
        assert_eq!(&m.shape()[m.shape().len() - 2..], &[side, side]);
    }

    let other = d.join("other");
    ok(&["gen", "--out", p(&other), "--n", "1", "--size", "64x64"]);
    assert_eq!(
        code(&monovit(&["eval", "--ckpt", p(&ckpt), "--data", p(&other)])),
        2
    );
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", p(&data), "--n", "3", "--size", "32x32"]);
    let csv = dir.path().join("m.csv");
    ok(&["eval", "--gt-as-pred", "--data", p(&data), "--csv", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(v, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], "{line}");
    }
}

#[test]
fn gradcheck_catches_injected_faults() {
    let text = ok(&["gradcheck", "--trials", "3"]);
    assert!(!text.contains("FAIL"), "{text}");
    let out = monovit(&["gradcheck", "--trials", "3", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&out), 3);
    let all = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(all.contains("sigmoid"), "{all}");
    assert_eq!(
        code(&monovit(&["gradcheck", "--inject-fault", "no_such_op"])),
        1
    );
}

#[test]
fn bench_reports_parameters_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let text = ok(&["bench", "--config", p(&cfg)]);
    let model = monovit::config::RunConfig::load(&cfg).unwrap().model;
    let n = monovit::model::MonoVit::new(&model, 0)
        .unwrap()
        .num_parameters();
    assert!(text.contains(&format!("parameters: {n}")), "{text}");
    assert!(
        text.contains("steps/sec:") && text.contains("images/sec:"),
        "{text}"
    );
}
