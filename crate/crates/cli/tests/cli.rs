use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loopwatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

const WORLD: &str = "image_height = 32\nimage_width = 40\nsteer_noise = 0.03\n";
const CFAM: &str = "image_size = 16\nconv_channels = [4, 8]\nnoise_dim = 4\nhidden_dim = 16\nbatch_size = 16\nepochs = 1\n";
const SFAM: &str = "height = 16\nwidth = 24\nchannels = [3, 4, 6]\ncritic_channels = [4, 4, 4, 4, 4, 4, 4, 4, 4]\nbatch_size = 4\nstage1_epochs = 1\nstage2_epochs = 1\nwindows_per_epoch = 8\n";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let world = write(d, "world.toml", WORLD);
    let cfam_cfg = write(d, "cfam.toml", CFAM);
    let sfam_cfg = write(d, "sfam.toml", SFAM);

    ok(&["datagen", "--world", &world, "--seed", "3", "--count", "2", "--length", "60", "--early-left", "1", "--span", "8", "--out", &s("data")]);
    assert!(d.join("data/nominal/ep_0001/episode.csv").is_file());
    assert!(d.join("data/anomalies/early-left_0000/executed/episode.csv").is_file());

    let out = ok(&["train-cfam", "--data", &s("data/nominal"), "--config", &cfam_cfg, "--out", &s("m/cfam.ckpt")]);
    assert!(out.contains("epoch"));
    ok(&["train-sfam", "--data", &s("data/nominal"), "--config", &sfam_cfg, "--out", &s("m/sfam.ckpt"), "--seed", "5"]);

    ok(&["calibrate", "--data", &s("data/nominal"), "--cfam", &s("m/cfam.ckpt"), "--sfam", &s("m/sfam.ckpt"), "--resize", "--out", &s("monitor.toml")]);
    let mon = fs::read_to_string(d.join("monitor.toml")).unwrap();
    assert!(mon.contains("tau_cfam") && mon.contains("sfam_checkpoint"));

    ok(&["monitor", "--linked", &s("data/anomalies/early-left_0000"), "--config", &s("monitor.toml"), "--out", &s("out/report.csv")]);
    let report = fs::read_to_string(d.join("out/report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "t,cfam_dev,sfam_dev,cfam_flag,sfam_flag,cfam_trigger,sfam_trigger");
    assert_eq!(lines.count(), 60);

    ok(&["eval", "--report", &s("out/report.csv"), "--episode", &s("data/anomalies/early-left_0000"), "--out", &s("out/metrics.txt")]);
    let metrics = fs::read_to_string(d.join("out/metrics.txt")).unwrap();
    for key in ["cfam.true_positives = ", "sfam.recall = ", "cfam.median_latency = "] {
        assert!(metrics.contains(key), "missing {key}");
    }

    ok(&["plot", "--report", &s("out/report.csv"), "--config", &s("monitor.toml"), "--out", &s("plots"), "--episode", &s("data/nominal/ep_0000"), "--at", "10"]);
    for f in ["cfam_deviation.png", "sfam_deviation.png", "energy_t00010.png", "dissimilarity_t00010.png"] {
        assert!(image::open(d.join("plots").join(f)).is_ok(), "{f}");
    }

    // Same seeds, same bytes.
    ok(&["monitor", "--linked", &s("data/anomalies/early-left_0000"), "--config", &s("monitor.toml"), "--out", &s("out/again.csv")]);
    assert_eq!(report, fs::read_to_string(d.join("out/again.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["monitor", "--k", "x"]), 2);
    assert_eq!(code(&["--help"]), 0);

    let bad_world = write(d, "bad.toml", "image_height = 8\n");
    assert_eq!(code(&["datagen", "--world", &bad_world, "--out", &s("x")]), 2);

    fs::create_dir_all(d.join("empty")).unwrap();
    assert_eq!(code(&["train-cfam", "--data", &s("empty"), "--out", &s("c.ckpt")]), 3);

    let world = write(d, "world.toml", WORLD);
    ok(&["datagen", "--world", &world, "--count", "1", "--length", "20", "--out", &s("data")]);
    let png = d.join("data/nominal/ep_0000/frame_00003.png");
    fs::write(&png, b"not a png").unwrap();
    assert_eq!(code(&["train-cfam", "--data", &s("data"), "--out", &s("c.ckpt")]), 3);

    ok(&["datagen", "--world", &world, "--count", "1", "--length", "40", "--out", &s("good")]);
    let wild = write(d, "wild.toml", &CFAM.replace("epochs = 1", "epochs = 3\nlearning_rate = 1e30"));
    assert_eq!(code(&["train-cfam", "--data", &s("good"), "--config", &wild, "--out", &s("c.ckpt")]), 4);

    assert_eq!(
        code(&["monitor", "--episode", &s("good/nominal/ep_0000"), "--cfam", &s("missing.ckpt"), "--sfam", &s("missing.ckpt")]),
        3
    );
}
