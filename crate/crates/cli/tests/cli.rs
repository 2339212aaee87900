use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
data = glyphs
glyph_classes = 4
glyph_per_class = 6
glyph_size = 16
val_count = 4
test_count = 4
n_classes = 4
hr_size = 16
upsample_schedule = 2
n_residual_blocks = 1
base_channels = 4
disc_channels = 4,4,4,4,8,8,8,8
disc_hidden = 8
classifier_channels = 4,4,8
classifier_hidden = 8
batch_size = 4
epochs = 1
pretrain_g_epochs = 1
pretrain_c_epochs = 1
alpha = 0.0005
";

fn gac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn selftest_prints_summary() {
    let o = gac(&["selftest", "--seeds", "2"]);
    let t = text(&o);
    assert!(o.status.success(), "{t}");
    assert!(t.contains("PASS grad conv"), "{t}");
    assert!(t.contains("0 failed"), "{t}");
}

#[test]
fn unknown_flag_prints_usage() {
    let o = gac(&["train", "--learning-rate", "1"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("Usage"), "{}", text(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = gac(&["train", "--out", out.to_str().unwrap(), "--set", "alfa=0.1"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("unknown key `alfa`"), "{}", text(&o));

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "epochs = 1\nlearning_rate = 3\n").unwrap();
    let o = gac(&["train", "--out", out.to_str().unwrap(), "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("line 2"), "{}", text(&o));
}

#[test]
fn train_records_flag_overrides_in_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = gac(&[
        "train",
        "--config",
        &conf,
        "--out",
        out.to_str().unwrap(),
        "--alpha",
        "0.001",
        "--strategy",
        "trainable-c",
        "--set",
        "max_steps=2",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let snap = fs::read_to_string(out.join("train.config")).unwrap();
    assert!(snap.contains("alpha = 0.001\n"), "{snap}");
    assert!(snap.contains("strategy = trainable-c\n"), "{snap}");
    assert!(snap.contains("seed = 0\n"), "{snap}");
    assert!(snap.contains("# build: gac-core"), "{snap}");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(out.join("last.bin").exists());

    // the snapshot alone reproduces the run
    let again = dir.path().join("again");
    let o = gac(&["train", "--config", out.join("train.config").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(out.join("last.bin")).unwrap(), fs::read(again.join("last.bin")).unwrap());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o_s = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut v = vec![args[0], "--config", &conf, "--out", o_s];
        v.extend_from_slice(&args[1..]);
        let o = gac(&v);
        assert!(o.status.success(), "{args:?}: {}", text(&o));
        text(&o)
    };
    run(&["pretrain-c0"]);
    run(&["pretrain-c0", "--set", "c_tag=c-fixed"]);
    run(&["pretrain-g"]);
    let g = out.join("g.bin");
    let c0 = out.join("c0.bin");
    let g_s = g.to_str().unwrap();
    let c0_s = c0.to_str().unwrap();
    let fixed = out.join("c-fixed.bin");
    run(&["train", "--g-init", g_s, "--strategy", "fixed-c", "--c-init", fixed.to_str().unwrap(), "--recognizer", c0_s]);
    assert!(out.join("validation.csv").exists());

    let methods = format!("bicubic,mse-only={g_s},gac-fixed-c={}", out.join("last.bin").display());
    let t = run(&["eval", "--recognizer", c0_s, "--methods", &methods]);
    assert!(t.contains("gac-fixed-c"), "{t}");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5, "{report}");
    assert!(out.join("grid-bicubic.pgm").exists());

    // a recognizer that trained the method is refused
    let o = gac(&["eval", "--config", &conf, "--out", o_s, "--recognizer", fixed.to_str().unwrap(), "--methods", &methods]);
    assert!(!o.status.success());
    assert!(text(&o).contains("eval-harness"), "{}", text(&o));

    run(&[
        "sweep",
        "--g-init",
        g_s,
        "--recognizer",
        c0_s,
        "--c-init",
        fixed.to_str().unwrap(),
        "--set",
        "max_steps=1",
    ]);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5, "{sweep}");

    let lr_dir = dir.path().join("lr");
    fs::create_dir(&lr_dir).unwrap();
    let img = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 30 + y) as u8]));
    img.save_with_format(lr_dir.join("a.pgm"), image::ImageFormat::Pnm).unwrap();
    run(&["reconstruct", "--g-init", g_s, "--input", lr_dir.to_str().unwrap()]);
    let sr = image::open(out.join("a-sr.pgm")).unwrap();
    assert_eq!((sr.width(), sr.height()), (16, 16));
}
