use std::path::Path;

use gac::config::Settings;
use gac::data::Batcher;
use gac::trainer::{self, Nets};

#[test]
fn desk_recognizer_clears_ninety_percent_on_held_out_digits() {
    let mut s = Settings::default();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk");
    s.set("data_dir", dir.to_str().unwrap()).unwrap();
    let cfg = s.model().unwrap();
    let tc = s.train().unwrap();
    let (train, _, test) = s.datasets().unwrap();
    let nets = Nets::new(&cfg).unwrap();
    let tb = Batcher::new(&train, tc.batch_size, cfg.scale(), 0).unwrap();
    let teb = Batcher::new(&test, tc.batch_size, cfg.scale(), 0).unwrap();
    let (_, report) = trainer::pretrain_c0(&nets, &tc, "c0", &tb, Some(&teb)).unwrap();
    let test_top1 = *report.val_metric.last().unwrap();
    let train_top1 = report.train_top1.unwrap();
    assert!(test_top1 > 0.90, "held-out top-1 {test_top1}");
    assert!(train_top1 >= test_top1, "train {train_top1} below test {test_top1}");
}
