//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gac::checkpoint::Checkpoint;
use gac::config::Settings;
use gac::data::{bicubic_resample, cubic_weight, synth_glyphs, Batcher, Dataset, Scale};
use gac::eval::{self, Method, MethodKind, SweepRow, SweepSetup};
use gac::losses::{
    classification_loss_sr, classifier_supervised_loss, content_mse, discriminator_loss,
    generator_adversarial_loss, total_generator_loss, LossComponents, LossWeights,
};
use gac::models::ModelConfig;
use gac::nn::{Forward, Mode};
use gac::optim::OptimizerKind;
use gac::params::ParamSet;
use gac::selftest;
use gac::trainer::{self, gac_train_step, GacState, Nets, Strategy, TrainConfig};
use gac::Tensor;

type Outcome = gac::Result<(bool, String)>;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Fresh leaves with the same values, so gradients never mix.
fn deep_copy(ps: &ParamSet) -> gac::Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, p) in ps.iter() {
        out.insert(name, p.role, p.tensor.shape())?;
        out.set_data(name, p.tensor.to_vec())?;
    }
    Ok(out)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let results = selftest::gradient_checks(20)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    let secs = t0.elapsed().as_secs_f64();
    let ok = failed.is_empty() && secs < 120.0 && results.len() >= 18;
    let kinks: usize = results
        .iter()
        .filter_map(|r| r.detail.split(", ").last()?.split(' ').next()?.parse::<usize>().ok())
        .sum();
    Ok((
        ok,
        format!(
            "{} layer/loss gradient checks over 20 seeds (eps {}, rtol {}), {} kink-straddling coordinates excluded, {secs:.1}s{}",
            results.len(),
            selftest::GRAD_EPS,
            selftest::GRAD_RTOL,
            kinks,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(" | ")) }
        ),
    ))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let col = |v: &[f64]| Tensor::new(&[v.len(), 1], v.to_vec());
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if !close(got, want, tol) {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };
    let px = |v: f64| Tensor::new(&[1, 1, 1, 1], vec![v]);
    expect("mse identity", content_mse(&px(0.3)?, &px(0.3)?)?.item(), 0.0, 0.0);
    expect("mse half", content_mse(&px(0.5)?, &px(0.0)?)?.item(), 0.25, 0.0);
    expect("adv ones", generator_adversarial_loss(&col(&[1.0, 1.0, 1.0])?)?.item(), 0.0, 0.0);
    expect("adv 1/e", generator_adversarial_loss(&col(&[(-1.0f64).exp()])?)?.item(), 1.0, 1e-15);
    expect("adv halves", generator_adversarial_loss(&col(&[0.5; 5])?)?.item(), 5.0 * 2f64.ln(), 1e-14);
    expect("d halves", discriminator_loss(&col(&[0.5; 3])?, &col(&[0.5; 3])?)?.item(), 2.0 * 2f64.ln(), 1e-14);
    expect("d perfect", discriminator_loss(&col(&[1.0])?, &col(&[0.0])?)?.item(), 0.0, 0.0);
    let certain = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    expect("cla certain", classification_loss_sr(&certain, &[1, 2])?.item(), 0.0, 0.0);
    let uniform = Tensor::full(&[4, 10], 0.1);
    expect("cla uniform", classification_loss_sr(&uniform, &[0, 3, 6, 9])?.item(), 4.0 * 10f64.ln(), 1e-13);
    expect("r_c uniform", classifier_supervised_loss(&uniform, &[1, 1, 1, 1])?.item(), 4.0 * 10f64.ln(), 1e-13);

    let c = LossComponents {
        mse: 1.0,
        adv: 2.0,
        cla: 3.0,
        r_c: 4.0,
    };
    let w = LossWeights {
        w_mse: 1.0,
        w_adv: 1e-3,
        alpha: 0.0005,
    };
    let b = total_generator_loss(c, &w)?;
    expect("weighted generator total", b.generator_total, 1.0 + 0.002 + 0.0015, 1e-15);
    expect("weighted total with r_c", b.total, 5.0035, 1e-15);
    let srgan = total_generator_loss(c, &LossWeights { alpha: 0.0, ..w })?;
    expect("srgan total", srgan.generator_total, 1.002, 1e-15);
    let mse_only = total_generator_loss(c, &LossWeights { alpha: 0.0, w_adv: 0.0, ..w })?;
    expect("mse-only total", mse_only.generator_total, 1.0, 0.0);
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        bad.is_empty() && secs < 10.0,
        if bad.is_empty() {
            format!("15 closed-form loss values, {secs:.3}s")
        } else {
            bad.join("; ")
        },
    ))
}

fn desk_cfg() -> ModelConfig {
    ModelConfig::desk(10, vec![7], 28)
}

/// One joint step with SGD, then the same update rebuilt by hand from the
/// objective `mse + w_adv * adv` (no classifier term at all).
fn degenerate_update_matches(w_adv: f64, nets: &Nets, batch: &gac::data::SampleBatch) -> gac::Result<bool> {
    let lr = 0.05;
    let tc = TrainConfig {
        weights: LossWeights {
            w_mse: 1.0,
            w_adv,
            alpha: 0.0,
        },
        batch_size: batch.len(),
        optimizer: OptimizerKind::Sgd { lr },
        seed: 11,
        ..Default::default()
    };
    let mut state = GacState::init(nets, &tc, None)?;
    let g_before = deep_copy(&state.g)?;
    gac_train_step(nets, &mut state, batch, &tc)?;

    // D was updated first; G saw the updated D
    let d_frozen = state.d.frozen();
    let mut fx = Forward::new(&g_before, Mode::Train);
    let sr = nets.g.forward(&mut fx, &batch.lr)?;
    let mut objective = content_mse(&sr, &batch.hr)?.mul_scalar(1.0);
    if w_adv != 0.0 {
        let d_fake = nets.d.forward(&mut Forward::new(&d_frozen, Mode::Eval), &sr)?;
        let adv = generator_adversarial_loss(&d_fake)?.mul_scalar(1.0 / batch.len() as f64);
        objective = objective.add(&adv.mul_scalar(w_adv))?;
    }
    objective.backward()?;
    let mut same = true;
    for (name, p) in g_before.iter() {
        if !p.role.trainable() {
            continue;
        }
        let g = p.tensor.grad().expect("every generator weight gets a gradient");
        let want: Vec<f64> = p.tensor.data().iter().zip(&g).map(|(w, g)| w - lr * g).collect();
        let got = state.g.get(name)?.data();
        same &= want.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok(same)
}

fn criterion_3() -> Outcome {
    let train = Dataset::load_idx_split(data_dir(), gac::data::Split::Train)?.take(8);
    let nets = Nets::new(&desk_cfg())?;
    let batch = Batcher::new(&train, 8, 7, 0)?.sequential(8).next().expect("one batch")?;
    let srgan = degenerate_update_matches(1e-3, &nets, &batch)?;
    let mse = degenerate_update_matches(0.0, &nets, &batch)?;
    Ok((
        srgan && mse,
        format!("alpha=0 vs SRGAN objective: {}; alpha=0, w_adv=0 vs MSE objective: {}", bitwise(srgan), bitwise(mse)),
    ))
}

fn bitwise(ok: bool) -> &'static str {
    if ok {
        "bitwise equal"
    } else {
        "DIFFERENT"
    }
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // pixel shuffle: out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]
    for (c, r, h, w) in [(1, 2, 3, 3), (3, 2, 2, 5), (2, 7, 2, 2), (1, 8, 1, 2)] {
        let n = c * r * r * h * w;
        let x = Tensor::new(&[1, c * r * r, h, w], (0..n).map(|v| v as f64).collect())?;
        let y = x.pixel_shuffle(r)?;
        let mut seen = vec![false; n];
        for ch in 0..c {
            for oy in 0..h * r {
                for ox in 0..w * r {
                    let src = ((ch * r * r + (oy % r) * r + ox % r) * h + oy / r) * w + ox / r;
                    let v = y.data()[(ch * h * r + oy) * w * r + ox];
                    ok &= v == src as f64;
                    seen[v as usize] = true;
                }
            }
        }
        ok &= seen.iter().all(|&s| s) && y.shape() == [1, c, h * r, w * r];
    }
    notes.push("pixel-shuffle index map enumerated for r in {2,7,8}".to_string());

    // cubic kernel weights at the four taps around an offset sum to one;
    // at dyadic offsets every term is representable, so the sum is exact
    let pou = |t: f64| -> f64 { (-1..=2).map(|k| cubic_weight(t - k as f64)).sum() };
    let dyadic_exact = (0..256).all(|k| pou(k as f64 / 256.0) == 1.0);
    let worst_pou = (0..1000).map(|i| (pou(i as f64 / 1000.0) - 1.0).abs()).fold(0.0, f64::max);
    // otherwise only the rounding of the cubic evaluations remains
    ok &= dyadic_exact && worst_pou <= 16.0 * f64::EPSILON;
    notes.push(format!(
        "partition of unity exact at 256 dyadic offsets: {dyadic_exact}, within {worst_pou:.1e} elsewhere"
    ));

    // constant images survive every resampling used here
    let mut worst_const = 0.0f64;
    for (size, scale) in [(28, Scale::down(7)?), (4, Scale::up(7)?), (64, Scale::down(8)?), (8, Scale::up(8)?)] {
        for v in [-1.0, -0.2, 0.6, 1.0] {
            let img = Tensor::full(&[2, 1, size, size], v);
            let out = bicubic_resample(&img, scale)?;
            worst_const = out.data().iter().map(|x| (x - v).abs()).fold(worst_const, f64::max);
        }
    }
    ok &= worst_const <= 4.0 * f64::EPSILON;
    notes.push(format!("constant images within {worst_const:.1e}"));

    // geometries of the two scale factors, through bicubic and the generator
    for (schedule, hr) in [(vec![2, 2, 2], 64), (vec![7], 28)] {
        let r: usize = schedule.iter().product();
        let lr_side = hr / r;
        let mut cfg = ModelConfig::desk(10, schedule.clone(), hr);
        cfg.n_residual_blocks = 1;
        cfg.base_channels = 4;
        let nets = Nets::new(&cfg)?;
        let g = nets.g.build(0)?;
        let lr = Tensor::full(&[1, 1, lr_side, lr_side], 0.1);
        let sr = nets.g.forward(&mut Forward::new(&g, Mode::Eval), &lr)?;
        let up = bicubic_resample(&lr, Scale::up(r)?)?;
        let down = bicubic_resample(&Tensor::full(&[1, 1, hr, hr], 0.0), Scale::down(r)?)?;
        let shapes_ok = sr.shape() == [1, 1, hr, hr] && up.shape() == [1, 1, hr, hr] && down.shape() == [1, 1, lr_side, lr_side];
        let d = nets.d.forward(&mut Forward::new(&nets.d.build(0)?, Mode::Eval), &sr)?;
        let c = nets.c.forward(&mut Forward::new(&nets.c.build(0)?, Mode::Eval), &sr)?;
        ok &= shapes_ok && d.shape() == [1, 1] && c.shape() == [1, 10];
        notes.push(format!("{lr_side}x{lr_side}->{hr}x{hr} {}", if shapes_ok { "ok" } else { "WRONG" }));
    }
    Ok((ok, notes.join("; ")))
}

/// Settings the desk ordering run uses; also the CLI defaults.
fn desk_settings() -> gac::Result<Settings> {
    let mut s = Settings::default();
    s.set("data_dir", data_dir().to_str().expect("utf-8 path"))?;
    Ok(s)
}

struct SeedRun {
    seed: u64,
    bicubic: f64,
    mse_only: f64,
    gac: f64,
    hr: f64,
    g_psnr: f64,
    bicubic_psnr: f64,
    secs: f64,
    pretrained_g: ParamSet,
    c0: ParamSet,
}

fn desk_seed(seed: u64) -> gac::Result<SeedRun> {
    let t0 = Instant::now();
    let mut s = desk_settings()?;
    s.set("seed", &seed.to_string())?;
    let cfg = s.model()?;
    let tc = s.train()?;
    let (train, val, test) = s.datasets()?;
    assert_eq!((train.len(), test.len()), (2000, 500), "desk split sizes");
    let nets = Nets::new(&cfg)?;
    let r = cfg.scale();
    let tb = Batcher::new(&train, tc.batch_size, r, seed)?;
    let vb = Batcher::new(&val, tc.batch_size, r, seed)?;
    let teb = Batcher::new(&test, tc.batch_size, r, seed)?;

    let (c0, _) = trainer::pretrain_c0(&nets, &tc, "c0", &tb, None)?;
    let c0 = c0.net("c")?.clone();
    let (gck, pre) = trainer::pretrain_generator_mse(&nets, &tc, &tb, Some(&vb))?;
    let pretrained_g = gck.net("g")?.clone();
    let mut state = GacState::init(&nets, &tc, Some(pretrained_g.clone()))?;
    trainer::train_loop(&nets, &tc, &mut state, &tb, None, None)?;

    let methods = [
        Method::bicubic(),
        Method::learned(MethodKind::MseOnly, pretrained_g.clone(), None),
        Method::learned(MethodKind::GacTrainableC, state.g.clone(), Some(&state.c)),
    ];
    let report = eval::run_protocol(&methods, &nets, &c0, &teb, None)?;
    let top1 = |m: &str| report.row(m).map_or(f64::NAN, |r| r.top1_pct);
    Ok(SeedRun {
        seed,
        bicubic: top1("bicubic"),
        mse_only: top1("mse-only"),
        gac: top1("gac-trainable-c"),
        hr: top1("hr"),
        g_psnr: *pre.val_metric.last().expect("at least one epoch"),
        bicubic_psnr: pre.baseline.expect("validation data given"),
        secs: t0.elapsed().as_secs_f64(),
        pretrained_g,
        c0,
    })
}

fn criterion_5(runs: &[SeedRun]) -> Outcome {
    let mut held = 0;
    let mut notes = Vec::new();
    for r in runs {
        let ordered = r.bicubic < r.mse_only && r.mse_only < r.gac && r.gac - r.bicubic >= 20.0;
        held += ordered as usize;
        notes.push(format!(
            "seed {}: bicubic {:.1} < mse-only {:.1} < gac {:.1} (hr {:.1}) {} [{:.0}s]",
            r.seed,
            r.bicubic,
            r.mse_only,
            r.gac,
            r.hr,
            if ordered { "holds" } else { "fails" },
            r.secs
        ));
    }
    let total: f64 = runs.iter().map(|r| r.secs).sum();
    notes.push(format!("ordering on {held}/{} seeds, {:.1} min total", runs.len(), total / 60.0));
    Ok((held >= 2, notes.join("; ")))
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let ok = runs.iter().all(|r| r.g_psnr > r.bicubic_psnr);
    let notes: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.2} dB vs bicubic {:.2} dB", r.seed, r.g_psnr, r.bicubic_psnr))
        .collect();
    Ok((ok, notes.join("; ")))
}

fn tiny_cfg() -> ModelConfig {
    let mut c = ModelConfig::desk(4, vec![2], 16);
    c.n_residual_blocks = 1;
    c.base_channels = 4;
    c.disc_channels = vec![4, 4, 4, 4, 8, 8, 8, 8];
    c.disc_hidden = 8;
    c.classifier_channels = vec![4, 4, 8];
    c.classifier_hidden = 8;
    c
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| gac::Error::Data(e.to_string()))?;
    let cfg = tiny_cfg();
    let nets = Nets::new(&cfg)?;
    let ds = synth_glyphs(4, 4, 16, 5)?;
    let tc = TrainConfig {
        batch_size: 4,
        epochs: 3,
        seed: 21,
        checkpoint_every: 5,
        optimizer: OptimizerKind::adam(1e-3),
        ..Default::default()
    };
    let data = Batcher::new(&ds, 4, 2, tc.seed)?;
    let run = |out: &Path| -> gac::Result<Vec<String>> {
        let mut st = GacState::init(&nets, &tc, None)?;
        let o = trainer::train_loop(&nets, &tc, &mut st, &data, None, Some(out))?;
        Ok(o.records.iter().map(|r| r.csv_row()).collect())
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let rows_a = run(&a)?;
    run(&b)?;
    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| gac::Error::Data(format!("{}: {e}", p.display())));
    let deterministic = read(a.join("last.bin"))? == read(b.join("last.bin"))?;

    let ck = Checkpoint::load(a.join("last.bin"), &cfg)?;
    let again = Checkpoint::from_bytes(&ck.to_bytes(), &cfg, Path::new("memory"))?;
    let round_trip = ck.to_bytes() == again.to_bytes()
        && ["g", "d", "c"].iter().all(|n| ck.net(n).unwrap().bit_eq(again.net(n).unwrap()));

    let mid = Checkpoint::load(a.join("ckpt-step000005.bin"), &cfg)?;
    let mut st = GacState::from_checkpoint(&mid)?;
    let resumed = trainer::train_loop(&nets, &tc, &mut st, &data, None, Some(&c))?;
    let rows_c: Vec<String> = resumed.records.iter().map(|r| r.csv_row()).collect();
    let resume_ok = rows_c == rows_a[5..] && read(c.join("last.bin"))? == read(a.join("last.bin"))?;
    Ok((
        deterministic && round_trip && resume_ok,
        format!(
            "repeat run checkpoints {}; round trip {}; resume from step 5 of {} {}",
            bitwise(deterministic),
            bitwise(round_trip),
            rows_a.len(),
            bitwise(resume_ok)
        ),
    ))
}

fn criterion_8(first: &SeedRun) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| gac::Error::Data(e.to_string()))?;
    let s = desk_settings()?;
    let cfg = s.model()?;
    let nets = Nets::new(&cfg)?;
    let (train, _, test) = s.datasets()?;
    let base = s.train()?;
    let tb = Batcher::new(&train, base.batch_size, cfg.scale(), base.seed)?;
    let teb = Batcher::new(&test, base.batch_size, cfg.scale(), base.seed)?;

    // fixed-C trains against its own pretrained classifier, never C0
    let (fixed, _) = trainer::pretrain_c0(&nets, &base, "c-fixed", &tb, None)?;
    let c_path = dir.path().join("c-fixed.bin");
    fixed.save(&c_path)?;
    let smoke = TrainConfig {
        epochs: 1,
        max_steps: Some(20),
        c_init: Some(c_path),
        ..base
    };
    let setup = SweepSetup {
        nets: &nets,
        base: &smoke,
        pretrained_g: &first.pretrained_g,
        train: &tb,
        test: &teb,
        recognizer: &first.c0,
    };
    let csv_path = dir.path().join("sweep.csv");
    let alphas = [0.0005, 0.001];
    let strategies = [Strategy::FixedC, Strategy::TrainableC];
    eval::alpha_sweep(&setup, &alphas, &strategies, Some(csv_path.clone()))?;

    let text = std::fs::read_to_string(&csv_path).map_err(|e| gac::Error::Data(e.to_string()))?;
    let header = text.lines().next().unwrap_or_default().to_string();
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| gac::Error::Data(e.to_string()))?;
    let rows: Vec<SweepRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| gac::Error::Data(e.to_string()))?;
    let mut pairs: Vec<(String, u64)> = rows.iter().map(|r| (r.strategy.clone(), r.alpha.to_bits())).collect();
    pairs.sort();
    pairs.dedup();
    let well_formed = header == "alpha,strategy,top1_pct,top3_pct,psnr_db,g_init_digest"
        && rows.len() == 4
        && pairs.len() == 4
        && rows
            .iter()
            .all(|r| (0.0..=r.top3_pct).contains(&r.top1_pct) && r.top3_pct <= 100.0 && r.psnr_db.is_finite())
        && rows.iter().all(|r| r.g_init_digest == rows[0].g_init_digest);
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} a={} top1 {:.1}", r.strategy, r.alpha, r.top1_pct))
        .collect();
    Ok((well_formed, format!("{} rows [{}]", rows.len(), summary.join(", "))))
}

fn report(results: &mut Vec<(usize, bool)>, n: usize, outcome: Outcome) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} criterion {n}: {detail}", if ok { "PASS" } else { "FAIL" });
    results.push((n, ok));
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --nocapture; none apply here
    let mut results = Vec::new();
    report(&mut results, 1, criterion_1());
    report(&mut results, 2, criterion_2());
    report(&mut results, 3, criterion_3());
    report(&mut results, 4, criterion_4());
    report(&mut results, 7, criterion_7());

    let runs: gac::Result<Vec<SeedRun>> = (0..3).map(desk_seed).collect();
    match runs {
        Ok(runs) => {
            report(&mut results, 5, criterion_5(&runs));
            report(&mut results, 6, criterion_6(&runs));
            report(&mut results, 8, criterion_8(&runs[0]));
        }
        Err(e) => {
            for n in [5, 6, 8] {
                report(&mut results, n, Err(gac::Error::Data(format!("desk run failed: {e}"))));
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
