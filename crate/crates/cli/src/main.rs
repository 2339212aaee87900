//! `gac` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gac::checkpoint::Checkpoint;
use gac::config::{Settings, KEYS};
use gac::data::{denormalize, normalize, read_grey, write_pgm, Batcher};
use gac::eval::{self, Method, SweepSetup};
use gac::models::ModelConfig;
use gac::params::ParamSet;
use gac::selftest;
use gac::trainer::{self, GacState, Nets, Validation};
use gac::Tensor;

#[derive(Parser)]
#[command(name = "gac", version, about = "Generative adversarial classifier super-resolution")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Pretrain the generator on content loss alone.
    PretrainG(Common),
    /// Pretrain a standalone classifier on high-resolution images.
    PretrainC0(Common),
    /// Joint generator, discriminator and classifier training.
    Train(Common),
    /// Score methods on the test split with a held-out recognizer.
    Eval(Common),
    /// Train and score one joint model per (alpha, strategy).
    Sweep(Common),
    /// Super-resolve PGM images with a trained generator (or bicubic).
    Reconstruct(Common),
    /// Gradient checks and closed-form loss values.
    Selftest {
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// List every settings key with its default.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override any settings key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    g_init: Option<String>,
    #[arg(long)]
    c_init: Option<String>,
    #[arg(long)]
    recognizer: Option<String>,
    #[arg(long)]
    resume: Option<String>,
    /// Comma list of `method` or `method=checkpoint`.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    input: Option<String>,
}

impl Common {
    /// Defaults, then the file, then `--set`, then dedicated flags.
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            s.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("alpha", &self.alpha),
            ("strategy", &self.strategy),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("data_dir", &self.data_dir),
            ("g_init", &self.g_init),
            ("c_init", &self.c_init),
            ("recognizer", &self.recognizer),
            ("resume", &self.resume),
            ("eval_methods", &self.methods),
            ("input", &self.input),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        Ok(s)
    }
}

/// Settings plus the pieces every verb needs.
struct Run {
    settings: Settings,
    cfg: ModelConfig,
    nets: Nets,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common, verb: &str) -> Result<Run> {
        let settings = common.settings().context("reading settings")?;
        let cfg = settings.model().context("model settings")?;
        settings.train().context("training settings")?;
        let nets = Nets::new(&cfg).context("gac-models: building networks")?;
        let out = common.out.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let snapshot = settings.snapshot()?;
        let path = out.join(format!("{verb}.config"));
        fs::write(&path, format!("# gac {verb}\n{snapshot}"))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(Run {
            settings,
            cfg,
            nets,
            out,
        })
    }

    fn batchers(&self) -> Result<(Batcher, Batcher, Batcher)> {
        let tc = self.settings.train()?;
        let (train, val, test) = self.settings.datasets().context("data-pipeline: loading datasets")?;
        let r = self.cfg.scale();
        let b = |ds, bs| Batcher::new(ds, bs, r, tc.seed).context("data-pipeline: preparing batches");
        Ok((b(&train, tc.batch_size)?, b(&val, tc.batch_size)?, b(&test, tc.batch_size)?))
    }

    fn load_net(&self, path: &Path, net: &str) -> Result<ParamSet> {
        let ck = Checkpoint::load(path, &self.cfg).with_context(|| format!("trainer: loading checkpoint {}", path.display()))?;
        Ok(ck.net(net)?.clone())
    }

    fn recognizer(&self) -> Result<ParamSet> {
        let path = self
            .settings
            .recognizer()
            .ok_or_else(|| anyhow!("this verb needs a held-out recognizer: --recognizer <c0 checkpoint>"))?;
        self.load_net(&path, "c")
    }
}

fn pretrain_g(common: &Common) -> Result<()> {
    let run = Run::new(common, "pretrain-g")?;
    let tc = run.settings.train()?;
    let (train, val, _) = run.batchers()?;
    let t0 = Instant::now();
    let (ck, report) =
        trainer::pretrain_generator_mse(&run.nets, &tc, &train, Some(&val)).context("trainer: pretrain_generator_mse")?;
    let path = run.out.join("g.bin");
    ck.save(&path)?;
    let bicubic = report.baseline.unwrap_or(f64::NAN);
    let mut csv = String::from("epoch,psnr_db,bicubic_psnr_db\n");
    for (e, p) in report.val_metric.iter().enumerate() {
        csv.push_str(&format!("{e},{p},{bicubic}\n"));
        println!("epoch {e}: validation PSNR {p:.2} dB (bicubic {bicubic:.2} dB)");
    }
    fs::write(run.out.join("pretrain-g.csv"), csv)?;
    println!("wrote {} after {} steps in {:.1}s", path.display(), ck.step, t0.elapsed().as_secs_f64());
    Ok(())
}

fn pretrain_c0(common: &Common) -> Result<()> {
    let run = Run::new(common, "pretrain-c0")?;
    let tc = run.settings.train()?;
    let (train, _, test) = run.batchers()?;
    let tag = run.settings.c_tag().to_string();
    let (ck, report) =
        trainer::pretrain_c0(&run.nets, &tc, &tag, &train, Some(&test)).context("trainer: pretrain_c0")?;
    let path = run.out.join(format!("{tag}.bin"));
    ck.save(&path)?;
    for (e, a) in report.val_metric.iter().enumerate() {
        println!("epoch {e}: test top-1 {a:.2}%");
    }
    println!(
        "train top-1 {:.2}%; wrote {} (digest {})",
        report.train_top1.unwrap_or(f64::NAN),
        path.display(),
        &ck.net("c")?.digest()[..16]
    );
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let run = Run::new(common, "train")?;
    let tc = run.settings.train()?;
    let (train, val, _) = run.batchers()?;
    let mut state = match run.settings.resume() {
        Some(path) => {
            let ck = Checkpoint::load(&path, &run.cfg).with_context(|| format!("trainer: resuming from {}", path.display()))?;
            if ck.seed != tc.seed {
                bail!("checkpoint {} was written with seed {} but the settings say {}", path.display(), ck.seed, tc.seed);
            }
            GacState::from_checkpoint(&ck)?
        }
        None => {
            let g = run.settings.g_init().map(|p| run.load_net(&p, "g")).transpose()?;
            GacState::init(&run.nets, &tc, g).context("trainer: initializing joint state")?
        }
    };
    let recognizer = run.settings.recognizer().map(|p| run.load_net(&p, "c")).transpose()?;
    let validation = Validation {
        data: &val,
        recognizer: recognizer.as_ref(),
    };
    let t0 = Instant::now();
    let outcome = trainer::train_loop(&run.nets, &tc, &mut state, &train, Some(validation), Some(&run.out))
        .context("trainer: train_loop")?;
    for v in &outcome.validations {
        println!("epoch {}: validation PSNR {:.2} dB, top-1 {:.2}%", v.epoch, v.psnr_db, v.top1_pct);
    }
    if let Some(last) = outcome.records.last() {
        println!(
            "{} steps in {:.1}s; last step mse {:.4} adv {:.4} cla {:.4} r_c {:.4} d {:.4}",
            outcome.records.len(),
            t0.elapsed().as_secs_f64(),
            last.breakdown.mse,
            last.breakdown.adv,
            last.breakdown.cla,
            last.breakdown.r_c,
            last.d_loss
        );
    }
    println!("wrote {}", run.out.join("last.bin").display());
    Ok(())
}

fn evaluate(common: &Common) -> Result<()> {
    let run = Run::new(common, "eval")?;
    let (_, _, test) = run.batchers()?;
    let recognizer = run.recognizer()?;
    let methods = run
        .settings
        .eval_methods()?
        .into_iter()
        .map(|(kind, path)| match path {
            Some(p) => Method::from_checkpoint(kind, &p, &run.cfg)
                .with_context(|| format!("eval-harness: loading {} from {}", kind.name(), p.display())),
            None => Ok(Method::bicubic()),
        })
        .collect::<Result<Vec<_>>>()?;
    let report = eval::run_protocol(&methods, &run.nets, &recognizer, &test, Some(&run.out))
        .context("eval-harness: run_protocol")?;
    println!("{:<16} {:>8} {:>8} {:>9}", "method", "top1 %", "top3 %", "PSNR dB");
    for r in &report.rows {
        println!("{:<16} {:>8.2} {:>8.2} {:>9.2}", r.method, r.top1_pct, r.top3_pct, r.psnr_db);
    }
    println!("wrote {}", run.out.join("report.csv").display());
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let run = Run::new(common, "sweep")?;
    let tc = run.settings.train()?;
    let (train, _, test) = run.batchers()?;
    let g_path = run
        .settings
        .g_init()
        .ok_or_else(|| anyhow!("sweep starts every run from a pretrained generator: --g-init <checkpoint>"))?;
    let pretrained_g = run.load_net(&g_path, "g")?;
    let recognizer = run.recognizer()?;
    let setup = SweepSetup {
        nets: &run.nets,
        base: &tc,
        pretrained_g: &pretrained_g,
        train: &train,
        test: &test,
        recognizer: &recognizer,
    };
    let path = run.out.join("sweep.csv");
    let rows = eval::alpha_sweep(
        &setup,
        &run.settings.sweep_alphas()?,
        &run.settings.sweep_strategies()?,
        Some(path.clone()),
    )
    .context("eval-harness: alpha_sweep")?;
    for r in &rows {
        println!("{:<12} alpha {:<8} top-1 {:>6.2}% PSNR {:.2} dB", r.strategy, r.alpha, r.top1_pct, r.psnr_db);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn reconstruct(common: &Common) -> Result<()> {
    let run = Run::new(common, "reconstruct")?;
    let input = run
        .settings
        .input()
        .ok_or_else(|| anyhow!("reconstruct needs --input <image or directory>"))?;
    let method = match run.settings.g_init() {
        Some(p) => Method::from_checkpoint(eval::MethodKind::MseOnly, &p, &run.cfg)?,
        None => Method::bicubic(),
    };
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![input]
    };
    if run.cfg.image_channels != 1 {
        bail!("reconstruct handles greyscale images only");
    }
    let lr_size = run.cfg.lr_size();
    for f in &files {
        let (w, h, bytes) = read_grey(f).with_context(|| format!("reading {}", f.display()))?;
        if (w, h) != (lr_size, lr_size) {
            bail!("{} is {w}x{h}; this model takes {lr_size}x{lr_size} inputs", f.display());
        }
        let lr = Tensor::new(&[1, 1, h, w], bytes.iter().map(|&b| normalize(b as f64)).collect())?;
        let sr = eval::reconstruct(&method, &run.nets.g, &lr, run.cfg.scale()).context("eval-harness: reconstruct")?;
        let px: Vec<u8> = sr.data().iter().map(|&v| denormalize(v)).collect();
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dst = run.out.join(format!("{name}-sr.pgm"));
        write_pgm(&dst, run.cfg.hr_size, run.cfg.hr_size, &px)?;
        println!("{} -> {}", f.display(), dst.display());
    }
    Ok(())
}

fn run_selftest(seeds: u64) -> Result<bool> {
    let results = selftest::run(seeds)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{}", r.line());
    }
    println!("{} checks, {} passed, {} failed", results.len(), results.len() - failed, failed);
    Ok(failed == 0)
}

/// Caps rayon's pool at `GAC_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GAC_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow!("GAC_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("GAC_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.verb {
        Verb::PretrainG(c) => pretrain_g(c).map(|()| true),
        Verb::PretrainC0(c) => pretrain_c0(c).map(|()| true),
        Verb::Train(c) => train(c).map(|()| true),
        Verb::Eval(c) => evaluate(c).map(|()| true),
        Verb::Sweep(c) => sweep(c).map(|()| true),
        Verb::Reconstruct(c) => reconstruct(c).map(|()| true),
        Verb::Selftest { seeds } => run_selftest(*seeds),
        Verb::Keys => {
            for (k, v, help) in KEYS {
                println!("{k:<20} {:<22} {help}", if v.is_empty() { "(none)" } else { v });
            }
            Ok(true)
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
