//! Generator and classifier pretraining plus the alternating three-network
//! update loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{bicubic_resample, Batcher, SampleBatch, Scale};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    classification_loss_sr, classifier_supervised_loss, content_mse, discriminator_loss, generator_adversarial_loss,
    total_generator_loss, LossBreakdown, LossComponents, LossWeights,
};
use crate::models::{Classifier, Discriminator, Generator, ModelConfig};
use crate::nn::{Forward, Mode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,epoch,mse,adv,cla,r_c,total,d_loss";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Classifier initialized from a pretrained checkpoint and never updated.
    FixedC,
    /// Classifier updated on real and reconstructed images every step.
    TrainableC,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FixedC => "fixed-c",
            Strategy::TrainableC => "trainable-c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed-c" => Ok(Strategy::FixedC),
            "trainable-c" => Ok(Strategy::TrainableC),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}`; expected fixed-c or trainable-c"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub strategy: Strategy,
    /// Epochs of the joint phase.
    pub epochs: usize,
    pub batch_size: usize,
    /// Used for G, D and C in the joint phase.
    pub optimizer: OptimizerKind,
    /// Used for generator content-loss pretraining.
    pub pretrain_optimizer: OptimizerKind,
    /// Used for classifier pretraining.
    pub pretrain_c_optimizer: OptimizerKind,
    pub pretrain_g_epochs: usize,
    pub pretrain_c_epochs: usize,
    /// Seeds initialization (via [`net_seed`]) and batch order.
    pub seed: u64,
    /// Save a checkpoint every this many joint steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Classifier checkpoint to start from. Required for [`Strategy::FixedC`].
    pub c_init: Option<PathBuf>,
    /// Stop the joint phase after this many global steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            strategy: Strategy::TrainableC,
            epochs: 10,
            batch_size: 128,
            optimizer: OptimizerKind::adam(1e-4),
            pretrain_optimizer: OptimizerKind::adam(1e-4),
            pretrain_c_optimizer: OptimizerKind::adam(1e-3),
            pretrain_g_epochs: 5,
            pretrain_c_epochs: 10,
            seed: 0,
            checkpoint_every: 0,
            c_init: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.pretrain_optimizer.validate()?;
        self.pretrain_c_optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.strategy == Strategy::FixedC && self.c_init.is_none() {
            return Err(Error::Config("strategy fixed-c needs a classifier checkpoint (c_init)".into()));
        }
        Ok(())
    }
}

/// Per-network seed derived from the run seed, so the three networks and
/// the evaluation classifier never share a random stream.
pub fn net_seed(seed: u64, net: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(net.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The three network definitions for one model config.
#[derive(Clone, Debug)]
pub struct Nets {
    pub cfg: ModelConfig,
    pub g: Generator,
    pub d: Discriminator,
    pub c: Classifier,
}

impl Nets {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Nets {
            cfg: cfg.clone(),
            g: Generator::new(cfg)?,
            d: Discriminator::new(cfg)?,
            c: Classifier::new(cfg)?,
        })
    }
}

/// Everything that changes during joint training.
#[derive(Clone, Debug)]
pub struct GacState {
    pub g: ParamSet,
    pub d: ParamSet,
    pub c: ParamSet,
    pub opt_g: Optimizer,
    pub opt_d: Optimizer,
    /// Shared by the two classifier updates of a step.
    pub opt_c: Optimizer,
    /// Joint steps completed.
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

impl GacState {
    /// Fresh D; G from `pretrained_g` or freshly initialized; C from
    /// `tc.c_init` or freshly initialized.
    pub fn init(nets: &Nets, tc: &TrainConfig, pretrained_g: Option<ParamSet>) -> Result<Self> {
        tc.validate()?;
        let g = match pretrained_g {
            Some(g) => g,
            None => nets.g.build(net_seed(tc.seed, "g"))?,
        };
        let c = match &tc.c_init {
            Some(path) => Checkpoint::load(path, &nets.cfg)?.net("c")?.clone(),
            None => nets.c.build(net_seed(tc.seed, "c"))?,
        };
        Ok(GacState {
            g,
            d: nets.d.build(net_seed(tc.seed, "d"))?,
            c,
            opt_g: Optimizer::new(tc.optimizer),
            opt_d: Optimizer::new(tc.optimizer),
            opt_c: Optimizer::new(tc.optimizer),
            step: 0,
            epoch: 0,
            seed: tc.seed,
        })
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(cfg, self.seed);
        ck.step = self.step;
        ck.epoch = self.epoch;
        for (name, ps, opt) in [("g", &self.g, &self.opt_g), ("d", &self.d, &self.opt_d), ("c", &self.c, &self.opt_c)] {
            ck.nets.insert(name.into(), ps.clone());
            ck.optimizers.insert(name.into(), opt.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let opt = |n: &str| {
            ck.optimizers
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint has no optimizer state for `{n}`")))
        };
        Ok(GacState {
            g: ck.net("g")?.clone(),
            d: ck.net("d")?.clone(),
            c: ck.net("c")?.clone(),
            opt_g: opt("g")?,
            opt_d: opt("d")?,
            opt_c: opt("c")?,
            step: ck.step,
            epoch: ck.epoch,
            seed: ck.seed,
        })
    }
}

fn abort(network: &'static str, step: u64) -> impl Fn(Error) -> Error {
    move |e| Error::Training {
        network,
        step,
        source: Box::new(e),
    }
}

/// Backward from `loss` then one optimizer update, with failures attributed
/// to `network` and `step`.
fn descend(loss: &Tensor, params: &mut ParamSet, opt: &mut Optimizer, network: &'static str, step: u64) -> Result<()> {
    let fail = abort(network, step);
    loss.check_finite("loss").map_err(&fail)?;
    loss.backward().map_err(&fail)?;
    opt.step(params).map_err(&fail)
}

/// Generator output with batch statistics but without recording running
/// statistics or gradients.
fn reconstruct_detached(g: &Generator, params: &ParamSet, lr: &Tensor) -> Result<Tensor> {
    let frozen = params.frozen();
    g.forward(&mut Forward::new(&frozen, Mode::Train), lr)
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    /// Discriminator loss before its update.
    pub d_loss: f64,
    /// `(network, parameter version after the update)` in update order.
    pub trace: Vec<(&'static str, u64)>,
}

/// One joint step: D, then C on real images, then C on reconstructions
/// (both skipped under fixed-C), then G.
pub fn gac_train_step(nets: &Nets, state: &mut GacState, batch: &SampleBatch, tc: &TrainConfig) -> Result<StepReport> {
    let step = state.step;
    let n = batch.len() as f64;
    let w = tc.weights;
    let mut trace = Vec::with_capacity(4);

    // G is untouched until the last update, so one detached reconstruction
    // serves the D and C updates
    let sr_fixed = reconstruct_detached(&nets.g, &state.g, &batch.lr).map_err(abort("generator", step))?;

    let d_loss = {
        let mut fx = Forward::new(&state.d, Mode::Train);
        let real = nets.d.forward(&mut fx, &batch.hr)?;
        let fake = nets.d.forward(&mut fx, &sr_fixed)?;
        let loss = discriminator_loss(&real, &fake).map_err(abort("discriminator", step))?;
        descend(&loss, &mut state.d, &mut state.opt_d, "discriminator", step)?;
        trace.push(("d", state.d.version()));
        loss.item()
    };

    let r_c = match tc.strategy {
        Strategy::TrainableC => {
            let probs = nets.c.forward(&mut Forward::new(&state.c, Mode::Train), &batch.hr)?;
            let rc = classifier_supervised_loss(&probs, &batch.labels)?.mul_scalar(1.0 / n);
            descend(&rc, &mut state.c, &mut state.opt_c, "classifier", step)?;
            trace.push(("c", state.c.version()));

            let probs = nets.c.forward(&mut Forward::new(&state.c, Mode::Train), &sr_fixed)?;
            let cl = classification_loss_sr(&probs, &batch.labels)?.mul_scalar(1.0 / n);
            descend(&cl, &mut state.c, &mut state.opt_c, "classifier", step)?;
            trace.push(("c", state.c.version()));
            rc.item()
        }
        Strategy::FixedC => {
            let frozen = state.c.frozen();
            let probs = nets.c.forward(&mut Forward::new(&frozen, Mode::Eval), &batch.hr)?;
            classifier_supervised_loss(&probs, &batch.labels)?.item() / n
        }
    };

    let (mse, adv, cla) = {
        let d_frozen = state.d.frozen();
        let c_frozen = state.c.frozen();
        let mut fx = Forward::new(&state.g, Mode::Train);
        let sr = nets.g.forward(&mut fx, &batch.lr)?;
        let updates = fx.into_updates();
        let mse = content_mse(&sr, &batch.hr)?;

        // zero-weight terms are measured on a detached copy so they cannot
        // reach G's gradient
        let scored = |tracked: bool| if tracked { sr.clone() } else { sr.detach() };
        let adv_in = scored(w.w_adv != 0.0);
        let d_fake = nets.d.forward(&mut Forward::new(&d_frozen, Mode::Eval), &adv_in)?;
        let adv = generator_adversarial_loss(&d_fake).map_err(abort("generator", step))?.mul_scalar(1.0 / n);
        let cla_in = scored(w.alpha != 0.0);
        let c_probs = nets.c.forward(&mut Forward::new(&c_frozen, Mode::Eval), &cla_in)?;
        let cla = classification_loss_sr(&c_probs, &batch.labels)?.mul_scalar(1.0 / n);

        let objective = w.generator_objective(&mse, Some(&adv), Some(&cla))?;
        descend(&objective, &mut state.g, &mut state.opt_g, "generator", step)?;
        state.g.apply_updates(updates)?;
        trace.push(("g", state.g.version()));
        (mse.item(), adv.item(), cla.item())
    };

    let breakdown = total_generator_loss(LossComponents { mse, adv, cla, r_c }, &w).map_err(abort("generator", step))?;
    Ok(StepReport {
        breakdown,
        d_loss,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub breakdown: LossBreakdown,
    pub d_loss: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, b.mse, b.adv, b.cla, b.r_c, b.total, self.d_loss
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochValidation {
    pub epoch: u64,
    pub psnr_db: f64,
    pub top1_pct: f64,
}

/// Held-out data for per-epoch validation. Without a recognizer the
/// current classifier is used for accuracy.
#[derive(Clone, Copy)]
pub struct Validation<'a> {
    pub data: &'a Batcher,
    pub recognizer: Option<&'a ParamSet>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub validations: Vec<EpochValidation>,
}

fn open_append(path: &Path, header: &str) -> Result<fs::File> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Runs joint steps from `state.step` until `tc.epochs` epochs (or
/// `tc.max_steps` steps) are done. With `out_dir`, appends to
/// `metrics.csv` and `validation.csv`, and writes `ckpt-step<N>.bin` on
/// the configured cadence plus `last.bin` at the end.
pub fn train_loop(
    nets: &Nets,
    tc: &TrainConfig,
    state: &mut GacState,
    train: &Batcher,
    val: Option<Validation<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train.batch_size() != tc.batch_size {
        return Err(Error::Config(format!(
            "batcher uses batch size {} but the config says {}",
            train.batch_size(),
            tc.batch_size
        )));
    }
    let bpe = train.batches_per_epoch() as u64;
    let total = tc.epochs as u64 * bpe;
    let stop = tc.max_steps.map_or(total, |m| m.min(total));
    let mut metrics = None;
    let mut val_csv = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        metrics = Some((dir.join("metrics.csv"), open_append(&dir.join("metrics.csv"), METRICS_HEADER)?));
        if val.is_some() {
            let p = dir.join("validation.csv");
            val_csv = Some((p.clone(), open_append(&p, "epoch,psnr_db,top1_pct")?));
        }
    }

    let mut out = TrainOutcome::default();
    let bs = tc.batch_size;
    while state.step < stop {
        let epoch = state.step / bpe;
        let order = train.order(epoch);
        let offset = (state.step % bpe) as usize;
        for b in offset..bpe as usize {
            if state.step >= stop {
                break;
            }
            let batch = train.gather(&order[b * bs..(b + 1) * bs])?;
            let report = gac_train_step(nets, state, &batch, tc)?;
            let record = StepRecord {
                step: state.step,
                epoch,
                breakdown: report.breakdown,
                d_loss: report.d_loss,
            };
            state.step += 1;
            state.epoch = state.step / bpe;
            if let Some((path, f)) = metrics.as_mut() {
                writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
            out.records.push(record);
            if let Some(dir) = out_dir {
                if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
                    state
                        .to_checkpoint(&nets.cfg)
                        .save(dir.join(format!("ckpt-step{:06}.bin", state.step)))?;
                }
            }
        }
        if state.step % bpe == 0 {
            if let Some(v) = val {
                let recognizer = v.recognizer.unwrap_or(&state.c);
                let (psnr_db, top1_pct) = validate(nets, &state.g, recognizer, v.data)?;
                let rec = EpochValidation {
                    epoch,
                    psnr_db,
                    top1_pct,
                };
                if let Some((path, f)) = val_csv.as_mut() {
                    writeln!(f, "{},{},{}", rec.epoch, rec.psnr_db, rec.top1_pct).map_err(|e| Error::io(&*path, e))?;
                }
                out.validations.push(rec);
            }
        }
    }
    if let Some(dir) = out_dir {
        state.to_checkpoint(&nets.cfg).save(dir.join("last.bin"))?;
    }
    Ok(out)
}

/// Mean PSNR of G's reconstructions and top-1 accuracy of `recognizer` on
/// them, over all of `data`.
pub fn validate(nets: &Nets, g: &ParamSet, recognizer: &ParamSet, data: &Batcher) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut correct = 0.0;
    let mut count = 0usize;
    for batch in data.sequential(100) {
        let batch = batch?;
        let sr = eval::generate(&nets.g, g, &batch.lr)?;
        psnr_sum += eval::mean_psnr(&sr, &batch.hr)? * batch.len() as f64;
        let probs = eval::recognize(&nets.c, recognizer, &sr)?;
        correct += eval::topk_accuracy(&probs, &batch.labels, 1)? / 100.0 * batch.len() as f64;
        count += batch.len();
    }
    Ok((psnr_sum / count as f64, 100.0 * correct / count as f64))
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// Training loss at every step.
    pub losses: Vec<f64>,
    /// Validation metric after every epoch (PSNR in dB for the generator,
    /// top-1 percent for the classifier).
    pub val_metric: Vec<f64>,
    /// Bicubic PSNR on the same validation data (generator only).
    pub baseline: Option<f64>,
    /// Final top-1 percent on the training data (classifier only).
    pub train_top1: Option<f64>,
}

/// Mean PSNR of bicubic upsampling on `data`.
pub fn bicubic_psnr(data: &Batcher, r: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for batch in data.sequential(100) {
        let batch = batch?;
        let up = eval::clamp_unit(&bicubic_resample(&batch.lr, Scale::up(r)?)?)?;
        sum += eval::mean_psnr(&up, &batch.hr)? * batch.len() as f64;
        count += batch.len();
    }
    Ok(sum / count as f64)
}

/// Trains G on content loss alone for `tc.pretrain_g_epochs` epochs,
/// starting from the same initialization [`GacState::init`] would use.
/// Returns a checkpoint holding only `g`.
pub fn pretrain_generator_mse(
    nets: &Nets,
    tc: &TrainConfig,
    train: &Batcher,
    val: Option<&Batcher>,
) -> Result<(Checkpoint, PretrainReport)> {
    let mut g = nets.g.build(net_seed(tc.seed, "g"))?;
    let mut opt = Optimizer::new(tc.pretrain_optimizer);
    let mut report = PretrainReport::default();
    if let Some(v) = val {
        report.baseline = Some(bicubic_psnr(v, nets.cfg.scale())?);
    }
    let mut step = 0u64;
    for epoch in 0..tc.pretrain_g_epochs as u64 {
        for batch in train.epoch(epoch) {
            let batch = batch?;
            let mut fx = Forward::new(&g, Mode::Train);
            let sr = nets.g.forward(&mut fx, &batch.lr)?;
            let updates = fx.into_updates();
            let loss = content_mse(&sr, &batch.hr)?.mul_scalar(tc.weights.w_mse);
            descend(&loss, &mut g, &mut opt, "generator", step)?;
            g.apply_updates(updates)?;
            report.losses.push(loss.item());
            step += 1;
        }
        if let Some(v) = val {
            let mut sum = 0.0;
            let mut count = 0usize;
            for batch in v.sequential(100) {
                let batch = batch?;
                let sr = eval::generate(&nets.g, &g, &batch.lr)?;
                sum += eval::mean_psnr(&sr, &batch.hr)? * batch.len() as f64;
                count += batch.len();
            }
            report.val_metric.push(sum / count as f64);
        }
    }
    let mut ck = Checkpoint::new(&nets.cfg, tc.seed);
    ck.epoch = tc.pretrain_g_epochs as u64;
    ck.step = step;
    ck.nets.insert("g".into(), g);
    ck.optimizers.insert("g".into(), opt);
    Ok((ck, report))
}

/// Trains a standalone classifier on high-resolution images by
/// cross-entropy. `init_tag` picks the initialization stream, so an
/// evaluation recognizer and a fixed-C classifier can come from the same
/// run seed without being identical.
pub fn pretrain_c0(
    nets: &Nets,
    tc: &TrainConfig,
    init_tag: &str,
    train: &Batcher,
    test: Option<&Batcher>,
) -> Result<(Checkpoint, PretrainReport)> {
    let mut c = nets.c.build(net_seed(tc.seed, init_tag))?;
    let mut opt = Optimizer::new(tc.pretrain_c_optimizer);
    let mut report = PretrainReport::default();
    let mut step = 0u64;
    let top1 = |c: &ParamSet, data: &Batcher| -> Result<f64> {
        let mut correct = 0.0;
        for batch in data.sequential(100) {
            let batch = batch?;
            let probs = eval::recognize(&nets.c, c, &batch.hr)?;
            correct += eval::topk_accuracy(&probs, &batch.labels, 1)? * batch.len() as f64;
        }
        Ok(correct / data.len() as f64)
    };
    for epoch in 0..tc.pretrain_c_epochs as u64 {
        for batch in train.epoch(epoch) {
            let batch = batch?;
            let probs = nets.c.forward(&mut Forward::new(&c, Mode::Train), &batch.hr)?;
            let loss = classifier_supervised_loss(&probs, &batch.labels)?.mul_scalar(1.0 / batch.len() as f64);
            descend(&loss, &mut c, &mut opt, "classifier", step)?;
            report.losses.push(loss.item());
            step += 1;
        }
        if let Some(t) = test {
            report.val_metric.push(top1(&c, t)?);
        }
    }
    report.train_top1 = Some(top1(&c, train)?);
    let mut ck = Checkpoint::new(&nets.cfg, tc.seed);
    ck.epoch = tc.pretrain_c_epochs as u64;
    ck.step = step;
    ck.nets.insert("c".into(), c);
    Ok((ck, report))
}
