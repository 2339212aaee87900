//! Reconstruction quality and recognizability measurements.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{bicubic_resample, denormalize, write_pgm, Batcher, Scale};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{Classifier, Generator, ModelConfig};
use crate::nn::{Forward, Mode};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{train_loop, GacState, Nets, Strategy, TrainConfig};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const REPORT_HEADER: [&str; 4] = ["method", "top1_pct", "top3_pct", "psnr_db"];

/// Clamps values into [-1, 1].
pub fn clamp_unit(x: &Tensor) -> Result<Tensor> {
    Tensor::new(x.shape(), x.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// PSNR in dB of two [-1, 1] images after mapping both to [0, 1].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(psnr_slices(a.data(), b.data()))
}

fn psnr_slices(a: &[f64], b: &[f64]) -> f64 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y) / 2.0;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Average of per-image PSNR over the leading (batch) axis.
pub fn mean_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().is_empty() || a.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "mean_psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    let per = a.numel() / n;
    let total: f64 = a
        .data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| psnr_slices(x, y))
        .sum();
    Ok(total / n as f64)
}

/// Percentage of rows whose label ranks among the `k` largest
/// probabilities. Equal probabilities rank by lower class index.
pub fn topk_accuracy(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::invalid_shape("topk_accuracy", s, format!("expected [{}, K]", labels.len())));
    }
    let classes = s[1];
    if k == 0 || k > classes {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {classes}, got {k}")));
    }
    let mut hits = 0usize;
    for (row, &label) in probs.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let p = row[label];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &q)| q > p || (q == p && j < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Generator output in inference mode (running batch-norm statistics, no
/// gradient tracking).
pub fn generate(g: &Generator, params: &ParamSet, lr: &Tensor) -> Result<Tensor> {
    let frozen = params.frozen();
    g.forward(&mut Forward::new(&frozen, Mode::Eval), &lr.detach())
}

/// Class probabilities in inference mode.
pub fn recognize(c: &Classifier, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let frozen = params.frozen();
    c.forward(&mut Forward::new(&frozen, Mode::Eval), &images.detach())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    Bicubic,
    MseOnly,
    Srgan,
    GacFixedC,
    GacTrainableC,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Bicubic => "bicubic",
            MethodKind::MseOnly => "mse-only",
            MethodKind::Srgan => "srgan",
            MethodKind::GacFixedC => "gac-fixed-c",
            MethodKind::GacTrainableC => "gac-trainable-c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            MethodKind::Bicubic,
            MethodKind::MseOnly,
            MethodKind::Srgan,
            MethodKind::GacFixedC,
            MethodKind::GacTrainableC,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A way of turning LR images into HR-sized ones.
#[derive(Clone, Debug)]
pub struct Method {
    pub kind: MethodKind,
    /// Generator weights; `None` only for bicubic.
    pub generator: Option<ParamSet>,
    /// Digest of the classifier trained alongside the generator, if any.
    pub trained_classifier: Option<String>,
}

impl Method {
    pub fn bicubic() -> Self {
        Method {
            kind: MethodKind::Bicubic,
            generator: None,
            trained_classifier: None,
        }
    }

    pub fn learned(kind: MethodKind, generator: ParamSet, trained_classifier: Option<&ParamSet>) -> Self {
        Method {
            kind,
            generator: Some(generator),
            trained_classifier: trained_classifier.map(ParamSet::digest),
        }
    }

    /// Reads the generator (and classifier digest, when present) from a
    /// checkpoint.
    pub fn from_checkpoint(kind: MethodKind, path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        if kind == MethodKind::Bicubic {
            return Ok(Method::bicubic());
        }
        let ck = Checkpoint::load(path, cfg)?;
        Ok(Method::learned(kind, ck.net("g")?.clone(), ck.nets.get("c")))
    }
}

/// SR images at HR geometry, values in [-1, 1].
pub fn reconstruct(method: &Method, g: &Generator, lr: &Tensor, r: usize) -> Result<Tensor> {
    match (&method.kind, &method.generator) {
        (MethodKind::Bicubic, _) => clamp_unit(&bicubic_resample(lr, Scale::up(r)?)?),
        (_, Some(params)) => generate(g, params, lr),
        (kind, None) => Err(Error::Config(format!("method {} has no generator weights", kind.name()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub top1_pct: f64,
    pub top3_pct: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// One row per method in the order given, then `hr`.
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != REPORT_HEADER {
            return Err(Error::format(path.as_ref(), format!("unexpected header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(EvalReport { rows })
    }
}

/// Side-by-side `LR (nearest) | SR | HR` rows for the first `rows` images.
pub fn contact_sheet(lr: &Tensor, sr: &Tensor, hr: &Tensor, rows: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = hr.shape();
    if s.len() != 4 || s[1] != 1 || sr.shape() != s {
        return Err(Error::invalid_shape("contact_sheet", s, "expected matching single-channel [N, 1, H, W]"));
    }
    let (n, h, w) = (s[0].min(rows), s[2], s[3]);
    let (lh, lw) = (lr.shape()[2], lr.shape()[3]);
    let gap = 2;
    let width = 3 * w + 2 * gap;
    let height = n * h + n.saturating_sub(1) * gap;
    let mut out = vec![128u8; width * height];
    for i in 0..n {
        for y in 0..h {
            let oy = i * (h + gap) + y;
            for x in 0..w {
                let lv = lr.data()[i * lh * lw + (y * lh / h) * lw + x * lw / w];
                let sv = sr.data()[i * h * w + y * w + x];
                let hv = hr.data()[i * h * w + y * w + x];
                for (col, v) in [lv, sv, hv].into_iter().enumerate() {
                    out[oy * width + col * (w + gap) + x] = denormalize(v);
                }
            }
        }
    }
    Ok((width, height, out))
}

/// Scores every method with `recognizer` on `test` and adds an `hr` row
/// for the untouched high-resolution images. With `out_dir`, writes
/// `report.csv` and one `grid-<method>.pgm` per method.
///
/// The recognizer must not be the classifier any method was trained with.
pub fn run_protocol(
    methods: &[Method],
    nets: &Nets,
    recognizer: &ParamSet,
    test: &Batcher,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let rec_digest = recognizer.digest();
    for m in methods {
        if m.trained_classifier.as_deref() == Some(rec_digest.as_str()) {
            return Err(Error::Config(format!(
                "method {} was trained with the evaluation classifier; use an independently trained recognizer",
                m.kind.name()
            )));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let r = nets.cfg.scale();
    let mut report = EvalReport::default();
    let score = |images: &dyn Fn(&crate::data::SampleBatch) -> Result<Tensor>| -> Result<(ReportRow, Option<Tensor>)> {
        let (mut t1, mut t3, mut ps) = (0.0, 0.0, 0.0);
        let mut first = None;
        for batch in test.sequential(100) {
            let batch = batch?;
            let sr = images(&batch)?;
            let probs = recognize(&nets.c, recognizer, &sr)?;
            let k3 = 3.min(nets.cfg.n_classes);
            let n = batch.len() as f64;
            t1 += topk_accuracy(&probs, &batch.labels, 1)? * n;
            t3 += topk_accuracy(&probs, &batch.labels, k3)? * n;
            ps += mean_psnr(&sr, &batch.hr)? * n;
            if first.is_none() {
                first = Some(sr);
            }
        }
        let n = test.len() as f64;
        Ok((
            ReportRow {
                method: String::new(),
                top1_pct: t1 / n,
                top3_pct: t3 / n,
                psnr_db: ps / n,
            },
            first,
        ))
    };
    // methods are independent and read-only, so they are scored in
    // parallel; collect keeps the input order
    let scored: Vec<(ReportRow, Option<Tensor>)> = methods
        .par_iter()
        .map(|m| score(&|b| reconstruct(m, &nets.g, &b.lr, r)))
        .collect::<Result<_>>()?;
    for (m, (mut row, first)) in methods.iter().zip(scored) {
        row.method = m.kind.name().to_string();
        if let (Some(dir), Some(sr)) = (out_dir, first) {
            let head = test.gather(&(0..sr.shape()[0]).collect::<Vec<_>>())?;
            let (w, h, px) = contact_sheet(&head.lr, &sr, &head.hr, 8)?;
            write_pgm(dir.join(format!("grid-{}.pgm", row.method)), w, h, &px)?;
        }
        report.rows.push(row);
    }
    let (mut hr_row, _) = score(&|b| Ok(b.hr.clone()))?;
    hr_row.method = "hr".into();
    report.rows.push(hr_row);
    if let Some(dir) = out_dir {
        report.write_csv(dir.join("report.csv"))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub strategy: String,
    pub top1_pct: f64,
    pub top3_pct: f64,
    pub psnr_db: f64,
    /// Digest of the generator every run started from.
    pub g_init_digest: String,
}

/// Inputs shared by every run of an α sweep.
pub struct SweepSetup<'a> {
    pub nets: &'a Nets,
    pub base: &'a TrainConfig,
    /// Pretrained generator all runs start from.
    pub pretrained_g: &'a ParamSet,
    pub train: &'a Batcher,
    pub test: &'a Batcher,
    pub recognizer: &'a ParamSet,
}

/// Trains one joint model per (strategy, α) from the same pretrained
/// generator and seed, then scores each with the recognizer. With
/// `out_csv`, writes the rows as CSV.
pub fn alpha_sweep(
    setup: &SweepSetup<'_>,
    alphas: &[f64],
    strategies: &[Strategy],
    out_csv: Option<PathBuf>,
) -> Result<Vec<SweepRow>> {
    if alphas.len() < 2 {
        return Err(Error::Config("an alpha sweep needs at least two values".into()));
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &alpha in alphas {
            let tc = TrainConfig {
                strategy,
                weights: LossWeights { alpha, ..setup.base.weights },
                ..setup.base.clone()
            };
            let mut state = GacState::init(setup.nets, &tc, Some(setup.pretrained_g.clone()))?;
            train_loop(setup.nets, &tc, &mut state, setup.train, None, None)?;
            let kind = match strategy {
                Strategy::FixedC => MethodKind::GacFixedC,
                Strategy::TrainableC => MethodKind::GacTrainableC,
            };
            let method = Method::learned(kind, state.g.clone(), Some(&state.c));
            let report = run_protocol(&[method], setup.nets, setup.recognizer, setup.test, None)?;
            let row = &report.rows[0];
            rows.push(SweepRow {
                alpha,
                strategy: strategy.name().to_string(),
                top1_pct: row.top1_pct,
                top3_pct: row.top3_pct,
                psnr_db: row.psnr_db,
                g_init_digest: setup.pretrained_g.digest(),
            });
        }
    }
    if let Some(path) = out_csv {
        let mut w = csv::Writer::from_path(&path)?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
