//! Quick built-in checks: layer and loss gradients against central
//! differences plus a handful of closed-form values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{bicubic_resample, Scale};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::losses::{self, LossComponents, LossWeights};
use crate::nn::{Forward, LayerSpec, Mode};
use crate::params::{ParamSet, Role};
use crate::tensor::Tensor;

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_RTOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Layer kinds with a small input shape each.
pub fn layer_cases() -> Result<Vec<(&'static str, LayerSpec, Vec<usize>)>> {
    Ok(vec![
        ("conv", LayerSpec::conv(2, 3, 3, 1)?, vec![2, 2, 4, 4]),
        ("conv-stride2", LayerSpec::conv(2, 3, 3, 2)?, vec![2, 2, 5, 5]),
        ("conv-wide", LayerSpec::conv(9, 8, 3, 1)?, vec![1, 9, 4, 4]),
        ("batch-norm", LayerSpec::batch_norm(2)?, vec![3, 2, 2, 2]),
        ("prelu", LayerSpec::prelu(2)?, vec![2, 2, 3]),
        ("leaky-relu", LayerSpec::leaky_relu(0.2)?, vec![2, 5]),
        ("dense", LayerSpec::dense(6, 3)?, vec![2, 6]),
        ("pixel-shuffle", LayerSpec::pixel_shuffle(2)?, vec![1, 8, 2, 2]),
        ("sigmoid", LayerSpec::Sigmoid, vec![2, 3]),
        ("softmax", LayerSpec::Softmax, vec![2, 4]),
        ("residual-block", LayerSpec::residual_block(2)?, vec![2, 2, 3, 3]),
        ("upsample-block", LayerSpec::upsample_block(1, 2)?, vec![2, 1, 2, 2]),
    ])
}

/// Grad check of one layer over its input and every trainable parameter,
/// in train mode.
pub fn layer_grad_check(spec: &LayerSpec, shape: &[usize], seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    spec.register("l", &mut ps)?;
    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in &names {
        let role = ps.role(name).expect("registered");
        let n = ps.get(name)?.numel();
        let data = match role {
            Role::RunningVar => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            Role::PreluSlope => vec![0.25; n],
            _ => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        ps.set_data(name, data)?;
    }
    let trainable: Vec<String> = names.into_iter().filter(|n| ps.role(n).is_some_and(Role::trainable)).collect();
    let x = uniform(shape, -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    for n in &trainable {
        inputs.push(ps.get(n)?.clone());
    }
    let probe = {
        let mut fx = Forward::new(&ps, Mode::Train);
        let y = spec.forward("l", &mut fx, &inputs[0])?;
        uniform(y.shape(), -1.0, 1.0, &mut rng)
    };
    let f = |xs: &[Tensor]| -> Result<Tensor> {
        let mut local = ps.clone();
        for (n, t) in trainable.iter().zip(&xs[1..]) {
            local.replace_tensor(n, t.clone())?;
        }
        let mut fx = Forward::new(&local, Mode::Train);
        Ok(spec.forward("l", &mut fx, &xs[0])?.mul(&probe)?.sum())
    };
    grad_check_many(f, &inputs, GRAD_EPS, GRAD_RTOL)
}

type LossFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Each loss as a function of its probability or image inputs.
pub fn loss_cases(seed: u64) -> Vec<(&'static str, LossFn, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let l2 = labels.clone();
    let w = LossWeights {
        w_mse: 1.0,
        w_adv: 0.3,
        alpha: 0.2,
    };
    let hr = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
    let hr2 = hr.clone();
    let cls_labels = [1usize, 0];
    let simplex = |rng: &mut ChaCha8Rng| uniform(&[3, 4], -2.0, 2.0, rng).softmax().expect("2-d");
    vec![
        (
            "content-mse",
            Box::new(move |x: &[Tensor]| losses::content_mse(&x[0], &hr)) as LossFn,
            vec![uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng)],
        ),
        (
            "generator-adversarial",
            Box::new(|x: &[Tensor]| losses::generator_adversarial_loss(&x[0])),
            vec![uniform(&[4, 1], 0.05, 0.95, &mut rng)],
        ),
        (
            "discriminator",
            Box::new(|x: &[Tensor]| losses::discriminator_loss(&x[0], &x[1])),
            vec![uniform(&[4, 1], 0.05, 0.95, &mut rng), uniform(&[4, 1], 0.05, 0.95, &mut rng)],
        ),
        (
            "classification-sr",
            Box::new(move |x: &[Tensor]| losses::classification_loss_sr(&x[0], &labels)),
            vec![simplex(&mut rng)],
        ),
        (
            "classifier-supervised",
            Box::new(move |x: &[Tensor]| losses::classifier_supervised_loss(&x[0], &l2)),
            vec![simplex(&mut rng)],
        ),
        (
            "generator-objective",
            Box::new(move |x: &[Tensor]| {
                let mse = losses::content_mse(&x[0], &hr2)?;
                let adv = losses::generator_adversarial_loss(&x[1])?;
                let cla = losses::classification_loss_sr(&x[2], &cls_labels)?;
                w.generator_objective(&mse, Some(&adv), Some(&cla))
            }),
            vec![
                uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng),
                uniform(&[2, 1], 0.05, 0.95, &mut rng),
                uniform(&[2, 3], 0.05, 0.95, &mut rng),
            ],
        ),
    ]
}

fn check(name: String, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match run() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Kink-straddling coordinates tolerated per check, as a fraction of the
/// coordinates checked.
pub const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Default)]
struct Tally {
    worst: f64,
    checked: usize,
    kinks: usize,
    seeds: u64,
}

impl Tally {
    fn add(&mut self, r: GradCheckReport) {
        self.worst = self.worst.max(r.max_deviation);
        self.checked += r.checked;
        self.kinks += r.kinks;
        self.seeds += 1;
    }

    fn verdict(&self) -> (bool, String) {
        let ok = self.worst <= GRAD_RTOL && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64;
        (
            ok,
            format!(
                "max deviation {:.2e} over {} seeds, {} coordinates, {} on kinks",
                self.worst, self.seeds, self.checked, self.kinks
            ),
        )
    }
}

/// Gradient checks for every layer and loss over `seeds` seeds.
pub fn gradient_checks(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec, shape) in layer_cases()? {
        out.push(check(format!("grad {name}"), || {
            let mut t = Tally::default();
            for seed in 0..seeds {
                t.add(layer_grad_check(&spec, &shape, seed)?);
            }
            Ok(t.verdict())
        }));
    }
    out.push(check("grad tanh".into(), || {
        let mut t = Tally::default();
        for seed in 0..seeds {
            let x = uniform(&[2, 5], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
            t.add(grad_check_many(|x| Ok(x[0].tanh().mul(&x[0])?.sum()), &[x], GRAD_EPS, GRAD_RTOL)?);
        }
        Ok(t.verdict())
    }));
    let names: Vec<&str> = loss_cases(0).iter().map(|c| c.0).collect();
    for (i, name) in names.into_iter().enumerate() {
        out.push(check(format!("grad {name}"), || {
            let mut t = Tally::default();
            for seed in 0..seeds {
                let (_, f, inputs) = loss_cases(seed).swap_remove(i);
                t.add(grad_check_many(f, &inputs, GRAD_EPS, GRAD_RTOL)?);
            }
            Ok(t.verdict())
        }));
    }
    Ok(out)
}

/// Closed-form values for the losses and resampling.
pub fn value_checks() -> Vec<CheckResult> {
    let col = |v: &[f64]| Tensor::new(&[v.len(), 1], v.to_vec());
    vec![
        check("weighted total".into(), || {
            let c = LossComponents {
                mse: 1.0,
                adv: 2.0,
                cla: 3.0,
                r_c: 4.0,
            };
            let b = losses::total_generator_loss(c, &LossWeights::default())?;
            let ok = (b.generator_total - 1.0035).abs() < 1e-12 && (b.total - 5.0035).abs() < 1e-12;
            Ok((ok, format!("generator {} total {}", b.generator_total, b.total)))
        }),
        check("discriminator at one half".into(), || {
            let v = losses::discriminator_loss(&col(&[0.5; 3])?, &col(&[0.5; 3])?)?.item();
            Ok(((v - 2.0 * 2f64.ln()).abs() < 1e-12, format!("{v}")))
        }),
        check("uniform cross-entropy".into(), || {
            let v = losses::classification_loss_sr(&Tensor::full(&[2, 10], 0.1), &[3, 7])?.item();
            Ok(((v - 2.0 * 10f64.ln()).abs() < 1e-12, format!("{v}")))
        }),
        check("bicubic keeps constants".into(), || {
            let img = Tensor::full(&[1, 28, 28], 0.375);
            let lr = bicubic_resample(&img, Scale::down(7)?)?;
            let sr = bicubic_resample(&lr, Scale::up(7)?)?;
            let worst = lr.data().iter().chain(sr.data()).map(|v| (v - 0.375).abs()).fold(0.0, f64::max);
            Ok((worst < 1e-12 && lr.shape() == [1, 4, 4] && sr.shape() == [1, 28, 28], format!("max error {worst:.1e}")))
        }),
        check("pixel shuffle index map".into(), || {
            // channel c*r*r + i*r + j lands at (c, h*r + i, w*r + j)
            let (c, r, h, w) = (2, 3, 2, 2);
            let n = c * r * r * h * w;
            let x = Tensor::new(&[1, c * r * r, h, w], (0..n).map(|v| v as f64).collect())?;
            let y = x.pixel_shuffle(r)?;
            let mut ok = y.shape() == [1, c, h * r, w * r];
            for ch in 0..c {
                for yy in 0..h * r {
                    for xx in 0..w * r {
                        let src = ((ch * r * r + (yy % r) * r + xx % r) * h + yy / r) * w + xx / r;
                        ok &= y.data()[(ch * h * r + yy) * w * r + xx] == src as f64;
                    }
                }
            }
            Ok((ok, format!("{:?}", y.shape())))
        }),
    ]
}

/// Everything above; `seeds` controls the gradient checks.
pub fn run(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = gradient_checks(seeds)?;
    out.extend(value_checks());
    Ok(out)
}
