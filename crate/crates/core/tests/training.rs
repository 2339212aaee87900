use std::path::Path;

use gac::data::{synth_glyphs, Batcher, SampleBatch};
use gac::losses::{
    classification_loss_sr, classifier_supervised_loss, content_mse, discriminator_loss,
    generator_adversarial_loss, LossWeights,
};
use gac::models::ModelConfig;
use gac::nn::{Forward, Mode};
use gac::optim::OptimizerKind;
use gac::params::ParamSet;
use gac::trainer::{gac_train_step, GacState, Nets, Strategy, TrainConfig};
use gac::Tensor;

fn small_cfg() -> ModelConfig {
    let mut c = ModelConfig::desk(4, vec![2], 16);
    c.n_residual_blocks = 1;
    c.base_channels = 4;
    c.disc_channels = vec![4, 4, 4, 4, 8, 8, 8, 8];
    c.disc_hidden = 8;
    c.classifier_channels = vec![4, 4, 8];
    c.classifier_hidden = 8;
    c
}

fn batch(seed: u64) -> SampleBatch {
    let ds = synth_glyphs(4, 2, 16, seed).unwrap();
    Batcher::new(&ds, 8, 2, seed).unwrap().sequential(8).next().unwrap().unwrap()
}

fn tc(lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        weights: LossWeights {
            w_mse: 1.0,
            w_adv: 1e-3,
            alpha: 1e-2,
        },
        strategy: Strategy::TrainableC,
        batch_size: 8,
        optimizer: OptimizerKind::Sgd { lr },
        seed,
        ..Default::default()
    }
}

/// Independent copy through checkpoint bytes, so no leaf is shared.
fn copy_state(nets: &Nets, st: &GacState) -> GacState {
    let bytes = st.to_checkpoint(&nets.cfg).to_bytes();
    let ck = gac::checkpoint::Checkpoint::from_bytes(&bytes, &nets.cfg, Path::new("memory")).unwrap();
    GacState::from_checkpoint(&ck).unwrap()
}

fn g_objective(nets: &Nets, g: &ParamSet, d: &ParamSet, c: &ParamSet, b: &SampleBatch, w: &LossWeights) -> f64 {
    let n = b.len() as f64;
    let (g, d, c) = (g.frozen(), d.frozen(), c.frozen());
    let sr = nets.g.forward(&mut Forward::new(&g, Mode::Train), &b.lr).unwrap();
    let mse = content_mse(&sr, &b.hr).unwrap();
    let fake = nets.d.forward(&mut Forward::new(&d, Mode::Eval), &sr).unwrap();
    let adv = generator_adversarial_loss(&fake).unwrap().mul_scalar(1.0 / n);
    let probs = nets.c.forward(&mut Forward::new(&c, Mode::Eval), &sr).unwrap();
    let cla = classification_loss_sr(&probs, &b.labels).unwrap().mul_scalar(1.0 / n);
    w.generator_objective(&mse, Some(&adv), Some(&cla)).unwrap().item()
}

fn d_objective(nets: &Nets, g: &ParamSet, d: &ParamSet, b: &SampleBatch) -> f64 {
    let (g, d) = (g.frozen(), d.frozen());
    let sr = nets.g.forward(&mut Forward::new(&g, Mode::Train), &b.lr).unwrap();
    let mut fx = Forward::new(&d, Mode::Train);
    let real = nets.d.forward(&mut fx, &b.hr).unwrap();
    let fake = nets.d.forward(&mut fx, &sr).unwrap();
    discriminator_loss(&real, &fake).unwrap().item()
}

/// Runs one joint step from `start` with the largest of lr, lr/2, ... lr/16
/// for which `improved` holds.
fn descends_within_halvings(
    nets: &Nets,
    start: &GacState,
    b: &SampleBatch,
    seed: u64,
    improved: impl Fn(&GacState, &GacState) -> bool,
) -> bool {
    let mut lr = 1e-2;
    for _ in 0..5 {
        let mut st = copy_state(nets, start);
        gac_train_step(nets, &mut st, b, &tc(lr, seed)).unwrap();
        if improved(start, &st) {
            return true;
        }
        lr /= 2.0;
    }
    false
}

#[test]
fn generator_objective_decreases_after_one_step() {
    let nets = Nets::new(&small_cfg()).unwrap();
    for seed in 0..3 {
        let b = batch(seed);
        let start = GacState::init(&nets, &tc(1e-2, seed), None).unwrap();
        let w = tc(1e-2, seed).weights;
        // both sides are scored against the D and C the generator update saw
        let ok = descends_within_halvings(&nets, &start, &b, seed, |before, after| {
            let old = g_objective(&nets, &before.g, &after.d, &after.c, &b, &w);
            let new = g_objective(&nets, &after.g, &after.d, &after.c, &b, &w);
            new < old
        });
        assert!(ok, "seed {seed}: generator objective did not decrease");
    }
}

#[test]
fn discriminator_objective_improves_after_one_step() {
    let nets = Nets::new(&small_cfg()).unwrap();
    for seed in 0..3 {
        let b = batch(seed);
        let start = GacState::init(&nets, &tc(1e-2, seed), None).unwrap();
        let ok = descends_within_halvings(&nets, &start, &b, seed, |before, after| {
            let old = d_objective(&nets, &before.g, &before.d, &b);
            let new = d_objective(&nets, &before.g, &after.d, &b);
            new < old
        });
        assert!(ok, "seed {seed}: discriminator loss did not decrease");
    }
}

fn generator_grads(nets: &Nets, g: &ParamSet, c: &ParamSet, b: &SampleBatch, with_rc: bool) -> Vec<Vec<f64>> {
    let mut fx = Forward::new(g, Mode::Train);
    let sr = nets.g.forward(&mut fx, &b.lr).unwrap();
    let mut objective = content_mse(&sr, &b.hr).unwrap();
    if with_rc {
        let probs = nets.c.forward(&mut Forward::new(c, Mode::Train), &b.hr).unwrap();
        let rc = classifier_supervised_loss(&probs, &b.labels).unwrap();
        objective = objective.add(&rc).unwrap();
    }
    objective.backward().unwrap();
    g.iter()
        .filter(|(_, p)| p.role.trainable())
        .map(|(_, p)| p.tensor.grad().unwrap_or_default())
        .collect()
}

#[test]
fn classifier_real_loss_sends_no_gradient_to_generator() {
    let nets = Nets::new(&small_cfg()).unwrap();
    let b = batch(5);
    let st = GacState::init(&nets, &tc(1e-2, 5), None).unwrap();
    let plain = copy_state(&nets, &st);
    let joined = copy_state(&nets, &st);
    let a = generator_grads(&nets, &plain.g, &plain.c, &b, false);
    let z = generator_grads(&nets, &joined.g, &joined.c, &b, true);
    assert_eq!(a.len(), z.len());
    for (x, y) in a.iter().zip(&z) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    // the classifier itself does receive the gradient
    let c_grads: Vec<f64> = joined
        .c
        .iter()
        .filter(|(_, p)| p.role.trainable())
        .flat_map(|(_, p)| p.tensor.grad().unwrap_or_default())
        .collect();
    assert!(c_grads.iter().any(|v| *v != 0.0));
}

#[test]
fn zero_alpha_leaves_classifier_out_of_generator_update() {
    let nets = Nets::new(&small_cfg()).unwrap();
    let b = batch(2);
    let mut cfg = tc(1e-2, 2);
    cfg.weights.alpha = 0.0;
    let start = GacState::init(&nets, &cfg, None).unwrap();
    let mut a = copy_state(&nets, &start);
    let mut z = copy_state(&nets, &start);
    // a different classifier must not change the generator update
    let names: Vec<String> = z.c.names().map(str::to_string).collect();
    for name in names {
        let t: &Tensor = z.c.get(&name).unwrap();
        let data: Vec<f64> = t.to_vec().iter().enumerate().map(|(i, v)| v + ((i * 7919) % 13) as f64 * 0.01).collect();
        z.c.set_data(&name, data).unwrap();
    }
    gac_train_step(&nets, &mut a, &b, &cfg).unwrap();
    gac_train_step(&nets, &mut z, &b, &cfg).unwrap();
    assert!(a.g.bit_eq(&z.g));
    assert!(!a.c.bit_eq(&z.c));
}
