//! Layer vocabulary for the generator, discriminator and classifier.
//!
//! Layers are pure functions of `(input, ParamSet, mode)`. A [`LayerSpec`]
//! knows which parameters it owns (so a network's [`ParamSet`] can be built
//! from its layer list) and how to run forward against them. Batch-norm
//! running statistics are the one piece of state: training-mode passes
//! collect their updates in [`Forward`] and the caller decides whether to
//! commit them.

use crate::error::{Error, Result};
use crate::params::{ParamSet, Role};
use crate::tensor::{Conv2dOpts, Padding, Tensor};

pub const PRELU_INIT: f64 = 0.25;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Upsampling factors a single sub-pixel block may use.
pub const UPSAMPLE_SCALES: [usize; 3] = [2, 4, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a parameter set.
pub struct Forward<'a> {
    params: &'a ParamSet,
    mode: Mode,
    updates: Vec<(String, Vec<f64>)>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamSet, mode: Mode) -> Self {
        Forward {
            params,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<&'a Tensor> {
        self.params.get(name)
    }

    /// Running-statistics updates recorded by training-mode batch norms.
    pub fn into_updates(self) -> Vec<(String, Vec<f64>)> {
        self.updates
    }
}

/// Convolution with "same" zero padding (`kernel / 2` per side).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    BatchNorm { channels: usize },
    Prelu { channels: usize },
    LeakyRelu { slope: f64 },
    Dense { inputs: usize, outputs: usize },
    PixelShuffle { r: usize },
    Sigmoid,
    Softmax,
    /// conv3x3 -> BN -> PReLU -> conv3x3 -> BN, plus identity skip.
    ResidualBlock { channels: usize },
    /// conv3x3 (C -> C*s*s) -> pixel shuffle(s) -> PReLU.
    UpsampleBlock { channels: usize, scale: usize },
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{what} must be positive")));
    }
    Ok(())
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        positive("conv in_channels", in_channels)?;
        positive("conv out_channels", out_channels)?;
        positive("conv stride", stride)?;
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(LayerSpec::Conv(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
        }))
    }

    pub fn batch_norm(channels: usize) -> Result<Self> {
        positive("batch norm channels", channels)?;
        Ok(LayerSpec::BatchNorm { channels })
    }

    pub fn prelu(channels: usize) -> Result<Self> {
        positive("prelu channels", channels)?;
        Ok(LayerSpec::Prelu { channels })
    }

    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky relu slope must be in (0, 1), got {slope}")));
        }
        Ok(LayerSpec::LeakyRelu { slope })
    }

    pub fn dense(inputs: usize, outputs: usize) -> Result<Self> {
        positive("dense inputs", inputs)?;
        positive("dense outputs", outputs)?;
        Ok(LayerSpec::Dense { inputs, outputs })
    }

    pub fn pixel_shuffle(r: usize) -> Result<Self> {
        positive("pixel shuffle factor", r)?;
        Ok(LayerSpec::PixelShuffle { r })
    }

    pub fn residual_block(channels: usize) -> Result<Self> {
        positive("residual block channels", channels)?;
        Ok(LayerSpec::ResidualBlock { channels })
    }

    pub fn upsample_block(channels: usize, scale: usize) -> Result<Self> {
        positive("upsample block channels", channels)?;
        if !UPSAMPLE_SCALES.contains(&scale) {
            return Err(Error::Config(format!(
                "unsupported upsample scale {scale}; expected one of {UPSAMPLE_SCALES:?}"
            )));
        }
        Ok(LayerSpec::UpsampleBlock { channels, scale })
    }

    /// `(suffix, role, shape)` of every tensor this layer owns.
    pub fn param_shapes(&self) -> Vec<(String, Role, Vec<usize>)> {
        let nest = |prefix: &str, inner: &LayerSpec| {
            inner
                .param_shapes()
                .into_iter()
                .map(|(n, r, s)| (format!("{prefix}.{n}"), r, s))
                .collect::<Vec<_>>()
        };
        match *self {
            LayerSpec::Conv(c) => vec![
                (
                    "weight".into(),
                    Role::ConvWeight,
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                ),
                ("bias".into(), Role::Bias, vec![c.out_channels]),
            ],
            LayerSpec::BatchNorm { channels } => vec![
                ("gamma".into(), Role::BnGamma, vec![channels]),
                ("beta".into(), Role::BnBeta, vec![channels]),
                ("running_mean".into(), Role::RunningMean, vec![channels]),
                ("running_var".into(), Role::RunningVar, vec![channels]),
            ],
            LayerSpec::Prelu { channels } => vec![("slope".into(), Role::PreluSlope, vec![channels])],
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight".into(), Role::DenseWeight, vec![inputs, outputs]),
                ("bias".into(), Role::Bias, vec![outputs]),
            ],
            LayerSpec::LeakyRelu { .. } | LayerSpec::PixelShuffle { .. } | LayerSpec::Sigmoid | LayerSpec::Softmax => {
                Vec::new()
            }
            LayerSpec::ResidualBlock { channels } => {
                let conv = LayerSpec::Conv(ConvSpec {
                    in_channels: channels,
                    out_channels: channels,
                    kernel: 3,
                    stride: 1,
                });
                let bn = LayerSpec::BatchNorm { channels };
                let mut v = nest("conv1", &conv);
                v.extend(nest("bn1", &bn));
                v.extend(nest("act", &LayerSpec::Prelu { channels }));
                v.extend(nest("conv2", &conv));
                v.extend(nest("bn2", &bn));
                v
            }
            LayerSpec::UpsampleBlock { channels, scale } => {
                let conv = LayerSpec::Conv(ConvSpec {
                    in_channels: channels,
                    out_channels: channels * scale * scale,
                    kernel: 3,
                    stride: 1,
                });
                let mut v = nest("conv", &conv);
                v.extend(nest("act", &LayerSpec::Prelu { channels }));
                v
            }
        }
    }

    /// Trainable scalars owned by this layer.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(_, r, _)| r.trainable())
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Adds this layer's tensors to `params` under `prefix.`.
    pub fn register(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (suffix, role, shape) in self.param_shapes() {
            params.insert(format!("{prefix}.{suffix}"), role, &shape)?;
        }
        Ok(())
    }

    pub fn forward(&self, prefix: &str, fx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let p = |s: &str| format!("{prefix}.{s}");
        match *self {
            LayerSpec::Conv(c) => {
                let pad = Padding::uniform(c.kernel / 2);
                x.conv2d(
                    fx.param(&p("weight"))?,
                    Some(fx.param(&p("bias"))?),
                    Conv2dOpts::new(c.stride, pad),
                )
            }
            LayerSpec::BatchNorm { .. } => batch_norm(prefix, fx, x),
            LayerSpec::Prelu { .. } => x.prelu(fx.param(&p("slope"))?),
            LayerSpec::LeakyRelu { slope } => Ok(x.leaky_relu(slope)),
            LayerSpec::Dense { inputs, .. } => {
                let x = if x.shape().len() == 2 { x.clone() } else { x.flatten()? };
                if x.shape()[1] != inputs {
                    return Err(Error::ShapeMismatch {
                        op: "dense",
                        lhs: x.shape().to_vec(),
                        rhs: vec![inputs],
                    });
                }
                x.matmul(fx.param(&p("weight"))?)?
                    .add_channel_bias(fx.param(&p("bias"))?)
            }
            LayerSpec::PixelShuffle { r } => x.pixel_shuffle(r),
            LayerSpec::Sigmoid => Ok(x.sigmoid()),
            LayerSpec::Softmax => x.softmax(),
            LayerSpec::ResidualBlock { channels } => residual_block(prefix, channels, fx, x),
            LayerSpec::UpsampleBlock { channels, scale } => {
                if x.shape().len() != 4 || x.shape()[1] != channels {
                    return Err(Error::invalid_shape(
                        "upsample_block",
                        x.shape(),
                        format!("expected {channels} input channels"),
                    ));
                }
                let conv = LayerSpec::Conv(ConvSpec {
                    in_channels: channels,
                    out_channels: channels * scale * scale,
                    kernel: 3,
                    stride: 1,
                });
                let y = conv.forward(&p("conv"), fx, x)?.pixel_shuffle(scale)?;
                y.prelu(fx.param(&p("act.slope"))?)
            }
        }
    }
}

/// Training mode standardizes by batch statistics and records the momentum
/// update of the running statistics; eval mode uses the running statistics.
fn batch_norm(prefix: &str, fx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
    let p = |s: &str| format!("{prefix}.{s}");
    let gamma = fx.param(&p("gamma"))?;
    let beta = fx.param(&p("beta"))?;
    let running_mean = fx.param(&p("running_mean"))?;
    let running_var = fx.param(&p("running_var"))?;
    match fx.mode {
        Mode::Eval => x.batch_norm_eval(gamma, beta, running_mean.data(), running_var.data(), BN_EPS),
        Mode::Train => {
            let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS)?;
            let m = (x.numel() / mean.len()) as f64;
            let unbias = m / (m - 1.0);
            let blend = |old: &[f64], new: &[f64], scale: f64| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n * scale)
                    .collect()
            };
            let new_mean = blend(running_mean.data(), &mean, 1.0);
            let new_var = blend(running_var.data(), &var, unbias);
            fx.updates.push((p("running_mean"), new_mean));
            fx.updates.push((p("running_var"), new_var));
            Ok(y)
        }
    }
}

fn residual_block(prefix: &str, channels: usize, fx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 || x.shape()[1] != channels {
        return Err(Error::invalid_shape(
            "residual_block",
            x.shape(),
            format!("expected {channels} input channels"),
        ));
    }
    let p = |s: &str| format!("{prefix}.{s}");
    let conv = LayerSpec::Conv(ConvSpec {
        in_channels: channels,
        out_channels: channels,
        kernel: 3,
        stride: 1,
    });
    let bn = LayerSpec::BatchNorm { channels };
    let y = conv.forward(&p("conv1"), fx, x)?;
    let y = bn.forward(&p("bn1"), fx, &y)?;
    let y = y.prelu(fx.param(&p("act.slope"))?)?;
    let y = conv.forward(&p("conv2"), fx, &y)?;
    let y = bn.forward(&p("bn2"), fx, &y)?;
    if y.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "residual_block",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    x.add(&y)
}
