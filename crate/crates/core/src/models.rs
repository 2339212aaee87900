//! Generator, discriminator and classifier assembled from [`crate::nn`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Forward, LayerSpec, LEAKY_SLOPE, UPSAMPLE_SCALES};
use crate::params::{hex_digest, ParamSet, Role};
use crate::tensor::Tensor;

/// Architecture constants shared by the three networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_residual_blocks: usize,
    pub base_channels: usize,
    /// Per-block upsampling factors; their product is the scale factor r.
    pub upsample_schedule: Vec<usize>,
    pub image_channels: usize,
    pub n_classes: usize,
    /// Side of the (square) high-resolution image the discriminator and
    /// classifier consume; fixes their dense-layer widths.
    pub hr_size: usize,
    /// Kernel of the generator's first and last convolutions.
    pub edge_kernel: usize,
    /// Eight entries; stride 2 on every second conv.
    pub disc_channels: Vec<usize>,
    pub disc_hidden: usize,
    /// Three entries, each conv with stride 2.
    pub classifier_channels: Vec<usize>,
    pub classifier_hidden: usize,
}

impl ModelConfig {
    /// Full-width networks: 16 residual blocks, 64 feature maps, 64 to 512
    /// discriminator channels, 64 to 128 classifier channels.
    pub fn full(n_classes: usize, upsample_schedule: Vec<usize>, hr_size: usize) -> Self {
        ModelConfig {
            n_residual_blocks: 16,
            base_channels: 64,
            upsample_schedule,
            image_channels: 1,
            n_classes,
            hr_size,
            edge_kernel: 9,
            disc_channels: vec![64, 64, 128, 128, 256, 256, 512, 512],
            disc_hidden: 1024,
            classifier_channels: vec![64, 128, 128],
            classifier_hidden: 1024,
        }
    }

    /// CPU-sized networks with the same topology.
    pub fn desk(n_classes: usize, upsample_schedule: Vec<usize>, hr_size: usize) -> Self {
        ModelConfig {
            n_residual_blocks: 4,
            base_channels: 16,
            upsample_schedule,
            image_channels: 1,
            n_classes,
            hr_size,
            edge_kernel: 9,
            disc_channels: vec![16, 16, 32, 32, 64, 64, 128, 128],
            disc_hidden: 128,
            classifier_channels: vec![16, 32, 32],
            classifier_hidden: 128,
        }
    }

    pub fn scale(&self) -> usize {
        self.upsample_schedule.iter().product()
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.upsample_schedule.is_empty() {
            return fail("upsample schedule is empty".into());
        }
        if let Some(s) = self.upsample_schedule.iter().find(|s| !UPSAMPLE_SCALES.contains(s)) {
            return fail(format!("unsupported upsample scale {s}; expected one of {UPSAMPLE_SCALES:?}"));
        }
        if self.hr_size == 0 || self.hr_size % self.scale() != 0 {
            return fail(format!(
                "hr_size {} is not a multiple of the scale factor {}",
                self.hr_size,
                self.scale()
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return fail(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.disc_channels.len() != 8 {
            return fail(format!("discriminator needs 8 conv widths, got {}", self.disc_channels.len()));
        }
        if self.classifier_channels.len() != 3 {
            return fail(format!(
                "classifier needs 3 conv widths, got {}",
                self.classifier_channels.len()
            ));
        }
        if self.edge_kernel % 2 == 0 {
            return fail(format!("edge_kernel must be odd, got {}", self.edge_kernel));
        }
        let zero = [self.base_channels, self.disc_hidden, self.classifier_hidden]
            .into_iter()
            .chain(self.disc_channels.iter().copied())
            .chain(self.classifier_channels.iter().copied())
            .any(|c| c == 0);
        if zero {
            return fail("channel widths must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key=value` lines; the digest is computed over these.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "n_residual_blocks={}\nbase_channels={}\nupsample_schedule={}\nimage_channels={}\n\
             n_classes={}\nhr_size={}\nedge_kernel={}\ndisc_channels={}\ndisc_hidden={}\n\
             classifier_channels={}\nclassifier_hidden={}\n",
            self.n_residual_blocks,
            self.base_channels,
            list(&self.upsample_schedule),
            self.image_channels,
            self.n_classes,
            self.hr_size,
            self.edge_kernel,
            list(&self.disc_channels),
            self.disc_hidden,
            list(&self.classifier_channels),
            self.classifier_hidden,
        )
    }

    /// SHA-256 of [`ModelConfig::canonical`], hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        hex_digest(h)
    }
}

/// Spatial extent after a 3x3, pad-1 convolution with `stride`.
fn conv_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

fn build_params(layers: &[(String, LayerSpec)]) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (name, spec) in layers {
        spec.register(name, &mut ps)?;
    }
    Ok(ps)
}

fn check_image(op: &'static str, x: &Tensor, channels: usize, size: Option<usize>) -> Result<()> {
    let s = x.shape();
    let ok = s.len() == 4 && s[1] == channels && size.is_none_or(|n| s[2] == n && s[3] == n);
    if !ok {
        let want = match size {
            Some(n) => format!("expected [N, {channels}, {n}, {n}]"),
            None => format!("expected [N, {channels}, H, W]"),
        };
        return Err(Error::invalid_shape(op, s, want));
    }
    Ok(())
}

/// Low- to high-resolution generator. Fully convolutional: any input size
/// works and the output is `r` times larger.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    layers: Vec<(String, LayerSpec)>,
}

impl Generator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let mut layers = vec![
            ("head".to_string(), LayerSpec::conv(cfg.image_channels, c, cfg.edge_kernel, 1)?),
            ("head_act".to_string(), LayerSpec::prelu(c)?),
        ];
        for i in 0..cfg.n_residual_blocks {
            layers.push((format!("res{i}"), LayerSpec::residual_block(c)?));
        }
        layers.push(("mid".to_string(), LayerSpec::conv(c, c, 3, 1)?));
        layers.push(("mid_bn".to_string(), LayerSpec::batch_norm(c)?));
        for (i, &s) in cfg.upsample_schedule.iter().enumerate() {
            layers.push((format!("up{i}"), LayerSpec::upsample_block(c, s)?));
        }
        layers.push(("tail".to_string(), LayerSpec::conv(c, cfg.image_channels, cfg.edge_kernel, 1)?));
        Ok(Generator { cfg: cfg.clone(), layers })
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn build(&self, seed: u64) -> Result<ParamSet> {
        let mut ps = build_params(&self.layers)?;
        init_params(&mut ps, seed)?;
        Ok(ps)
    }

    /// `[N, C, H, W] -> [N, C, rH, rW]`, values in (-1, 1).
    pub fn forward(&self, fx: &mut Forward<'_>, lr: &Tensor) -> Result<Tensor> {
        check_image("generator", lr, self.cfg.image_channels, None)?;
        let mut layers = self.layers.iter();
        let mut next = |x: &Tensor, fx: &mut Forward<'_>| -> Result<Tensor> {
            let (name, spec) = layers.next().expect("generator layer list exhausted");
            spec.forward(name, fx, x)
        };
        let head = next(lr, fx)?;
        let head = next(&head, fx)?;
        let mut y = head.clone();
        for _ in 0..self.cfg.n_residual_blocks {
            y = next(&y, fx)?;
        }
        y = next(&y, fx)?;
        y = next(&y, fx)?.add(&head)?;
        for _ in &self.cfg.upsample_schedule {
            y = next(&y, fx)?;
        }
        Ok(next(&y, fx)?.tanh())
    }
}

/// Real-versus-reconstructed scorer: eight 3x3 convs with LeakyReLU, two
/// dense layers, sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: ModelConfig,
    layers: Vec<(String, LayerSpec)>,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = cfg.image_channels;
        let mut extent = cfg.hr_size;
        for (i, &out_ch) in cfg.disc_channels.iter().enumerate() {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            layers.push((format!("conv{i}"), LayerSpec::conv(in_ch, out_ch, 3, stride)?));
            layers.push((format!("act{i}"), LayerSpec::leaky_relu(LEAKY_SLOPE)?));
            in_ch = out_ch;
            extent = conv_extent(extent, stride);
        }
        let flat = in_ch * extent * extent;
        layers.push(("fc1".to_string(), LayerSpec::dense(flat, cfg.disc_hidden)?));
        layers.push(("fc1_act".to_string(), LayerSpec::leaky_relu(LEAKY_SLOPE)?));
        layers.push(("fc2".to_string(), LayerSpec::dense(cfg.disc_hidden, 1)?));
        layers.push(("out".to_string(), LayerSpec::Sigmoid));
        Ok(Discriminator { cfg: cfg.clone(), layers })
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn build(&self, seed: u64) -> Result<ParamSet> {
        let mut ps = build_params(&self.layers)?;
        init_params(&mut ps, seed)?;
        Ok(ps)
    }

    /// `[N, C, hr, hr] -> [N, 1]` probabilities of being a real image.
    pub fn forward(&self, fx: &mut Forward<'_>, image: &Tensor) -> Result<Tensor> {
        check_image("discriminator", image, self.cfg.image_channels, Some(self.cfg.hr_size))?;
        let mut y = image.clone();
        for (name, spec) in &self.layers {
            y = spec.forward(name, fx, &y)?;
        }
        Ok(y)
    }
}

/// Three stride-2 3x3 convs with LeakyReLU, two dense layers, softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    cfg: ModelConfig,
    layers: Vec<(String, LayerSpec)>,
}

impl Classifier {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = cfg.image_channels;
        let mut extent = cfg.hr_size;
        for (i, &out_ch) in cfg.classifier_channels.iter().enumerate() {
            layers.push((format!("conv{i}"), LayerSpec::conv(in_ch, out_ch, 3, 2)?));
            layers.push((format!("act{i}"), LayerSpec::leaky_relu(LEAKY_SLOPE)?));
            in_ch = out_ch;
            extent = conv_extent(extent, 2);
        }
        let flat = in_ch * extent * extent;
        layers.push(("fc1".to_string(), LayerSpec::dense(flat, cfg.classifier_hidden)?));
        layers.push(("fc1_act".to_string(), LayerSpec::leaky_relu(LEAKY_SLOPE)?));
        layers.push(("fc2".to_string(), LayerSpec::dense(cfg.classifier_hidden, cfg.n_classes)?));
        Ok(Classifier { cfg: cfg.clone(), layers })
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn build(&self, seed: u64) -> Result<ParamSet> {
        let mut ps = build_params(&self.layers)?;
        init_params(&mut ps, seed)?;
        Ok(ps)
    }

    /// Unnormalized class scores `[N, K]`.
    pub fn logits(&self, fx: &mut Forward<'_>, image: &Tensor) -> Result<Tensor> {
        check_image("classifier", image, self.cfg.image_channels, Some(self.cfg.hr_size))?;
        let mut y = image.clone();
        for (name, spec) in &self.layers {
            y = spec.forward(name, fx, &y)?;
        }
        Ok(y)
    }

    /// Class probabilities `[N, K]`; rows sum to one.
    pub fn forward(&self, fx: &mut Forward<'_>, image: &Tensor) -> Result<Tensor> {
        self.logits(fx, image)?.softmax()
    }
}

/// Fan-in scaled normal weights (std `sqrt(2 / fan_in)`), zero biases,
/// PReLU slopes 0.25, identity batch norm. Deterministic in `seed` and the
/// parameter order.
pub fn init_params(params: &mut ParamSet, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(String, Role, Vec<usize>)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.role, p.tensor.shape().to_vec()))
        .collect();
    for (name, role, shape) in entries {
        let n: usize = shape.iter().product();
        let data = match role {
            Role::ConvWeight | Role::DenseWeight => {
                let std = fan_in_std(role, &shape);
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            _ => vec![role.default_fill(); n],
        };
        params.set_data(&name, data)?;
    }
    Ok(())
}

/// Target standard deviation for a weight tensor: conv `[out, in, kh, kw]`
/// has fan-in `in*kh*kw`, dense `[in, out]` has fan-in `in`.
pub fn fan_in_std(role: Role, shape: &[usize]) -> f64 {
    let fan_in: usize = match role {
        Role::ConvWeight => shape[1..].iter().product(),
        _ => shape[0],
    };
    (2.0 / fan_in as f64).sqrt()
}
