//! Flat `key = value` run settings with typed views.
//!
//! Every known key has a default. Files and overrides may only set known
//! keys; later sources win. [`Settings::snapshot`] renders the fully
//! resolved settings in a form [`Settings::parse`] reads back.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::data::{synth_glyphs, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::MethodKind;
use crate::losses::LossWeights;
use crate::models::ModelConfig;
use crate::optim::OptimizerKind;
use crate::trainer::{Strategy, TrainConfig};

/// `auto` model keys take their value from the preset.
const AUTO: &str = "auto";

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("preset", "desk", "model size preset: desk or full"),
    ("n_residual_blocks", AUTO, "generator residual blocks"),
    ("base_channels", AUTO, "generator feature maps"),
    ("disc_channels", AUTO, "eight discriminator conv widths"),
    ("disc_hidden", AUTO, "discriminator dense width"),
    ("classifier_channels", AUTO, "three classifier conv widths"),
    ("classifier_hidden", AUTO, "classifier dense width"),
    ("upsample_schedule", "7", "upsampling factors, product = scale"),
    ("image_channels", "1", "1 or 3"),
    ("n_classes", "10", "number of classes"),
    ("hr_size", "28", "high-resolution side length"),
    ("data", "idx", "idx, pgm or glyphs"),
    ("data_dir", "data/mnist-desk", "idx: <split>-images/labels files; pgm: <dir>/<split>/<class>/*.pgm"),
    ("train_limit", "0", "use only the first N training images (0 = all)"),
    ("glyph_classes", "10", "synthetic glyph classes"),
    ("glyph_per_class", "100", "synthetic glyph samples per class"),
    ("glyph_size", "32", "synthetic glyph side length"),
    ("glyph_seed", "0", "synthetic glyph seed"),
    ("val_count", "100", "glyphs: validation samples"),
    ("test_count", "100", "glyphs: test samples"),
    ("strategy", "trainable-c", "fixed-c or trainable-c"),
    ("alpha", "0.001", "classification loss weight"),
    ("w_adv", "0.001", "adversarial loss weight"),
    ("w_mse", "1", "content loss weight"),
    ("epochs", "10", "joint training epochs"),
    ("batch_size", "16", "minibatch size"),
    ("optimizer", "adam", "adam or sgd"),
    ("lr", "0.0001", "joint phase step size"),
    ("beta1", "0.9", "adam first moment decay"),
    ("beta2", "0.999", "adam second moment decay"),
    ("adam_eps", "1e-8", "adam epsilon"),
    ("pretrain_lr", "0.0001", "generator pretraining step size"),
    ("pretrain_c_lr", "0.001", "classifier pretraining step size"),
    ("pretrain_g_epochs", "5", "generator content-loss pretraining epochs"),
    ("pretrain_c_epochs", "10", "classifier pretraining epochs"),
    ("c_tag", "c0", "initialization stream name for pretrain-c0"),
    ("seed", "0", "initialization and batch order seed"),
    ("checkpoint_every", "0", "joint steps between checkpoints (0 = end only)"),
    ("max_steps", "0", "stop the joint phase after N steps (0 = no limit)"),
    ("g_init", "", "generator checkpoint to start the joint phase from"),
    ("c_init", "", "classifier checkpoint (required for fixed-c)"),
    ("resume", "", "joint-phase checkpoint to resume"),
    ("recognizer", "", "evaluation classifier checkpoint"),
    ("eval_methods", "bicubic", "comma list of method or method=checkpoint"),
    ("sweep_alphas", "0.0005,0.001", "alpha values for sweep"),
    ("sweep_strategies", "fixed-c,trainable-c", "strategies for sweep"),
    ("input", "", "reconstruct: PGM image or directory of PGM images"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: IndexMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` = `{v}` is not a valid number")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl Settings {
    /// Sets a known key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse_num(key, self.get(key))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.path(key)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let schedule: Vec<usize> = parse_list("upsample_schedule", self.get("upsample_schedule"))?;
        let n_classes = self.num("n_classes")?;
        let hr_size = self.num("hr_size")?;
        let mut cfg = match self.get("preset") {
            "desk" => ModelConfig::desk(n_classes, schedule, hr_size),
            "full" => ModelConfig::full(n_classes, schedule, hr_size),
            other => return Err(Error::Config(format!("unknown preset `{other}`; expected desk or full"))),
        };
        cfg.image_channels = self.num("image_channels")?;
        let auto = |k: &str| self.get(k) == AUTO;
        if !auto("n_residual_blocks") {
            cfg.n_residual_blocks = self.num("n_residual_blocks")?;
        }
        if !auto("base_channels") {
            cfg.base_channels = self.num("base_channels")?;
        }
        if !auto("disc_channels") {
            cfg.disc_channels = parse_list("disc_channels", self.get("disc_channels"))?;
        }
        if !auto("disc_hidden") {
            cfg.disc_hidden = self.num("disc_hidden")?;
        }
        if !auto("classifier_channels") {
            cfg.classifier_channels = parse_list("classifier_channels", self.get("classifier_channels"))?;
        }
        if !auto("classifier_hidden") {
            cfg.classifier_hidden = self.num("classifier_hidden")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let opt = |lr: f64| -> Result<OptimizerKind> {
            match self.get("optimizer") {
                "adam" => Ok(OptimizerKind::Adam {
                    lr,
                    beta1: self.num("beta1")?,
                    beta2: self.num("beta2")?,
                    eps: self.num("adam_eps")?,
                }),
                "sgd" => Ok(OptimizerKind::Sgd { lr }),
                other => Err(Error::Config(format!("unknown optimizer `{other}`; expected adam or sgd"))),
            }
        };
        let max_steps: u64 = self.num("max_steps")?;
        let tc = TrainConfig {
            weights: LossWeights {
                w_mse: self.num("w_mse")?,
                w_adv: self.num("w_adv")?,
                alpha: self.num("alpha")?,
            },
            strategy: Strategy::parse(self.get("strategy"))?,
            epochs: self.num("epochs")?,
            batch_size: self.num("batch_size")?,
            optimizer: opt(self.num("lr")?)?,
            pretrain_optimizer: opt(self.num("pretrain_lr")?)?,
            pretrain_c_optimizer: opt(self.num("pretrain_c_lr")?)?,
            pretrain_g_epochs: self.num("pretrain_g_epochs")?,
            pretrain_c_epochs: self.num("pretrain_c_epochs")?,
            seed: self.num("seed")?,
            checkpoint_every: self.num("checkpoint_every")?,
            c_init: self.optional_path("c_init"),
            max_steps: (max_steps > 0).then_some(max_steps),
        };
        tc.weights.validate()?;
        tc.optimizer.validate()?;
        tc.pretrain_optimizer.validate()?;
        tc.pretrain_c_optimizer.validate()?;
        Ok(tc)
    }

    pub fn g_init(&self) -> Option<PathBuf> {
        self.path("g_init")
    }

    pub fn resume(&self) -> Option<PathBuf> {
        self.path("resume")
    }

    pub fn recognizer(&self) -> Option<PathBuf> {
        self.path("recognizer")
    }

    pub fn input(&self) -> Option<PathBuf> {
        self.path("input")
    }

    pub fn c_tag(&self) -> &str {
        self.get("c_tag")
    }

    /// `(method, checkpoint)` pairs; bicubic takes no checkpoint.
    pub fn eval_methods(&self) -> Result<Vec<(MethodKind, Option<PathBuf>)>> {
        self.get("eval_methods")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (name, path) = match item.split_once('=') {
                    Some((n, p)) => (n.trim(), Some(PathBuf::from(p.trim()))),
                    None => (item, None),
                };
                let kind = MethodKind::parse(name)?;
                if kind != MethodKind::Bicubic && path.is_none() {
                    return Err(Error::Config(format!("method {name} needs a checkpoint: {name}=<path>")));
                }
                Ok((kind, path))
            })
            .collect()
    }

    pub fn sweep_alphas(&self) -> Result<Vec<f64>> {
        parse_list("sweep_alphas", self.get("sweep_alphas"))
    }

    pub fn sweep_strategies(&self) -> Result<Vec<Strategy>> {
        self.get("sweep_strategies")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Strategy::parse)
            .collect()
    }

    /// Train, validation and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let limit: usize = self.num("train_limit")?;
        let (train, val, test) = match self.get("data") {
            "idx" => {
                let dir = self.get("data_dir");
                (
                    Dataset::load_idx_split(dir, Split::Train)?,
                    Dataset::load_idx_split(dir, Split::Validation)?,
                    Dataset::load_idx_split(dir, Split::Test)?,
                )
            }
            "pgm" => {
                let dir = Path::new(self.get("data_dir"));
                (
                    Dataset::load_pgm_dir(dir.join("train"), Split::Train)?,
                    Dataset::load_pgm_dir(dir.join("val"), Split::Validation)?,
                    Dataset::load_pgm_dir(dir.join("test"), Split::Test)?,
                )
            }
            "glyphs" => {
                let all = synth_glyphs(
                    self.num("glyph_classes")?,
                    self.num("glyph_per_class")?,
                    self.num("glyph_size")?,
                    self.num("glyph_seed")?,
                )?;
                all.split_three(self.num("val_count")?, self.num("test_count")?, self.num("glyph_seed")?)?
            }
            other => return Err(Error::Config(format!("unknown data source `{other}`; expected idx, pgm or glyphs"))),
        };
        let train = if limit > 0 { train.take(limit) } else { train };
        let model = self.model()?;
        for ds in [&train, &val, &test] {
            if ds.height != model.hr_size || ds.width != model.hr_size || ds.channels != model.image_channels {
                return Err(Error::Config(format!(
                    "{} images are {}x{}x{} but the model expects {}x{}x{}",
                    ds.split.name(),
                    ds.channels,
                    ds.height,
                    ds.width,
                    model.image_channels,
                    model.hr_size,
                    model.hr_size
                )));
            }
            if ds.n_classes > model.n_classes {
                return Err(Error::Config(format!(
                    "{} split has labels up to {} but n_classes = {}",
                    ds.split.name(),
                    ds.n_classes - 1,
                    model.n_classes
                )));
            }
        }
        Ok((train, val, test))
    }

    /// Settings with `auto` replaced by the preset values, rendered one key
    /// per line, followed by the build identifier as a comment.
    pub fn snapshot(&self) -> Result<String> {
        let mut resolved = self.clone();
        let m = self.model()?;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        resolved.set("n_residual_blocks", &m.n_residual_blocks.to_string())?;
        resolved.set("base_channels", &m.base_channels.to_string())?;
        resolved.set("disc_channels", &list(&m.disc_channels))?;
        resolved.set("disc_hidden", &m.disc_hidden.to_string())?;
        resolved.set("classifier_channels", &list(&m.classifier_channels))?;
        resolved.set("classifier_hidden", &m.classifier_hidden.to_string())?;
        let mut out = format!("# build: {}\n# model digest: {}\n", build_id(), m.digest());
        for (k, v) in &resolved.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }
}

/// Crate version, target and profile of this binary.
pub fn build_id() -> String {
    format!(
        "gac-core {} {}-{} {}",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_desk_mnist() {
        let s = Settings::default();
        let m = s.model().unwrap();
        assert_eq!(m, ModelConfig::desk(10, vec![7], 28));
        let t = s.train().unwrap();
        assert_eq!(t.weights.alpha, 0.001);
        assert_eq!(t.strategy, Strategy::TrainableC);
        assert_eq!(t.max_steps, None);
    }

    #[test]
    fn text_overrides_and_unknown_keys() {
        let mut s = Settings::parse("# comment\nalpha = 0.0005  # inline\n\nstrategy=fixed-c\n").unwrap();
        assert_eq!(s.get("alpha"), "0.0005");
        assert_eq!(s.get("strategy"), "fixed-c");
        s.set("alpha", "0.002").unwrap();
        assert_eq!(s.train().unwrap().weights.alpha, 0.002);
        let err = Settings::parse("alpah = 1").unwrap_err();
        assert!(err.to_string().contains("unknown key `alpah`"), "{err}");
        assert!(Settings::parse("just words").is_err());
        assert!(Settings::parse("epochs = many").unwrap().train().is_err());
    }

    #[test]
    fn snapshot_reads_back_to_same_config() {
        let mut s = Settings::default();
        s.set("preset", "full").unwrap();
        s.set("base_channels", "32").unwrap();
        s.set("upsample_schedule", "2,4").unwrap();
        s.set("hr_size", "64").unwrap();
        let snap = s.snapshot().unwrap();
        assert!(snap.contains("n_residual_blocks = 16"));
        assert!(snap.contains("base_channels = 32"));
        let back = Settings::parse(&snap).unwrap();
        assert_eq!(back.model().unwrap(), s.model().unwrap());
        assert_eq!(back.train().unwrap(), s.train().unwrap());
    }

    #[test]
    fn method_lists() {
        let mut s = Settings::default();
        s.set("eval_methods", "bicubic, mse-only=a.bin,gac-trainable-c = b.bin").unwrap();
        let m = s.eval_methods().unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[2], (MethodKind::GacTrainableC, Some(PathBuf::from("b.bin"))));
        s.set("eval_methods", "srgan").unwrap();
        assert!(s.eval_methods().is_err());
        assert_eq!(s.sweep_strategies().unwrap(), vec![Strategy::FixedC, Strategy::TrainableC]);
    }

    #[test]
    fn glyph_source_splits() {
        let mut s = Settings::default();
        for (k, v) in [("data", "glyphs"), ("glyph_per_class", "5"), ("glyph_size", "28"), ("val_count", "5"), ("test_count", "5")] {
            s.set(k, v).unwrap();
        }
        let (tr, va, te) = s.datasets().unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (40, 5, 5));
        s.set("glyph_size", "32").unwrap();
        assert!(s.datasets().is_err(), "geometry must match hr_size");
    }
}
