//! Datasets, bicubic resampling and deterministic minibatches.
//!
//! Images are stored as bytes and normalized to [-1, 1] when batched. Low
//! resolution inputs are synthesized from the normalized high resolution
//! images with [`bicubic_resample`].

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Byte intensity to [-1, 1].
pub fn normalize(v: f64) -> f64 {
    v / 127.5 - 1.0
}

/// Inverse of [`normalize`], clamped and rounded to a byte.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8
}

/// Rational resampling factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    pub num: usize,
    pub den: usize,
}

impl Scale {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("resampling scale {num}/{den} must be positive")));
        }
        Ok(Scale { num, den })
    }

    pub fn up(r: usize) -> Result<Self> {
        Scale::new(r, 1)
    }

    pub fn down(r: usize) -> Result<Self> {
        Scale::new(1, r)
    }

    pub fn factor(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Output extent; the scaled extent must be a whole number.
    pub fn apply(self, extent: usize) -> Result<usize> {
        let scaled = extent * self.num;
        if scaled % self.den != 0 {
            return Err(Error::Config(format!(
                "extent {extent} scaled by {}/{} is not a whole number",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den)
    }
}

/// Keys cubic convolution kernel with a = -0.5.
pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Per output index: source taps (clamped to the border) and their weights,
/// normalized to sum to one. When shrinking, the kernel is stretched by the
/// inverse factor so every source pixel contributes.
fn resample_taps(in_len: usize, out_len: usize, factor: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = if factor < 1.0 { 1.0 / factor } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / factor - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for s in lo..=hi {
                let w = cubic_weight((s as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = s.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling of `planes` stacked `[h, w]` images.
fn resample_planes(data: &[f64], planes: usize, h: usize, w: usize, scale: Scale) -> Result<(Vec<f64>, usize, usize)> {
    let oh = scale.apply(h)?;
    let ow = scale.apply(w)?;
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!("resampling {h}x{w} by {}/{} gives an empty image", scale.num, scale.den)));
    }
    let rows = resample_taps(h, oh, scale.factor());
    let cols = resample_taps(w, ow, scale.factor());
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, taps) in cols.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().map(|&(i, wt)| wt * src[y * w + i]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * ow + x]).sum();
            }
        }
    }
    Ok((out, oh, ow))
}

/// Bicubic resampling of a `[C, H, W]` or `[N, C, H, W]` tensor. The result
/// is detached from any graph.
pub fn bicubic_resample(img: &Tensor, scale: Scale) -> Result<Tensor> {
    let s = img.shape();
    if !(s.len() == 3 || s.len() == 4) {
        return Err(Error::invalid_shape("bicubic_resample", s, "expected [C, H, W] or [N, C, H, W]"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes: usize = s[..s.len() - 2].iter().product();
    let (out, oh, ow) = resample_planes(img.data(), planes, h, w, scale)?;
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(&shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Idx { images: PathBuf, labels: PathBuf },
    ImageDirectory(PathBuf),
    SyntheticGlyphs { seed: u64 },
}

/// Labelled images held as bytes in `[N, C, H, W]` order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source: Source,
    pub split: Split,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses IDX image bytes: `(count, rows, cols, pixels)`.
fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::format(path, format!("expected {want} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// IDX bytes for a set of single-channel images, the inverse of
/// [`Dataset::load_idx`]. Used for fixtures and exports.
pub fn encode_idx(n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}

impl Dataset {
    /// Loads an IDX image/label pair, plain or gzip-compressed. The class
    /// count is one more than the largest label.
    pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let (images, labels) = (images.as_ref(), labels.as_ref());
        let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?, images)?;
        let labs = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
        if labs.len() != n {
            return Err(Error::Data(format!(
                "{} holds {n} images but {} holds {} labels",
                images.display(),
                labels.display(),
                labs.len()
            )));
        }
        let n_classes = labs.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            source: Source::Idx {
                images: images.to_path_buf(),
                labels: labels.to_path_buf(),
            },
            split,
            n_classes,
            channels: 1,
            height: rows,
            width: cols,
            pixels,
            labels: labs,
        })
    }

    /// Loads `<dir>/<split>-images-idx3-ubyte[.gz]` and the matching labels.
    pub fn load_idx_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let dir = dir.as_ref();
        let pick = |stem: &str| {
            let plain = dir.join(format!("{}-{stem}", split.name()));
            let gz = dir.join(format!("{}-{stem}.gz", split.name()));
            if gz.exists() {
                gz
            } else {
                plain
            }
        };
        Dataset::load_idx(pick("images-idx3-ubyte"), pick("labels-idx1-ubyte"), split)
    }

    /// Loads `<root>/<class-id>/<name>.pgm` binary greyscale images. Files
    /// are visited in class order, then by file name.
    pub fn load_pgm_dir(root: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let root = root.as_ref();
        let mut classes: Vec<(usize, PathBuf)> = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if !path.is_dir() {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let id = name
                .parse::<usize>()
                .map_err(|_| Error::format(&path, "class directory names must be integers"))?;
            classes.push((id, path));
        }
        classes.sort();
        let mut ds: Option<Dataset> = None;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (id, dir) in &classes {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f)?.into_luma8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let geom = ds.get_or_insert_with(|| Dataset {
                    source: Source::ImageDirectory(root.to_path_buf()),
                    split,
                    n_classes: 0,
                    channels: 1,
                    height: h,
                    width: w,
                    pixels: Vec::new(),
                    labels: Vec::new(),
                });
                if (geom.height, geom.width) != (h, w) {
                    return Err(Error::format(
                        &f,
                        format!("image is {w}x{h}, expected {}x{}", geom.width, geom.height),
                    ));
                }
                pixels.extend_from_slice(img.as_raw());
                labels.push(*id);
            }
        }
        let mut ds = ds.ok_or_else(|| Error::Data(format!("no .pgm images under {}", root.display())))?;
        ds.n_classes = labels.iter().max().map_or(0, |m| m + 1);
        ds.pixels = pixels;
        ds.labels = labels;
        Ok(ds)
    }

    /// Writes the dataset in the layout read by [`Dataset::load_pgm_dir`].
    pub fn save_pgm_dir(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        if self.channels != 1 {
            return Err(Error::Data("PGM export needs single-channel images".into()));
        }
        for i in 0..self.len() {
            let dir = root.join(self.labels[i].to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_pgm(dir.join(format!("{i:06}.pgm")), self.width, self.height, self.image_bytes(i))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` samples (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    fn select(&self, idx: &[usize], split: Split) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            split,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Disjoint train/validation/test split after a seeded shuffle.
    pub fn split_three(&self, n_val: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        if n_val + n_test >= self.len() {
            return Err(Error::Data(format!(
                "cannot hold out {} of {} samples",
                n_val + n_test,
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, rest) = idx.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        Ok((
            self.select(train, Split::Train),
            self.select(val, Split::Validation),
            self.select(test, Split::Test),
        ))
    }

    /// Normalized `[N, C, H, W]` values for the given sample indices.
    pub fn normalized(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend(self.image_bytes(i).iter().map(|&b| normalize(b as f64)));
        }
        Tensor::new(&[idx.len(), self.channels, self.height, self.width], data)
    }
}

/// Reads any image the `image` crate understands as 8-bit greyscale.
pub fn read_grey(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path.as_ref())?.into_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::format(path, "pixel count does not match geometry"))?;
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

/// Stroke templates: each class is a few line segments in the unit square.
fn glyph_templates(n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 4]>> {
    (0..n_classes)
        .map(|_| {
            let strokes = rng.gen_range(2..=4);
            (0..strokes)
                .map(|_| {
                    let mut seg = [0.0; 4];
                    seg.iter_mut().for_each(|v| *v = rng.gen_range(0.15..0.85));
                    seg
                })
                .collect()
        })
        .collect()
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s[0] + t * dx - px, s[1] + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Renders jittered, anti-aliased stroke glyphs: `samples_per_class` images
/// of every class, in class-interleaved order. Bright ink on black.
pub fn synth_glyphs(n_classes: usize, samples_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::Config(format!("glyph size must be at least 16, got {size}")));
    }
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 glyph classes, got {n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = glyph_templates(n_classes, &mut rng);
    let px = 1.0 / size as f64;
    let mut pixels = Vec::with_capacity(n_classes * samples_per_class * size * size);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (class, template) in templates.iter().enumerate() {
            let angle: f64 = rng.gen_range(-0.15..0.15);
            let zoom: f64 = rng.gen_range(0.9..1.1);
            let (sx, sy): (f64, f64) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
            let thick: f64 = rng.gen_range(0.045..0.075);
            let (sin, cos) = angle.sin_cos();
            let place = |x: f64, y: f64| {
                let (x, y) = (x - 0.5, y - 0.5);
                (0.5 + zoom * (cos * x - sin * y) + sx, 0.5 + zoom * (sin * x + cos * y) + sy)
            };
            let segs: Vec<[f64; 4]> = template
                .iter()
                .map(|s| {
                    let mut j = *s;
                    j.iter_mut().for_each(|v| *v += rng.gen_range(-0.03..0.03));
                    let (a, b) = place(j[0], j[1]);
                    let (c, d) = place(j[2], j[3]);
                    [a, b, c, d]
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let (cx, cy) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
                    let d = segs.iter().map(|s| segment_distance(cx, cy, s)).fold(f64::INFINITY, f64::min);
                    let ink = ((thick - d) / px + 0.5).clamp(0.0, 1.0);
                    pixels.push((ink * 255.0).round() as u8);
                }
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        source: Source::SyntheticGlyphs { seed },
        split: Split::Train,
        n_classes,
        channels: 1,
        height: size,
        width: size,
        pixels,
        labels,
    })
}

/// Aligned low/high resolution images and labels.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub labels: Vec<usize>,
    pub r: usize,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pre-normalized HR images with their bicubic LR counterparts, cut into
/// seeded per-epoch shuffles.
#[derive(Clone, Debug)]
pub struct Batcher {
    hr: Vec<f64>,
    lr: Vec<f64>,
    labels: Vec<usize>,
    channels: usize,
    hr_size: (usize, usize),
    lr_size: (usize, usize),
    r: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(ds: &Dataset, batch_size: usize, r: usize, seed: u64) -> Result<Batcher> {
        if ds.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if batch_size == 0 || batch_size > ds.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be between 1 and the dataset size {}",
                ds.len()
            )));
        }
        let all: Vec<usize> = (0..ds.len()).collect();
        let hr = ds.normalized(&all)?;
        let lr = bicubic_resample(&hr, Scale::down(r)?)?;
        let lr_size = (lr.shape()[2], lr.shape()[3]);
        Ok(Batcher {
            hr: hr.to_vec(),
            // cubic overshoot near strokes can leave [-1, 1]
            lr: lr.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            labels: ds.labels.clone(),
            channels: ds.channels,
            hr_size: (ds.height, ds.width),
            lr_size,
            r,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len() / self.batch_size
    }

    /// Sample order for `epoch`; a permutation that depends only on the
    /// seed and the epoch number.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Gathers the given samples into one batch.
    pub fn gather(&self, idx: &[usize]) -> Result<SampleBatch> {
        let hr_n = self.channels * self.hr_size.0 * self.hr_size.1;
        let lr_n = self.channels * self.lr_size.0 * self.lr_size.1;
        let mut hr = Vec::with_capacity(idx.len() * hr_n);
        let mut lr = Vec::with_capacity(idx.len() * lr_n);
        for &i in idx {
            hr.extend_from_slice(&self.hr[i * hr_n..(i + 1) * hr_n]);
            lr.extend_from_slice(&self.lr[i * lr_n..(i + 1) * lr_n]);
        }
        let n = idx.len();
        Ok(SampleBatch {
            lr: Tensor::new(&[n, self.channels, self.lr_size.0, self.lr_size.1], lr)?,
            hr: Tensor::new(&[n, self.channels, self.hr_size.0, self.hr_size.1], hr)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            r: self.r,
            indices: idx.to_vec(),
        })
    }

    /// Full batches of the shuffled epoch; the remainder is dropped.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<SampleBatch>> + '_ {
        let order = self.order(epoch);
        let bs = self.batch_size;
        (0..self.batches_per_epoch()).map(move |b| self.gather(&order[b * bs..(b + 1) * bs]))
    }

    /// Every sample once, in dataset order, with a final partial batch.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Result<SampleBatch>> + '_ {
        let bs = batch_size.max(1);
        (0..self.len().div_ceil(bs)).map(move |b| {
            let idx: Vec<usize> = (b * bs..((b + 1) * bs).min(self.len())).collect();
            self.gather(&idx)
        })
    }
}
