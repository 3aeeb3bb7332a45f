//! Deterministic datasets: a patch-grammar classification task, an
//! image-to-image translation task, and a reader for the 32×32 binary image
//! format (one label byte followed by 3072 channel-major pixel bytes).

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Container, Entry, EntryData};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Images(Tensor<f32>),
}

/// Per-channel statistics the inputs were standardized with.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel statistics of an `N×C×H×W` tensor.
    pub fn fit(x: &Tensor<f32>) -> Normalization {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for &v in &x.data()[off..off + hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (n * hw) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        Normalization { mean, std }
    }

    fn map(&self, x: &mut Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) {
        let s = x.shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (j / hw) % c;
            *v = f(*v as f64, self.mean[ch], self.std[ch]) as f32;
        }
    }

    pub fn apply(&self, x: &mut Tensor<f32>) {
        self.map(x, |v, m, s| (v - m) / s);
    }

    pub fn invert(&self, x: &mut Tensor<f32>) {
        self.map(x, |v, m, s| v * s + m);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W` inputs.
    pub inputs: Tensor<f32>,
    pub targets: Targets,
    pub split: Split,
    /// Number of classes; 0 for image targets.
    pub classes: usize,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Labels(l) => l.len(),
            Targets::Images(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Images(_) => None,
        }
    }

    pub fn inputs_at(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        self.inputs.gather_rows(idx)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels().map(|l| idx.iter().map(|&i| l[i]).collect())
    }

    pub fn target_images_at(&self, idx: &[usize]) -> Result<Option<Tensor<f32>>> {
        match &self.targets {
            Targets::Images(t) => Ok(Some(t.gather_rows(idx)?)),
            Targets::Labels(_) => Ok(None),
        }
    }

    /// The samples at `idx`, in that order, tagged `split`.
    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Dataset> {
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Images(t) => Targets::Images(t.gather_rows(idx)?),
        };
        Ok(Dataset {
            inputs: self.inputs.gather_rows(idx)?,
            targets,
            split,
            classes: self.classes,
            norm: self.norm.clone(),
        })
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in self.labels().unwrap_or(&[]) {
            counts[y] += 1;
        }
        counts
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        if let Some(old) = self.norm.take() {
            old.invert(&mut self.inputs);
        }
        norm.apply(&mut self.inputs);
        self.norm = Some(norm.clone());
    }

    pub fn to_container(&self) -> Container {
        let s = self.inputs.shape().to_vec();
        let mut entries = vec![Entry {
            name: "inputs".into(),
            shape: s,
            data: EntryData::F32(self.inputs.data().to_vec()),
        }];
        match &self.targets {
            Targets::Labels(l) => entries.push(Entry {
                name: "labels".into(),
                shape: vec![l.len()],
                data: EntryData::U32(l.iter().map(|&y| y as u32).collect()),
            }),
            Targets::Images(t) => entries.push(Entry {
                name: "targets".into(),
                shape: t.shape().to_vec(),
                data: EntryData::F32(t.data().to_vec()),
            }),
        }
        if let Some(n) = &self.norm {
            entries.push(Entry {
                name: "norm_mean".into(),
                shape: vec![n.mean.len()],
                data: EntryData::F64(n.mean.clone()),
            });
            entries.push(Entry {
                name: "norm_std".into(),
                shape: vec![n.std.len()],
                data: EntryData::F64(n.std.clone()),
            });
        }
        Container {
            header: format!("dataset split={} classes={}", self.split.as_str(), self.classes),
            entries,
        }
    }

    pub fn from_container(c: &Container) -> Result<Dataset> {
        let bad = |m: &str| Error::Data(format!("dataset cache: {m}"));
        let mut split = None;
        let mut classes = None;
        for field in c.header.split_whitespace().skip(1) {
            match field.split_once('=') {
                Some(("split", "train")) => split = Some(Split::Train),
                Some(("split", "val")) => split = Some(Split::Val),
                Some(("split", "test")) => split = Some(Split::Test),
                Some(("classes", v)) => classes = v.parse().ok(),
                _ => return Err(bad(&format!("unexpected header field '{field}'"))),
            }
        }
        if !c.header.starts_with("dataset ") {
            return Err(bad("not a dataset container"));
        }
        let (split, classes) = split.zip(classes).ok_or_else(|| bad("incomplete header"))?;
        let floats = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            match c.get(name) {
                Some(Entry {
                    shape,
                    data: EntryData::F32(v),
                    ..
                }) => Ok((shape.clone(), v.clone())),
                _ => Err(bad(&format!("missing f32 entry '{name}'"))),
            }
        };
        let (shape, data) = floats("inputs")?;
        let inputs = rows_tensor(shape, data)?;
        let targets = match c.get("labels") {
            Some(Entry {
                data: EntryData::U32(l),
                ..
            }) => Targets::Labels(l.iter().map(|&y| y as usize).collect()),
            _ => {
                let (shape, data) = floats("targets")?;
                Targets::Images(rows_tensor(shape, data)?)
            }
        };
        let norm = match (c.get("norm_mean"), c.get("norm_std")) {
            (Some(m), Some(s)) => Some(Normalization {
                mean: m.data.to_f64().ok_or_else(|| bad("norm_mean"))?,
                std: s.data.to_f64().ok_or_else(|| bad("norm_std"))?,
            }),
            _ => None,
        };
        Ok(Dataset {
            inputs,
            targets,
            split,
            classes,
            norm,
        })
    }
}

fn rows_tensor(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor<f32>> {
    if shape.first() == Some(&0) && data.is_empty() {
        Ok(Tensor::empty(shape))
    } else {
        Tensor::new(shape, data)
    }
}

/// Train, validation and test sets sharing the training normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Moves a seeded `val_fraction` of `pool` into validation, fits the
    /// normalization on what remains and applies it to all three sets.
    pub fn from_pool(pool: Dataset, test: Dataset, val_fraction: f64, seed: u64) -> Result<Splits> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {val_fraction}")));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11));
        let n_val = (pool.len() as f64 * val_fraction).round() as usize;
        let (val_idx, train_idx) = order.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let mut train = pool.subset(&train_idx, Split::Train)?;
        let mut val = pool.subset(&val_idx, Split::Val)?;
        let mut test = test;
        test.split = Split::Test;
        if !train.is_empty() {
            let norm = Normalization::fit(&train.inputs);
            train.normalize(&norm);
            if !val.is_empty() {
                val.normalize(&norm);
            }
            test.normalize(&norm);
        }
        Ok(Splits { train, val, test })
    }
}

/// Mini-batch index lists for one epoch; the order depends only on
/// `(seed, epoch)`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mix = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Patch patterns at the bottom of the grammar.
const PRIMITIVES: usize = 4;
/// Mid-level symbols, each a 2×2 arrangement of primitives.
const SYMBOLS: usize = 6;

/// Hierarchical patch-grammar classification task.
///
/// A class is drawn by one of `synonyms` rules as a 2×2 grid of mid-level
/// symbols; each symbol expands, again through one of `synonyms` rules, into
/// a 2×2 grid of primitive patches. Primitives are striped or checkered
/// patches with a random colour per patch, and Gaussian noise is added on top.
/// No rule is shared between two symbols or two classes, so the label is a
/// function of the primitive layout.
#[derive(Clone, Debug)]
pub struct TextureTask {
    size: usize,
    class_rules: Vec<Vec<[usize; 4]>>,
    symbol_rules: Vec<Vec<[usize; 4]>>,
    noise: f64,
}

/// Default standard deviation of the per-pixel Gaussian noise.
pub const NOISE_STD: f64 = 0.35;
/// Default number of rules per class and per symbol.
pub const SYNONYMS: usize = 4;

fn distinct_rules(rng: &mut ChaCha8Rng, owners: usize, per_owner: usize, alphabet: usize) -> Vec<Vec<[usize; 4]>> {
    let mut seen = std::collections::HashSet::new();
    (0..owners)
        .map(|_| {
            let mut rules = Vec::with_capacity(per_owner);
            while rules.len() < per_owner {
                let r: [usize; 4] = std::array::from_fn(|_| rng.gen_range(0..alphabet));
                if seen.insert(r) {
                    rules.push(r);
                }
            }
            rules
        })
        .collect()
}

impl TextureTask {
    pub fn new(seed: u64, classes: usize, size: usize) -> Result<TextureTask> {
        TextureTask::with_synonyms(seed, classes, size, SYNONYMS)
    }

    pub fn with_synonyms(seed: u64, classes: usize, size: usize, synonyms: usize) -> Result<TextureTask> {
        if classes < 2 || size < 8 || size % 4 != 0 {
            return Err(Error::Config(format!(
                "texture task needs at least 2 classes and a size that is a multiple of 4 from 8, got {classes} and {size}"
            )));
        }
        if synonyms == 0 || SYMBOLS * synonyms > PRIMITIVES.pow(4) || classes * synonyms > SYMBOLS.pow(4) {
            return Err(Error::Config(format!("texture task cannot use {synonyms} rules for {classes} classes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbol_rules = distinct_rules(&mut rng, SYMBOLS, synonyms, PRIMITIVES);
        let class_rules = distinct_rules(&mut rng, classes, synonyms, SYMBOLS);
        Ok(TextureTask {
            size,
            class_rules,
            symbol_rules,
            noise: NOISE_STD,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_rules.len()
    }

    /// The same task with per-pixel noise of standard deviation `std`.
    pub fn with_noise(mut self, std: f64) -> TextureTask {
        self.noise = std.max(0.0);
        self
    }

    /// Primitive ids on the 4×4 patch grid for one draw of `class`, row-major.
    fn layout(&self, class: usize, rng: &mut ChaCha8Rng) -> [usize; 16] {
        let top = self.class_rules[class].choose(rng).expect("non-empty rules");
        let mut grid = [0; 16];
        for (q, &sym) in top.iter().enumerate() {
            let low = self.symbol_rules[sym].choose(rng).expect("non-empty rules");
            for (r, &prim) in low.iter().enumerate() {
                let row = 2 * (q / 2) + r / 2;
                let col = 2 * (q % 2) + r % 2;
                grid[row * 4 + col] = prim;
            }
        }
        grid
    }

    fn pattern(prim: usize, x: usize, y: usize, p: usize) -> f64 {
        let on = match prim {
            0 => y % 2 == 0,
            1 => x % 2 == 0,
            2 => (x + y) % 2 == 0,
            _ => {
                let (lo, hi) = (p / 4, p - p / 4);
                (lo..hi).contains(&x) && (lo..hi).contains(&y)
            }
        };
        if on {
            1.0
        } else {
            -1.0
        }
    }

    /// `per_class` samples of every class, drawn from stream `stream`,
    /// ordered by class.
    pub fn sample(&self, stream: u64, per_class: usize, split: Split) -> Dataset {
        let s = self.size;
        let p = s / 4;
        let plane = s * s;
        let n = per_class * self.classes();
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let noise = Normal::new(0.0, self.noise).expect("valid normal");
        let mut inputs = Vec::with_capacity(n * 3 * plane);
        let mut labels = Vec::with_capacity(n);
        let mut img = vec![0.0; 3 * plane];
        for class in 0..self.classes() {
            for _ in 0..per_class {
                let grid = self.layout(class, &mut rng);
                for (cell, &prim) in grid.iter().enumerate() {
                    let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let (oy, ox) = (cell / 4 * p, cell % 4 * p);
                    for y in 0..p {
                        for x in 0..p {
                            let w = Self::pattern(prim, x, y, p);
                            for c in 0..3 {
                                img[(c * s + oy + y) * s + ox + x] = color[c] * w;
                            }
                        }
                    }
                }
                for v in &img {
                    inputs.push((v + noise.sample(&mut rng)) as f32);
                }
                labels.push(class);
            }
        }
        Dataset {
            inputs: Tensor::new(vec![n, 3, s, s], inputs).expect("consistent shape"),
            targets: Targets::Labels(labels),
            split,
            classes: self.classes(),
            norm: None,
        }
    }
}

/// Patch-grammar classification set: `per_class` samples of each of
/// `classes` classes on `size × size` RGB images.
pub fn gen_synthetic_classification(seed: u64, classes: usize, size: usize, per_class: usize) -> Result<Dataset> {
    let task = TextureTask::new(seed, classes, size)?;
    Ok(task.sample(seed.wrapping_add(1), per_class, Split::Train))
}

/// Fixed colour remap followed by a 3×3 blur; `apply` is not idempotent.
#[derive(Clone, Debug)]
pub struct ColorBlur {
    mix: [[f64; 3]; 3],
    shift: [f64; 3],
}

impl ColorBlur {
    pub fn new(seed: u64) -> ColorBlur {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_10_b1);
        let normal = Normal::new(0.0, 0.8).expect("valid normal");
        let mut mix = [[0.0; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = normal.sample(&mut rng) + if i == j { 0.5 } else { 0.0 };
            }
        }
        let mut shift = [0.0; 3];
        for v in &mut shift {
            *v = rng.gen_range(-0.3..0.3);
        }
        ColorBlur { mix, shift }
    }

    /// Applies the map to one `3×s×s` image.
    pub fn apply(&self, img: &[f64], s: usize) -> Vec<f64> {
        let plane = s * s;
        let mut remapped = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let z: f64 = (0..3).map(|d| self.mix[c][d] * img[d * plane + p]).sum::<f64>() + self.shift[c];
                remapped[c * plane + p] = z.tanh();
            }
        }
        const K: [f64; 3] = [0.25, 0.5, 0.25];
        let clamp = |v: isize| v.clamp(0, s as isize - 1) as usize;
        let mut out = vec![0.0; 3 * plane];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    for (dy, ky) in K.iter().enumerate() {
                        for (dx, kx) in K.iter().enumerate() {
                            let yy = clamp(y as isize + dy as isize - 1);
                            let xx = clamp(x as isize + dx as isize - 1);
                            acc += ky * kx * remapped[c * plane + yy * s + xx];
                        }
                    }
                    out[c * plane + y * s + x] = acc;
                }
            }
        }
        out
    }
}

fn smooth_image(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let plane = s * s;
    let mut img = vec![0.0; 3 * plane];
    for c in 0..3 {
        for _ in 0..4 {
            let amp = rng.gen_range(0.2..0.6);
            let (fx, fy) = (rng.gen_range(-3.0..3.0) * PI / s as f64, rng.gen_range(-3.0..3.0) * PI / s as f64);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for y in 0..s {
                for x in 0..s {
                    img[c * plane + y * s + x] += amp * (fx * x as f64 + fy * y as f64 + phase).cos();
                }
            }
        }
    }
    img
}

/// `n` pairs `(x, f(x))` of smooth random images and their colour-remapped,
/// blurred versions. The map `f` depends only on `seed`.
pub fn gen_synthetic_translation(seed: u64, size: usize, n: usize) -> Result<Dataset> {
    translation_stream(seed, seed.wrapping_add(1), size, n, Split::Train)
}

/// Like [`gen_synthetic_translation`] with the sample stream chosen
/// separately from the map.
pub fn translation_stream(seed: u64, stream: u64, size: usize, n: usize, split: Split) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Config(format!("translation task needs size ≥ 8, got {size}")));
    }
    let f = ColorBlur::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut xs = Vec::with_capacity(n * 3 * size * size);
    let mut ys = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        let x = smooth_image(&mut rng, size);
        ys.extend(f.apply(&x, size).into_iter().map(|v| v as f32));
        xs.extend(x.into_iter().map(|v| v as f32));
    }
    let shape = vec![n, 3, size, size];
    let inputs = rows_tensor(shape.clone(), xs)?;
    let targets = rows_tensor(shape, ys)?;
    Ok(Dataset {
        inputs,
        targets: Targets::Images(targets),
        split,
        classes: 0,
        norm: None,
    })
}

pub const BINARY_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads up to `limit` records of the 32×32 binary image format. Pixels are
/// scaled to `[0, 1]`.
pub fn load_small_image_binary(path: &Path, limit: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_small_image_binary(&bytes, limit)
}

pub fn parse_small_image_binary(bytes: &[u8], limit: usize) -> Result<Dataset> {
    let rem = bytes.len() % BINARY_RECORD;
    if rem != 0 {
        let offset = (bytes.len() - rem) as u64;
        return Err(Error::Format {
            offset,
            detail: format!("truncated record: {rem} of {BINARY_RECORD} bytes"),
        });
    }
    let n = (bytes.len() / BINARY_RECORD).min(limit);
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (BINARY_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(BINARY_RECORD).take(n).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                offset: (i * BINARY_RECORD) as u64,
                detail: format!("label {} is not in 0..10", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let shape = vec![n, 3, 32, 32];
    let inputs = rows_tensor(shape, pixels)?;
    Ok(Dataset {
        inputs,
        targets: Targets::Labels(labels),
        split: Split::Train,
        classes: 10,
        norm: None,
    })
}

#[cfg(test)]
mod tests;
