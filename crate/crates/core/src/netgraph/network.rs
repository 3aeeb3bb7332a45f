use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{HeadSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{
    BatchStats, Buffer, Conv2dConfig, Mode, Parameter, Scalar, Tape, Tensor, Var,
};

/// Running-statistic momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct ConvRef {
    weight: usize,
    bias: Option<usize>,
    cfg: Conv2dConfig,
}

#[derive(Clone, Debug)]
struct NormRef {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: ConvRef,
    norm: NormRef,
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvNorm,
    second: ConvNorm,
    shortcut: Option<ConvNorm>,
}

#[derive(Clone, Debug)]
enum Head {
    Classifier {
        weight: usize,
        bias: usize,
    },
    Decoder {
        upsample: usize,
        hidden: ConvNorm,
        out: ConvRef,
    },
}

/// A built network: parameters, running statistics and the block layout,
/// addressable segment by segment (stem, each section, head).
#[derive(Clone, Debug)]
pub struct SegmentedNetwork<F> {
    spec: NetworkSpec,
    params: Vec<Parameter<F>>,
    buffers: Vec<Buffer<F>>,
    index: HashMap<String, usize>,
    stem: Vec<ConvNorm>,
    sections: Vec<Vec<Block>>,
    head: Head,
    /// Parameter-index boundaries: stem | section 1 | … | section k | head.
    segment_boundaries: Vec<usize>,
}

struct Builder<F> {
    params: Vec<Parameter<F>>,
    buffers: Vec<Buffer<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Builder<F> {
    fn he_normal(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(normal.sample(&mut self.rng))).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }

    fn push(&mut self, name: String, value: Tensor<F>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize, bias: bool) -> ConvRef {
        let fan_in = cin / groups * kernel * kernel;
        let weight = self.he_normal(format!("{name}.weight"), &[cout, cin / groups, kernel, kernel], fan_in);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvRef {
            weight,
            bias,
            cfg: Conv2dConfig {
                stride,
                padding: kernel / 2,
                groups,
            },
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormRef {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], F::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.push(Buffer {
            name: format!("{name}.running_mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(Buffer {
            name: format!("{name}.running_var"),
            value: Tensor::full(&[c], F::one()),
        });
        NormRef {
            gamma,
            beta,
            running_mean: self.buffers.len() - 2,
            running_var: self.buffers.len() - 1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_norm(&mut self, conv: &str, norm: &str, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> ConvNorm {
        ConvNorm {
            conv: self.conv(conv, cin, cout, kernel, stride, groups, false),
            norm: self.norm(norm, cout),
        }
    }
}

/// Batch statistics to fold into one normalization layer's running estimates.
#[derive(Clone, Debug)]
pub struct NormUpdate<F> {
    running_mean: usize,
    running_var: usize,
    stats: BatchStats<F>,
}

impl<F: Scalar> SegmentedNetwork<F> {
    /// Builds a network with He-normal convolution and linear weights, zero
    /// biases and unit/zero normalization scale/shift. Deterministic in `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut boundaries = vec![0];

        let mut channels = spec.input_shape[0];
        let mut stem = Vec::new();
        for (i, s) in spec.stem.iter().enumerate() {
            stem.push(b.conv_norm(
                &format!("stem.conv{i}"),
                &format!("stem.bn{i}"),
                channels,
                s.filters,
                s.kernel,
                s.stride,
                1,
            ));
            channels = s.filters;
        }
        boundaries.push(b.params.len());

        let mut sections = Vec::new();
        for (si, s) in spec.sections.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..s.residual_blocks {
                let p = format!("section{}.block{bi}", si + 1);
                let stride = if bi == 0 { s.downsample } else { 1 };
                let first = b.conv_norm(&format!("{p}.conv1"), &format!("{p}.bn1"), channels, s.channels, 3, stride, s.cardinality);
                let second = b.conv_norm(&format!("{p}.conv2"), &format!("{p}.bn2"), s.channels, s.channels, 3, 1, 1);
                let shortcut = (stride != 1 || channels != s.channels).then(|| {
                    b.conv_norm(&format!("{p}.shortcut.conv"), &format!("{p}.shortcut.bn"), channels, s.channels, 1, stride, 1)
                });
                blocks.push(Block {
                    first,
                    second,
                    shortcut,
                });
                channels = s.channels;
            }
            sections.push(blocks);
            boundaries.push(b.params.len());
        }

        let head = match spec.head {
            HeadSpec::Classifier { classes } => {
                let weight = b.he_normal("head.fc.weight".into(), &[classes, channels], channels);
                let bias = b.push("head.fc.bias".into(), Tensor::zeros(&[classes]));
                Head::Classifier { weight, bias }
            }
            HeadSpec::Decoder {
                upsample,
                hidden,
                out_channels,
            } => {
                let hidden_layer = b.conv_norm("head.conv0", "head.bn0", channels, hidden, 3, 1, 1);
                let out = b.conv("head.out", hidden, out_channels, 3, 1, 1, true);
                Head::Decoder {
                    upsample,
                    hidden: hidden_layer,
                    out,
                }
            }
        };
        boundaries.push(b.params.len());

        let index = b
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(SegmentedNetwork {
            spec: spec.clone(),
            params: b.params,
            buffers: b.buffers,
            index,
            stem,
            sections,
            head,
            segment_boundaries: boundaries,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<F>] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Convolution and linear layers instantiated, excluding projection shortcuts.
    pub fn weighted_layers(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.ends_with(".weight") && !p.name.contains("shortcut"))
            .count()
    }

    /// Number of sections, i.e. of intermediate representations exposed.
    pub fn k(&self) -> usize {
        self.sections.len()
    }

    pub fn segment_boundaries(&self) -> &[usize] {
        &self.segment_boundaries
    }

    /// Parameters of segment `s`: 0 is the stem, 1..=k the sections, k+1 the head.
    pub fn segment_params(&self, s: usize) -> &[Parameter<F>] {
        &self.params[self.segment_boundaries[s]..self.segment_boundaries[s + 1]]
    }

    /// Segment index owning parameter `name`.
    pub fn segment_of(&self, name: &str) -> Option<usize> {
        let i = *self.index.get(name)?;
        self.segment_boundaries.windows(2).position(|w| w[0] <= i && i < w[1])
    }

    /// Distinct layer names (parameter names without their last component).
    pub fn layer_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            let layer = layer_of(&p.name).to_string();
            if out.last() != Some(&layer) {
                out.push(layer);
            }
        }
        out
    }

    /// Layers outside the residual sections.
    pub fn non_residual_layers(&self) -> Vec<String> {
        self.layer_names()
            .into_iter()
            .filter(|l| l.starts_with("stem.") || l.starts_with("head."))
            .collect()
    }

    /// Registers every parameter and running statistic on `tape`.
    /// Parameters for which `trainable` returns false become constants.
    pub fn bind<'n>(&'n self, tape: &mut Tape<F>, mode: Mode, trainable: impl Fn(&str) -> bool) -> Bound<'n, F> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    tape.param(p.name.clone(), p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let buffers = match mode {
            Mode::Eval => self.buffers.iter().map(|b| tape.constant(b.value.clone())).collect(),
            Mode::Train => Vec::new(),
        };
        Bound {
            net: self,
            params,
            buffers,
            mode,
            updates: Vec::new(),
        }
    }

    /// Folds batch statistics into the running estimates, in order.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<F>]) {
        let m = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (r, &s) in self.buffers[u.running_mean].value.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * s;
            }
            for (r, &s) in self.buffers[u.running_var].value.data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * s;
            }
        }
    }

    /// Eval-mode forward without gradient tracking: `(output, irs)`.
    pub fn infer(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, Mode::Eval, |_| false);
        let xv = tape.constant(x.clone());
        let out = bound.forward_collect(&mut tape, xv)?;
        let irs = out.irs.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((tape.value(out.output).clone(), irs))
    }

    /// Overwrites parameter values and running statistics from `other`,
    /// which must share this network's spec.
    pub fn load_state_from(&mut self, other: &SegmentedNetwork<F>) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::Copy("cannot load state across different specs".into()));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
            p.mask = q.mask.clone();
        }
        for (b, c) in self.buffers.iter_mut().zip(&other.buffers) {
            b.value = c.value.clone();
        }
        Ok(())
    }

    /// Network of the same spec with values converted to another precision.
    pub fn cast<G: Scalar>(&self) -> SegmentedNetwork<G> {
        SegmentedNetwork {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    momentum: p.momentum.iter().map(|v| G::from_f64(v.as_f64())).collect(),
                    mask: p.mask.clone(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
            stem: self.stem.clone(),
            sections: self.sections.clone(),
            head: self.head.clone(),
            segment_boundaries: self.segment_boundaries.clone(),
        }
    }

    pub(crate) fn buffer_index(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.name == name)
    }
}

pub(crate) fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

/// Head output and the intermediate representation at every section boundary.
#[derive(Clone, Debug)]
pub struct Collected {
    pub output: Var,
    pub irs: Vec<Var>,
}

/// A network whose parameters are registered on a tape.
pub struct Bound<'n, F> {
    net: &'n SegmentedNetwork<F>,
    params: Vec<Var>,
    buffers: Vec<Var>,
    mode: Mode,
    updates: Vec<NormUpdate<F>>,
}

impl<'n, F: Scalar> Bound<'n, F> {
    pub fn net(&self) -> &'n SegmentedNetwork<F> {
        self.net
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.net.index.get(name).map(|&i| self.params[i])
    }

    /// Train-mode statistics gathered so far, for
    /// [`SegmentedNetwork::apply_norm_updates`].
    pub fn take_updates(&mut self) -> Vec<NormUpdate<F>> {
        std::mem::take(&mut self.updates)
    }

    fn conv(&self, tape: &mut Tape<F>, c: &ConvRef, x: Var) -> Result<Var> {
        tape.conv2d(x, self.params[c.weight], c.bias.map(|b| self.params[b]), c.cfg)
    }

    fn norm(&mut self, tape: &mut Tape<F>, n: &NormRef, x: Var) -> Result<Var> {
        let (g, b) = (self.params[n.gamma], self.params[n.beta]);
        match self.mode {
            Mode::Train => {
                let y = tape.batch_norm_train(x, g, b)?;
                let stats = tape.batch_stats(y).expect("train-mode statistics");
                self.updates.push(NormUpdate {
                    running_mean: n.running_mean,
                    running_var: n.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(x, g, b, self.buffers[n.running_mean], self.buffers[n.running_var]),
        }
    }

    fn conv_norm(&mut self, tape: &mut Tape<F>, l: &ConvNorm, x: Var) -> Result<Var> {
        let y = self.conv(tape, &l.conv, x)?;
        self.norm(tape, &l.norm, y)
    }

    fn check_input(&self, tape: &Tape<F>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.net.spec.input_shape {
            return Err(Error::dim(
                "forward",
                format!("input {s:?} does not match N×{:?}", self.net.spec.input_shape),
            ));
        }
        Ok(())
    }

    pub fn stem(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let net = self.net;
        let mut h = x;
        for l in &net.stem {
            let y = self.conv_norm(tape, l, h)?;
            h = tape.relu(y)?;
        }
        Ok(h)
    }

    /// Section `i` (0-based) applied to `x`.
    pub fn section(&mut self, tape: &mut Tape<F>, i: usize, x: Var) -> Result<Var> {
        let net = self.net;
        let blocks = net
            .sections
            .get(i)
            .ok_or_else(|| Error::Usage(format!("section {i} of {}", self.net.sections.len())))?;
        let mut h = x;
        for block in blocks {
            let y = self.conv_norm(tape, &block.first, h)?;
            let y = tape.relu(y)?;
            let y = self.conv_norm(tape, &block.second, y)?;
            let skip = match &block.shortcut {
                Some(s) => self.conv_norm(tape, s, h)?,
                None => h,
            };
            let y = tape.add(y, skip)?;
            h = tape.relu(y)?;
        }
        Ok(h)
    }

    pub fn head(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let net = self.net;
        match &net.head {
            Head::Classifier { weight, bias } => {
                let pooled = tape.global_avg_pool(x)?;
                tape.linear(pooled, self.params[*weight], self.params[*bias])
            }
            Head::Decoder {
                upsample,
                hidden,
                out,
            } => {
                let up = tape.upsample_nearest(x, *upsample)?;
                let h = self.conv_norm(tape, hidden, up)?;
                let h = tape.relu(h)?;
                self.conv(tape, out, h)
            }
        }
    }

    pub fn forward_collect(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Collected> {
        let mut h = self.stem(tape, x)?;
        let mut irs = Vec::with_capacity(self.net.k());
        for i in 0..self.net.k() {
            h = self.section(tape, i, h)?;
            irs.push(h);
        }
        let output = self.head(tape, h)?;
        Ok(Collected { output, irs })
    }

    /// Stem and sections `0..=i`, i.e. the network's own chain up to IR `i`.
    pub fn forward_to(&mut self, tape: &mut Tape<F>, x: Var, i: usize) -> Result<Var> {
        let mut h = self.stem(tape, x)?;
        for s in 0..=i {
            h = self.section(tape, s, h)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        Ok(self.forward_collect(tape, x)?.output)
    }
}
