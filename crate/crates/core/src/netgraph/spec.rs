use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One convolution of the stem: `filters` output channels, square kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A run of residual blocks sharing one channel width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionSpec {
    pub residual_blocks: usize,
    pub channels: usize,
    /// Stride applied by the first block of the section.
    pub downsample: usize,
    /// Group count of the first convolution in every block (1 = plain).
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    /// Global average pool followed by a linear layer.
    Classifier { classes: usize },
    /// Nearest-neighbour upsampling, a conv-bn-relu of `hidden` channels and
    /// a biased output convolution to `out_channels`.
    Decoder {
        upsample: usize,
        hidden: usize,
        out_channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Channels × height × width of one sample.
    pub input_shape: [usize; 3],
    pub stem: Vec<ConvSpec>,
    pub sections: Vec<SectionSpec>,
    pub head: HeadSpec,
}

impl NetworkSpec {
    /// CIFAR-style residual network: a 3×3 stem, one section per entry of
    /// `blocks`, stride 2 at every section after the first.
    pub fn resnet(
        blocks: &[usize],
        channels: &[usize],
        cardinality: usize,
        input_shape: [usize; 3],
        classes: usize,
    ) -> Self {
        let sections = blocks
            .iter()
            .zip(channels)
            .enumerate()
            .map(|(i, (&b, &c))| SectionSpec {
                residual_blocks: b,
                channels: c,
                downsample: if i == 0 { 1 } else { 2 },
                cardinality,
            })
            .collect();
        NetworkSpec {
            input_shape,
            stem: vec![ConvSpec {
                filters: channels.first().copied().unwrap_or(0),
                kernel: 3,
                stride: 1,
            }],
            sections,
            head: HeadSpec::Classifier { classes },
        }
    }

    /// Image-to-image generator: two stem convolutions (the second halves the
    /// resolution), one residual section at `2 × base` channels, and an
    /// upsampling decoder back to the input shape.
    pub fn generator(blocks: usize, base: usize, input_shape: [usize; 3]) -> Self {
        NetworkSpec {
            input_shape,
            stem: vec![
                ConvSpec {
                    filters: base,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    filters: 2 * base,
                    kernel: 3,
                    stride: 2,
                },
            ],
            sections: vec![SectionSpec {
                residual_blocks: blocks,
                channels: 2 * base,
                downsample: 1,
                cardinality: 1,
            }],
            head: HeadSpec::Decoder {
                upsample: 2,
                hidden: base,
                out_channels: input_shape[0],
            },
        }
    }

    pub fn class_count(&self) -> Option<usize> {
        match self.head {
            HeadSpec::Classifier { classes } => Some(classes),
            HeadSpec::Decoder { .. } => None,
        }
    }

    pub fn is_generator(&self) -> bool {
        matches!(self.head, HeadSpec::Decoder { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        if self.stem.is_empty() {
            return Err(Error::Config("stem needs at least one convolution".into()));
        }
        if self.sections.is_empty() {
            return Err(Error::Config("network needs at least one section".into()));
        }
        for (i, s) in self.stem.iter().enumerate() {
            if s.filters == 0 || s.stride == 0 || s.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "stem conv {i}: filters and stride must be positive and the kernel odd ({s:?})"
                )));
            }
        }
        let (mut channels, mut hh, mut ww) = self.stem_output();
        for (i, s) in self.sections.iter().enumerate() {
            if s.residual_blocks == 0 || s.channels == 0 || s.downsample == 0 || s.cardinality == 0 {
                return Err(Error::Config(format!(
                    "section {}: blocks, channels, downsample and cardinality must be positive",
                    i + 1
                )));
            }
            if s.channels % s.cardinality != 0 || channels % s.cardinality != 0 {
                return Err(Error::Config(format!(
                    "section {}: cardinality {} must divide its input ({channels}) and output ({}) channels",
                    i + 1,
                    s.cardinality,
                    s.channels
                )));
            }
            if hh % s.downsample != 0 || ww % s.downsample != 0 {
                return Err(Error::Config(format!(
                    "section {}: {}×{} feature map is not divisible by downsample {}",
                    i + 1,
                    hh,
                    ww,
                    s.downsample
                )));
            }
            channels = s.channels;
            hh /= s.downsample;
            ww /= s.downsample;
        }
        match self.head {
            HeadSpec::Classifier { classes } => {
                if classes < 2 {
                    return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
                }
            }
            HeadSpec::Decoder {
                upsample,
                hidden,
                out_channels,
            } => {
                if upsample == 0 || hidden == 0 || out_channels == 0 {
                    return Err(Error::Config("decoder extents must be positive".into()));
                }
                if hh * upsample != h || ww * upsample != w {
                    return Err(Error::Config(format!(
                        "decoder upsample {upsample} maps {hh}×{ww} to {}×{}, not the input {h}×{w}",
                        hh * upsample,
                        ww * upsample
                    )));
                }
            }
        }
        Ok(())
    }

    fn stem_output(&self) -> (usize, usize, usize) {
        let [mut c, mut h, mut w] = self.input_shape;
        for s in &self.stem {
            let pad = s.kernel / 2;
            c = s.filters;
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
        }
        (c, h, w)
    }

    /// Per-sample shape at the output of every section.
    pub fn section_output_shapes(&self) -> Vec<[usize; 3]> {
        let (_, mut h, mut w) = self.stem_output();
        self.sections
            .iter()
            .map(|s| {
                h /= s.downsample;
                w /= s.downsample;
                [s.channels, h, w]
            })
            .collect()
    }

    /// Convolutions and linear layers, excluding 1×1 projection shortcuts.
    pub fn weighted_layers(&self) -> usize {
        let blocks: usize = self.sections.iter().map(|s| 2 * s.residual_blocks).sum();
        let head = match self.head {
            HeadSpec::Classifier { .. } => 1,
            HeadSpec::Decoder { .. } => 2,
        };
        self.stem.len() + blocks + head
    }

    /// Canonical line-oriented text form, the inverse of [`NetworkSpec::decode`].
    pub fn encode(&self) -> String {
        let [c, h, w] = self.input_shape;
        let mut out = String::new();
        let _ = writeln!(out, "input={c}x{h}x{w}");
        let stem: Vec<String> = self
            .stem
            .iter()
            .map(|s| format!("{}:{}:{}", s.filters, s.kernel, s.stride))
            .collect();
        let _ = writeln!(out, "stem={}", stem.join(","));
        let sections: Vec<String> = self
            .sections
            .iter()
            .map(|s| {
                format!(
                    "{}:{}:{}:{}",
                    s.residual_blocks, s.channels, s.downsample, s.cardinality
                )
            })
            .collect();
        let _ = writeln!(out, "sections={}", sections.join(","));
        let _ = match self.head {
            HeadSpec::Classifier { classes } => writeln!(out, "head=classifier:{classes}"),
            HeadSpec::Decoder {
                upsample,
                hidden,
                out_channels,
            } => writeln!(out, "head=decoder:{upsample}:{hidden}:{out_channels}"),
        };
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut input = None;
        let mut stem = None;
        let mut sections = None;
        let mut head = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("spec line without '=': {line}")))?;
            match key.trim() {
                "input" => input = Some(parse_input(value.trim())?),
                "stem" => stem = Some(parse_stem(value.trim())?),
                "sections" => sections = Some(parse_sections(value.trim())?),
                "head" => head = Some(parse_head(value.trim())?),
                other => return Err(Error::Config(format!("unknown spec key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("spec is missing '{k}'"));
        let spec = NetworkSpec {
            input_shape: input.ok_or_else(|| missing("input"))?,
            stem: stem.ok_or_else(|| missing("stem"))?,
            sections: sections.ok_or_else(|| missing("sections"))?,
            head: head.ok_or_else(|| missing("head"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn numbers(field: &str, text: &str, sep: char) -> Result<Vec<usize>> {
    text.split(sep)
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{field}: '{p}' is not a non-negative integer")))
        })
        .collect()
}

pub(crate) fn parse_input(v: &str) -> Result<[usize; 3]> {
    let n = numbers("input", v, 'x')?;
    match n.as_slice() {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Config(format!("input: expected CxHxW, got '{v}'"))),
    }
}

pub(crate) fn parse_stem(v: &str) -> Result<Vec<ConvSpec>> {
    v.split(',')
        .map(|part| match numbers("stem", part, ':')?.as_slice() {
            [f, k, s] => Ok(ConvSpec {
                filters: *f,
                kernel: *k,
                stride: *s,
            }),
            _ => Err(Error::Config(format!(
                "stem: expected filters:kernel:stride, got '{part}'"
            ))),
        })
        .collect()
}

pub(crate) fn parse_sections(v: &str) -> Result<Vec<SectionSpec>> {
    v.split(',')
        .map(|part| match numbers("sections", part, ':')?.as_slice() {
            [b, c, d, g] => Ok(SectionSpec {
                residual_blocks: *b,
                channels: *c,
                downsample: *d,
                cardinality: *g,
            }),
            _ => Err(Error::Config(format!(
                "sections: expected blocks:channels:downsample:cardinality, got '{part}'"
            ))),
        })
        .collect()
}

pub(crate) fn parse_head(v: &str) -> Result<HeadSpec> {
    let (kind, rest) = v
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("head: expected kind:..., got '{v}'")))?;
    match (kind, numbers("head", rest, ':')?.as_slice()) {
        ("classifier", [classes]) => Ok(HeadSpec::Classifier { classes: *classes }),
        ("decoder", [u, h, o]) => Ok(HeadSpec::Decoder {
            upsample: *u,
            hidden: *h,
            out_channels: *o,
        }),
        _ => Err(Error::Config(format!(
            "head: expected classifier:N or decoder:up:hidden:out, got '{v}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar(blocks: usize) -> NetworkSpec {
        NetworkSpec::resnet(&[blocks; 3], &[16, 32, 64], 1, [3, 32, 32], 10)
    }

    #[test]
    fn resnet_layer_counts_follow_six_n_plus_two() {
        assert_eq!(cifar(3).weighted_layers(), 20);
        assert_eq!(cifar(5).weighted_layers(), 32);
        assert_eq!(cifar(7).weighted_layers(), 44);
        assert_eq!(cifar(9).weighted_layers(), 56);
        assert_eq!(cifar(18).weighted_layers(), 110);
    }

    #[test]
    fn section_shapes_halve_at_each_downsample() {
        let s = cifar(3);
        assert_eq!(
            s.section_output_shapes(),
            vec![[16, 32, 32], [32, 16, 16], [64, 8, 8]]
        );
        let g = NetworkSpec::generator(6, 8, [3, 16, 16]);
        g.validate().unwrap();
        assert_eq!(g.section_output_shapes(), vec![[16, 8, 8]]);
        assert_eq!(g.weighted_layers(), 2 + 12 + 2);
    }

    #[test]
    fn encode_decode_round_trip() {
        for spec in [
            cifar(3),
            NetworkSpec::resnet(&[1, 2, 1], &[32, 32, 64], 16, [3, 16, 16], 10),
            NetworkSpec::generator(2, 8, [3, 16, 16]),
        ] {
            assert_eq!(NetworkSpec::decode(&spec.encode()).unwrap(), spec);
        }
    }

    #[test]
    fn cardinality_must_divide_channels() {
        let s = NetworkSpec::resnet(&[1, 1, 1], &[16, 32, 64], 3, [3, 16, 16], 10);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = NetworkSpec::resnet(&[1, 1, 1], &[16, 32, 64], 16, [3, 16, 16], 10);
        s.validate().unwrap();
    }

    #[test]
    fn decode_rejects_unknown_keys_and_bad_values() {
        assert!(NetworkSpec::decode("input=3x8x8\nwidth=4").is_err());
        assert!(NetworkSpec::decode("input=3x8\nstem=8:3:1\nsections=1:8:1:1\nhead=classifier:10").is_err());
        assert!(NetworkSpec::decode("input=3x8x8\nstem=8:3:1\nsections=1:8:1:1").is_err());
    }
}
