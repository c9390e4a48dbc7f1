use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, deconv_out_len};
use crate::tensor::numel;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

/// What the decoder sees of the classified capsules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// All class rows, non-target rows zeroed: `n · b` components.
    Matrix,
    /// The target capsule alone: `b` components.
    Vector,
    /// Unsupervised: the single routed capsule.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderSpec {
    /// Hidden widths; a final layer to the flattened input size is implied.
    Fc { hidden: Vec<usize> },
    /// `seed` is the `(channels, h, w)` map a linear layer projects `z` onto;
    /// without it `z` enters the first deconvolution as a `(dim, 1, 1)` map.
    Deconv {
        #[serde(default)]
        seed: Option<[usize; 3]>,
        layers: Vec<DeconvSpec>,
    },
}

/// Architecture description. Every encoder layer but the last is followed by
/// a ReLU; the last layer's channels are regrouped into primary capsules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub encoder: Vec<ConvSpec>,
    pub primary_dim: usize,
    /// Classified capsules; ignored when unsupervised.
    pub classes: usize,
    pub capsule_dim: usize,
    pub mask: MaskMode,
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub batch_norm: bool,
}

const fn conv(filters: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec { filters, kernel, stride, padding: 0 }
}

const fn deconv(filters: usize, kernel: usize, stride: usize, padding: usize) -> DeconvSpec {
    DeconvSpec { filters, kernel, stride, padding, output_padding: 0 }
}

/// Named architecture presets.
pub const PRESETS: [&str; 5] = ["table1", "table1-deconv", "capsnet", "unsup28", "table2"];

impl ModelConfig {
    /// Supervised 28×28 model: 8-dim class capsules, mask vector, FC decoder.
    pub fn table1() -> Self {
        ModelConfig {
            mode: Mode::Supervised,
            input_shape: [1, 28, 28],
            encoder: vec![conv(256, 9, 1), conv(128, 9, 2)],
            primary_dim: 8,
            classes: 10,
            capsule_dim: 8,
            mask: MaskMode::Vector,
            decoder: DecoderSpec::Fc { hidden: vec![512, 1024] },
            batch_norm: false,
        }
    }

    /// [`ModelConfig::table1`] with the deconvolutional decoder.
    pub fn table1_deconv() -> Self {
        ModelConfig {
            decoder: DecoderSpec::Deconv {
                seed: Some([256, 3, 3]),
                layers: vec![
                    deconv(256, 4, 1, 0),
                    deconv(128, 4, 2, 1),
                    deconv(64, 9, 1, 2),
                    deconv(32, 9, 1, 1),
                    deconv(1, 9, 1, 1),
                ],
            },
            ..Self::table1()
        }
    }

    /// Baseline: 16-dim class capsules behind the class-dependent mask matrix.
    pub fn capsnet() -> Self {
        ModelConfig { capsule_dim: 16, mask: MaskMode::Matrix, ..Self::table1() }
    }

    /// Unsupervised 28×28 model: Table-1 encoder, one 16-dim capsule.
    pub fn unsup28() -> Self {
        ModelConfig {
            mode: Mode::Unsupervised,
            classes: 1,
            capsule_dim: 16,
            mask: MaskMode::None,
            ..Self::table1()
        }
    }

    /// Unsupervised 3×64×64 model.
    pub fn table2() -> Self {
        ModelConfig {
            mode: Mode::Unsupervised,
            input_shape: [3, 64, 64],
            encoder: vec![conv(32, 4, 2), conv(64, 4, 2), conv(128, 4, 2), conv(512, 4, 1)],
            primary_dim: 8,
            classes: 1,
            capsule_dim: 16,
            mask: MaskMode::None,
            decoder: DecoderSpec::Deconv {
                seed: None,
                layers: vec![
                    deconv(512, 1, 1, 0),
                    deconv(64, 4, 1, 0),
                    deconv(64, 4, 2, 1),
                    deconv(32, 4, 2, 1),
                    deconv(32, 4, 2, 1),
                    deconv(3, 4, 2, 1),
                ],
            },
            batch_norm: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "table1" => Self::table1(),
            "table1-deconv" => Self::table1_deconv(),
            "capsnet" => Self::capsnet(),
            "unsup28" => Self::unsup28(),
            "table2" => Self::table2(),
            _ => return None,
        })
    }

    /// Number of output capsules routing produces.
    pub fn outputs(&self) -> usize {
        match self.mode {
            Mode::Supervised => self.classes,
            Mode::Unsupervised => 1,
        }
    }

    pub fn representation_dim(&self) -> usize {
        match self.mask {
            MaskMode::Matrix => self.classes * self.capsule_dim,
            MaskMode::Vector | MaskMode::None => self.capsule_dim,
        }
    }

    pub fn input_len(&self) -> usize {
        numel(&self.input_shape)
    }
}

/// One stage of the derived shape chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub op: String,
    pub shape: Vec<usize>,
}

/// Derived per-stage shapes from input to reconstruction.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ShapeChain {
    pub stages: Vec<Stage>,
    /// Primary capsule count `m`.
    pub primary_count: usize,
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl fmt::Display for ShapeChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            writeln!(f, "{:<18} {:<32} {}", s.name, s.op, dims(&s.shape))?;
        }
        Ok(())
    }
}

impl ShapeChain {
    fn push(&mut self, name: impl Into<String>, op: impl Into<String>, shape: Vec<usize>) {
        self.stages.push(Stage { name: name.into(), op: op.into(), shape });
    }

    fn fail(&self, detail: impl Into<String>) -> ModelError {
        ModelError::Chain { detail: detail.into(), chain: self.to_string() }
    }
}

/// Walks the configuration from input to reconstruction, checking every
/// stage fits.
pub fn derive_chain(cfg: &ModelConfig) -> Result<ShapeChain, ModelError> {
    let mut chain = ShapeChain::default();
    let [c, h, w] = cfg.input_shape;
    chain.push("input", "", vec![c, h, w]);
    if c == 0 || h == 0 || w == 0 {
        return Err(chain.fail("input extents must be positive"));
    }
    match (cfg.mode, cfg.mask) {
        (Mode::Supervised, MaskMode::None) => return Err(chain.fail("supervised models need a matrix or vector mask")),
        (Mode::Unsupervised, MaskMode::Matrix | MaskMode::Vector) => {
            return Err(chain.fail("unsupervised models take no mask"))
        }
        _ => {}
    }
    if cfg.mode == Mode::Supervised && cfg.classes < 2 {
        return Err(chain.fail("supervised models need at least two classes"));
    }
    if cfg.capsule_dim == 0 || cfg.primary_dim == 0 {
        return Err(chain.fail("capsule dimensions must be positive"));
    }
    if cfg.encoder.is_empty() {
        return Err(chain.fail("encoder needs at least one convolution"));
    }

    let (mut c, mut h, mut w) = (c, h, w);
    let last = cfg.encoder.len() - 1;
    for (i, l) in cfg.encoder.iter().enumerate() {
        let (Some(oh), Some(ow)) =
            (conv_out_len(h, l.kernel, l.stride, l.padding), conv_out_len(w, l.kernel, l.stride, l.padding))
        else {
            return Err(chain.fail(format!("encoder layer {i}: kernel {} does not fit {h}x{w}", l.kernel)));
        };
        if l.filters == 0 {
            return Err(chain.fail(format!("encoder layer {i}: zero filters")));
        }
        (c, h, w) = (l.filters, oh, ow);
        let act = if i < last { " + ReLU" } else { "" };
        chain.push(
            format!("conv{}", i + 1),
            format!("Conv({}, {}x{}, s{}, p{}){act}", l.filters, l.kernel, l.kernel, l.stride, l.padding),
            vec![c, h, w],
        );
    }
    if c % cfg.primary_dim != 0 {
        return Err(chain.fail(format!("{c} channels do not split into {}-dim capsules", cfg.primary_dim)));
    }
    let m = c / cfg.primary_dim * h * w;
    chain.primary_count = m;
    chain.push("primary", "squash", vec![m, cfg.primary_dim]);
    chain.push("routing", "W", vec![m, cfg.primary_dim, cfg.outputs() * cfg.capsule_dim]);
    chain.push("classified", "route", vec![cfg.outputs(), cfg.capsule_dim]);
    let mask = match cfg.mask {
        MaskMode::Matrix => "mask matrix",
        MaskMode::Vector => "mask vector",
        MaskMode::None => "",
    };
    let z = cfg.representation_dim();
    chain.push("representation", mask, vec![z]);

    let target = cfg.input_shape.to_vec();
    match &cfg.decoder {
        DecoderSpec::Fc { hidden } => {
            for (i, &width) in hidden.iter().enumerate() {
                if width == 0 {
                    return Err(chain.fail(format!("decoder layer {i}: zero width")));
                }
                chain.push(format!("fc{}", i + 1), format!("FC({width}) + ReLU"), vec![width]);
            }
            let out = numel(&target);
            chain.push(format!("fc{}", hidden.len() + 1), format!("FC({out}) + sigmoid"), vec![out]);
        }
        DecoderSpec::Deconv { seed, layers } => {
            let (mut c, mut h, mut w) = match seed {
                Some([c, h, w]) => {
                    chain.push("seed", format!("FC({}) + ReLU", c * h * w), vec![*c, *h, *w]);
                    (*c, *h, *w)
                }
                None => {
                    chain.push("seed", "reshape", vec![z, 1, 1]);
                    (z, 1, 1)
                }
            };
            if c * h * w == 0 {
                return Err(chain.fail("decoder seed extents must be positive"));
            }
            if layers.is_empty() {
                return Err(chain.fail("deconvolutional decoder needs at least one layer"));
            }
            for (i, l) in layers.iter().enumerate() {
                let (Some(oh), Some(ow)) = (
                    deconv_out_len(h, l.kernel, l.stride, l.padding, l.output_padding),
                    deconv_out_len(w, l.kernel, l.stride, l.padding, l.output_padding),
                ) else {
                    return Err(chain.fail(format!("decoder layer {i}: invalid deconvolution of {h}x{w}")));
                };
                if l.filters == 0 {
                    return Err(chain.fail(format!("decoder layer {i}: zero filters")));
                }
                (c, h, w) = (l.filters, oh, ow);
                let act = if i + 1 < layers.len() { " + ReLU" } else { " + sigmoid" };
                chain.push(
                    format!("deconv{}", i + 1),
                    format!("Deconv({}, {}x{}, s{}, p{}){act}", l.filters, l.kernel, l.kernel, l.stride, l.padding),
                    vec![c, h, w],
                );
            }
            if vec![c, h, w] != target {
                return Err(chain.fail(format!("decoder ends at {} but input is {}", dims(&[c, h, w]), dims(&target))));
            }
        }
    }
    chain.push("output", "", target);
    Ok(chain)
}
