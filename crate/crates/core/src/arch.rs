//! Encoder/decoder layer lists for the shipped presets.
//!
//! Decoders are derived from their encoder's shape chain: the first dense
//! layer restores the flattened width, the reshape restores the last
//! convolutional shape, and each upsample targets the extent recorded before
//! the matching max-pool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SevenError};
use crate::layers::LayerSpec;

/// Width of the embedding produced by every shipped encoder.
pub const EMBEDDING_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mnist,
    Usps,
    Lfw,
    Sonof,
    Mlp,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Mnist,
        Preset::Usps,
        Preset::Lfw,
        Preset::Sonof,
        Preset::Mlp,
        Preset::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Mnist => "mnist",
            Preset::Usps => "usps",
            Preset::Lfw => "lfw",
            Preset::Sonof => "sonof",
            Preset::Mlp => "mlp",
            Preset::Custom => "custom",
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Preset::Custom => 0,
            Preset::Mnist => 1,
            Preset::Usps => 2,
            Preset::Lfw => 3,
            Preset::Sonof => 4,
            Preset::Mlp => 5,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => Preset::Custom,
            1 => Preset::Mnist,
            2 => Preset::Usps,
            3 => Preset::Lfw,
            4 => Preset::Sonof,
            5 => Preset::Mlp,
            _ => return None,
        })
    }

    /// Default `[channels, height, width]` input.
    pub fn input_shape(self) -> Option<[usize; 3]> {
        match self {
            Preset::Mnist => Some([1, 28, 28]),
            Preset::Usps => Some([1, 16, 16]),
            Preset::Lfw => Some([1, 64, 48]),
            Preset::Sonof => Some([1, 100, 100]),
            Preset::Mlp | Preset::Custom => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (id {})", self.as_str(), self.id())
    }
}

impl FromStr for Preset {
    type Err = SevenError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == lower)
            .ok_or_else(|| SevenError::invalid(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchOptions {
    /// Append the table's trailing Dropout(0.5) after the decoder output.
    pub decoder_final_dropout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub preset: Preset,
    /// Per-sample input shape `[channels, height, width]`.
    pub input: Vec<usize>,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

const DROPOUT: LayerSpec = LayerSpec::Dropout { rate: 0.5 };

fn conv(k: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel: (k, k),
        out_channels,
    }
}

fn transconv(k: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::TransConv {
        kernel: (k, k),
        out_channels,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool { factor: (2, 2) }
}

/// Shapes before each encoder layer plus the final output.
fn shape_chain(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for spec in specs {
        let next = spec.output_shape(shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Per-sample extents seen by each max-pool of `encoder`, in encoder order.
fn pre_pool_extents(encoder: &[LayerSpec], input: &[usize]) -> Result<Vec<(usize, usize)>> {
    let shapes = shape_chain(encoder, input)?;
    Ok(encoder
        .iter()
        .zip(&shapes)
        .filter(|(spec, _)| matches!(spec, LayerSpec::MaxPool { .. }))
        .map(|(_, s)| (s[1], s[2]))
        .collect())
}

/// Shape just before the encoder's flatten.
fn pre_flatten_shape(encoder: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let shapes = shape_chain(encoder, input)?;
    encoder
        .iter()
        .position(|s| *s == LayerSpec::Flatten)
        .map(|i| shapes[i].clone())
        .ok_or_else(|| SevenError::invalid("encoder has no flatten layer"))
}

/// Upsample restoring `target`, which the preceding pool reduced by 2.
fn upsample_to((h, w): (usize, usize)) -> LayerSpec {
    let target = if h % 2 == 0 && w % 2 == 0 {
        None
    } else {
        Some((h, w))
    };
    LayerSpec::Upsample {
        factor: (2, 2),
        target,
    }
}

impl ArchSpec {
    pub fn preset(preset: Preset, options: ArchOptions) -> Result<Self> {
        match preset {
            Preset::Mnist | Preset::Usps => {
                let [_, h, w] = preset.input_shape().unwrap();
                Self::digits(preset, h, w, options)
            }
            Preset::Lfw | Preset::Sonof => {
                let [_, h, w] = preset.input_shape().unwrap();
                Self::faces(preset, h, w, options)
            }
            Preset::Mlp | Preset::Custom => Err(SevenError::invalid(format!(
                "{preset:?} needs an explicit input shape"
            ))),
        }
    }

    /// Two conv/pool stages with 8 channels (the MNIST and USPS networks).
    pub fn digits(preset: Preset, h: usize, w: usize, options: ArchOptions) -> Result<Self> {
        let input = vec![1, h, w];
        let encoder = vec![
            conv(3, 8),
            LayerSpec::Relu,
            pool(),
            DROPOUT,
            conv(5, 8),
            LayerSpec::Relu,
            pool(),
            DROPOUT,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                out_units: EMBEDDING_WIDTH,
            },
            LayerSpec::Relu,
        ];
        let pools = pre_pool_extents(&encoder, &input)?;
        let inner = pre_flatten_shape(&encoder, &input)?;
        let mut decoder = vec![
            LayerSpec::Dense {
                out_units: inner.iter().product(),
            },
            LayerSpec::Relu,
            LayerSpec::Reshape { shape: inner },
            upsample_to(pools[1]),
            transconv(5, 8),
            LayerSpec::Relu,
            DROPOUT,
            upsample_to(pools[0]),
            transconv(3, 1),
            LayerSpec::Sigmoid,
        ];
        if options.decoder_final_dropout {
            decoder.push(DROPOUT);
        }
        Ok(ArchSpec {
            preset,
            input,
            encoder,
            decoder,
        })
    }

    /// Three conv stages with batch norm (the LFW and SONOF networks).
    pub fn faces(preset: Preset, h: usize, w: usize, options: ArchOptions) -> Result<Self> {
        let input = vec![1, h, w];
        let encoder = vec![
            conv(4, 32),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            DROPOUT,
            pool(),
            DROPOUT,
            conv(3, 64),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            pool(),
            DROPOUT,
            conv(3, 128),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            DROPOUT,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                out_units: EMBEDDING_WIDTH,
            },
            LayerSpec::Relu,
        ];
        let pools = pre_pool_extents(&encoder, &input)?;
        let inner = pre_flatten_shape(&encoder, &input)?;
        let mut decoder = vec![
            LayerSpec::Dense {
                out_units: inner.iter().product(),
            },
            LayerSpec::Relu,
            LayerSpec::Reshape { shape: inner },
            transconv(3, 64),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            DROPOUT,
            upsample_to(pools[1]),
            transconv(3, 32),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            DROPOUT,
            upsample_to(pools[0]),
            transconv(3, 1),
            LayerSpec::BatchNorm,
            LayerSpec::Sigmoid,
        ];
        if options.decoder_final_dropout {
            decoder.push(DROPOUT);
        }
        Ok(ArchSpec {
            preset,
            input,
            encoder,
            decoder,
        })
    }

    /// Fully connected variant: Dense(512)-ReLU-Dropout-Dense(128)-ReLU and
    /// its mirror.
    pub fn mlp(input: [usize; 3], options: ArchOptions) -> Self {
        let pixels = input.iter().product();
        let encoder = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_units: 512 },
            LayerSpec::Relu,
            DROPOUT,
            LayerSpec::Dense {
                out_units: EMBEDDING_WIDTH,
            },
            LayerSpec::Relu,
        ];
        let mut decoder = vec![
            LayerSpec::Dense { out_units: 512 },
            LayerSpec::Relu,
            DROPOUT,
            LayerSpec::Dense { out_units: pixels },
            LayerSpec::Sigmoid,
            LayerSpec::Reshape {
                shape: input.to_vec(),
            },
        ];
        if options.decoder_final_dropout {
            decoder.push(DROPOUT);
        }
        ArchSpec {
            preset: Preset::Mlp,
            input: input.to_vec(),
            encoder,
            decoder,
        }
    }

    /// A 4x4 network with every layer kind the conv presets use, small
    /// enough for exhaustive finite-difference checks: 2-channel convs, batch
    /// norm, an 8-dim embedding. No dropout, so training-mode forwards are
    /// deterministic.
    pub fn tiny() -> Self {
        ArchSpec {
            preset: Preset::Custom,
            input: vec![1, 4, 4],
            encoder: vec![
                conv(3, 2),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                pool(),
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 8 },
                LayerSpec::Tanh,
            ],
            decoder: vec![
                LayerSpec::Dense { out_units: 8 },
                LayerSpec::Relu,
                LayerSpec::Reshape {
                    shape: vec![2, 2, 2],
                },
                LayerSpec::Upsample {
                    factor: (2, 2),
                    target: None,
                },
                transconv(3, 2),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                transconv(2, 1),
                LayerSpec::Sigmoid,
            ],
        }
    }

    pub fn embedding_shape(&self) -> Result<Vec<usize>> {
        Ok(shape_chain(&self.encoder, &self.input)?.pop().unwrap())
    }

    pub fn reconstruction_shape(&self) -> Result<Vec<usize>> {
        let embedding = self.embedding_shape()?;
        Ok(shape_chain(&self.decoder, &embedding)?.pop().unwrap())
    }

    /// Checks that the decoder maps the embedding back to the input shape and
    /// that the embedding is flat.
    pub fn validate(&self) -> Result<()> {
        if self.input.len() != 3 {
            return Err(SevenError::invalid(format!(
                "input shape must be [c, h, w], got {:?}",
                self.input
            )));
        }
        let embedding = self.embedding_shape()?;
        if embedding.len() != 1 {
            return Err(SevenError::invalid(format!(
                "encoder must end in a flat embedding, got {embedding:?}"
            )));
        }
        let recon = self.reconstruction_shape()?;
        if recon != self.input {
            return Err(SevenError::ShapeMismatch {
                op: "decoder output vs encoder input",
                left: recon,
                right: self.input.clone(),
            });
        }
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .any(|s| *s == LayerSpec::BatchNorm)
    }
}
