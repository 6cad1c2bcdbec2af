//! Amino-acid-level to segment-level feature conversion: stride-2
//! downsampling into scales, fixed-length segmentation, and a segment-wise
//! convolution mixing each segment with its `k - 1` neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    /// Number of stride-2 downsampling steps; there are `downsamples + 1` scales.
    pub downsamples: usize,
    /// Segment length per scale.
    pub segment_lengths: Vec<usize>,
    /// Segment-convolution neighbourhood, odd.
    pub kernel: usize,
    pub model_dim: usize,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            downsamples: 1,
            segment_lengths: vec![16, 8],
            kernel: 3,
            model_dim: 128,
        }
    }
}

impl ConversionConfig {
    pub fn num_scales(&self) -> usize {
        self.downsamples + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_lengths.len() != self.num_scales() {
            return Err(Error::InvalidConfig(format!(
                "{} segment lengths given for {} scales",
                self.segment_lengths.len(),
                self.num_scales()
            )));
        }
        if self.segment_lengths.contains(&0) {
            return Err(Error::InvalidConfig("segment lengths must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!(
                "segment kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.model_dim == 0 {
            return Err(Error::InvalidConfig("model_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-scale geometry for a sequence of `length` residues, or
    /// `SequenceTooShort` naming the first scale that has no full segment.
    pub fn layout(&self, length: usize) -> Result<Vec<ScaleLayout>> {
        let mut out = Vec::with_capacity(self.num_scales());
        let mut len = length;
        for (scale, &seg) in self.segment_lengths.iter().enumerate() {
            if scale > 0 {
                if len < 2 {
                    return Err(Error::SequenceTooShort {
                        scale: Some(scale),
                        length,
                        required: 1 << scale,
                    });
                }
                len /= 2;
            }
            if len < seg {
                return Err(Error::SequenceTooShort {
                    scale: Some(scale),
                    length,
                    required: seg << scale,
                });
            }
            out.push(ScaleLayout {
                length: len,
                segments: len / seg,
                residue_span: seg << scale,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleLayout {
    /// Sequence length at this scale, `floor(L / 2^i)`.
    pub length: usize,
    pub segments: usize,
    /// Residues of the original sequence covered by one segment, `l_i · 2^i`.
    pub residue_span: usize,
}

/// Weight/bias pair on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct ConversionVars {
    /// Pointwise `D → D_model` projection for scale 0.
    pub projection: AffineVars,
    /// One strided convolution per downsampling step.
    pub samplers: Vec<AffineVars>,
    /// Segment convolution per scale.
    pub segment_convs: Vec<AffineVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleFeature {
    /// `[B, N_i, D_model]`
    pub features: Var,
    pub segments: usize,
    pub residue_span: usize,
}

#[derive(Clone, Debug)]
pub struct ScaleFeatures {
    pub scales: Vec<ScaleFeature>,
}

fn at_scale(err: Error, scale: usize) -> Error {
    match err {
        Error::SequenceTooShort {
            scale: None,
            length,
            required,
        } => Error::SequenceTooShort {
            scale: Some(scale),
            length,
            required,
        },
        e => e,
    }
}

/// Builds the multi-resolution pyramid from `[B, L, D]`: entry 0 is `x`
/// itself, entry `i` has length `floor(L_{i-1} / 2)`.
pub fn sample<T: Real>(tape: &mut Tape<T>, x: Var, samplers: &[AffineVars]) -> Result<Vec<Var>> {
    let mut out = vec![x];
    for (i, s) in samplers.iter().enumerate() {
        let prev = out[i];
        let channels_first = tape.transpose_last(prev)?;
        let down = tape
            .conv1d_strided(channels_first, s.weight, s.bias)
            .map_err(|e| at_scale(e, i + 1))?;
        out.push(tape.transpose_last(down)?);
    }
    Ok(out)
}

/// `[B, L_i, D] → [B, N_i, l_i, D]`, dropping the trailing `L_i mod l_i` rows.
pub fn segment<T: Real>(tape: &mut Tape<T>, x: Var, segment_len: usize) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("segment: expected [B, L, D], got {dims:?}")));
    }
    let (batch, len, d) = (dims[0], dims[1], dims[2]);
    if segment_len == 0 || len < segment_len {
        return Err(Error::SequenceTooShort {
            scale: None,
            length: len,
            required: segment_len,
        });
    }
    let n = len / segment_len;
    let kept = if n * segment_len == len {
        x
    } else {
        tape.narrow(x, 1, 0, n * segment_len)?
    };
    tape.reshape(kept, &[batch, n, segment_len, d])
}

/// Sampling, segmentation and segment convolution for every scale.
pub fn convert<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ConversionConfig,
    vars: &ConversionVars,
) -> Result<ScaleFeatures> {
    cfg.validate()?;
    let layout = cfg.layout(tape.dims(x)[1])?;
    let pyramid = sample(tape, x, &vars.samplers)?;
    let mut scales = Vec::with_capacity(layout.len());
    for (i, geo) in layout.iter().enumerate() {
        let level = if i == 0 {
            tape.linear(pyramid[0], vars.projection.weight, Some(vars.projection.bias))?
        } else {
            pyramid[i]
        };
        let segments = segment(tape, level, cfg.segment_lengths[i]).map_err(|e| at_scale(e, i))?;
        let conv = &vars.segment_convs[i];
        let features = tape.conv2d_segments(segments, conv.weight, conv.bias)?;
        scales.push(ScaleFeature {
            features,
            segments: geo.segments,
            residue_span: geo.residue_span,
        });
    }
    Ok(ScaleFeatures { scales })
}
