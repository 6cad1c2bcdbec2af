//! Attention pooling, per-scale regression and cross-scale aggregation.

use serde::{Deserialize, Serialize};

use crate::conversion::AffineVars;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    /// `W_1`, `[H, D]`
    pub hidden: Var,
    /// `W_2`, `[1, H]`
    pub score: Var,
    /// `W_reg [1, D]`, `b_reg [1]`
    pub readout: AffineVars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentImportance {
    /// First residue covered, 0-based.
    pub start_residue: usize,
    /// One past the last residue covered.
    pub end_residue: usize,
    /// Share of the averaged attention, in `[0, 1]`.
    pub weight: f64,
    /// `weight × 100`
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub accession: String,
    pub y_hat: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub per_scale: Vec<f64>,
    pub importance: Vec<SegmentImportance>,
}

/// `[B, N, D] → (z [B, D], α [B, N])` with `α = softmax(W_2 tanh(W_1 y))`.
pub fn attention_pool<T: Real>(tape: &mut Tape<T>, y: Var, vars: &PoolVars) -> Result<(Var, Var)> {
    let dims = tape.dims(y).to_vec();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "attention_pool: expected [B, N, D], got {dims:?}"
        )));
    }
    let (b, n, d) = (dims[0], dims[1], dims[2]);
    let a = tape.linear(y, vars.hidden, None)?;
    let a = tape.tanh(a)?;
    let s = tape.linear(a, vars.score, None)?;
    let s = tape.reshape(s, &[b, n])?;
    let alpha = tape.softmax(s, 1)?;
    let row = tape.reshape(alpha, &[b, 1, n])?;
    let z = tape.bmm(row, y)?;
    let z = tape.reshape(z, &[b, d])?;
    Ok((z, alpha))
}

/// `ŷ_i = W_reg z + b_reg`, `[B, D] → [B, 1]`.
pub fn predict_scale<T: Real>(tape: &mut Tape<T>, z: Var, readout: &AffineVars) -> Result<Var> {
    tape.linear(z, readout.weight, Some(readout.bias))
}

/// Combines one sample's per-scale outputs. `alphas[i]` are the scale-`i`
/// pooling weights and `spans[i]` the residues each of its segments covers.
///
/// Coarse weights are moved onto the scale-0 segment grid in proportion to
/// residue overlap, so a scale-`i` segment lying over `2^i` finer segments
/// splits its weight evenly between them when segment lengths agree.
pub fn aggregate(per_scale: &[f64], alphas: &[Vec<f64>], spans: &[usize]) -> Result<Prediction> {
    if per_scale.is_empty() || alphas.len() != per_scale.len() || spans.len() != per_scale.len() {
        return Err(Error::Shape(format!(
            "aggregate: {} outputs, {} weight vectors, {} spans",
            per_scale.len(),
            alphas.len(),
            spans.len()
        )));
    }
    if alphas[0].is_empty() || spans.contains(&0) {
        return Err(Error::Shape("aggregate: empty scale-0 grid".into()));
    }
    let n = per_scale.len() as f64;
    let y_min = per_scale.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = per_scale.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_hat = (per_scale.iter().sum::<f64>() / n).clamp(y_min, y_max);

    let base = spans[0];
    let n0 = alphas[0].len();
    let mut avg = vec![0.0; n0];
    for (alpha, &span) in alphas.iter().zip(spans) {
        let mut grid = vec![0.0; n0];
        for (m, &a) in alpha.iter().enumerate() {
            let (lo, hi) = (m * span, (m + 1) * span);
            let first = lo / base;
            let last = (hi.div_ceil(base)).min(n0);
            for (j, g) in grid.iter_mut().enumerate().take(last).skip(first) {
                let overlap = hi.min((j + 1) * base).saturating_sub(lo.max(j * base));
                *g += a * overlap as f64 / span as f64;
            }
        }
        let total: f64 = grid.iter().sum();
        if total > 0.0 {
            for (acc, g) in avg.iter_mut().zip(&grid) {
                *acc += g / total;
            }
        }
    }
    let total: f64 = avg.iter().sum();
    let importance = avg
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let weight = if total > 0.0 { a / total } else { 1.0 / n0 as f64 };
            SegmentImportance {
                start_residue: j * base,
                end_residue: (j + 1) * base,
                weight,
                score: weight * 100.0,
            }
        })
        .collect();
    Ok(Prediction {
        accession: String::new(),
        y_hat,
        y_min,
        y_max,
        per_scale: per_scale.to_vec(),
        importance,
    })
}
