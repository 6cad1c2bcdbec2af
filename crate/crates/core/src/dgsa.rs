//! Dual grouped segment attention.
//!
//! Segments `[B, N, D]` are laid out row-major on a `[G_L, G_S]` grid. Short
//! attention runs inside each row (a group of `G_S` neighbouring segments),
//! long attention runs down each column (segments `G_S` apart). The two
//! results are summed back on the grid and flattened.
//!
//! When `G_S` does not divide `N` the grid is padded with zero slots that are
//! masked out of every key set and dropped after merging, so the block maps
//! `[B, N, D]` to `[B, N, D]` for all `N`.

use serde::{Deserialize, Serialize};

use crate::conversion::{AffineVars, ScaleFeature, ScaleFeatures};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgsaConfig {
    /// Short-group size `G_S` per scale.
    pub group_sizes: Vec<usize>,
    pub num_blocks: usize,
}

impl Default for DgsaConfig {
    fn default() -> Self {
        DgsaConfig {
            group_sizes: vec![8, 8],
            num_blocks: 2,
        }
    }
}

impl DgsaConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.group_sizes.len() != num_scales {
            return Err(Error::InvalidConfig(format!(
                "{} group sizes given for {num_scales} scales",
                self.group_sizes.len()
            )));
        }
        if self.group_sizes.contains(&0) || self.num_blocks == 0 {
            return Err(Error::InvalidConfig("group sizes and block count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub short: AttentionVars,
    pub long: AttentionVars,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

#[derive(Clone, Debug)]
pub struct GroupedView {
    /// `[B, G_L, G_S, D]`
    pub grid: Var,
    pub batch: usize,
    pub groups_long: usize,
    pub group_size: usize,
    pub segments: usize,
    pub dim: usize,
    /// One flag per grid slot (`G_L · G_S`), `true` for padding.
    pub pad_mask: Vec<bool>,
}

impl GroupedView {
    pub fn padded_slots(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    fn short_mask(&self) -> Vec<bool> {
        (0..self.batch).flat_map(|_| self.pad_mask.iter().copied()).collect()
    }

    fn long_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.batch * self.pad_mask.len());
        for _ in 0..self.batch {
            for s in 0..self.group_size {
                for g in 0..self.groups_long {
                    m.push(self.pad_mask[g * self.group_size + s]);
                }
            }
        }
        m
    }
}

/// `[B, N, D] → [B, ceil(N / G_S), G_S, D]` with zero-filled, masked tail slots.
pub fn group_reshape<T: Real>(tape: &mut Tape<T>, y: Var, group_size: usize) -> Result<GroupedView> {
    let dims = tape.dims(y).to_vec();
    if dims.len() != 3 || group_size == 0 {
        return Err(Error::Shape(format!(
            "group_reshape: need [B, N, D] and G_S >= 1, got {dims:?}, {group_size}"
        )));
    }
    let (batch, n, d) = (dims[0], dims[1], dims[2]);
    let groups_long = n.div_ceil(group_size);
    let slots = groups_long * group_size;
    let padded = if slots > n { tape.pad(y, 1, slots)? } else { y };
    let grid = tape.reshape(padded, &[batch, groups_long, group_size, d])?;
    Ok(GroupedView {
        grid,
        batch,
        groups_long,
        group_size,
        segments: n,
        dim: d,
        pad_mask: (0..slots).map(|i| i >= n).collect(),
    })
}

fn project<T: Real>(tape: &mut Tape<T>, x: Var, a: &AffineVars) -> Result<Var> {
    tape.linear(x, a.weight, Some(a.bias))
}

/// Single-head scaled dot-product attention with learned projections.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &AttentionVars,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = project(tape, x, &vars.query)?;
    let k = project(tape, x, &vars.key)?;
    let v = project(tape, x, &vars.value)?;
    tape.attention(q, k, v, key_mask)
}

/// Attention within each short group: `[B·G_L, G_S, D]`.
pub fn attend_short<T: Real>(tape: &mut Tape<T>, view: &GroupedView, vars: &AttentionVars) -> Result<Var> {
    let x = tape.reshape(view.grid, &[view.batch * view.groups_long, view.group_size, view.dim])?;
    let mask = view.short_mask();
    let mask = mask.iter().any(|&m| m).then_some(mask.as_slice());
    self_attention(tape, x, vars, mask)
}

/// Attention across long groups at a fixed in-group index: `[B·G_S, G_L, D]`.
pub fn attend_long<T: Real>(tape: &mut Tape<T>, view: &GroupedView, vars: &AttentionVars) -> Result<Var> {
    let columns = tape.permute(view.grid, &[0, 2, 1, 3])?;
    let x = tape.reshape(columns, &[view.batch * view.group_size, view.groups_long, view.dim])?;
    let mask = view.long_mask();
    let mask = mask.iter().any(|&m| m).then_some(mask.as_slice());
    self_attention(tape, x, vars, mask)
}

/// Sums both branches on the grid, flattens, and drops padded slots.
pub fn merge_flatten<T: Real>(tape: &mut Tape<T>, z_short: Var, z_long: Var, view: &GroupedView) -> Result<Var> {
    let (b, gl, gs, d) = (view.batch, view.groups_long, view.group_size, view.dim);
    let short_grid = tape.reshape(z_short, &[b, gl, gs, d])?;
    let long_cols = tape.reshape(z_long, &[b, gs, gl, d])?;
    let long_grid = tape.permute(long_cols, &[0, 2, 1, 3])?;
    let merged = tape.add(long_grid, short_grid)?;
    let flat = tape.reshape(merged, &[b, gl * gs, d])?;
    if gl * gs > view.segments {
        tape.narrow(flat, 1, 0, view.segments)
    } else {
        Ok(flat)
    }
}

/// One DGSA block: both branches, merge, then `LayerNorm(y + merged)`.
pub fn dgsa_block<T: Real>(tape: &mut Tape<T>, y: Var, group_size: usize, vars: &BlockVars) -> Result<Var> {
    let view = group_reshape(tape, y, group_size)?;
    let z_short = attend_short(tape, &view, &vars.short)?;
    let z_long = attend_long(tape, &view, &vars.long)?;
    let merged = merge_flatten(tape, z_short, z_long, &view)?;
    let residual = tape.add(y, merged)?;
    tape.layer_norm(residual, vars.norm_gamma, vars.norm_beta, LAYER_NORM_EPS)
}

/// Applies `num_blocks` blocks to each scale independently; `vars[i][b]`
/// holds block `b` of scale `i`.
pub fn apply_dgsa_stack<T: Real>(
    tape: &mut Tape<T>,
    features: &ScaleFeatures,
    cfg: &DgsaConfig,
    vars: &[Vec<BlockVars>],
) -> Result<ScaleFeatures> {
    cfg.validate(features.scales.len())?;
    let mut scales = Vec::with_capacity(features.scales.len());
    for (i, sf) in features.scales.iter().enumerate() {
        let mut y = sf.features;
        for block in &vars[i] {
            y = dgsa_block(tape, y, cfg.group_sizes[i], block)?;
        }
        scales.push(ScaleFeature { features: y, ..*sf });
    }
    Ok(ScaleFeatures { scales })
}
