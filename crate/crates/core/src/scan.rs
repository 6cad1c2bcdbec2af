//! Single-substitution scans: predicted temperature change for every
//! position and amino acid, and threshold-based candidate selection.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{read_embedding, synth_embed, EmbeddingManifest, ResidueEmbedding};
use crate::error::{Error, Result};
use crate::head::{Prediction, SegmentImportance};
use crate::model::Model;
use crate::sequence::{self, AMINO_ACIDS};

/// Supplies the embedding of the sequence with `letter` at 0-based `position`.
pub trait VariantProvider: Sync {
    fn variant(&self, position: usize, letter: u8) -> Result<ResidueEmbedding>;
}

/// Variant name in the usual notation, e.g. `A78E` (1-based position).
pub fn variant_name(wild: u8, position: usize, letter: u8) -> String {
    format!("{}{}{}", wild as char, position + 1, letter as char)
}

/// Parses `A78E` into `(wild letter, 0-based position, new letter)`.
pub fn parse_variant_name(name: &str) -> Option<(u8, usize, u8)> {
    let b = name.as_bytes();
    if b.len() < 3 {
        return None;
    }
    let (wild, letter) = (b[0], b[b.len() - 1]);
    sequence::residue_index(wild)?;
    sequence::residue_index(letter)?;
    let pos: usize = name[1..name.len() - 1].parse().ok()?;
    Some((wild, pos.checked_sub(1)?, letter))
}

/// Embeds variants on the fly with the synthetic embedder.
pub struct SynthProvider {
    pub sequence: String,
    pub dim: usize,
    pub seed: u64,
}

impl VariantProvider for SynthProvider {
    fn variant(&self, position: usize, letter: u8) -> Result<ResidueEmbedding> {
        let mut s = self.sequence.clone().into_bytes();
        if position >= s.len() {
            return Err(Error::MissingVariant {
                position: position + 1,
                letter: letter as char,
            });
        }
        s[position] = letter;
        let s = String::from_utf8(s).expect("ASCII sequence");
        synth_embed(
            &variant_name(self.sequence.as_bytes()[position], position, letter),
            &s,
            self.dim,
            self.seed,
        )
    }
}

/// Reads precomputed variant embeddings listed under names like `A78E`.
pub struct ManifestProvider {
    pub sequence: String,
    pub manifest: EmbeddingManifest,
}

impl ManifestProvider {
    /// Recovers the wild-type sequence of length `len` from the variant
    /// names in `manifest`.
    pub fn infer_sequence(manifest: &EmbeddingManifest, len: usize) -> Result<String> {
        let mut seq = vec![0u8; len];
        for (name, _) in &manifest.entries {
            let Some((wild, pos, _)) = parse_variant_name(name) else {
                continue;
            };
            if pos >= len {
                continue;
            }
            if seq[pos] != 0 && seq[pos] != wild {
                return Err(Error::Format(format!(
                    "variant {name} disagrees with wild type {} at position {}",
                    seq[pos] as char,
                    pos + 1
                )));
            }
            seq[pos] = wild;
        }
        if let Some(pos) = seq.iter().position(|&c| c == 0) {
            return Err(Error::MissingVariant {
                position: pos + 1,
                letter: AMINO_ACIDS[0] as char,
            });
        }
        Ok(String::from_utf8(seq).expect("ASCII sequence"))
    }
}

impl VariantProvider for ManifestProvider {
    fn variant(&self, position: usize, letter: u8) -> Result<ResidueEmbedding> {
        let missing = || Error::MissingVariant {
            position: position + 1,
            letter: letter as char,
        };
        let wild = *self.sequence.as_bytes().get(position).ok_or_else(missing)?;
        let path = self
            .manifest
            .get(&variant_name(wild, position, letter))
            .ok_or_else(missing)?;
        read_embedding(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub sequence: String,
    pub wild_type: Prediction,
    /// Column order of `delta`.
    pub alphabet: String,
    /// `delta[p][a]`: prediction for the variant minus the wild type, °C.
    pub delta: Vec<Vec<f64>>,
    pub importance: Vec<SegmentImportance>,
}

/// Forwards every single substitution of `sequence`. Identity substitutions
/// are 0 without a forward pass.
pub fn scan(
    wild_type: &ResidueEmbedding,
    sequence: &str,
    provider: &dyn VariantProvider,
    model: &Model,
) -> Result<ScanResult> {
    sequence::validate(sequence)?;
    if sequence.len() != wild_type.len() {
        return Err(Error::Shape(format!(
            "sequence has {} residues, embedding has {}",
            sequence.len(),
            wild_type.len()
        )));
    }
    let wt = model.predict(wild_type)?;
    let seq = sequence.as_bytes();
    let jobs: Vec<(usize, usize)> = (0..seq.len())
        .flat_map(|p| (0..AMINO_ACIDS.len()).map(move |a| (p, a)))
        .filter(|&(p, a)| AMINO_ACIDS[a] != seq[p])
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(p, a)| {
            let e = provider.variant(p, AMINO_ACIDS[a])?;
            if e.len() != wild_type.len() || e.dim() != wild_type.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "variant {} is {}x{}, wild type is {}x{}",
                    variant_name(seq[p], p, AMINO_ACIDS[a]),
                    e.len(),
                    e.dim(),
                    wild_type.len(),
                    wild_type.dim()
                )));
            }
            Ok(model.predict(&e)?.y_hat - wt.y_hat)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut delta = vec![vec![0.0; AMINO_ACIDS.len()]; seq.len()];
    for (&(p, a), v) in jobs.iter().zip(values) {
        delta[p][a] = v;
    }
    Ok(ScanResult {
        sequence: sequence.to_string(),
        importance: wt.importance.clone(),
        wild_type: wt,
        alphabet: String::from_utf8(AMINO_ACIDS.to_vec()).expect("ASCII"),
        delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCriteria {
    /// Minimum segment importance score (percent of averaged attention).
    pub importance_threshold: f64,
    /// Minimum temperature score, `Δ / max|Δ| × 100`.
    pub temperature_score_threshold: f64,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            importance_threshold: 20.0,
            temperature_score_threshold: 50.0,
        }
    }
}

impl SelectionCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.importance_threshold) || !ok(self.temperature_score_threshold) {
            return Err(Error::InvalidConfig("selection thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based residue position.
    pub position: usize,
    pub wild_type: char,
    pub letter: char,
    pub delta: f64,
    pub score: f64,
    pub segment_importance: f64,
}

/// Substitutions inside important segments whose temperature score clears
/// the threshold, best first.
pub fn select_candidates(result: &ScanResult, criteria: &SelectionCriteria) -> Vec<Candidate> {
    let max_abs = result.delta.iter().flatten().fold(0.0f64, |m, d| m.max(d.abs()));
    if max_abs == 0.0 {
        return Vec::new();
    }
    let seq = result.sequence.as_bytes();
    let alphabet = result.alphabet.as_bytes();
    let mut out = Vec::new();
    for seg in &result.importance {
        if seg.score <= criteria.importance_threshold {
            continue;
        }
        let end = seg.end_residue.min(result.delta.len());
        for (p, row) in result.delta.iter().enumerate().take(end).skip(seg.start_residue) {
            for (a, &d) in row.iter().enumerate() {
                let score = d / max_abs * 100.0;
                if score > criteria.temperature_score_threshold {
                    out.push(Candidate {
                        position: p + 1,
                        wild_type: seq[p] as char,
                        letter: alphabet[a] as char,
                        delta: d,
                        score,
                        segment_importance: seg.score,
                    });
                }
            }
        }
    }
    // rank by raw delta; the score is the same order up to a positive factor
    out.sort_by(|x, y| {
        y.delta
            .total_cmp(&x.delta)
            .then(x.position.cmp(&y.position))
            .then(x.letter.cmp(&y.letter))
    });
    out
}

impl ScanResult {
    /// Heatmap grid: one row per position, one column per amino acid.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,wild_type");
        for &a in self.alphabet.as_bytes() {
            s.push(',');
            s.push(a as char);
        }
        s.push('\n');
        for (p, row) in self.delta.iter().enumerate() {
            let _ = write!(s, "{},{}", p + 1, self.sequence.as_bytes()[p] as char);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}
