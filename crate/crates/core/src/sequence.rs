//! Canonical amino-acid alphabet.

use crate::error::{Error, Result};

/// The 20 canonical residues in alphabetical one-letter order.
pub const AMINO_ACIDS: [u8; 20] = *b"ACDEFGHIKLMNPQRSTVWY";

pub fn residue_index(letter: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == letter)
}

/// Fails on the first letter outside [`AMINO_ACIDS`] (case-sensitive).
pub fn validate(sequence: &str) -> Result<()> {
    for (position, c) in sequence.chars().enumerate() {
        if !c.is_ascii() || residue_index(c as u8).is_none() {
            return Err(Error::Alphabet { letter: c, position });
        }
    }
    Ok(())
}
