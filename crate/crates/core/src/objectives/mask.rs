//! Visibility matrices for the cross-attention and back-translation objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

/// Which CAMLM visibility variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked rows see only non-masked positions of the other segment plus
    /// themselves; non-masked rows see non-masked positions of their own
    /// segment. Holds the factorization at any depth.
    #[default]
    Strict,
    /// Masked rows see the whole other segment plus themselves; non-masked
    /// rows see their whole segment.
    Figure,
}

impl MaskMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "strict" => Some(Self::Strict),
            "figure" => Some(Self::Figure),
            _ => None,
        }
    }
}

/// Builds the CAMLM visibility matrix over `n = src_idx.len() + tgt_idx.len()`
/// positions. The index sets must partition `0..n`; masked sets must be
/// subsets of their segment.
pub fn camlm_attention_mask(
    src_idx: &[usize],
    tgt_idx: &[usize],
    masked_src: &[usize],
    masked_tgt: &[usize],
    mode: MaskMode,
) -> Result<BoolMatrix> {
    let n = src_idx.len() + tgt_idx.len();
    // 0 = unassigned, 1 = src, 2 = tgt
    let mut seg = vec![0u8; n];
    for (&i, tag) in src_idx
        .iter()
        .map(|i| (i, 1u8))
        .chain(tgt_idx.iter().map(|i| (i, 2u8)))
    {
        if i >= n {
            return Err(Error::Invalid(format!("position {i} outside 0..{n}")));
        }
        if seg[i] != 0 {
            return Err(Error::Invalid(format!(
                "position {i} appears in more than one segment"
            )));
        }
        seg[i] = tag;
    }
    let mut masked = vec![false; n];
    for (set, tag, name) in [(masked_src, 1u8, "source"), (masked_tgt, 2u8, "target")] {
        for &i in set {
            if i >= n || seg[i] != tag {
                return Err(Error::Invalid(format!(
                    "masked {name} position {i} is not in the {name} segment"
                )));
            }
            masked[i] = true;
        }
    }
    Ok(BoolMatrix::from_fn(n, |i, j| {
        if i == j {
            return true;
        }
        let same = seg[i] == seg[j];
        match (mode, masked[i]) {
            (MaskMode::Strict, true) => !same && !masked[j],
            (MaskMode::Strict, false) => same && !masked[j],
            (MaskMode::Figure, true) => !same,
            (MaskMode::Figure, false) => same,
        }
    }))
}

/// Stage-1 visibility: the first `source_len` positions see each other; each
/// of the following `placeholders` positions sees the source and itself.
pub fn btmlm_stage1_mask(source_len: usize, placeholders: usize) -> BoolMatrix {
    BoolMatrix::from_fn(source_len + placeholders, |i, j| j < source_len || i == j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_segments_are_rejected() {
        assert!(camlm_attention_mask(&[0, 1], &[1, 2], &[], &[], MaskMode::Strict).is_err());
        assert!(camlm_attention_mask(&[0, 1], &[2], &[2], &[], MaskMode::Strict).is_err());
        assert!(camlm_attention_mask(&[0, 5], &[1], &[], &[], MaskMode::Strict).is_err());
    }

    #[test]
    fn mode_parse() {
        assert_eq!(MaskMode::parse("figure"), Some(MaskMode::Figure));
        assert_eq!(MaskMode::parse("x"), None);
    }
}
