//! Visibility grids for hand-picked geometries.

use camlmlab::corpus::{MonoSentence, SentencePair, Vocabulary};
use camlmlab::objectives::{explicit_masking, BatchBuilder, MaskMode};
use camlmlab::{Error, Result};
use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Mmlm,
    Tlm,
    Camlm,
    BtmlmStage1,
}

/// Converts 1-based positions in `first..first + len` to sentence-relative
/// indices.
fn relative(positions: &[usize], first: usize, len: usize, side: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(positions.len());
    for &p in positions {
        if p < first || p >= first + len {
            return Err(Error::Invalid(format!(
                "masked {side} position {p} outside {first}..={}",
                first + len - 1
            )));
        }
        if out.contains(&(p - first)) {
            return Err(Error::Invalid(format!(
                "masked {side} position {p} repeated"
            )));
        }
        out.push(p - first);
    }
    Ok(out)
}

fn sentence(vocab: &Vocabulary, lang: u16, len: usize) -> MonoSentence {
    let range = vocab.range(lang);
    let span = range.end - range.start;
    MonoSentence {
        tokens: (0..len as u32).map(|i| range.start + i % span).collect(),
        lang,
    }
}

/// Token labels: `x1..` for the source, `y..` continuing the numbering for
/// the target, `M<i>` for masked or placeholder slots.
fn labels(src: usize, tgt: usize, ms: &[usize], mt: &[usize], tgt_masked_all: bool) -> Vec<String> {
    let mut out = vec!["[CLS]".to_string()];
    for i in 0..src {
        let tag = if ms.contains(&i) { "M" } else { "x" };
        out.push(format!("{tag}{}", i + 1));
    }
    out.push("[SEP]".into());
    if tgt > 0 {
        for j in 0..tgt {
            let tag = if tgt_masked_all || mt.contains(&j) {
                "M"
            } else {
                "y"
            };
            out.push(format!("{tag}{}", src + j + 1));
        }
        if !tgt_masked_all {
            out.push("[SEP]".into());
        }
    }
    out
}

pub fn render(
    objective: Objective,
    src_len: usize,
    tgt_len: usize,
    masked_src: &[usize],
    masked_tgt: &[usize],
    mode: &str,
) -> Result<String> {
    if src_len == 0 {
        return Err(Error::Invalid("--src-len must be positive".into()));
    }
    let mode = MaskMode::parse(mode)
        .ok_or_else(|| Error::Config(format!("unknown mask mode {mode:?} (strict|figure)")))?;
    let vocab = Vocabulary::new(2, src_len.max(tgt_len).max(1))?;
    let builder = BatchBuilder::new(vocab, src_len + tgt_len + 3);
    let src = sentence(&vocab, 0, src_len);
    let ms = relative(masked_src, 1, src_len, "source")?;
    let (batch, names) = match objective {
        Objective::Mmlm => {
            if !masked_tgt.is_empty() {
                return Err(Error::Invalid("MMLM has no target segment".into()));
            }
            let b = builder.mmlm_with(&src, explicit_masking(&src.tokens, &ms)?)?;
            (b, labels(src_len, 0, &ms, &[], false))
        }
        Objective::BtmlmStage1 => {
            if !masked_src.is_empty() || !masked_tgt.is_empty() {
                return Err(Error::Invalid(
                    "stage 1 takes no masked positions; --tgt-len sets the placeholder count"
                        .into(),
                ));
            }
            let b = builder.btmlm_stage1(&src, tgt_len, 1)?;
            (b, labels(src_len, tgt_len, &[], &[], true))
        }
        Objective::Tlm | Objective::Camlm => {
            if tgt_len == 0 {
                return Err(Error::Invalid("--tgt-len must be positive".into()));
            }
            let mt = relative(masked_tgt, src_len + 1, tgt_len, "target")?;
            let pair = SentencePair {
                src,
                tgt: sentence(&vocab, 1, tgt_len),
                aligned: true,
            };
            let b = if objective == Objective::Tlm {
                builder.tlm_with_masks(&pair, &ms, &mt)?
            } else {
                builder.camlm_with_masks(&pair, &ms, &mt, mode)?
            };
            (b, labels(src_len, tgt_len, &ms, &mt, false))
        }
    };
    Ok(batch.allowed.render(&names))
}
