use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LangId, MonoSentence, SentencePair, Vocabulary, CLS, MASK, SEP};
use crate::error::{Error, Result};
use crate::objectives::mask::{btmlm_stage1_mask, camlm_attention_mask, MaskMode};
use crate::tensor::BoolMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Src,
    Tgt,
    Pseudo,
    Special,
}

/// One input sequence with its visibility matrix and prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub tokens: Vec<u32>,
    /// 0-based, continuing across segments.
    pub pos_ids: Vec<u32>,
    pub lang_ids: Vec<LangId>,
    pub segments: Vec<Segment>,
    pub allowed: Arc<BoolMatrix>,
    pub predict_positions: Vec<usize>,
    /// Original tokens at `predict_positions`; absent for generation batches.
    pub labels: Option<Vec<u32>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if self.pos_ids.len() != n
            || self.lang_ids.len() != n
            || self.segments.len() != n
            || self.allowed.size() != n
        {
            return Err(Error::Invalid(format!(
                "batch fields disagree on length {n}"
            )));
        }
        if let Some(&p) = self.predict_positions.iter().find(|&&p| p >= n) {
            return Err(Error::IdOutOfRange(format!("predict position {p} >= {n}")));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.predict_positions.len() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} predict positions",
                    l.len(),
                    self.predict_positions.len()
                )));
            }
        }
        if let Some(row) = self.allowed.first_empty_row() {
            return Err(Error::DegenerateRow { row });
        }
        Ok(())
    }

    /// `[CLS] s [SEP]` with full visibility and nothing to predict.
    pub fn plain(s: &MonoSentence, max_len: usize) -> Result<Self> {
        let mut l = Layout::default();
        l.push(CLS, s.lang, Segment::Special);
        l.extend(&s.tokens, s.lang, Segment::Src);
        l.push(SEP, s.lang, Segment::Special);
        let n = l.tokens.len();
        l.finish(max_len, Arc::new(BoolMatrix::ones(n)), vec![], None)
    }

    /// Positions tagged `seg`.
    pub fn positions_of(&self, seg: Segment) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.segments[i] == seg)
            .collect()
    }
}

#[derive(Default)]
struct Layout {
    tokens: Vec<u32>,
    pos: Vec<u32>,
    lang: Vec<LangId>,
    segments: Vec<Segment>,
    next_pos: u32,
}

impl Layout {
    fn push(&mut self, tok: u32, lang: LangId, seg: Segment) {
        self.tokens.push(tok);
        self.pos.push(self.next_pos);
        self.next_pos += 1;
        self.lang.push(lang);
        self.segments.push(seg);
    }

    fn restart_positions(&mut self, at: u32) {
        self.next_pos = at;
    }

    /// Appends tokens and returns the index of the first one.
    fn extend(&mut self, toks: &[u32], lang: LangId, seg: Segment) -> usize {
        let start = self.tokens.len();
        for &t in toks {
            self.push(t, lang, seg);
        }
        start
    }

    fn finish(
        self,
        max_len: usize,
        allowed: Arc<BoolMatrix>,
        predict_positions: Vec<usize>,
        labels: Option<Vec<u32>>,
    ) -> Result<MaskedBatch> {
        let n = self.tokens.len();
        if n > max_len {
            return Err(Error::Overflow {
                len: n,
                max: max_len,
            });
        }
        let b = MaskedBatch {
            tokens: self.tokens,
            pos_ids: self.pos,
            lang_ids: self.lang,
            segments: self.segments,
            allowed,
            predict_positions,
            labels,
        };
        b.validate()?;
        Ok(b)
    }
}

/// BERT-style corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    /// Every selected position becomes `[MASK]`.
    pub fn mask_only(mask_rate: f64) -> Self {
        Self {
            mask_rate,
            mask_frac: 1.0,
            random_frac: 0.0,
            keep_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.mask_frac, self.random_frac, self.keep_frac];
        if !(0.0..=1.0).contains(&self.mask_rate) || fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("masking rates must lie in [0, 1]".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "mask/random/keep fractions must sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`apply_masking`]: positions index into the input token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub labels: Vec<u32>,
}

/// Selects `max(1, round(rate · content))` non-special positions without
/// replacement and corrupts them 80/10/10. Random replacements are drawn
/// from the original token's language.
pub fn apply_masking<R: Rng>(
    tokens: &[u32],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> Corruption {
    let content: Vec<usize> = (0..tokens.len())
        .filter(|&i| !Vocabulary::is_special(tokens[i]))
        .collect();
    let mut out = tokens.to_vec();
    if content.is_empty() {
        return Corruption {
            tokens: out,
            positions: vec![],
            labels: vec![],
        };
    }
    let k = ((policy.mask_rate * content.len() as f64).round() as usize).clamp(1, content.len());
    let mut positions: Vec<usize> = index::sample(rng, content.len(), k)
        .into_iter()
        .map(|i| content[i])
        .collect();
    positions.sort_unstable();
    let labels = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < policy.mask_frac {
            out[p] = MASK;
        } else if r < policy.mask_frac + policy.random_frac {
            if let Some(lang) = vocab.lang_of(tokens[p]) {
                out[p] = rng.gen_range(vocab.range(lang));
            }
        }
    }
    Corruption {
        tokens: out,
        positions,
        labels,
    }
}

/// Corruption that replaces exactly `positions` with `[MASK]`.
pub fn explicit_masking(tokens: &[u32], positions: &[usize]) -> Result<Corruption> {
    let mut positions = positions.to_vec();
    positions.sort_unstable();
    positions.dedup();
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(Error::IdOutOfRange(format!(
            "masked index {p} >= sentence length {}",
            tokens.len()
        )));
    }
    let mut out = tokens.to_vec();
    let labels = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        out[p] = MASK;
    }
    Ok(Corruption {
        tokens: out,
        positions,
        labels,
    })
}

/// Number of Stage-1 placeholders for a sentence of `len` tokens.
pub fn pseudo_count(len: usize, prob: f64) -> usize {
    ((prob * len as f64).round() as usize).max(1)
}

/// Builds every objective's input layout for a fixed vocabulary and length cap.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchBuilder {
    pub vocab: Vocabulary,
    pub max_len: usize,
    /// Number target positions of a pair from 1 again instead of continuing.
    pub restart_target_positions: bool,
}

impl BatchBuilder {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        Self {
            vocab,
            max_len,
            restart_target_positions: false,
        }
    }

    /// `[CLS] s [SEP]` with full visibility.
    pub fn mmlm<R: Rng>(
        &self,
        s: &MonoSentence,
        policy: &MaskingPolicy,
        rng: &mut R,
    ) -> Result<MaskedBatch> {
        self.mmlm_with(s, apply_masking(&s.tokens, &self.vocab, policy, rng))
    }

    pub fn mmlm_with(&self, s: &MonoSentence, c: Corruption) -> Result<MaskedBatch> {
        let mut l = Layout::default();
        l.push(CLS, s.lang, Segment::Special);
        let off = l.extend(&c.tokens, s.lang, Segment::Src);
        l.push(SEP, s.lang, Segment::Special);
        let n = l.tokens.len();
        let predict = c.positions.iter().map(|p| p + off).collect();
        l.finish(
            self.max_len,
            Arc::new(BoolMatrix::ones(n)),
            predict,
            Some(c.labels),
        )
    }

    /// `[CLS] src [SEP] tgt [SEP]`, both sides masked, full visibility.
    pub fn tlm<R: Rng>(
        &self,
        p: &SentencePair,
        policy: &MaskingPolicy,
        rng: &mut R,
    ) -> Result<MaskedBatch> {
        let cs = apply_masking(&p.src.tokens, &self.vocab, policy, rng);
        let ct = apply_masking(&p.tgt.tokens, &self.vocab, policy, rng);
        self.pair_with(p, cs, ct, None)
    }

    /// TLM batch masking exactly the given sentence-relative indices.
    pub fn tlm_with_masks(
        &self,
        p: &SentencePair,
        masked_src: &[usize],
        masked_tgt: &[usize],
    ) -> Result<MaskedBatch> {
        let cs = explicit_masking(&p.src.tokens, masked_src)?;
        let ct = explicit_masking(&p.tgt.tokens, masked_tgt)?;
        self.pair_with(p, cs, ct, None)
    }

    /// Pair layout with the CAMLM visibility matrix.
    pub fn camlm<R: Rng>(
        &self,
        p: &SentencePair,
        policy: &MaskingPolicy,
        mode: MaskMode,
        rng: &mut R,
    ) -> Result<MaskedBatch> {
        let cs = apply_masking(&p.src.tokens, &self.vocab, policy, rng);
        let ct = apply_masking(&p.tgt.tokens, &self.vocab, policy, rng);
        self.pair_with(p, cs, ct, Some(mode))
    }

    pub fn camlm_with_masks(
        &self,
        p: &SentencePair,
        masked_src: &[usize],
        masked_tgt: &[usize],
        mode: MaskMode,
    ) -> Result<MaskedBatch> {
        let cs = explicit_masking(&p.src.tokens, masked_src)?;
        let ct = explicit_masking(&p.tgt.tokens, masked_tgt)?;
        self.pair_with(p, cs, ct, Some(mode))
    }

    fn pair_with(
        &self,
        p: &SentencePair,
        cs: Corruption,
        ct: Corruption,
        camlm: Option<MaskMode>,
    ) -> Result<MaskedBatch> {
        if camlm.is_some() && (cs.positions.is_empty() || ct.positions.is_empty()) {
            return Err(Error::Invalid(
                "CAMLM needs at least one masked position on each side".into(),
            ));
        }
        let mut l = Layout::default();
        l.push(CLS, p.src.lang, Segment::Special);
        let so = l.extend(&cs.tokens, p.src.lang, Segment::Src);
        l.push(SEP, p.src.lang, Segment::Special);
        if self.restart_target_positions {
            // Aligned tokens share a position id, as if each side were encoded alone.
            l.restart_positions(1);
        }
        let to = l.extend(&ct.tokens, p.tgt.lang, Segment::Tgt);
        l.push(SEP, p.tgt.lang, Segment::Special);
        let n = l.tokens.len();
        let masked_src: Vec<usize> = cs.positions.iter().map(|i| i + so).collect();
        let masked_tgt: Vec<usize> = ct.positions.iter().map(|i| i + to).collect();
        let allowed = match camlm {
            None => BoolMatrix::ones(n),
            Some(mode) => {
                let src_idx: Vec<usize> = (0..to).collect();
                let tgt_idx: Vec<usize> = (to..n).collect();
                camlm_attention_mask(&src_idx, &tgt_idx, &masked_src, &masked_tgt, mode)?
            }
        };
        let predict = masked_src.into_iter().chain(masked_tgt).collect();
        let labels = cs.labels.into_iter().chain(ct.labels).collect();
        l.finish(self.max_len, Arc::new(allowed), predict, Some(labels))
    }

    /// `[CLS] s [SEP]` followed by `placeholders` `[MASK]` tokens in
    /// `tgt_lang`, each seeing the source and itself.
    pub fn btmlm_stage1(
        &self,
        s: &MonoSentence,
        placeholders: usize,
        tgt_lang: LangId,
    ) -> Result<MaskedBatch> {
        if placeholders == 0 {
            return Err(Error::Invalid(
                "stage 1 needs at least one placeholder".into(),
            ));
        }
        if tgt_lang as usize >= self.vocab.num_langs() {
            return Err(Error::IdOutOfRange(format!("target language {tgt_lang}")));
        }
        let mut l = Layout::default();
        l.push(CLS, s.lang, Segment::Special);
        l.extend(&s.tokens, s.lang, Segment::Src);
        l.push(SEP, s.lang, Segment::Special);
        let src_len = l.tokens.len();
        let po = l.extend(&vec![MASK; placeholders], tgt_lang, Segment::Pseudo);
        let allowed = btmlm_stage1_mask(src_len, placeholders);
        l.finish(
            self.max_len,
            Arc::new(allowed),
            (po..po + placeholders).collect(),
            None,
        )
    }

    /// `[CLS] corrupted(s) [SEP] P [SEP]` with full visibility; only the
    /// sentence is predicted.
    pub fn btmlm_stage2<R: Rng>(
        &self,
        s: &MonoSentence,
        policy: &MaskingPolicy,
        pseudo: &[u32],
        tgt_lang: LangId,
        rng: &mut R,
    ) -> Result<MaskedBatch> {
        self.btmlm_stage2_with(
            s,
            apply_masking(&s.tokens, &self.vocab, policy, rng),
            pseudo,
            tgt_lang,
        )
    }

    pub fn btmlm_stage2_with(
        &self,
        s: &MonoSentence,
        c: Corruption,
        pseudo: &[u32],
        tgt_lang: LangId,
    ) -> Result<MaskedBatch> {
        if pseudo.is_empty() {
            return Err(Error::Invalid(
                "stage 2 needs at least one pseudo token".into(),
            ));
        }
        if let Some(&t) = pseudo.iter().find(|&&t| t as usize >= self.vocab.size()) {
            return Err(Error::IdOutOfRange(format!("pseudo token {t}")));
        }
        let mut l = Layout::default();
        l.push(CLS, s.lang, Segment::Special);
        let off = l.extend(&c.tokens, s.lang, Segment::Src);
        l.push(SEP, s.lang, Segment::Special);
        l.extend(pseudo, tgt_lang, Segment::Pseudo);
        l.push(SEP, tgt_lang, Segment::Special);
        let n = l.tokens.len();
        let predict = c.positions.iter().map(|p| p + off).collect();
        l.finish(
            self.max_len,
            Arc::new(BoolMatrix::ones(n)),
            predict,
            Some(c.labels),
        )
    }
}
