//! Independent oracles for attention visibility and information flow.

use std::collections::BTreeSet;

use camlmlab::corpus::{SentencePair, Vocabulary};
use camlmlab::model::{forward, Params};
use camlmlab::objectives::{BatchBuilder, MaskMode, MaskedBatch, Segment};
use camlmlab::tensor::BoolMatrix;

use super::{figure_pair, random_params, sent, tiny_builder, tiny_config, V};

/// 1-based labels of the content positions of a
/// `[CLS] x.. [SEP] y.. [SEP]` layout.
pub fn pair_labels(src: usize, tgt: usize) -> Vec<Option<usize>> {
    let mut out = vec![None];
    out.extend((1..=src).map(Some));
    out.push(None);
    out.extend((src + 1..=src + tgt).map(Some));
    out.push(None);
    out
}

/// Labels of `[CLS] x1..xn [SEP] M(n+1)..` for a Stage-1 layout.
pub fn stage1_labels(src: usize, placeholders: usize) -> Vec<Option<usize>> {
    let mut out = vec![None];
    out.extend((1..=src).map(Some));
    out.push(None);
    out.extend((src + 1..=src + placeholders).map(Some));
    out
}

/// Row set of the position labelled `label`, restricted to content columns.
pub fn labelled_row(m: &BoolMatrix, labels: &[Option<usize>], label: usize) -> BTreeSet<usize> {
    let i = labels.iter().position(|l| *l == Some(label)).unwrap();
    (0..m.size())
        .filter(|&j| m.get(i, j))
        .filter_map(|j| labels[j])
        .collect()
}

pub fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

/// The worked example with `x2` and `y5 y6` masked.
pub fn figure_batch(mode: MaskMode) -> MaskedBatch {
    tiny_builder()
        .camlm_with_masks(&figure_pair(), &[1], &[1, 2], mode)
        .unwrap()
}

/// Positions reachable from row `i` through `layers` attention hops, by
/// repeated frontier expansion.
pub fn reachable(m: &BoolMatrix, i: usize, layers: usize) -> BTreeSet<usize> {
    let mut seen = set(&[i]);
    for _ in 0..layers {
        let next: BTreeSet<usize> = seen
            .iter()
            .flat_map(|&k| (0..m.size()).filter(move |&j| m.get(k, j)))
            .collect();
        seen.extend(next);
    }
    seen
}

/// The closing `[SEP]` belongs to the target segment.
fn tgt_sep(b: &MaskedBatch) -> Option<usize> {
    b.positions_of(Segment::Tgt).last().map(|p| p + 1)
}

/// Inputs a masked row may depend on under the CAMLM factorization: itself
/// and the unmasked positions of the other segment.
pub fn permitted(b: &MaskedBatch, i: usize) -> BTreeSet<usize> {
    let seg_of = |p: usize| b.positions_of(Segment::Tgt).contains(&p) || tgt_sep(b) == Some(p);
    let masked = |p: usize| b.predict_positions.contains(&p);
    let mut out = set(&[i]);
    out.extend((0..b.len()).filter(|&j| seg_of(j) != seg_of(i) && !masked(j)));
    out
}

/// Worked-example row sets for the figure-mode CAMLM matrix and the Stage-1
/// matrix.
pub fn golden_rows_check() -> Result<(), String> {
    let expect = |what: &str, m: &BoolMatrix, labels: &[Option<usize>], row, want: &[usize]| {
        let got = labelled_row(m, labels, row);
        if got == set(want) {
            Ok(())
        } else {
            Err(format!("{what} row {row}: {got:?} != {want:?}"))
        }
    };
    let b = figure_batch(MaskMode::Figure);
    let labels = pair_labels(3, 4);
    expect("figure", &b.allowed, &labels, 2, &[2, 4, 5, 6, 7])?;
    expect("figure", &b.allowed, &labels, 5, &[1, 2, 3, 5])?;
    expect("figure", &b.allowed, &labels, 6, &[1, 2, 3, 6])?;

    let builder = BatchBuilder::new(Vocabulary::new(2, 20).unwrap(), 24);
    // p(y5 | x1, x2, x3, M5) and p(y5 | x1, x2, x3, x4, M5)
    for (src, rows) in [(3usize, 4..=6usize), (4, 5..=7)] {
        let tokens: Vec<u32> = (4..4 + src as u32).collect();
        let b = builder.btmlm_stage1(&sent(&tokens, 0), 3, 1).unwrap();
        let labels = stage1_labels(src, 3);
        for row in rows {
            let mut want: Vec<usize> = (1..=src).collect();
            want.push(row);
            expect("stage 1", &b.allowed, &labels, row, &want)?;
        }
    }
    Ok(())
}

/// Every masked row of strict CAMLM matrices over many geometries stays
/// within its permitted inputs through `layers` hops.
pub fn strict_reachability_check(layers: usize) -> Result<usize, String> {
    let builder = BatchBuilder::new(Vocabulary::new(2, 20).unwrap(), 64);
    let mut checked = 0;
    for src in 1..=5usize {
        for tgt in 1..=5usize {
            let pair = SentencePair {
                src: sent(&(4..4 + src as u32).collect::<Vec<_>>(), 0),
                tgt: sent(&(24..24 + tgt as u32).collect::<Vec<_>>(), 1),
                aligned: true,
            };
            for ms_bits in 1..(1u32 << src) {
                for mt_bits in [1u32, (1 << tgt) - 1, 0b101 & ((1 << tgt) - 1)] {
                    let pick = |bits: u32, n: usize| -> Vec<usize> {
                        (0..n).filter(|i| bits >> i & 1 == 1).collect()
                    };
                    let (ms, mt) = (pick(ms_bits, src), pick(mt_bits, tgt));
                    if mt.is_empty() {
                        continue;
                    }
                    let b = builder
                        .camlm_with_masks(&pair, &ms, &mt, MaskMode::Strict)
                        .map_err(|e| e.to_string())?;
                    for &i in &b.predict_positions {
                        let r = reachable(&b.allowed, i, layers);
                        if !r.is_subset(&permitted(&b, i)) {
                            return Err(format!(
                                "src {src} tgt {tgt} masks {ms:?}/{mt:?}: row {i} reaches {r:?}"
                            ));
                        }
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

pub fn logits_at(p: &Params<f64>, b: &MaskedBatch) -> Vec<Vec<f64>> {
    let out = forward(p, b).unwrap();
    (0..out.logits.rows())
        .map(|r| out.logits.row(r).to_vec())
        .collect()
}

/// Substitutes every vocabulary token at every position a masked row must
/// not depend on. Strict CAMLM logits must stay bitwise identical while the
/// same substitution under TLM must move them. Returns the substitution
/// count and the smallest TLM change.
pub fn camlm_leak_check(layers: usize, seed: u64) -> Result<(usize, f64), String> {
    let params = Params::<f64>::init(&tiny_config(layers), seed).unwrap();
    let camlm = figure_batch(MaskMode::Strict);
    let tlm = tiny_builder()
        .tlm_with_masks(&figure_pair(), &[1], &[1, 2])
        .unwrap();
    if camlm.tokens != tlm.tokens {
        return Err("CAMLM and TLM layouts differ".into());
    }
    let base_c = logits_at(&params, &camlm);
    let base_t = logits_at(&params, &tlm);
    let mut substitutions = 0;
    let mut min_tlm = f64::INFINITY;
    for j in 0..camlm.len() {
        let rows: Vec<usize> = camlm
            .predict_positions
            .iter()
            .enumerate()
            .filter(|(_, &i)| !permitted(&camlm, i).contains(&j))
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            continue;
        }
        for t in 0..V as u32 {
            if t == camlm.tokens[j] {
                continue;
            }
            let mut c = camlm.clone();
            c.tokens[j] = t;
            let lc = logits_at(&params, &c);
            let mut tb = tlm.clone();
            tb.tokens[j] = t;
            let lt = logits_at(&params, &tb);
            let mut tlm_change = 0.0f64;
            for &r in &rows {
                if lc[r]
                    .iter()
                    .zip(&base_c[r])
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(format!("position {j} token {t} leaked into row {r}"));
                }
                for (a, b) in lt[r].iter().zip(&base_t[r]) {
                    tlm_change = tlm_change.max((a - b).abs());
                }
            }
            min_tlm = min_tlm.min(tlm_change);
            substitutions += 1;
        }
    }
    if substitutions != camlm.len() * (V - 1) {
        return Err(format!("only {substitutions} substitutions"));
    }
    if min_tlm < 1e-6 {
        return Err(format!("TLM change {min_tlm:e} below 1e-6"));
    }
    Ok((substitutions, min_tlm))
}

/// Adding or removing placeholders leaves every shared placeholder's logits
/// bitwise unchanged.
pub fn stage1_independence_check(seed: u64) -> Result<(), String> {
    let params = random_params(&tiny_config(2), seed, 0.4);
    let b = tiny_builder();
    let s = sent(&[4, 5, 6, 7], 0);
    let three = logits_at(&params, &b.btmlm_stage1(&s, 3, 0).unwrap());
    for p in 1..=5 {
        let l = logits_at(&params, &b.btmlm_stage1(&s, p, 0).unwrap());
        for k in 0..p.min(3) {
            if l[k]
                .iter()
                .zip(&three[k])
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(format!("placeholder {k} changed with {p} placeholders"));
            }
        }
    }
    Ok(())
}
