use serde::{Deserialize, Serialize};

use crate::corpus::{MonoSentence, SentencePair};
use crate::error::{Error, Result};
use crate::model::{pool_many, Params};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Source queries against target candidates.
    pub top1_ab: f64,
    pub top1_ba: f64,
    /// Mean reciprocal rank over both directions.
    pub mrr: f64,
    pub pairs: usize,
}

impl RetrievalReport {
    pub fn top1_mean(&self) -> f64 {
        0.5 * (self.top1_ab + self.top1_ba)
    }
}

fn normalize(v: &[Vec<f64>], side: &str) -> Result<Vec<Vec<f64>>> {
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                Err(Error::Invalid(format!(
                    "{side} sentence {i} has a zero-norm embedding"
                )))
            } else {
                Ok(x.iter().map(|a| a / n).collect())
            }
        })
        .collect()
}

/// 1-based rank of the true match `i` among `sims`, counting ties with a
/// lower index as ahead.
fn rank(sims: &[f64], i: usize) -> usize {
    let s = sims[i];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < i))
        .count()
}

/// Cosine nearest-neighbour retrieval where `a[i]` matches `b[i]`.
pub fn retrieval_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<RetrievalReport> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "retrieval needs at least two matched pairs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = normalize(a, "source")?;
    let nb = normalize(b, "target")?;
    let n = na.len();
    let sim: Vec<Vec<f64>> = na
        .iter()
        .map(|x| {
            nb.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum())
                .collect()
        })
        .collect();
    let (mut hits_ab, mut hits_ba, mut rr) = (0usize, 0usize, 0.0);
    for (i, row) in sim.iter().enumerate() {
        let r = rank(row, i);
        hits_ab += usize::from(r == 1);
        rr += 1.0 / r as f64;
        let col: Vec<f64> = (0..n).map(|j| sim[j][i]).collect();
        let r = rank(&col, i);
        hits_ba += usize::from(r == 1);
        rr += 1.0 / r as f64;
    }
    Ok(RetrievalReport {
        top1_ab: hits_ab as f64 / n as f64,
        top1_ba: hits_ba as f64 / n as f64,
        mrr: rr / (2 * n) as f64,
        pairs: n,
    })
}

pub(crate) fn pooled_f64<T: Scalar>(
    params: &Params<T>,
    sentences: &[MonoSentence],
) -> Result<Vec<Vec<f64>>> {
    Ok(pool_many(params, sentences)?
        .into_iter()
        .map(|v| v.into_iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// Subtracts the mean row, removing the offset shared by one language's
/// embeddings.
pub fn center_rows(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = v.first() else {
        return vec![];
    };
    let n = v.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|j| v.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    v.iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

type Embeddings = Vec<Vec<f64>>;

fn pooled_sides<T: Scalar>(
    params: &Params<T>,
    pairs: &[SentencePair],
) -> Result<(Embeddings, Embeddings)> {
    let src: Vec<MonoSentence> = pairs.iter().map(|p| p.src.clone()).collect();
    let tgt: Vec<MonoSentence> = pairs.iter().map(|p| p.tgt.clone()).collect();
    Ok((pooled_f64(params, &src)?, pooled_f64(params, &tgt)?))
}

/// Retrieval over middle-layer pooled embeddings of `pairs`, each side
/// centered on its own mean before cosine scoring.
pub fn retrieval_eval<T: Scalar>(
    params: &Params<T>,
    pairs: &[SentencePair],
) -> Result<RetrievalReport> {
    let (a, b) = pooled_sides(params, pairs)?;
    retrieval_from_embeddings(&center_rows(&a), &center_rows(&b))
}

/// As [`retrieval_eval`] without centering.
pub fn retrieval_eval_raw<T: Scalar>(
    params: &Params<T>,
    pairs: &[SentencePair],
) -> Result<RetrievalReport> {
    let (a, b) = pooled_sides(params, pairs)?;
    retrieval_from_embeddings(&a, &b)
}
