use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpora, LangId, MonoGenerator, MonoSentence};
use crate::error::{Error, Result};
use crate::eval::retrieval::{center_rows, pooled_f64};
use crate::model::Params;
use crate::seed;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_examples: usize,
    pub test_examples: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_examples: 500,
            test_examples: 500,
            steps: 200,
            lr: 0.05,
            seed: 4242,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub acc_a: f64,
    pub acc_b: f64,
    /// `acc_a - acc_b`.
    pub gap: f64,
    pub positive_rate: f64,
}

/// Synthetic task: does a sentence contain a token of the class set? Language
/// B data are cipher translations of language A data, so labels carry over.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub lang_a: LangId,
    pub lang_b: LangId,
    pub class_a: Vec<u32>,
    pub class_b: Vec<u32>,
    pub train: Vec<(MonoSentence, bool)>,
    pub test_a: Vec<(MonoSentence, bool)>,
    pub test_b: Vec<(MonoSentence, bool)>,
}

const CALIBRATION: usize = 2000;

impl ProbeTask {
    /// Chooses the class set so that roughly half of all sentences are positive.
    pub fn generate(corpora: &Corpora, cfg: &ProbeConfig) -> Result<Self> {
        let (lang_a, lang_b) = (0, 1);
        let c = &corpora.config;
        let family = &corpora.family;
        let gen = MonoGenerator::new(family, lang_a, c.length_min..=c.length_max, c.zipf_s)?;
        let draw = |tag: u64, n: usize| -> Result<Vec<MonoSentence>> {
            (0..n)
                .map(|i| gen.sentence(seed::derive_all(cfg.seed, &[0x9e0b, tag, i as u64])))
                .collect()
        };
        let calib = draw(0, CALIBRATION)?;
        let mut order: Vec<u32> = family.vocab().range(lang_a).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xc1a5]));
        let mut in_class = vec![false; family.vocab().size()];
        let mut class_a = Vec::new();
        let mut covered = vec![false; calib.len()];
        for t in order {
            if covered.iter().filter(|&&c| c).count() * 2 >= calib.len() {
                break;
            }
            in_class[t as usize] = true;
            class_a.push(t);
            for (s, cov) in calib.iter().zip(covered.iter_mut()) {
                *cov |= s.tokens.contains(&t);
            }
        }
        class_a.sort_unstable();
        let label = |s: &MonoSentence| s.tokens.iter().any(|&t| in_class[t as usize]);
        let labelled = |v: Vec<MonoSentence>| {
            v.into_iter()
                .map(|s| (s.clone(), label(&s)))
                .collect::<Vec<_>>()
        };
        let train = labelled(draw(1, cfg.train_examples)?);
        let test_a = labelled(draw(2, cfg.test_examples)?);
        let test_b = test_a
            .iter()
            .map(|(s, y)| {
                family
                    .map_sentence(s, lang_b)
                    .map(|t| (t, *y))
                    .ok_or_else(|| Error::Invalid("cannot translate probe sentence".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let class_b = class_a
            .iter()
            .map(|&t| family.map_token(t, lang_b).unwrap())
            .collect();
        Ok(Self {
            lang_a,
            lang_b,
            class_a,
            class_b,
            train,
            test_a,
            test_b,
        })
    }
}

/// Logistic regression on standardized features, trained full-batch with Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LogisticHead {
    pub fn fit(x: &[Vec<f64>], y: &[bool], steps: usize, lr: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Invalid(
                "probe needs matching features and labels".into(),
            ));
        }
        let pos = y.iter().filter(|&&v| v).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::Invalid(
                "probe training data has a single class".into(),
            ));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut head = Self {
            mean,
            scale,
            w: vec![0.0; d],
            b: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| head.standardize(r)).collect();
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; d + 1];
        let mut v = vec![0.0; d + 1];
        for t in 1..=steps {
            let mut g = vec![0.0; d + 1];
            for (zi, &yi) in z.iter().zip(y) {
                let err = sigmoid(dot(&head.w, zi) + head.b) - f64::from(u8::from(yi));
                for (gj, zj) in g.iter_mut().zip(zi) {
                    *gj += err * zj / n;
                }
                g[d] += err / n;
            }
            let (c1, c2) = (1.0 - b1_pow(b1, t), 1.0 - b1_pow(b2, t));
            for j in 0..=d {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if j < d {
                    head.w[j] -= step;
                } else {
                    head.b -= step;
                }
            }
        }
        Ok(head)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    pub fn predict(&self, r: &[f64]) -> bool {
        dot(&self.w, &self.standardize(r)) + self.b > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(r, &yi)| self.predict(r) == yi)
            .count();
        hits as f64 / x.len() as f64
    }
}

fn b1_pow(b: f64, t: usize) -> f64 {
    b.powi(t as i32)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains on language-A features and reports accuracy in both languages.
pub fn probe_from_embeddings(
    train: (&[Vec<f64>], &[bool]),
    test_a: (&[Vec<f64>], &[bool]),
    test_b: (&[Vec<f64>], &[bool]),
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let head = LogisticHead::fit(train.0, train.1, cfg.steps, cfg.lr)?;
    let acc_a = head.accuracy(test_a.0, test_a.1);
    let acc_b = head.accuracy(test_b.0, test_b.1);
    let positive_rate = train.1.iter().filter(|&&v| v).count() as f64 / train.1.len() as f64;
    Ok(ProbeReport {
        acc_a,
        acc_b,
        gap: acc_a - acc_b,
        positive_rate,
    })
}

/// Frozen-encoder transfer probe over middle-layer pooled embeddings, each
/// split centered on its own mean.
pub fn transfer_probe<T: Scalar>(
    params: &Params<T>,
    task: &ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    probe_with(params, task, cfg, true)
}

/// As [`transfer_probe`] without centering.
pub fn transfer_probe_raw<T: Scalar>(
    params: &Params<T>,
    task: &ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    probe_with(params, task, cfg, false)
}

fn probe_with<T: Scalar>(
    params: &Params<T>,
    task: &ProbeTask,
    cfg: &ProbeConfig,
    center: bool,
) -> Result<ProbeReport> {
    let split = |v: &[(MonoSentence, bool)]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let s: Vec<MonoSentence> = v.iter().map(|(s, _)| s.clone()).collect();
        let x = pooled_f64(params, &s)?;
        let x = if center { center_rows(&x) } else { x };
        Ok((x, v.iter().map(|(_, y)| *y).collect()))
    };
    let (xt, yt) = split(&task.train)?;
    let (xa, ya) = split(&task.test_a)?;
    let (xb, yb) = split(&task.test_b)?;
    probe_from_embeddings((&xt, &yt), (&xa, &ya), (&xb, &yb), cfg)
}
