use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::trainer::TrainConfig;

/// Precomputed objective sequence.
///
/// Within a phase, step `t` picks the objective whose quota
/// `(t + 1) · w / Σw` exceeds its count by the most (lowest index on ties).
/// BTMLM only enters at its start step, where counts restart.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: Vec<ObjectiveKind>,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let w = cfg.objective_weights;
        let mut early = w;
        early[ObjectiveKind::Btmlm.index()] = 0.0;
        let start = if early.iter().all(|x| *x == 0.0) {
            0
        } else {
            cfg.btmlm_start().min(cfg.total_steps)
        };
        let mut steps = phase(&early, start)?;
        steps.extend(phase(&w, cfg.total_steps - start)?);
        Ok(Self { steps })
    }

    pub fn at(&self, step: usize) -> ObjectiveKind {
        self.steps[step]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// How many times `kind` was scheduled before `step`.
    pub fn count_before(&self, kind: ObjectiveKind, step: usize) -> usize {
        self.steps[..step].iter().filter(|&&k| k == kind).count()
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for k in &self.steps {
            c[k.index()] += 1;
        }
        c
    }
}

fn phase(w: &[f64; 4], len: usize) -> Result<Vec<ObjectiveKind>> {
    if len == 0 {
        return Ok(vec![]);
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("no objective enabled".into()));
    }
    let mut counts = [0usize; 4];
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let mut best = None;
        let mut best_gap = f64::NEG_INFINITY;
        for k in ObjectiveKind::ALL {
            let i = k.index();
            if w[i] <= 0.0 {
                continue;
            }
            let gap = (t + 1) as f64 * w[i] / total - counts[i] as f64;
            if gap > best_gap + 1e-12 {
                best_gap = gap;
                best = Some(k);
            }
        }
        let k = best.expect("some weight positive");
        counts[k.index()] += 1;
        out.push(k);
    }
    Ok(out)
}
