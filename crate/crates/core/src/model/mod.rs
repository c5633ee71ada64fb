//! Transformer encoder with token, position and language embeddings.

mod checkpoint;
mod encoder;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use encoder::{
    encode, forward, forward_many, pool_many, pool_middle_layer, pooled, EncodeOptions,
    EncoderOutput, EncoderVars,
};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub langs: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab: 520,
            langs: 2,
            max_positions: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn == 0 || self.vocab == 0 || self.langs == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "ffn, vocab, langs and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Index of the pooled layer in [`EncoderOutput::hidden`]: `ceil(L / 2)`.
    pub fn middle_layer(&self) -> usize {
        self.layers.div_ceil(2)
    }
}

pub const LAYER_FIELDS: [&str; 15] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "w1",
    "b1", "w2", "b2",
];

/// Per-block weights. `X` is a tensor for stored parameters or a [`Var`]
/// once attached to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<X> {
    pub ln1_gain: X,
    pub ln1_bias: X,
    pub wq: X,
    pub bq: X,
    pub wk: X,
    pub wv: X,
    pub bv: X,
    pub wo: X,
    pub bo: X,
    pub ln2_gain: X,
    pub ln2_bias: X,
    pub w1: X,
    pub b1: X,
    pub w2: X,
    pub b2: X,
}

impl<X> Layer<X> {
    fn fields(&self) -> [&X; 15] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut X; 15] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = X>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

/// Every trainable tensor of the encoder, in a fixed canonical order.
///
/// The output projection is tied to `tok_emb`; `out_bias` is its own vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<X> {
    pub tok_emb: X,
    pub pos_emb: X,
    pub lang_emb: X,
    pub layers: Vec<Layer<X>>,
    pub final_ln_gain: X,
    pub final_ln_bias: X,
    pub out_bias: X,
}

impl<X> ParamSet<X> {
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".into(), "lang_emb".into()];
        for l in 0..self.layers.len() {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layer{l}.{f}")));
        }
        names.extend([
            "final_ln_gain".to_string(),
            "final_ln_bias".into(),
            "out_bias".into(),
        ]);
        names
    }

    pub fn items(&self) -> Vec<&X> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.lang_emb];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.extend([&self.final_ln_gain, &self.final_ln_bias, &self.out_bias]);
        out
    }

    pub fn items_mut(&mut self) -> Vec<&mut X> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.lang_emb];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.out_bias,
        ]);
        out
    }

    /// Rebuilds a set from items in canonical order.
    pub fn from_items(layers: usize, items: Vec<X>) -> Option<Self> {
        let expected = 6 + LAYER_FIELDS.len() * layers;
        if items.len() != expected {
            return None;
        }
        let mut it = items.into_iter();
        let tok_emb = it.next()?;
        let pos_emb = it.next()?;
        let lang_emb = it.next()?;
        let layers = (0..layers)
            .map(|_| Layer::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            tok_emb,
            pos_emb,
            lang_emb,
            layers,
            final_ln_gain: it.next()?,
            final_ln_bias: it.next()?,
            out_bias: it.next()?,
        })
    }

    pub fn map<Y>(&self, mut f: impl FnMut(&X) -> Y) -> ParamSet<Y> {
        let items = self.items().into_iter().map(&mut f).collect();
        ParamSet::from_items(self.layers.len(), items).expect("same layout")
    }
}

/// Whether weight decay applies to the named tensor (not to layer-norm or bias).
pub fn decays(name: &str) -> bool {
    let field = name.rsplit('.').next().unwrap_or(name);
    !(field.ends_with("_gain")
        || field.ends_with("_bias")
        || matches!(field, "bq" | "bv" | "bo" | "b1" | "b2"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub weights: ParamSet<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> Params<T> {
    /// Truncated-normal (σ = 0.02, cut at 2σ) weights, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x1417]);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let trunc = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break T::lit(x);
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let (h, f) = (config.hidden, config.ffn);
        let tok_emb = trunc(&[config.vocab, h], &mut rng);
        let pos_emb = trunc(&[config.max_positions, h], &mut rng);
        let lang_emb = trunc(&[config.langs, h], &mut rng);
        let ones = |n| Tensor::full(&[n], T::one());
        let zeros = |n| Tensor::zeros(&[n]);
        let layers = (0..config.layers)
            .map(|_| Layer {
                ln1_gain: ones(h),
                ln1_bias: zeros(h),
                wq: trunc(&[h, h], &mut rng),
                bq: zeros(h),
                wk: trunc(&[h, h], &mut rng),
                wv: trunc(&[h, h], &mut rng),
                bv: zeros(h),
                wo: trunc(&[h, h], &mut rng),
                bo: zeros(h),
                ln2_gain: ones(h),
                ln2_bias: zeros(h),
                w1: trunc(&[h, f], &mut rng),
                b1: zeros(f),
                w2: trunc(&[f, h], &mut rng),
                b2: zeros(h),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            weights: ParamSet {
                tok_emb,
                pos_emb,
                lang_emb,
                layers,
                final_ln_gain: ones(h),
                final_ln_bias: zeros(h),
                out_bias: zeros(config.vocab),
            },
        })
    }

    /// Registers every tensor as a graph leaf.
    pub fn attach(&self, g: &mut Graph<T>, requires_grad: bool) -> ParamSet<Var> {
        self.weights.map(|t| g.leaf(t.clone(), requires_grad))
    }

    pub fn names(&self) -> Vec<String> {
        self.weights.names()
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.items().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            weights: self.weights.map(Tensor::cast),
        }
    }

    /// FNV-1a over the little-endian f32 image of every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for t in self.weights.items() {
            for v in t.data() {
                for b in (v.as_f64() as f32).to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01B3);
                }
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.weights.items().iter().all(|t| t.is_finite())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let names = self.names();
        let entries: Vec<(String, &Tensor<T>)> =
            names.into_iter().zip(self.weights.items()).collect();
        write_checkpoint(path, &self.config, &entries, serde_json::Value::Null)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        Self::from_checkpoint(&ck, path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &std::path::Path) -> Result<Self> {
        let template = Params::<T>::init_shapes(&ck.model)?;
        let mut items = Vec::new();
        for (name, expect) in template.names().iter().zip(template.weights.items()) {
            let t = ck.tensor(name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("missing tensor {name}"),
            })?;
            if t.shape() != expect.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        expect.shape()
                    ),
                });
            }
            items.push(t.cast());
        }
        Ok(Self {
            config: ck.model.clone(),
            weights: ParamSet::from_items(ck.model.layers, items).unwrap(),
        })
    }

    /// Zero-valued parameters with the right shapes.
    pub fn init_shapes(config: &ModelConfig) -> Result<Self> {
        let p = Self::init(config, 0)?;
        Ok(Self {
            config: p.config,
            weights: p.weights.map(|t| Tensor::zeros(t.shape())),
        })
    }
}

/// Gradients of every attached tensor in canonical order; zeros where the
/// loss did not reach a tensor.
pub fn param_grads<T: Scalar>(g: &Graph<T>, w: &ParamSet<Var>) -> Vec<Vec<T>> {
    w.items()
        .into_iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![T::zero(); g.value(v).len()],
        })
        .collect()
}
