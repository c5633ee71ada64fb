//! Flat `key = value` configuration with `[model]`, `[train]`, `[corpus]` and
//! `[eval]` sections.
//!
//! Values are parsed as JSON literals when possible (`3e-4`, `true`,
//! `[1, 1, 0, 0]`) and as bare strings otherwise. Missing keys keep defaults.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "CAMLMLAB_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 4] = ["model", "train", "corpus", "eval"];

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) if parse_value(s) == *v && !s.is_empty() && s.trim() == s => s.clone(),
        other => other.to_string(),
    }
}

/// Serializes a flat struct into ordered `(key, value)` entries.
pub fn to_entries<T: Serialize>(value: &T) -> Result<Vec<(String, String)>> {
    match serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))? {
        Value::Object(map) => Ok(map
            .iter()
            .map(|(k, v)| (k.clone(), render_value(v)))
            .collect()),
        _ => Err(Error::Config("section must serialize to a map".into())),
    }
}

pub fn render_sections(sections: &[(&str, Vec<(String, String)>)]) -> String {
    let mut out = String::new();
    for (i, (name, entries)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{name}]\n"));
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

fn section_from<T: DeserializeOwned + Serialize + Default>(
    name: &str,
    entries: Map<String, Value>,
) -> Result<T> {
    merge(&T::default(), name, entries)
}

impl LabConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Map<String, Value>> = vec![Map::new(); SECTIONS.len()];
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(SECTIONS.iter().position(|s| *s == name.trim()).ok_or_else(
                    || Error::Config(format!("line {}: unknown section [{name}]", i + 1)),
                )?);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let sec = current
                .ok_or_else(|| Error::Config(format!("line {}: key outside a section", i + 1)))?;
            sections[sec].insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let mut it = sections.into_iter();
        Ok(Self {
            model: section_from("model", it.next().unwrap())?,
            train: section_from("train", it.next().unwrap())?,
            corpus: section_from("corpus", it.next().unwrap())?,
            eval: section_from("eval", it.next().unwrap())?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(render())` round-trips.
    pub fn render(&self) -> Result<String> {
        Ok(render_sections(&[
            ("model", to_entries(&self.model)?),
            ("train", to_entries(&self.train)?),
            ("corpus", to_entries(&self.corpus)?),
            ("eval", to_entries(&self.eval)?),
        ]))
    }

    /// Applies `section.key=value`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (sec, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {path:?} needs section.key")))?;
        let mut entries = Map::new();
        entries.insert(key.trim().to_string(), parse_value(v.trim()));
        match sec {
            "model" => self.model = merge(&self.model, "model", entries)?,
            "train" => self.train = merge(&self.train, "train", entries)?,
            "corpus" => self.corpus = merge(&self.corpus, "corpus", entries)?,
            "eval" => self.eval = merge(&self.eval, "eval", entries)?,
            other => return Err(Error::Config(format!("unknown section {other}"))),
        }
        Ok(())
    }

    /// Seed precedence: explicit flag, then `CAMLMLAB_SEED`, then the file.
    pub fn resolve_seed(file_seed: u64, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
            Err(_) => Ok(file_seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.eval.validate()?;
        let vocab = self.corpus.vocab()?;
        if self.model.vocab != vocab.size() || self.model.langs != vocab.num_langs() {
            return Err(Error::Config(format!(
                "model vocab {} / langs {} disagree with corpus vocabulary {} / {}",
                self.model.vocab,
                self.model.langs,
                vocab.size(),
                vocab.num_langs()
            )));
        }
        let longest = 2 * self.corpus.length_max + 3;
        if longest > self.model.max_positions {
            return Err(Error::Config(format!(
                "pairs of length up to {longest} exceed max_positions {}",
                self.model.max_positions
            )));
        }
        Ok(())
    }
}

fn merge<T: DeserializeOwned + Serialize + Default>(
    current: &T,
    name: &str,
    entries: Map<String, Value>,
) -> Result<T> {
    let mut base = match serde_json::to_value(current).map_err(|e| Error::Config(e.to_string()))? {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    for (k, v) in entries {
        if !base.contains_key(&k) {
            return Err(Error::Config(format!("unknown key {name}.{k}")));
        }
        base.insert(k, v);
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(format!("[{name}] {e}")))
}
