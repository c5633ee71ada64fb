//! Synthetic cipher-language corpora.
//!
//! Language 0 draws tokens from a Zipf distribution; every further language is
//! a token bijection of its predecessor plus adjacent-pair swaps, so every
//! parallel pair carries a known ground-truth alignment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Range, RangeInclusive};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

pub type LangId = u16;

/// Specials followed by one disjoint content range per language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    num_langs: usize,
    per_lang: usize,
}

impl Vocabulary {
    pub fn new(num_langs: usize, per_lang: usize) -> Result<Self> {
        if num_langs == 0 || per_lang == 0 {
            return Err(Error::Invalid(
                "vocabulary needs >= 1 language and >= 1 token per language".into(),
            ));
        }
        Ok(Self {
            num_langs,
            per_lang,
        })
    }

    pub fn num_langs(&self) -> usize {
        self.num_langs
    }

    pub fn per_lang(&self) -> usize {
        self.per_lang
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS as usize + self.num_langs * self.per_lang
    }

    pub fn range(&self, lang: LangId) -> Range<u32> {
        let start = NUM_SPECIALS + lang as u32 * self.per_lang as u32;
        start..start + self.per_lang as u32
    }

    pub fn lang_of(&self, token: u32) -> Option<LangId> {
        if token < NUM_SPECIALS || token as usize >= self.size() {
            return None;
        }
        Some(((token - NUM_SPECIALS) / self.per_lang as u32) as LangId)
    }

    pub fn is_special(token: u32) -> bool {
        token < NUM_SPECIALS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonoSentence {
    pub tokens: Vec<u32>,
    pub lang: LangId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: MonoSentence,
    pub tgt: MonoSentence,
    /// True iff `tgt` is the cipher translation of `src`.
    pub aligned: bool,
}

impl SentencePair {
    pub fn swapped(&self) -> Self {
        Self {
            src: self.tgt.clone(),
            tgt: self.src.clone(),
            aligned: self.aligned,
        }
    }
}

/// Token bijection between two languages plus local reordering noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherSpec {
    from: LangId,
    to: LangId,
    from_start: u32,
    map: Vec<u32>,
    inverse_start: u32,
    inverse: Vec<u32>,
    swap_prob: f64,
    seed: u64,
}

impl CipherSpec {
    /// `map[i]` is the image of the `i`-th token of `from`'s range.
    pub fn new(
        vocab: &Vocabulary,
        from: LangId,
        to: LangId,
        map: Vec<u32>,
        swap_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=0.5).contains(&swap_prob) {
            return Err(Error::Invalid(format!(
                "swap_prob {swap_prob} outside [0, 0.5]"
            )));
        }
        let (src, dst) = (vocab.range(from), vocab.range(to));
        if from as usize >= vocab.num_langs() || to as usize >= vocab.num_langs() {
            return Err(Error::Invalid("cipher language out of range".into()));
        }
        if map.len() != src.len() {
            return Err(Error::Invalid(
                "cipher map size differs from source range".into(),
            ));
        }
        let mut inverse = vec![u32::MAX; dst.len()];
        for (i, &t) in map.iter().enumerate() {
            if !dst.contains(&t) || inverse[(t - dst.start) as usize] != u32::MAX {
                return Err(Error::Invalid(
                    "cipher map is not a bijection onto the target range".into(),
                ));
            }
            inverse[(t - dst.start) as usize] = src.start + i as u32;
        }
        Ok(Self {
            from,
            to,
            from_start: src.start,
            map,
            inverse_start: dst.start,
            inverse,
            swap_prob,
            seed,
        })
    }

    /// Uniformly random bijection.
    pub fn random(
        vocab: &Vocabulary,
        from: LangId,
        to: LangId,
        swap_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut map: Vec<u32> = vocab.range(to).collect();
        map.shuffle(&mut seed::rng(seed, &[0xC1F]));
        Self::new(vocab, from, to, map, swap_prob, seed)
    }

    /// Maps the `i`-th token of `from` to the `i`-th token of `to`.
    pub fn offset(
        vocab: &Vocabulary,
        from: LangId,
        to: LangId,
        swap_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::new(vocab, from, to, vocab.range(to).collect(), swap_prob, seed)
    }

    pub fn from_lang(&self) -> LangId {
        self.from
    }

    pub fn to_lang(&self) -> LangId {
        self.to
    }

    pub fn swap_prob(&self) -> f64 {
        self.swap_prob
    }

    pub fn map_token(&self, token: u32) -> Option<u32> {
        token
            .checked_sub(self.from_start)
            .and_then(|i| self.map.get(i as usize).copied())
    }

    pub fn invert_token(&self, token: u32) -> Option<u32> {
        token
            .checked_sub(self.inverse_start)
            .and_then(|i| self.inverse.get(i as usize).copied())
    }
}

/// Maps `s` through the cipher's bijection, then swaps each disjoint adjacent
/// pair `(0,1), (2,3), ...` independently with `swap_prob`.
///
/// The swap draws are seeded by the cipher seed and the sentence content.
pub fn cipher_translate(s: &MonoSentence, spec: &CipherSpec) -> Result<MonoSentence> {
    if s.lang != spec.from {
        return Err(Error::Invalid(format!(
            "sentence language {} does not match cipher source {}",
            s.lang, spec.from
        )));
    }
    let mut tokens = s
        .tokens
        .iter()
        .map(|&t| {
            spec.map_token(t)
                .ok_or_else(|| Error::Invalid(format!("token {t} outside cipher source range")))
        })
        .collect::<Result<Vec<_>>>()?;
    if spec.swap_prob > 0.0 {
        let mut rng = seed::rng(spec.seed, &[seed::hash_tokens(&s.tokens)]);
        for pair in tokens.chunks_exact_mut(2) {
            if rng.gen_bool(spec.swap_prob) {
                pair.swap(0, 1);
            }
        }
    }
    Ok(MonoSentence {
        tokens,
        lang: spec.to,
    })
}

/// Zipf(s) sampler over ranks `0..n`; `s = 0` is uniform.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    index: WeightedIndex<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, s: f64) -> Result<Self> {
        if n == 0 || s.is_nan() || s < 0.0 {
            return Err(Error::Invalid(format!(
                "zipf over {n} ranks with exponent {s}"
            )));
        }
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
        let index = WeightedIndex::new(weights).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Self { index })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// A set of languages chained by random ciphers: `ciphers[l]` maps `l -> l+1`.
#[derive(Debug, Clone)]
pub struct LanguageFamily {
    vocab: Vocabulary,
    ciphers: Vec<CipherSpec>,
    /// `rank_tables[l][r]` is the token of frequency rank `r` in language `l`.
    rank_tables: Vec<Vec<u32>>,
}

impl LanguageFamily {
    pub fn new(vocab: Vocabulary, swap_prob: f64, seed: u64) -> Result<Self> {
        let mut ciphers = Vec::new();
        let mut rank_tables = vec![vocab.range(0).collect::<Vec<u32>>()];
        for l in 1..vocab.num_langs() as LangId {
            let c = CipherSpec::random(
                &vocab,
                l - 1,
                l,
                swap_prob,
                seed::derive_all(seed, &[0xF4, l as u64]),
            )?;
            let prev = &rank_tables[l as usize - 1];
            let table = prev.iter().map(|&t| c.map_token(t).unwrap()).collect();
            rank_tables.push(table);
            ciphers.push(c);
        }
        Ok(Self {
            vocab,
            ciphers,
            rank_tables,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Cipher from `lang` to `lang + 1`.
    pub fn cipher(&self, from: LangId) -> Option<&CipherSpec> {
        self.ciphers.get(from as usize)
    }

    pub fn rank_table(&self, lang: LangId) -> &[u32] {
        &self.rank_tables[lang as usize]
    }

    /// Maps a content token of any language to its counterpart in `to`,
    /// without reordering noise.
    pub fn map_token(&self, token: u32, to: LangId) -> Option<u32> {
        let from = self.vocab.lang_of(token)?;
        let rank = self.rank_tables[from as usize]
            .iter()
            .position(|&t| t == token)?;
        self.rank_tables.get(to as usize).map(|t| t[rank])
    }

    /// Noise-free word-by-word translation into `to`.
    pub fn map_sentence(&self, s: &MonoSentence, to: LangId) -> Option<MonoSentence> {
        let tokens = s
            .tokens
            .iter()
            .map(|&t| self.map_token(t, to))
            .collect::<Option<Vec<_>>>()?;
        Some(MonoSentence { tokens, lang: to })
    }
}

/// Draws one sentence of `lang` with a uniform length and Zipf-ranked tokens.
pub fn gen_mono_sentence(
    family: &LanguageFamily,
    lang: LangId,
    length_range: RangeInclusive<usize>,
    zipf_s: f64,
    seed: u64,
) -> Result<MonoSentence> {
    MonoGenerator::new(family, lang, length_range, zipf_s)?.sentence(seed)
}

/// Reusable sentence generator for one language.
pub struct MonoGenerator<'a> {
    ranks: &'a [u32],
    lang: LangId,
    lengths: RangeInclusive<usize>,
    zipf: ZipfSampler,
}

impl<'a> MonoGenerator<'a> {
    pub fn new(
        family: &'a LanguageFamily,
        lang: LangId,
        lengths: RangeInclusive<usize>,
        zipf_s: f64,
    ) -> Result<Self> {
        if lengths.is_empty() || *lengths.start() == 0 {
            return Err(Error::Invalid(format!(
                "empty or zero length range {lengths:?}"
            )));
        }
        if lang as usize >= family.vocab.num_langs() {
            return Err(Error::Invalid(format!("language {lang} not in vocabulary")));
        }
        let ranks = family.rank_table(lang);
        Ok(Self {
            ranks,
            lang,
            lengths,
            zipf: ZipfSampler::new(ranks.len(), zipf_s)?,
        })
    }

    pub fn sentence(&self, seed: u64) -> Result<MonoSentence> {
        let mut rng = seed::rng(seed, &[0x5E7]);
        let len = rng.gen_range(self.lengths.clone());
        let tokens = (0..len)
            .map(|_| self.ranks[self.zipf.sample(&mut rng)])
            .collect();
        Ok(MonoSentence {
            tokens,
            lang: self.lang,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_langs: usize,
    pub tokens_per_lang: usize,
    pub parallel_pairs: usize,
    pub mono_per_lang: usize,
    pub heldout_pairs: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub zipf_s: f64,
    pub swap_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_langs: 2,
            tokens_per_lang: 258,
            parallel_pairs: 20_000,
            mono_per_lang: 40_000,
            heldout_pairs: 256,
            length_min: 4,
            length_max: 16,
            zipf_s: 1.1,
            swap_prob: 0.1,
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_langs) {
            return Err(Error::Config(format!(
                "num_langs {} outside 2..=8",
                self.num_langs
            )));
        }
        if self.tokens_per_lang == 0
            || self.parallel_pairs == 0
            || self.mono_per_lang == 0
            || self.heldout_pairs == 0
        {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return Err(Error::Config(format!(
                "bad length range {}..={}",
                self.length_min, self.length_max
            )));
        }
        if !(0.0..=0.5).contains(&self.swap_prob) || self.zipf_s.is_nan() || self.zipf_s < 0.0 {
            return Err(Error::Config(
                "swap_prob must be in [0, 0.5] and zipf_s >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.num_langs, self.tokens_per_lang)
    }

    pub fn family(&self) -> Result<LanguageFamily> {
        LanguageFamily::new(self.vocab()?, self.swap_prob, self.seed)
    }
}

/// In-memory corpora: training pairs, monolingual sentences, held-out pairs.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub config: CorpusConfig,
    pub family: LanguageFamily,
    pub parallel: Vec<SentencePair>,
    /// `mono[l]` holds the sentences of language `l`.
    pub mono: Vec<Vec<MonoSentence>>,
    pub heldout: Vec<SentencePair>,
}

const STREAM_PARALLEL: u64 = 1;
const STREAM_MONO: u64 = 2;
const STREAM_HELDOUT: u64 = 3;

impl Corpora {
    /// Deterministic in `config` (including its seed).
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let family = config.family()?;
        let lengths = config.length_min..=config.length_max;
        let gens = (0..config.num_langs as LangId)
            .map(|l| MonoGenerator::new(&family, l, lengths.clone(), config.zipf_s))
            .collect::<Result<Vec<_>>>()?;
        let chain = config.num_langs - 1;
        let pair_at = |stream: u64, i: usize| -> Result<SentencePair> {
            let to = 1 + (i % chain) as LangId;
            let src = gens[to as usize - 1]
                .sentence(seed::derive_all(config.seed, &[stream, i as u64]))?;
            let tgt = cipher_translate(&src, family.cipher(to - 1).unwrap())?;
            Ok(SentencePair {
                src,
                tgt,
                aligned: true,
            })
        };

        let parallel = (0..config.parallel_pairs)
            .map(|i| pair_at(STREAM_PARALLEL, i))
            .collect::<Result<Vec<_>>>()?;
        let mono = gens
            .iter()
            .enumerate()
            .map(|(l, g)| {
                (0..config.mono_per_lang)
                    .map(|j| {
                        g.sentence(seed::derive_all(
                            config.seed,
                            &[STREAM_MONO, l as u64, j as u64],
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let heldout = draw_heldout(&parallel, config, &pair_at)?;

        Ok(Self {
            config: config.clone(),
            family,
            parallel,
            mono,
            heldout,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.family.vocab()
    }

    /// Monolingual sentences interleaved across languages: index `i` belongs to
    /// language `i % num_langs`.
    pub fn mono_interleaved(&self) -> Vec<MonoSentence> {
        let g = self.mono.len();
        let n = self.mono.iter().map(Vec::len).min().unwrap_or(0);
        (0..n * g)
            .map(|i| self.mono[i % g][i / g].clone())
            .collect()
    }

    pub fn write(&self, paths: &CorpusPaths) -> Result<()> {
        paths.check_distinct(self.config.num_langs)?;
        fs::create_dir_all(&paths.dir)
            .map_err(|e| Error::io(format!("creating {}", paths.dir.display()), e))?;
        write_parallel(&paths.parallel(), &self.parallel)?;
        for (l, sents) in self.mono.iter().enumerate() {
            write_mono(&paths.mono(l as LangId), sents)?;
        }
        write_parallel(&paths.heldout(), &self.heldout)?;
        let cfg =
            crate::config::render_sections(&[("corpus", crate::config::to_entries(&self.config)?)]);
        fs::write(paths.config(), cfg)
            .map_err(|e| Error::io(format!("writing {}", paths.config().display()), e))
    }

    /// Loads corpora written by [`Corpora::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let paths = CorpusPaths::in_dir(dir);
        let text = fs::read_to_string(paths.config())
            .map_err(|e| Error::io(format!("reading {}", paths.config().display()), e))?;
        let lab = crate::config::LabConfig::parse(&text)?;
        let config = lab.corpus;
        config.validate()?;
        let family = config.family()?;
        let parallel = read_parallel(&paths.parallel())?;
        let mono = (0..config.num_langs as LangId)
            .map(|l| read_mono(&paths.mono(l)))
            .collect::<Result<Vec<_>>>()?;
        let heldout = read_parallel(&paths.heldout())?;
        Ok(Self {
            config,
            family,
            parallel,
            mono,
            heldout,
        })
    }
}

/// Held-out sources are distinct from every training source and from each other.
fn draw_heldout(
    parallel: &[SentencePair],
    config: &CorpusConfig,
    pair_at: &dyn Fn(u64, usize) -> Result<SentencePair>,
) -> Result<Vec<SentencePair>> {
    let train: HashSet<&[u32]> = parallel.iter().map(|p| p.src.tokens.as_slice()).collect();
    let mut own: HashSet<Vec<u32>> = HashSet::new();
    let mut kept = Vec::with_capacity(config.heldout_pairs);
    let limit = 100 * config.heldout_pairs + 1000;
    for i in 0.. {
        if kept.len() == config.heldout_pairs {
            break;
        }
        if i > limit {
            return Err(Error::Config(
                "could not draw enough distinct held-out pairs".into(),
            ));
        }
        let p = pair_at(STREAM_HELDOUT, i)?;
        if train.contains(p.src.tokens.as_slice()) || !own.insert(p.src.tokens.clone()) {
            continue;
        }
        kept.push(p);
    }
    Ok(kept)
}

/// File layout of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub dir: PathBuf,
    pub parallel_name: String,
    pub heldout_name: String,
    pub mono_prefix: String,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            parallel_name: "parallel.txt".into(),
            heldout_name: "heldout.txt".into(),
            mono_prefix: "mono_".into(),
        }
    }

    pub fn parallel(&self) -> PathBuf {
        self.dir.join(&self.parallel_name)
    }

    pub fn heldout(&self) -> PathBuf {
        self.dir.join(&self.heldout_name)
    }

    pub fn mono(&self, lang: LangId) -> PathBuf {
        self.dir.join(format!("{}{}.txt", self.mono_prefix, lang))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("corpus.cfg")
    }

    fn check_distinct(&self, num_langs: usize) -> Result<()> {
        let mut all = vec![self.parallel(), self.heldout(), self.config()];
        all.extend((0..num_langs as LangId).map(|l| self.mono(l)));
        let unique: HashSet<&PathBuf> = all.iter().collect();
        if unique.len() != all.len() {
            return Err(Error::Config("corpus output paths overlap".into()));
        }
        Ok(())
    }
}

/// Generates corpora from `config` and writes them under `out_dir`.
pub fn gen_corpora(config: &CorpusConfig, out_dir: &Path) -> Result<Corpora> {
    let corpora = Corpora::generate(config)?;
    corpora.write(&CorpusPaths::in_dir(out_dir))?;
    Ok(corpora)
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Mono(MonoSentence),
    Pair(SentencePair),
}

fn format_ids(out: &mut String, tokens: &[u32]) {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{t}").unwrap();
    }
}

pub fn format_mono(s: &MonoSentence) -> String {
    let mut out = format!("lang={}\t", s.lang);
    format_ids(&mut out, &s.tokens);
    out
}

pub fn format_pair(p: &SentencePair) -> String {
    let mut out = format!("lang={}\t", p.src.lang);
    format_ids(&mut out, &p.src.tokens);
    write!(out, "\tlang={}\t", p.tgt.lang).unwrap();
    format_ids(&mut out, &p.tgt.tokens);
    out
}

fn write_lines<I: Iterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let f = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(f);
    for line in lines {
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn write_mono(path: &Path, sentences: &[MonoSentence]) -> Result<()> {
    write_lines(path, sentences.iter().map(format_mono))
}

pub fn write_parallel(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    write_lines(path, pairs.iter().map(format_pair))
}

fn parse_lang(field: &str) -> std::result::Result<LangId, String> {
    field
        .strip_prefix("lang=")
        .ok_or_else(|| format!("expected lang=<id>, found {field:?}"))?
        .parse()
        .map_err(|_| format!("bad language id in {field:?}"))
}

fn parse_ids(field: &str) -> std::result::Result<Vec<u32>, String> {
    if field.is_empty() {
        return Err("empty token list".into());
    }
    field
        .split(' ')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| format!("non-integer token {t:?}"))
        })
        .collect()
}

pub fn parse_line(line: &str) -> std::result::Result<Record, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    match fields.as_slice() {
        [l, ids] => Ok(Record::Mono(MonoSentence {
            lang: parse_lang(l)?,
            tokens: parse_ids(ids)?,
        })),
        [la, a, lb, b] => Ok(Record::Pair(SentencePair {
            src: MonoSentence {
                lang: parse_lang(la)?,
                tokens: parse_ids(a)?,
            },
            tgt: MonoSentence {
                lang: parse_lang(lb)?,
                tokens: parse_ids(b)?,
            },
            aligned: true,
        })),
        _ => Err(format!(
            "expected 2 or 4 tab-separated fields, found {}",
            fields.len()
        )),
    }
}

/// Reads every record of a mono or parallel corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<Record>> {
    let f =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let rec = parse_line(&line).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_mono(path: &Path) -> Result<Vec<MonoSentence>> {
    read_corpus(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Record::Mono(s) => Ok(s),
            Record::Pair(_) => Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected a monolingual record".into(),
            }),
        })
        .collect()
}

pub fn read_parallel(path: &Path) -> Result<Vec<SentencePair>> {
    read_corpus(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Record::Pair(p) => Ok(p),
            Record::Mono(_) => Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected a parallel record".into(),
            }),
        })
        .collect()
}
