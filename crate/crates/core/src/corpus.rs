//! Corpus ingestion: tokenization, vocabulary, context flattening, JSONL
//! loading and the synthetic topic corpus with its relevance oracle.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
/// Utterances in a multi-turn context are joined with this token.
pub const UTTERANCE_SEPARATOR: TokenId = EOS;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Utterance(pub Vec<TokenId>);

impl Utterance {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for Utterance {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// One line of a corpus file, before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExchange {
    pub id: String,
    pub context: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<u32>,
}

/// An input (one or more context utterances) with its human response.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub id: String,
    pub context: Vec<Utterance>,
    pub response: Utterance,
    pub label: Option<u8>,
    pub topic_id: Option<u32>,
}

impl Exchange {
    /// The context joined into one encoder input.
    pub fn input(&self) -> Utterance {
        flatten_context(&self.context, UTTERANCE_SEPARATOR)
    }
}

/// Lowercases, splits on whitespace and strips punctuation from token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Joins utterances in order with `separator` between consecutive ones.
pub fn flatten_context(context: &[Utterance], separator: TokenId) -> Utterance {
    let mut out = Vec::with_capacity(context.iter().map(Utterance::len).sum::<usize>() + context.len());
    for (i, u) in context.iter().enumerate() {
        if i > 0 {
            out.push(separator);
        }
        out.extend_from_slice(u.ids());
    }
    Utterance(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    max_size: usize,
}

impl Vocabulary {
    /// Ranks tokens by descending frequency (ties by first occurrence) and
    /// keeps `max_size - 4` of them after the reserved ids.
    pub fn build(corpus: &[RawExchange], max_size: usize) -> Result<Self> {
        if max_size < 5 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least 5, got {max_size}"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        let mut see = |tok: String| {
            let entry = counts.entry(tok).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            entry.0 += 1;
        };
        for ex in corpus {
            for u in &ex.context {
                tokenize(u).into_iter().for_each(&mut see);
            }
            tokenize(&ex.response).into_iter().for_each(&mut see);
        }
        let mut ranked: Vec<(String, usize, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .map(|(t, (c, o))| (t, c, o))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - RESERVED.len());

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, max_size))
    }

    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes and maps to ids, unknown tokens becoming `UNK`.
    pub fn encode(&self, text: &str) -> Utterance {
        self.encode_tokens(tokenize(text).iter().map(String::as_str))
    }

    /// Maps already-normalized tokens to ids without re-tokenizing.
    pub fn encode_tokens<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Utterance {
        Utterance(tokens.into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect())
    }

    pub fn decode(&self, utterance: &Utterance) -> String {
        utterance
            .ids()
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_exchange(&self, raw: &RawExchange) -> Exchange {
        Exchange {
            id: raw.id.clone(),
            context: raw.context.iter().map(|u| self.encode(u)).collect(),
            response: self.encode(&raw.response),
            label: raw.label,
            topic_id: raw.topic_id,
        }
    }

    pub fn encode_corpus(&self, raw: &[RawExchange]) -> Vec<Exchange> {
        raw.iter().map(|r| self.encode_exchange(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        if v.tokens.len() < RESERVED.len()
            || v.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Format("vocabulary lacks the reserved tokens".into()));
        }
        Ok(Self::from_tokens(v.tokens, v.max_size))
    }
}

/// Reads one exchange per line. Records whose response tokenizes to nothing
/// are skipped with a warning naming the line.
pub fn load_corpus(path: &Path) -> Result<Vec<RawExchange>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExchange = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(l) = raw.label {
            if l > 1 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label must be 0 or 1, got {l}"),
                });
            }
        }
        if tokenize(&raw.response).is_empty() {
            warn!("{}:{line_no}: blank response in {:?}, skipped", path.display(), raw.id);
            continue;
        }
        if raw.context.is_empty() || raw.context.iter().all(|u| tokenize(u).is_empty()) {
            warn!("{}:{line_no}: empty context in {:?}, skipped", path.display(), raw.id);
            continue;
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate exchange id {:?}", raw.id),
            });
        }
        out.push(raw);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[RawExchange]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in corpus {
        serde_json::to_writer(&mut buf, ex).expect("exchange serializes");
        buf.push(b'\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub topic_count: usize,
    pub keywords_per_topic: usize,
    pub exchanges_per_topic: usize,
    /// Inclusive range of keyword counts per input.
    pub input_length_range: (usize, usize),
    /// Inclusive range of response lengths; function words pad short responses.
    pub response_length_range: (usize, usize),
    pub noise_rate: f64,
    /// Shared topic-free filler tokens.
    pub function_words: usize,
    /// Input keywords repeated verbatim in the response.
    pub echo_words: usize,
    /// Inputs are split into up to this many context utterances.
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topic_count: 3,
            keywords_per_topic: 40,
            exchanges_per_topic: 767,
            input_length_range: (2, 3),
            response_length_range: (8, 10),
            noise_rate: 0.0,
            function_words: 128,
            echo_words: 1,
            max_turns: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("topic_count", self.topic_count),
            ("keywords_per_topic", self.keywords_per_topic),
            ("exchanges_per_topic", self.exchanges_per_topic),
            ("max_turns", self.max_turns),
        ] {
            if v < 1 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        let (lo, hi) = self.input_length_range;
        if lo < 1 || lo > hi || hi > self.keywords_per_topic {
            problems.push(format!(
                "input_length_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= keywords_per_topic"
            ));
        }
        let (lo, hi) = self.response_length_range;
        if lo < 1 || lo > hi {
            problems.push(format!("response_length_range ({lo}, {hi}) must satisfy 1 <= lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            problems.push(format!("noise_rate {} must lie in [0, 1]", self.noise_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Ground truth for a synthetic corpus: each topic keyword maps to exactly
/// one response keyword of the same topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceOracle {
    mapping: HashMap<String, String>,
    topic_of: HashMap<String, u32>,
}

impl RelevanceOracle {
    pub fn mapped(&self, keyword: &str) -> Option<&str> {
        self.mapping.get(keyword).map(String::as_str)
    }

    pub fn topic_of(&self, token: &str) -> Option<u32> {
        self.topic_of.get(token).copied()
    }

    /// Relevant iff `response` contains at least half of the mapped images of
    /// the input's keywords. Inputs without keywords are never matched.
    pub fn is_relevant<S: AsRef<str>, T: AsRef<str>>(&self, input: &[S], response: &[T]) -> bool {
        let mut wanted: Vec<&str> = Vec::new();
        for tok in input {
            if let Some(m) = self.mapped(tok.as_ref()) {
                if !wanted.contains(&m) {
                    wanted.push(m);
                }
            }
        }
        if wanted.is_empty() {
            return false;
        }
        let present: HashSet<&str> = response.iter().map(|t| t.as_ref()).collect();
        let hits = wanted.iter().filter(|w| present.contains(*w)).count();
        2 * hits >= wanted.len()
    }

    pub fn is_relevant_text(&self, input: &str, response: &str) -> bool {
        self.is_relevant(&tokenize(input), &tokenize(response))
    }

    /// Same judgement over encoded utterances.
    pub fn is_relevant_ids(&self, vocab: &Vocabulary, input: &Utterance, response: &Utterance) -> bool {
        let words = |u: &Utterance| -> Vec<&str> {
            u.ids().iter().filter_map(|&id| vocab.token(id)).collect()
        };
        self.is_relevant(&words(input), &words(response))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sorted: std::collections::BTreeMap<_, _> = self.mapping.iter().collect();
        let topics: std::collections::BTreeMap<_, _> = self.topic_of.iter().collect();
        let json = serde_json::json!({"mapping": sorted, "topic_of": topics});
        let text = serde_json::to_string_pretty(&json).expect("oracle serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("oracle: {e}")))
    }
}

fn keyword(topic: usize, k: usize) -> String {
    format!("t{topic}w{k}")
}

fn function_word(k: usize) -> String {
    format!("fw{k}")
}

/// Generates a topic corpus whose responses are keyword translations of the
/// inputs. Pure in `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Vec<RawExchange>, RelevanceOracle)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mapping = HashMap::new();
    let mut topic_of = HashMap::new();
    let mut topics: Vec<Vec<String>> = Vec::with_capacity(config.topic_count);
    for t in 0..config.topic_count {
        let words: Vec<String> = (0..config.keywords_per_topic).map(|k| keyword(t, k)).collect();
        for w in &words {
            topic_of.insert(w.clone(), t as u32);
        }
        // A single random cycle: a derangement whenever the topic has >1 keyword.
        let mut cycle = words.clone();
        cycle.shuffle(&mut rng);
        for i in 0..cycle.len() {
            mapping.insert(cycle[i].clone(), cycle[(i + 1) % cycle.len()].clone());
        }
        topics.push(words);
    }
    let fillers: Vec<String> = (0..config.function_words).map(function_word).collect();

    let mut corpus = Vec::with_capacity(config.topic_count * config.exchanges_per_topic);
    for i in 0..config.exchanges_per_topic {
        for (t, words) in topics.iter().enumerate() {
            let (lo, hi) = config.input_length_range;
            let count = rng.gen_range(lo..=hi);
            let keys: Vec<&String> = words.choose_multiple(&mut rng, count).collect();

            let mut input: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
            if !fillers.is_empty() {
                let pos = rng.gen_range(0..=input.len());
                input.insert(pos, fillers.choose(&mut rng).unwrap().clone());
            }
            let turns = rng.gen_range(1..=config.max_turns.min(input.len()));
            let context = split_turns(&input, turns, &mut rng);

            let mut response: Vec<String> = keys
                .iter()
                .map(|k| {
                    if rng.gen_bool(config.noise_rate) {
                        words.choose(&mut rng).unwrap().clone()
                    } else {
                        mapping[k.as_str()].clone()
                    }
                })
                .collect();
            for k in keys.choose_multiple(&mut rng, config.echo_words.min(keys.len())) {
                let pos = rng.gen_range(0..=response.len());
                response.insert(pos, k.to_string());
            }
            let (rlo, rhi) = config.response_length_range;
            let target = rng.gen_range(rlo..=rhi);
            while response.len() < target && !fillers.is_empty() {
                let pos = rng.gen_range(0..=response.len());
                response.insert(pos, fillers.choose(&mut rng).unwrap().clone());
            }

            corpus.push(RawExchange {
                id: format!("syn-{t}-{i}"),
                context,
                response: response.join(" "),
                label: None,
                topic_id: Some(t as u32),
            });
        }
    }
    Ok((corpus, RelevanceOracle { mapping, topic_of }))
}

fn split_turns(tokens: &[String], turns: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    if turns <= 1 {
        return vec![tokens.join(" ")];
    }
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, tokens.len() - 1, turns - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(turns);
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(tokens.len())) {
        out.push(tokens[start..c].join(" "));
        start = c;
    }
    out
}
