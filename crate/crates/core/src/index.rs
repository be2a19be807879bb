//! TF-IDF inverted index over training responses, used both to mine hard
//! candidates and as a cosine-similarity feature.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Exchange, TokenId, Utterance, Vocabulary, EOS};
use crate::error::{Error, Result};

/// First line of a persisted index.
pub const INDEX_MAGIC: &str = "WSIDX1";

pub type DocId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: DocId,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedDoc {
    pub response: Vec<TokenId>,
    pub exchange_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<TokenId, Vec<Posting>>,
    doc_freq: BTreeMap<TokenId, u32>,
    norms: Vec<f64>,
    docs: Vec<IndexedDoc>,
    #[serde(skip)]
    by_exchange: HashMap<String, DocId>,
}

/// Reserved ids (padding, unknown, sentence markers) carry no lexical content.
fn indexable(t: TokenId) -> bool {
    t > EOS
}

fn term_counts(ids: &[TokenId]) -> BTreeMap<TokenId, u32> {
    let mut counts = BTreeMap::new();
    for &t in ids.iter().filter(|&&t| indexable(t)) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

impl InvertedIndex {
    /// Indexes every exchange's response; doc ids follow corpus order.
    pub fn build(corpus: &[Exchange]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut postings: BTreeMap<TokenId, Vec<Posting>> = BTreeMap::new();
        let mut docs = Vec::with_capacity(corpus.len());
        for (d, ex) in corpus.iter().enumerate() {
            for (t, tf) in term_counts(ex.response.ids()) {
                postings.entry(t).or_default().push(Posting { doc: d as DocId, tf });
            }
            docs.push(IndexedDoc {
                response: ex.response.0.clone(),
                exchange_id: ex.id.clone(),
            });
        }
        let doc_freq = postings.iter().map(|(&t, p)| (t, p.len() as u32)).collect();
        let mut index = Self {
            postings,
            doc_freq,
            norms: Vec::new(),
            docs,
            by_exchange: HashMap::new(),
        };
        index.norms = index
            .docs
            .iter()
            .map(|d| norm(&index.weights(&d.response)))
            .collect();
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        self.by_exchange = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.exchange_id.clone(), i as DocId))
            .collect();
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc(&self, id: DocId) -> Option<&IndexedDoc> {
        self.docs.get(id as usize)
    }

    pub fn doc_for_exchange(&self, exchange_id: &str) -> Option<DocId> {
        self.by_exchange.get(exchange_id).copied()
    }

    pub fn doc_freq(&self, term: TokenId) -> u32 {
        self.doc_freq.get(&term).copied().unwrap_or(0)
    }

    pub fn postings(&self, term: TokenId) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn norm(&self, doc: DocId) -> f64 {
        self.norms[doc as usize]
    }

    /// `ln(N / df)`; zero for terms the index has never seen.
    pub fn idf(&self, term: TokenId) -> f64 {
        match self.doc_freq(term) {
            0 => 0.0,
            df => (self.docs.len() as f64 / df as f64).ln(),
        }
    }

    /// Sparse TF-IDF vector, sorted by term id.
    pub fn weights(&self, ids: &[TokenId]) -> Vec<(TokenId, f64)> {
        term_counts(ids)
            .into_iter()
            .map(|(t, tf)| (t, tf as f64 * self.idf(t)))
            .collect()
    }

    /// Cosine of the TF-IDF vectors of `a` and `b`; 0 if either is all-zero.
    pub fn tfidf_cosine(&self, a: &Utterance, b: &Utterance) -> f64 {
        let wa = self.weights(a.ids());
        let wb = self.weights(b.ids());
        let (na, nb) = (norm(&wa), norm(&wb));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let mut dot = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < wa.len() && j < wb.len() {
            match wa[i].0.cmp(&wb[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += wa[i].1 * wb[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        (dot / (na * nb)).clamp(0.0, 1.0)
    }

    /// Top-`k` documents by cosine with `query`, ties by ascending doc id.
    /// Zero-score documents are eligible, so fewer than `k` results means the
    /// index (minus `exclude`) holds fewer than `k` documents.
    pub fn retrieve(&self, query: &Utterance, k: usize, exclude: &HashSet<DocId>) -> Vec<(DocId, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let q = self.weights(query.ids());
        let qn = norm(&q);
        let mut dots = vec![0.0; self.docs.len()];
        for &(t, w) in &q {
            if w == 0.0 {
                continue;
            }
            let idf = self.idf(t);
            for p in self.postings(t) {
                dots[p.doc as usize] += w * (p.tf as f64 * idf);
            }
        }
        let mut scored: Vec<(DocId, f64)> = dots
            .into_iter()
            .enumerate()
            .filter(|(d, _)| !exclude.contains(&(*d as DocId)))
            .map(|(d, dot)| {
                let dn = self.norms[d];
                let s = if qn == 0.0 || dn == 0.0 {
                    0.0
                } else {
                    (dot / (qn * dn)).clamp(0.0, 1.0)
                };
                (d as DocId, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from(INDEX_MAGIC);
        text.push('\n');
        text.push_str(&serde_json::to_string(self).expect("index serializes"));
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let body = text
            .strip_prefix(INDEX_MAGIC)
            .and_then(|rest| rest.strip_prefix('\n'))
            .ok_or_else(|| Error::Format(format!("{} lacks the {INDEX_MAGIC} magic", path.display())))?;
        let mut index: Self =
            serde_json::from_str(body).map_err(|e| Error::Format(format!("index: {e}")))?;
        index.rebuild_lookup();
        Ok(index)
    }
}

fn norm(w: &[(TokenId, f64)]) -> f64 {
    w.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Retrieved,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub response: Utterance,
    pub source: Source,
    pub doc_id: Option<DocId>,
    /// Binary relevance when known (1 for the human response under the
    /// random-negative protocol).
    pub label: Option<u8>,
    /// Annotator log-likelihood `s` in nats.
    pub weak_score: Option<f64>,
    /// Normalized margin `s'`.
    pub normalized: Option<f64>,
    /// Retrieved text identical to the human response.
    pub duplicate_of_human: bool,
}

impl Candidate {
    pub fn new(response: Utterance, source: Source) -> Self {
        Self {
            response,
            source,
            doc_id: None,
            label: None,
            weak_score: None,
            normalized: None,
            duplicate_of_human: false,
        }
    }
}

/// An input with its ordered candidates; index 0 is always the human response.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub input_id: String,
    pub input: Utterance,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn human(&self) -> &Candidate {
        &self.candidates[0]
    }

    pub fn responses(&self) -> Vec<&[TokenId]> {
        self.candidates.iter().map(|c| c.response.ids()).collect()
    }

    /// Checks the structural invariants shared by every producer.
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Contract(format!(
                "candidate set {} has {} candidates, need at least 2",
                self.input_id,
                self.candidates.len()
            )));
        }
        if self.candidates[0].source != Source::Human {
            return Err(Error::Contract(format!(
                "candidate set {} does not start with the human response",
                self.input_id
            )));
        }
        Ok(())
    }
}

/// Builds D: each exchange's human response followed by `n - 1` retrieved
/// candidates. Shortfalls in tiny indexes are padded by random sampling.
pub fn construct_training_set(
    corpus: &[Exchange],
    index: &InvertedIndex,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if n < 2 {
        return Err(Error::Config(format!("candidate count n must be >= 2, got {n}")));
    }
    if index.doc_count() < 2 {
        return Err(Error::Contract("index must hold at least two documents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut padded_sets = 0usize;
    let mut sets = Vec::with_capacity(corpus.len());
    for ex in corpus {
        let input = ex.input();
        let own = index.doc_for_exchange(&ex.id);
        let exclude: HashSet<DocId> = own.into_iter().collect();
        let hits = index.retrieve(&input, n - 1, &exclude);

        let mut human = Candidate::new(ex.response.clone(), Source::Human);
        human.doc_id = own;
        human.label = Some(1);
        let mut candidates = vec![human];
        let mut used: HashSet<DocId> = exclude.clone();
        for (doc, _) in hits {
            used.insert(doc);
            let response = Utterance(index.docs[doc as usize].response.clone());
            let mut c = Candidate::new(response, Source::Retrieved);
            c.duplicate_of_human = c.response == ex.response;
            c.doc_id = Some(doc);
            candidates.push(c);
        }
        if candidates.len() < n {
            padded_sets += 1;
            let others: Vec<DocId> = (0..index.doc_count() as DocId)
                .filter(|d| Some(*d) != own)
                .collect();
            while candidates.len() < n {
                let fresh: Vec<DocId> = others.iter().copied().filter(|d| !used.contains(d)).collect();
                let pool = if fresh.is_empty() { &others } else { &fresh };
                let doc = *pool.choose(&mut rng).expect("at least one other document");
                used.insert(doc);
                let response = Utterance(index.docs[doc as usize].response.clone());
                let mut c = Candidate::new(response, Source::Random);
                c.duplicate_of_human = c.response == ex.response;
                c.doc_id = Some(doc);
                candidates.push(c);
            }
        }
        sets.push(CandidateSet {
            input_id: ex.id.clone(),
            input,
            candidates,
        });
    }
    if padded_sets > 0 {
        warn!(
            "index too small for n = {n}: {padded_sets} candidate sets padded with random responses"
        );
    }
    Ok(sets)
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRecord {
    text: String,
    source: Source,
    s: Option<f64>,
    s_prime: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateSetRecord {
    input_id: String,
    input: String,
    candidates: Vec<CandidateRecord>,
}

pub fn write_candidate_sets(path: &Path, sets: &[CandidateSet], vocab: &Vocabulary) -> Result<()> {
    let mut buf = Vec::new();
    for set in sets {
        let rec = CandidateSetRecord {
            input_id: set.input_id.clone(),
            input: vocab.decode(&set.input),
            candidates: set
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    text: vocab.decode(&c.response),
                    source: c.source,
                    s: c.weak_score,
                    s_prime: c.normalized,
                })
                .collect(),
        };
        serde_json::to_writer(&mut buf, &rec).expect("candidate set serializes");
        buf.push(b'\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_candidate_sets(path: &Path, vocab: &Vocabulary) -> Result<Vec<CandidateSet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateSetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let candidates: Vec<Candidate> = rec
            .candidates
            .into_iter()
            .map(|c| {
                let mut cand = Candidate::new(vocab.encode_tokens(c.text.split_whitespace()), c.source);
                cand.weak_score = c.s;
                cand.normalized = c.s_prime;
                cand
            })
            .collect();
        let mut set = CandidateSet {
            input_id: rec.input_id,
            input: vocab.encode_tokens(rec.input.split_whitespace()),
            candidates,
        };
        set.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let human = set.candidates[0].response.clone();
        set.candidates[0].label = Some(1);
        for c in &mut set.candidates[1..] {
            c.duplicate_of_human = c.response == human;
        }
        sets.push(set);
    }
    Ok(sets)
}
