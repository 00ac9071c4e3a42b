//! Corpus handling: tokenization, vocabulary construction, JSONL sample IO,
//! context packing, the synthetic personalization generator, and the
//! deterministic user-level train/heldout split.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::util::{hash64, sha256_hex};

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const PAD: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<sep>", "<eos>", "<unk>", "<pad>"];

/// Lowercases, splits on whitespace, and emits punctuation characters as
/// standalone tokens. Alphanumeric runs stay together; everything else that
/// is not whitespace becomes its own single-character token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().collect());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token table with the five specials pinned to ids 0..=4 and content tokens
/// ordered by descending corpus frequency (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, falling back to `<unk>` for anything unseen.
    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id_of(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serialization cannot fail")
    }

    /// Hex sha256 over the canonical JSON form; stored in checkpoints so a
    /// model is never silently paired with the wrong token table.
    pub fn sha256(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact {
            what: "vocabulary",
            path: path.to_path_buf(),
            hint: format!("run `causalign build-vocab` first ({e})"),
        })?;
        let file: VocabFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            what: "vocabulary",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if file.tokens.len() < SPECIAL_TOKENS.len()
            || file.tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(Error::Parse {
                what: "vocabulary",
                path: path.to_path_buf(),
                reason: "special tokens missing or out of order".into(),
            });
        }
        Ok(Vocab::from_tokens(file.tokens))
    }
}

/// Builds the vocabulary over every text field of the corpus. `max_size`
/// caps the table; the lowest-frequency content tokens are dropped first and
/// map to `<unk>` thereafter.
pub fn build_vocab(samples: &[RawSample], max_size: usize) -> Result<Vocab> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(
            "cannot build a vocabulary from zero samples".into(),
        ));
    }
    if max_size < SPECIAL_TOKENS.len() {
        return Err(Error::InvalidConfig(format!(
            "vocabulary cap {max_size} cannot fit the {} special tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for s in samples {
        for field in s.text_fields() {
            for tok in tokenize(field) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut content: Vec<(String, u64)> = freq.into_iter().collect();
    content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    content.truncate(max_size - SPECIAL_TOKENS.len());

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(content.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

/// One line of the JSONL corpus format, before tokenization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RawSample {
    pub user_id: String,
    pub query: String,
    pub history: Vec<String>,
    pub target: String,
    /// 0/1 per *token* of the tokenized target; present for synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pref_mask: Option<Vec<u8>>,
}

impl RawSample {
    fn text_fields(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.query.as_str())
            .chain(self.history.iter().map(String::as_str))
            .chain(std::iter::once(self.target.as_str()))
    }
}

/// Tokenized sample: everything downstream of the loader works in ids.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Sample {
    pub user_id: String,
    pub query: Vec<u32>,
    pub history: Vec<Vec<u32>>,
    pub target: Vec<u32>,
    pub pref_mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn has_history(&self) -> bool {
        !self.history.is_empty()
    }
}

fn tokenize_sample(raw: &RawSample, vocab: &Vocab) -> std::result::Result<Sample, String> {
    let query = vocab.encode(&raw.query);
    if query.is_empty() {
        return Err("query tokenizes to nothing".into());
    }
    let target = vocab.encode(&raw.target);
    if target.is_empty() {
        return Err("target tokenizes to nothing".into());
    }
    let history: Vec<Vec<u32>> = raw.history.iter().map(|h| vocab.encode(h)).collect();
    let pref_mask = match &raw.pref_mask {
        None => None,
        Some(mask) => {
            if mask.len() != target.len() {
                return Err(format!(
                    "pref_mask has {} entries but the target tokenizes to {} tokens",
                    mask.len(),
                    target.len()
                ));
            }
            if let Some(bad) = mask.iter().find(|&&m| m > 1) {
                return Err(format!("pref_mask entries must be 0 or 1, found {bad}"));
            }
            Some(mask.iter().map(|&m| m == 1).collect())
        }
    };
    Ok(Sample {
        user_id: raw.user_id.clone(),
        query,
        history,
        target,
        pref_mask,
    })
}

/// Reads a JSONL corpus, tokenizes every sample, and rejects anything that
/// would not fit a context of `max_len` once packed with full history.
pub fn load_samples(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact {
        what: "corpus",
        path: path.to_path_buf(),
        hint: format!("run `causalign gen-synthetic` or point the config at an existing corpus ({e})"),
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| Error::MalformedSample {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let sample = tokenize_sample(&raw, vocab).map_err(|reason| Error::MalformedSample {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        })?;
        // Packing validates token ids and total length; surface its errors
        // with the offending line attached.
        pack_context(&sample, true, vocab.size(), max_len)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no samples found in {}",
            path.display()
        )));
    }
    Ok(samples)
}

/// Reads the JSONL corpus without tokenizing — the form vocabulary building
/// consumes.
pub fn load_raw_samples(path: &Path) -> Result<Vec<RawSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact {
        what: "corpus",
        path: path.to_path_buf(),
        hint: format!("run `causalign gen-synthetic` or point the config at an existing corpus ({e})"),
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| Error::MalformedSample {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        samples.push(raw);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no samples found in {}",
            path.display()
        )));
    }
    Ok(samples)
}

/// Tokenizes an in-memory corpus with the same validation as the file
/// loader; sample numbers stand in for line numbers in errors.
pub fn tokenize_corpus(raws: &[RawSample], vocab: &Vocab, max_len: usize) -> Result<Vec<Sample>> {
    if raws.is_empty() {
        return Err(Error::EmptyCorpus("no samples to tokenize".into()));
    }
    let mut samples = Vec::with_capacity(raws.len());
    for (i, raw) in raws.iter().enumerate() {
        let sample = tokenize_sample(raw, vocab).map_err(|reason| Error::MalformedSample {
            path: std::path::PathBuf::from("<memory>"),
            line: i + 1,
            reason,
        })?;
        pack_context(&sample, true, vocab.size(), max_len)?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_raw_samples(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).expect("sample serialization cannot fail");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Where the target tokens sit inside a packed id sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSpan {
    pub start: usize,
    pub len: usize,
}

impl TargetSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Rows of the packed sequence whose next-token predictions cover the
    /// target: row `start + t − 1` predicts target token t. Well-defined
    /// because `<bos>` guarantees `start ≥ 1`.
    pub fn pred_rows(&self) -> std::ops::Range<usize> {
        self.start - 1..self.start + self.len - 1
    }
}

/// A sample flattened to one model-ready id sequence.
///
/// Layout with history: `<bos> h₁ <sep> h₂ <sep> … <sep> x <sep> y`.
/// With history absent (or ablated): `<bos> <sep> x <sep> y`.
/// No `<eos>` is appended; generation stops on length or an emitted `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedContext {
    pub ids: Vec<u32>,
    pub target_span: TargetSpan,
}

impl PackedContext {
    /// The prompt prefix for generation: everything before the target.
    pub fn prompt(&self) -> &[u32] {
        &self.ids[..self.target_span.start]
    }
}

/// Packs a sample into one id sequence. `with_history = false` ablates the
/// history structurally, producing the exact layout of an empty-history
/// sample, so the two forward passes of an effect measurement differ only in
/// the presence of the history segment.
pub fn pack_context(
    sample: &Sample,
    with_history: bool,
    vocab_size: usize,
    max_len: usize,
) -> Result<PackedContext> {
    if sample.query.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "sample {:?} has an empty query",
            sample.user_id
        )));
    }
    if sample.target.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "sample {:?} has an empty target",
            sample.user_id
        )));
    }
    let mut ids = vec![BOS];
    if with_history && sample.has_history() {
        for h in &sample.history {
            ids.extend_from_slice(h);
            ids.push(SEP);
        }
    } else {
        ids.push(SEP);
    }
    ids.extend_from_slice(&sample.query);
    ids.push(SEP);
    let start = ids.len();
    ids.extend_from_slice(&sample.target);
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab_size,
        });
    }
    if ids.len() > max_len {
        return Err(Error::ContextOverflow {
            user_id: sample.user_id.clone(),
            got: ids.len(),
            max: max_len,
        });
    }
    Ok(PackedContext {
        ids,
        target_span: TargetSpan {
            start,
            len: sample.target.len(),
        },
    })
}

/// Configuration for the synthetic personalization corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub pref_lexicon_size: usize,
    pub shared_lexicon_size: usize,
    pub samples_per_user: usize,
    pub pref_injection_prob: f64,
    /// Maximum history sentences per user; each sample uses a 1..=this
    /// prefix of the user's sentences so target positions vary.
    pub history_len: usize,
    pub target_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 20,
            pref_lexicon_size: 5,
            shared_lexicon_size: 20,
            samples_per_user: 3,
            pref_injection_prob: 0.8,
            history_len: 2,
            target_len: 10,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_users", self.n_users),
            ("pref_lexicon_size", self.pref_lexicon_size),
            ("shared_lexicon_size", self.shared_lexicon_size),
            ("samples_per_user", self.samples_per_user),
            ("history_len", self.history_len),
            ("target_len", self.target_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.pref_injection_prob) {
            return Err(Error::InvalidConfig(format!(
                "pref_injection_prob must lie in [0, 1], got {}",
                self.pref_injection_prob
            )));
        }
        let topics = n_topics(self.n_users);
        let need = topics + self.shared_lexicon_size + self.n_users * self.pref_lexicon_size;
        if need > WORD_BUDGET {
            return Err(Error::InvalidConfig(format!(
                "lexicon sizes need {need} distinct words, exceeding the budget of {WORD_BUDGET}"
            )));
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "re", "mi", "to", "ka", "lu", "se", "no", "vi", "da", "po", "fen", "gri", "sol", "tam",
    "wex", "hul", "zor", "pli", "qua",
];
const WORD_BUDGET: usize = SYLLABLES.len() * SYLLABLES.len() * SYLLABLES.len();

fn synth_word(i: usize) -> String {
    debug_assert!(i < WORD_BUDGET);
    let n = SYLLABLES.len();
    format!(
        "{}{}{}",
        SYLLABLES[(i / (n * n)) % n],
        SYLLABLES[(i / n) % n],
        SYLLABLES[i % n]
    )
}

/// Topics are shared across roughly four users each, so a query alone never
/// identifies the user; only the history carries user-specific signal.
fn n_topics(n_users: usize) -> usize {
    (n_users.div_ceil(4)).max(2)
}

/// Fraction of history tokens drawn from the user's preference lexicon.
const HISTORY_PREF_RATE: f64 = 0.75;

/// Deterministic rule for non-preference target slots: the shared word is a
/// fixed function of (topic, slot), mimicking templated text that a model
/// can predict from the query alone, with no history required.
fn shared_slot_word<'a>(shared: &'a [String], topic_idx: usize, slot: usize) -> &'a str {
    &shared[(7 * topic_idx + 3 * slot) % shared.len()]
}

/// Generates the synthetic corpus. Each user owns a disjoint preference
/// lexicon; their history sentences are mostly preference words; each target
/// slot draws from the preference lexicon with probability
/// `pref_injection_prob` (mask 1) and otherwise follows the deterministic
/// topic-templated shared rule (mask 0).
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<RawSample>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let topics_n = n_topics(cfg.n_users);
    let mut pool: Vec<usize> = (0..WORD_BUDGET).collect();
    pool.shuffle(&mut rng);
    let mut next = 0usize;
    let take = |count: usize, next: &mut usize| -> Vec<String> {
        let words = pool[*next..*next + count].iter().map(|&i| synth_word(i)).collect();
        *next += count;
        words
    };
    let topics = take(topics_n, &mut next);
    let shared = take(cfg.shared_lexicon_size, &mut next);
    let prefs: Vec<Vec<String>> = (0..cfg.n_users)
        .map(|_| take(cfg.pref_lexicon_size, &mut next))
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_users * cfg.samples_per_user);
    for u in 0..cfg.n_users {
        let topic_idx = u % topics_n;
        let user_id = format!("user{u:03}");
        let query = format!("review of {}", topics[topic_idx]);
        let pref = &prefs[u];

        let sentences: Vec<String> = (0..cfg.history_len)
            .map(|_| {
                let len = rng.gen_range(5..=7);
                let words: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(HISTORY_PREF_RATE) {
                            pref[rng.gen_range(0..pref.len())].as_str()
                        } else {
                            shared[rng.gen_range(0..shared.len())].as_str()
                        }
                    })
                    .collect();
                words.join(" ")
            })
            .collect();

        for s in 0..cfg.samples_per_user {
            // Vary how much of the user's history each sample carries so the
            // model sees targets at many absolute positions.
            let hist_count = 1 + (s + u) % cfg.history_len.min(sentences.len());
            let history: Vec<String> = sentences[..hist_count].to_vec();

            let mut words = Vec::with_capacity(cfg.target_len);
            let mut mask = Vec::with_capacity(cfg.target_len);
            for t in 0..cfg.target_len {
                if rng.gen_bool(cfg.pref_injection_prob) {
                    words.push(pref[rng.gen_range(0..pref.len())].clone());
                    mask.push(1u8);
                } else {
                    words.push(shared_slot_word(&shared, topic_idx, t).to_string());
                    mask.push(0u8);
                }
            }
            samples.push(RawSample {
                user_id: user_id.clone(),
                query: query.clone(),
                history,
                target: words.join(" "),
                pref_mask: Some(mask),
            });
        }
    }
    Ok(samples)
}

/// Hex sha256 over the canonical serialization of a tokenized corpus; keys
/// the token-weight cache to the exact data it was computed from.
pub fn corpus_sha256(samples: &[Sample]) -> String {
    let json = serde_json::to_string(samples).expect("sample serialization cannot fail");
    sha256_hex(json.as_bytes())
}

/// Deterministic 90/10 user-level split. Users are ordered by the hash of
/// their id (ties by id) and the first tenth (rounded up, at least one when
/// possible) become the held-out set; returns (train, heldout) sample
/// indices. Every sample of a user lands on the same side.
pub fn split_users(samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let mut users: Vec<&str> = Vec::new();
    for s in samples {
        if !users.contains(&s.user_id.as_str()) {
            users.push(&s.user_id);
        }
    }
    users.sort_by_key(|u| (hash64(u.as_bytes()), u.to_string()));
    let n = users.len();
    let heldout_users = if n <= 1 { 0 } else { (n.div_ceil(10)).min(n - 1) };
    let heldout_set: Vec<&str> = users[..heldout_users].to_vec();

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if heldout_set.contains(&s.user_id.as_str()) {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    (train, heldout)
}
