//! Command set and lexicon handling: parsing, phone expansion, emission-state
//! expansion, phone-level edit distance, and confusing-set construction
//! (pronunciation-similarity, random, and hybrid sampling).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Word → phone-sequence map with a single pronunciation per word.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    /// Parses `word<TAB>phone phone ...` lines. `#` starts a comment; blank
    /// lines are ignored. A repeated word is an error: command-to-phone
    /// expansion must stay a function.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (word, phones_str) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected 'word<TAB>phones', got '{line}'"),
            })?;
            let word = word.trim();
            let phones: Vec<String> = phones_str
                .split_whitespace()
                .map(|p| p.to_string())
                .collect();
            if word.is_empty() || phones.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty word or empty pronunciation".to_string(),
                });
            }
            if entries.contains_key(word) {
                return Err(Error::DuplicateWord {
                    word: word.to_string(),
                    line: line_no,
                });
            }
            entries.insert(word.to_string(), phones);
        }
        Ok(Lexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    /// All distinct phones in the lexicon, sorted. This ordering defines the
    /// emission-state id space, so it must not depend on entry order.
    pub fn phone_inventory(&self) -> Vec<String> {
        let mut phones: Vec<String> = self
            .entries
            .values()
            .flat_map(|p| p.iter().cloned())
            .collect();
        phones.sort();
        phones.dedup();
        phones
    }
}

/// Parses a command list: one command per line, words space-separated,
/// `#` comments. Returns the word sequences in file order.
pub fn parse_commands(text: &str) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        out.push(line.split_whitespace().map(|w| w.to_string()).collect());
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

/// One command: its word text, phone expansion (as indices into the phone
/// inventory) and emission-state expansion (each phone split into
/// `states_per_phone` consecutive state ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub id: usize,
    pub text: Vec<String>,
    pub phones: Vec<usize>,
    pub states: Vec<usize>,
}

impl Command {
    pub fn text_joined(&self) -> String {
        self.text.join(" ")
    }
}

/// The closed world the discriminative loss separates: all commands, the
/// phone inventory, and the per-phone state count.
///
/// Emission-state ids are `phone_index * states_per_phone + k` for
/// `k < states_per_phone`; the single blank id comes last and equals
/// `num_states()`, i.e. output unit count is `num_states() + 1`.
#[derive(Debug, Clone)]
pub struct CommandSet {
    pub commands: Vec<Command>,
    pub phone_inventory: Vec<String>,
    pub states_per_phone: usize,
}

pub const DEFAULT_STATES_PER_PHONE: usize = 5;

impl CommandSet {
    /// Expands every command text through the lexicon. Command texts must be
    /// unique; every word must be in the lexicon.
    pub fn build(
        command_texts: &[Vec<String>],
        lexicon: &Lexicon,
        states_per_phone: usize,
    ) -> Result<CommandSet> {
        if states_per_phone == 0 {
            return Err(Error::Config("states_per_phone must be >= 1".into()));
        }
        if command_texts.is_empty() {
            return Err(Error::Config("command set is empty".into()));
        }
        let phone_inventory = lexicon.phone_inventory();
        let phone_index: BTreeMap<&str, usize> = phone_inventory
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();

        let mut seen = BTreeMap::new();
        let mut commands = Vec::with_capacity(command_texts.len());
        for (id, text) in command_texts.iter().enumerate() {
            let joined = text.join(" ");
            if let Some(prev) = seen.insert(joined.clone(), id) {
                return Err(Error::Config(format!(
                    "duplicate command text '{joined}' (ids {prev} and {id})"
                )));
            }
            commands.push(expand_command(
                id,
                text,
                lexicon,
                &phone_index,
                states_per_phone,
            )?);
        }
        Ok(CommandSet {
            commands,
            phone_inventory,
            states_per_phone,
        })
    }

    /// Emission-state count excluding blank.
    pub fn num_states(&self) -> usize {
        self.phone_inventory.len() * self.states_per_phone
    }

    /// The reserved blank id (last output unit).
    pub fn blank_id(&self) -> usize {
        self.num_states()
    }

    /// Model output dimension: all emission states plus blank.
    pub fn num_output_units(&self) -> usize {
        self.num_states() + 1
    }

    pub fn max_command_states(&self) -> usize {
        self.commands.iter().map(|c| c.states.len()).max().unwrap_or(0)
    }

    /// Stable hash of the phone inventory and state expansion, used to detect
    /// mismatched lexicon/manifest/checkpoint combinations.
    pub fn inventory_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.states_per_phone.to_le_bytes());
        for phone in &self.phone_inventory {
            hasher.update(phone.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in &digest[..8] {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

fn expand_command(
    id: usize,
    text: &[String],
    lexicon: &Lexicon,
    phone_index: &BTreeMap<&str, usize>,
    states_per_phone: usize,
) -> Result<Command> {
    if text.is_empty() {
        return Err(Error::Config(format!("command {id} has no words")));
    }
    let mut phones = Vec::new();
    for word in text {
        let pron = lexicon
            .pronunciation(word)
            .ok_or_else(|| Error::Oov { word: word.clone() })?;
        for phone in pron {
            // Inventory is derived from the lexicon, so lookups cannot miss.
            phones.push(phone_index[phone.as_str()]);
        }
    }
    let mut states = Vec::with_capacity(phones.len() * states_per_phone);
    for &p in &phones {
        for k in 0..states_per_phone {
            states.push(p * states_per_phone + k);
        }
    }
    Ok(Command {
        id,
        text: text.to_vec(),
        phones,
        states,
    })
}

/// Minimal edit count (unit-cost insert/delete/substitute) between two
/// sequences. Symmetric; zero iff the sequences are equal.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut cur: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut prev_diag = cur[0];
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let tmp = cur[j + 1];
            let sub = prev_diag + usize::from(ca != cb);
            cur[j + 1] = sub.min(tmp + 1).min(cur[j] + 1);
            prev_diag = tmp;
        }
    }
    cur[b.len()]
}

/// Phone-level edit distance between two commands of a set.
pub fn phone_levenshtein(a: &Command, b: &Command) -> usize {
    levenshtein(&a.phones, &b.phones)
}

/// Confusing-set construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Pronunciation similarity: top-N nearest by phone edit distance,
    /// precomputed once before training.
    Pss,
    /// Uniform random sample of N non-targets, redrawn per example per step.
    Rss,
    /// Hybrid: i from the similarity pool, N-i from the full non-target pool.
    Hs,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "pss" => Ok(Strategy::Pss),
            "rss" => Ok(Strategy::Rss),
            "hs" => Ok(Strategy::Hs),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected pss, rss or hs)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Pss => write!(f, "pss"),
            Strategy::Rss => write!(f, "rss"),
            Strategy::Hs => write!(f, "hs"),
        }
    }
}

/// How confusing sets are drawn during sequence training.
#[derive(Debug, Clone)]
pub struct ConfusionSetConfig {
    pub strategy: Strategy,
    /// Confusers per target (N).
    pub n: usize,
    /// Stream index for RSS/HS draws.
    pub rng_stream: u64,
}

pub const DEFAULT_CONFUSERS: usize = 4;

fn check_n(command_set: &CommandSet, n: usize) -> Result<()> {
    let limit = command_set.commands.len().saturating_sub(1);
    if n == 0 || n > limit {
        return Err(Error::Config(format!(
            "confuser count n={n} out of range (1..={limit})"
        )));
    }
    Ok(())
}

/// Precomputed pronunciation-similarity table: for every target, the n
/// non-target commands nearest by phone edit distance, ascending by
/// (distance, command id). Deterministic for a given command set.
#[derive(Debug, Clone)]
pub struct PssTable {
    pub n: usize,
    /// `sets[target] = [(confuser id, distance)]`, length n, sorted.
    pub sets: Vec<Vec<(usize, usize)>>,
}

impl PssTable {
    pub fn confusers(&self, target: usize) -> Vec<usize> {
        self.sets[target].iter().map(|&(id, _)| id).collect()
    }
}

/// Builds the PSS table for every command.
pub fn build_pss_sets(command_set: &CommandSet, n: usize) -> Result<PssTable> {
    check_n(command_set, n)?;
    let cmds = &command_set.commands;
    let mut sets = Vec::with_capacity(cmds.len());
    for target in cmds {
        let mut dists: Vec<(usize, usize)> = cmds
            .iter()
            .filter(|c| c.id != target.id)
            .map(|c| (c.id, phone_levenshtein(target, c)))
            .collect();
        dists.sort_by_key(|&(id, d)| (d, id));
        dists.truncate(n);
        sets.push(dists);
    }
    Ok(PssTable { n, sets })
}

/// Uniform sample of `n` distinct non-target command ids, sorted ascending.
/// A fresh sample is drawn on every call.
pub fn sample_rss(
    command_set: &CommandSet,
    target: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check_n(command_set, n)?;
    let mut pool: Vec<usize> = (0..command_set.commands.len())
        .filter(|&id| id != target)
        .collect();
    partial_shuffle(&mut pool, n, rng);
    let mut picked: Vec<usize> = pool[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Hybrid sample: draw i uniformly from {0..=n}, take i ids from the PSS pool
/// and fill up to n distinct ids from the full non-target pool, rejecting
/// duplicates. Sorted ascending.
pub fn sample_hs(
    command_set: &CommandSet,
    target: usize,
    n: usize,
    pss_pool: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check_n(command_set, n)?;
    if pss_pool.len() < n {
        return Err(Error::Config(format!(
            "PSS pool for target {target} has {} entries, need at least {n}",
            pss_pool.len()
        )));
    }
    debug_assert!(!pss_pool.contains(&target));
    let i = rng.gen_range(0..=n);
    sample_hs_with_i(command_set, target, n, i, pss_pool, rng)
}

/// Deterministic part of the hybrid draw once i is fixed; split out so the
/// boundary cases i=0 and i=n are directly testable.
fn sample_hs_with_i(
    command_set: &CommandSet,
    target: usize,
    n: usize,
    i: usize,
    pss_pool: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut similar: Vec<usize> = pss_pool.to_vec();
    partial_shuffle(&mut similar, i, rng);
    let mut picked: Vec<usize> = similar[..i].to_vec();

    let full_pool: Vec<usize> = (0..command_set.commands.len())
        .filter(|&id| id != target)
        .collect();
    while picked.len() < n {
        let candidate = full_pool[rng.gen_range(0..full_pool.len())];
        if !picked.contains(&candidate) {
            picked.push(candidate);
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Draws the confusing set for `target` under `config`. PSS reads the
/// precomputed table; RSS/HS consume the caller's rng stream.
pub fn draw_confusers(
    command_set: &CommandSet,
    target: usize,
    config: &ConfusionSetConfig,
    pss: &PssTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match config.strategy {
        Strategy::Pss => Ok(pss.confusers(target)),
        Strategy::Rss => sample_rss(command_set, target, config.n, rng),
        Strategy::Hs => sample_hs(command_set, target, config.n, &pss.confusers(target), rng),
    }
}

/// First-n Fisher-Yates: after the call, `pool[..n]` is a uniform sample
/// without replacement.
fn partial_shuffle(pool: &mut [usize], n: usize, rng: &mut ChaCha8Rng) {
    debug_assert!(n <= pool.len());
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
}

/// Renders the PSS table in the inspection dump format:
/// one `target_id: confuser(dist),confuser(dist),...` line per command.
pub fn format_pss_dump(command_set: &CommandSet, table: &PssTable) -> String {
    let mut out = String::new();
    for cmd in &command_set.commands {
        let entries: Vec<String> = table.sets[cmd.id]
            .iter()
            .map(|(id, dist)| format!("{id}({dist})"))
            .collect();
        let _ = writeln!(out, "{}: {}", cmd.id, entries.join(","));
    }
    out
}
