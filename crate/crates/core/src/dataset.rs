//! Labeled setup records, cluster folds, splits, vocabulary and balanced
//! mini-batch streams.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::labeler::{self, SampleLabel, SrvLabel};
use crate::optics::{self, Simulator};
use crate::rng::{self, Stream};

/// Leading Schmidt rank at which samples move to the extrapolation set.
pub const DEFAULT_EXTRAPOLATION_MIN: u32 = 9;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "ent")]
    Entanglement,
    Srv,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Entanglement => "ent",
            Task::Srv => "srv",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ent" | "entanglement" => Ok(Task::Entanglement),
            "srv" => Ok(Task::Srv),
            _ => Err(Error::Parse(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Extrapolation,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("y_e must be 0 or 1, got {other}"))),
        }
    }
}

/// A setup with its targets, before any split is assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSetup {
    pub setup: String,
    pub label: SampleLabel,
}

/// One line of the JSONL dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub setup: String,
    #[serde(with = "bool_as_int")]
    pub y_e: bool,
    pub srv: Option<SrvLabel>,
    pub fold_rank: u32,
    pub split: Split,
    pub fold: Option<u32>,
}

impl Record {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.setup.split_whitespace()
    }
}

/// Simulates and labels `count` unique random setups.
///
/// Candidates are drawn from per-index seeds in parallel chunks and
/// deduplicated in index order, so the output depends only on `seed`.
pub fn generate(count: usize, seed: u64, sim: &Simulator, l_shift: i32, mode: ExecMode) -> Vec<LabeledSetup> {
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    let mut next_index = 0u64;
    while out.len() < count {
        let missing = count - out.len();
        let chunk = missing + missing / 8 + 16;
        let start = next_index;
        let batch = exec::map_range(mode, 0..chunk, |i| {
            let setup = optics::random_setup(
                rng::mix_seed(seed, start + i as u64),
                (optics::MIN_SETUP_LEN, optics::MAX_SETUP_LEN),
                l_shift,
            );
            let text = setup.to_string();
            (text, setup)
        });
        next_index += chunk as u64;
        let fresh: Vec<_> = batch
            .into_iter()
            .filter(|(text, _)| seen.insert(text.clone()))
            .take(missing)
            .collect();
        let labeled = exec::map_slice(mode, &fresh, |(text, setup)| LabeledSetup {
            setup: text.clone(),
            label: labeler::label(&sim.run_setup(setup)),
        });
        out.extend(labeled);
    }
    out
}

/// Keeps the first occurrence of each setup string.
pub fn dedup(items: Vec<LabeledSetup>) -> Vec<LabeledSetup> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|l| seen.insert(l.setup.clone())).collect()
}

/// Moves `fold_rank >= extrapolation_min` to the extrapolation set and splits
/// the rest iid into train/test. Folds are left unassigned.
pub fn assign_split(items: Vec<LabeledSetup>, test_fraction: f64, seed: u64, extrapolation_min: u32) -> Vec<Record> {
    let mut rng = rng::stream(seed, Stream::Split);
    items
        .into_iter()
        .map(|item| {
            // draw for every record so the stream does not depend on labels
            let u: f64 = rng.gen();
            let split = if item.label.fold_rank >= extrapolation_min {
                Split::Extrapolation
            } else if u < test_fraction {
                Split::Test
            } else {
                Split::Train
            };
            Record {
                setup: item.setup,
                y_e: item.label.y_e,
                srv: item.label.srv,
                fold_rank: item.label.fold_rank,
                split,
                fold: None,
            }
        })
        .collect()
}

/// Assigns cluster folds to train records: ranks 0 and 1 are pooled and
/// split at random into folds 0/1, every other rank is its own fold.
pub fn assign_folds(records: &mut [Record], seed: u64, extrapolation_min: u32) -> Result<()> {
    let mut rng = rng::stream(seed, Stream::Folds);
    for r in records.iter_mut() {
        if r.split != Split::Train {
            r.fold = None;
            continue;
        }
        if r.fold_rank >= extrapolation_min {
            return Err(Error::Structural(format!(
                "train record with fold_rank {} >= {extrapolation_min}",
                r.fold_rank
            )));
        }
        r.fold = Some(if r.fold_rank < 2 {
            rng.gen_range(0..2)
        } else {
            r.fold_rank
        });
    }
    Ok(())
}

/// Re-derives split and fold for already labeled records.
pub fn resplit(records: Vec<Record>, test_fraction: f64, seed: u64, extrapolation_min: u32) -> Result<Vec<Record>> {
    let items = records
        .into_iter()
        .map(|r| LabeledSetup {
            setup: r.setup,
            label: SampleLabel {
                y_e: r.y_e,
                srv: r.srv,
                fold_rank: r.fold_rank,
            },
        })
        .collect();
    let mut out = assign_split(items, test_fraction, seed, extrapolation_min);
    assign_folds(&mut out, seed, extrapolation_min)?;
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(f), records)
}

/// Per leading-rank counts: `fold_rank -> (positives, negatives)`.
pub fn rank_counts<'a, I: IntoIterator<Item = &'a Record>>(records: I) -> BTreeMap<u32, (usize, usize)> {
    let mut out: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.fold_rank).or_default();
        if r.y_e {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    out
}

pub fn stats_csv(records: &[Record]) -> String {
    let mut s = String::from("fold_rank,positives,negatives\n");
    for (rank, (p, n)) in rank_counts(records) {
        s.push_str(&format!("{rank},{p},{n}\n"));
    }
    s
}

/// Token table; index 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<pad>";

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all = vec![PAD_TOKEN.to_string()];
        all.extend(tokens);
        let mut index = std::collections::HashMap::new();
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// The full toolbox vocabulary for holograms up to `l_shift`.
    pub fn toolbox(l_shift: i32) -> Self {
        Self::from_tokens(optics::toolbox(l_shift).iter().map(|e| e.to_string())).expect("toolbox tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode<'a, I: IntoIterator<Item = &'a str>>(&self, tokens: I) -> Result<Vec<usize>> {
        tokens
            .into_iter()
            .map(|t| {
                self.index_of(t)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token '{t}'")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices
            .iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Vocabulary(format!("index {i} out of range")))
            })
            .collect()
    }

    /// FNV-1a over the newline-joined token list.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Whether a record can serve as a training target for `task`.
pub fn usable_for(task: Task, r: &Record) -> bool {
    match task {
        Task::Entanglement => true,
        Task::Srv => r.srv.is_some() && r.fold_rank >= 2,
    }
}

/// Balancing class of a record: the entanglement flag, or the leading rank.
fn class_of(task: Task, r: &Record) -> u32 {
    match task {
        Task::Entanglement => r.y_e as u32,
        Task::Srv => r.fold_rank,
    }
}

struct ClassPool {
    members: Vec<usize>,
    cursor: usize,
}

/// Endless stream of class-balanced mini-batches (indices into the record
/// slice it was built from).
///
/// Each class cycles through a reshuffled permutation of its members, so
/// majority classes are drawn without replacement per pass and minority
/// classes repeat. When `batch_size` is not a multiple of the number of
/// classes, the leftover slots rotate over the classes from batch to batch.
pub struct BatchStream {
    pools: Vec<ClassPool>,
    classes: Vec<u32>,
    batch_size: usize,
    rotation: usize,
    rng: ChaCha8Rng,
}

pub fn balanced_batches(records: &[Record], task: Task, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Configuration("batch size must be positive".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    if task == Task::Entanglement {
        by_class.insert(0, Vec::new());
        by_class.insert(1, Vec::new());
        if !batch_size.is_multiple_of(2) {
            return Err(Error::Configuration(format!(
                "entanglement batches need an even size, got {batch_size}"
            )));
        }
    }
    for (i, r) in records.iter().enumerate() {
        if usable_for(task, r) {
            by_class.entry(class_of(task, r)).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(Error::Configuration(format!(
            "no records usable for task {}",
            task.as_str()
        )));
    }
    if let Some((c, _)) = by_class.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::Configuration(format!("class {c} has no records")));
    }
    if batch_size < by_class.len() {
        return Err(Error::Configuration(format!(
            "batch size {batch_size} smaller than {} classes",
            by_class.len()
        )));
    }
    let mut rng = rng::stream(seed, Stream::Batching);
    let mut classes = Vec::new();
    let mut pools = Vec::new();
    for (c, mut members) in by_class {
        members.shuffle(&mut rng);
        classes.push(c);
        pools.push(ClassPool { members, cursor: 0 });
    }
    Ok(BatchStream {
        pools,
        classes,
        batch_size,
        rotation: 0,
        rng,
    })
}

impl BatchStream {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let k = self.pools.len();
        let base = self.batch_size / k;
        let extra = self.batch_size % k;
        let mut batch = Vec::with_capacity(self.batch_size);
        for ci in 0..k {
            let bonus = ((ci + k - self.rotation % k) % k) < extra;
            let take = base + bonus as usize;
            let pool = &mut self.pools[ci];
            for _ in 0..take {
                if pool.cursor == pool.members.len() {
                    pool.members.shuffle(&mut self.rng);
                    pool.cursor = 0;
                }
                batch.push(pool.members[pool.cursor]);
                pool.cursor += 1;
            }
        }
        self.rotation = (self.rotation + extra) % k;
        batch
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Deterministically splits `indices` into (fit, holdout) with roughly
/// `fraction` of them held out.
pub fn holdout(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, Stream::Validation);
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for &i in indices {
        if rng.gen::<f64>() < fraction {
            held.push(i);
        } else {
            fit.push(i);
        }
    }
    (fit, held)
}
