//! Synthetic benchmark: five failure groups, each with ten failures, a
//! recovery automaton per group, perturbed log sequences and noisy operator
//! command sequences.

mod automaton;
mod generate;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use automaton::{
    build_group_automata, components, Automaton, CommandLine, Transition, ENT, EOC, PLACEHOLDER,
    STATE_FAILED, STATE_RECOVERED,
};
pub use generate::{
    flatten, gen_command_lines, gen_command_sequence, gen_log_sequence, mutate_typo, mutate_typo_excluding, render_commands,
    sample_path, MAX_INCORRECT, MAX_ROLLBACKS, STATUS_CHECKS, TYPO_ATTEMPTS,
};

use crate::error::{Error, Result};
use crate::template_store::{LogSequence, SourceMeta, TemplateId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    A,
    B,
    C,
    D,
    E,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::A, Group::B, Group::C, Group::D, Group::E];

    pub fn as_char(self) -> char {
        (b'A' + self.index() as u8) as char
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.as_char() == c.to_ascii_uppercase())
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut cs = s.chars();
        match (cs.next(), cs.next()) {
            (Some(c), None) => Group::from_char(c),
            _ => None,
        }
        .ok_or_else(|| serde::de::Error::custom(format!("unknown group {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub base_len: usize,
    pub noise_insert_rate: f64,
    pub swap_prob: f64,
    pub n_distinct: usize,
    pub incorrect_mean: f64,
    pub samples_per_failure: usize,
    pub log_vocab_size: u32,
    pub seed: u64,
    /// Probability of taking an available rollback edge.
    pub rollback_prob: f64,
    pub groups: Vec<Group>,
    pub failures_per_group: u32,
    pub test_per_failure: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            base_len: 150,
            noise_insert_rate: 0.30,
            swap_prob: 0.05,
            n_distinct: 3,
            incorrect_mean: 1.0,
            samples_per_failure: 90,
            log_vocab_size: 500,
            seed: 0,
            rollback_prob: 0.3,
            groups: Group::ALL.to_vec(),
            failures_per_group: 10,
            test_per_failure: 9,
        }
    }
}

fn out_of_range(field: &str, reason: impl Into<String>) -> Error {
    Error::OutOfRange {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise_insert_rate", self.noise_insert_rate),
            ("swap_prob", self.swap_prob),
            ("rollback_prob", self.rollback_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(out_of_range(name, format!("{v} is not in [0, 1]")));
            }
        }
        if !(self.incorrect_mean.is_finite() && self.incorrect_mean >= 0.0) {
            return Err(out_of_range("incorrect_mean", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("base_len", self.base_len),
            ("samples_per_failure", self.samples_per_failure),
            ("log_vocab_size", self.log_vocab_size as usize),
            ("failures_per_group", self.failures_per_group as usize),
        ] {
            if v < 1 {
                return Err(out_of_range(name, "must be at least 1"));
            }
        }
        if self.failures_per_group > 10 {
            return Err(out_of_range("failures_per_group", "at most 10 components exist"));
        }
        if self.groups.is_empty() {
            return Err(out_of_range("groups", "must name at least one group"));
        }
        Ok(())
    }
}

/// One failure type: its group, index 1..=10, the failed component and the
/// template IDs that only this failure emits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub group: Group,
    pub index: u32,
    pub component: String,
    pub distinct_log_ids: Vec<TemplateId>,
    pub base_log_ids: Vec<TemplateId>,
}

const STREAM_BASE: u64 = 1;
const STREAM_DISTINCT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for a (seed, purpose, group, failure, sample) tuple.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(s)
}

/// Failure specs for the configured groups. Bases and distinct IDs depend
/// only on the seed, vocabulary size, base length and `n_distinct`, so
/// corpora that differ in sample counts share the same failures.
pub fn build_failures(params: &GenParams) -> Result<Vec<FailureSpec>> {
    params.validate()?;
    let mut out = Vec::new();
    for &g in &params.groups {
        let gi = g.index() as u64;
        let mut rng = derive_rng(params.seed, &[STREAM_BASE, gi]);
        let base: Vec<TemplateId> = (0..params.base_len)
            .map(|_| TemplateId(rng.random_range(1..=params.log_vocab_size)))
            .collect();
        let in_base: BTreeSet<TemplateId> = base.iter().copied().collect();
        let mut pool: Vec<TemplateId> = (1..=params.log_vocab_size)
            .map(TemplateId)
            .filter(|t| !in_base.contains(t))
            .collect();
        let need = 10 * params.n_distinct;
        if pool.len() < need {
            return Err(out_of_range(
                "log_vocab_size",
                format!("{} IDs outside the group-{g} base, need {need} distinct IDs", pool.len()),
            ));
        }
        let mut rng = derive_rng(params.seed, &[STREAM_DISTINCT, gi]);
        pool.shuffle(&mut rng);
        for f in 1..=params.failures_per_group {
            let lo = (f as usize - 1) * params.n_distinct;
            out.push(FailureSpec {
                group: g,
                index: f,
                component: format!("cmp{f}"),
                distinct_log_ids: pool[lo..lo + params.n_distinct].to_vec(),
                base_log_ids: base.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub source: Vec<TemplateId>,
    pub target: Vec<String>,
    pub group: Group,
    pub failure: u32,
}

impl SamplePair {
    pub fn log_sequence(&self) -> LogSequence {
        LogSequence {
            ids: self.source.clone(),
            source_meta: Some(SourceMeta {
                group: self.group.as_char(),
                failure: self.failure,
            }),
        }
    }

    pub fn component(&self) -> String {
        format!("cmp{}", self.failure)
    }
}

fn gen_pair(aut: &Automaton, spec: &FailureSpec, params: &GenParams, rng: &mut ChaCha8Rng) -> SamplePair {
    let source = gen_log_sequence(spec, params, rng).ids;
    let target = gen_command_sequence(aut, spec, params, rng);
    SamplePair {
        source,
        target,
        group: spec.group,
        failure: spec.index,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<SamplePair>,
    pub dev: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const AUTOMATA_FILE: &str = "automata.json";

/// Full corpus: per failure, `samples_per_failure` pairs split 90:10 into
/// train and dev (dev gets `samples_per_failure / 10`), plus
/// `test_per_failure` test pairs from a separate stream.
pub fn gen_corpus(params: &GenParams) -> Result<Corpus> {
    let specs = build_failures(params)?;
    let auts = build_group_automata();
    let per_failure: Vec<(Vec<SamplePair>, Vec<SamplePair>, Vec<SamplePair>)> = specs
        .par_iter()
        .map(|spec| {
            let aut = &auts[spec.group.index()];
            let key = |stream: u64, i: usize| {
                derive_rng(params.seed, &[stream, spec.group.index() as u64, spec.index as u64, i as u64])
            };
            let mut pairs: Vec<SamplePair> = (0..params.samples_per_failure)
                .map(|i| gen_pair(aut, spec, params, &mut key(STREAM_TRAIN, i)))
                .collect();
            let n_dev = params.samples_per_failure / 10;
            let dev = pairs.split_off(pairs.len() - n_dev);
            let test = (0..params.test_per_failure)
                .map(|i| gen_pair(aut, spec, params, &mut key(STREAM_TEST, i)))
                .collect();
            (pairs, dev, test)
        })
        .collect();
    let mut corpus = Corpus::default();
    for (tr, dv, te) in per_failure {
        corpus.train.extend(tr);
        corpus.dev.extend(dv);
        corpus.test.extend(te);
    }
    Ok(corpus)
}

pub fn write_jsonl(path: &Path, pairs: &[SamplePair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SamplePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_automata(path: &Path, auts: &[Automaton]) -> Result<()> {
    let json = serde_json::to_string_pretty(auts).map_err(|e| Error::json("automata", e))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_automata(path: &Path) -> Result<Vec<Automaton>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let auts: Vec<Automaton> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    for a in &auts {
        a.validate()?;
    }
    Ok(auts)
}

impl Corpus {
    /// Writes the three splits and the automata document into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(DEV_FILE), &self.dev)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        write_automata(&dir.join(AUTOMATA_FILE), &build_group_automata())
    }

    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        Ok(Corpus {
            train: read_jsonl(&dir.join(TRAIN_FILE))?,
            dev: read_jsonl(&dir.join(DEV_FILE))?,
            test: read_jsonl(&dir.join(TEST_FILE))?,
        })
    }
}
