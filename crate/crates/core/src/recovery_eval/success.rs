use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::Scored;
use super::simulate::{parse_command_lines, simulate};
use crate::error::{Error, Result};
use crate::seq2seq_model::Seq2SeqModel;
use crate::synth_corpus::{Automaton, Group, SamplePair};

/// Top hypothesis for one test sample and its replay outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub group: Group,
    pub failure: u32,
    pub component: String,
    pub tokens: Vec<String>,
    pub reliability: f64,
    pub truncated: bool,
    pub final_state: u32,
    pub accepted: bool,
    pub exact_match: bool,
}

impl Scored for SampleRecord {
    fn reliability(&self) -> f64 {
        self.reliability
    }
    fn accepted(&self) -> bool {
        self.accepted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    /// `None` for the all-groups total.
    pub group: Option<Group>,
    pub total: usize,
    pub accepted: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub per_group: Vec<GroupRate>,
    pub overall: GroupRate,
}

fn automaton_for(automata: &[Automaton], g: Group) -> Result<&Automaton> {
    automata
        .iter()
        .find(|a| a.group == g)
        .ok_or_else(|| Error::Config(format!("no automaton for group {g}")))
}

/// Replays `tokens` on the automaton of `group`; returns the final state.
pub fn replay(automata: &[Automaton], group: Group, component: &str, tokens: &[String]) -> Result<(u32, bool)> {
    let aut = automaton_for(automata, group)?;
    let lines = parse_command_lines(tokens)?;
    let r = simulate(aut, component, &lines);
    Ok((r.final_state, r.accepted))
}

/// Beam-decodes every test source, keeps the top hypothesis and replays it
/// on the sample's automaton. Records come back in input order.
pub fn decode_and_replay(
    model: &Seq2SeqModel,
    test: &[SamplePair],
    automata: &[Automaton],
    beam: usize,
    max_len: usize,
) -> Result<Vec<SampleRecord>> {
    for p in test {
        automaton_for(automata, p.group)?;
    }
    test.par_iter()
        .enumerate()
        .map(|(index, p)| {
            let hyps = model.beam_decode(&p.log_sequence(), beam, max_len)?;
            let top = hyps.into_iter().next().ok_or(Error::Empty("beam output"))?;
            let component = p.component();
            let (final_state, accepted) = replay(automata, p.group, &component, &top.tokens)?;
            Ok(SampleRecord {
                index,
                group: p.group,
                failure: p.failure,
                exact_match: top.tokens == p.target,
                component,
                tokens: top.tokens,
                reliability: top.reliability,
                truncated: top.truncated,
                final_state,
                accepted,
            })
        })
        .collect()
}

/// Accepted fraction per group present in `records`, plus the total.
pub fn success_rates(records: &[SampleRecord]) -> Result<SuccessReport> {
    if records.is_empty() {
        return Err(Error::Empty("sample records"));
    }
    let rate = |group: Option<Group>, it: &mut dyn Iterator<Item = &SampleRecord>| {
        let (mut total, mut accepted) = (0, 0);
        for r in it {
            total += 1;
            accepted += usize::from(r.accepted);
        }
        GroupRate {
            group,
            total,
            accepted,
            rate: accepted as f64 / total as f64,
        }
    };
    let per_group = Group::ALL
        .into_iter()
        .filter(|g| records.iter().any(|r| r.group == *g))
        .map(|g| rate(Some(g), &mut records.iter().filter(|r| r.group == g)))
        .collect();
    Ok(SuccessReport {
        per_group,
        overall: rate(None, &mut records.iter()),
    })
}

pub fn success_rate(
    model: &Seq2SeqModel,
    test: &[SamplePair],
    automata: &[Automaton],
    beam: usize,
    max_len: usize,
) -> Result<(SuccessReport, Vec<SampleRecord>)> {
    let records = decode_and_replay(model, test, automata, beam, max_len)?;
    Ok((success_rates(&records)?, records))
}

impl SuccessReport {
    pub fn rate_of(&self, g: Group) -> Option<f64> {
        self.per_group.iter().find(|r| r.group == Some(g)).map(|r| r.rate)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("success report", e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("sample record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?);
    }
    Ok(out)
}
