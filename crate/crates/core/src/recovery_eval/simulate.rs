use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth_corpus::{Automaton, CommandLine, ENT, EOC};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub final_state: u32,
    pub accepted: bool,
    /// (line index, transition label) for each line that moved the state.
    pub transitions_taken: Vec<(usize, String)>,
    pub noop_lines: Vec<usize>,
}

fn is_eoc(tok: &str) -> bool {
    tok.eq_ignore_ascii_case(EOC)
}

/// Splits flattened command tokens into lines.
pub fn parse_command_lines<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<CommandLine>> {
    let mut toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if toks.last().is_some_and(|t| is_eoc(t)) {
        toks.pop();
    }
    if let Some(pos) = toks.iter().position(|t| is_eoc(t)) {
        return Err(Error::MalformedSequence(format!(
            "end-of-commands token at position {pos} of {}",
            tokens.len()
        )));
    }
    toks.split(|t| *t == ENT)
        .filter(|seg| !seg.is_empty())
        .map(|seg| CommandLine::new(seg.iter().map(|s| s.to_string()).collect()))
        .collect()
}

/// Replays `lines` on `aut` from state 0. Lines that match no outgoing
/// transition of the current state leave it unchanged.
pub fn simulate(aut: &Automaton, component: &str, lines: &[CommandLine]) -> SimulationResult {
    let mut state = aut.initial;
    let mut taken = Vec::new();
    let mut noop = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let hit = aut
            .outgoing(state)
            .find(|(_, t)| t.commands.iter().any(|c| c.substitute(component) == *line));
        match hit {
            Some((_, t)) => {
                taken.push((i, t.label.clone()));
                state = t.to;
            }
            None => noop.push(i),
        }
    }
    SimulationResult {
        final_state: state,
        accepted: state == aut.accept,
        transitions_taken: taken,
        noop_lines: noop,
    }
}
