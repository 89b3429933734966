use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::automaton::{Automaton, CommandLine, ENT, EOC};
use super::{FailureSpec, GenParams};
use crate::error::{Error, Result};
use crate::template_store::{LogSequence, SourceMeta, TemplateId};

/// Incorrect lines that only inspect the system.
pub const STATUS_CHECKS: [&str; 2] = ["show status", "check log"];
pub const MAX_INCORRECT: usize = 5;
pub const MAX_ROLLBACKS: usize = 2;
pub const TYPO_ATTEMPTS: usize = 20;
const TYPO_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-";

/// Perturbed copy of the group base sequence for one sample.
pub fn gen_log_sequence<R: Rng + ?Sized>(spec: &FailureSpec, params: &GenParams, rng: &mut R) -> LogSequence {
    let mut ids = spec.base_log_ids.clone();
    for &d in &spec.distinct_log_ids {
        let pos = rng.random_range(0..=ids.len());
        ids.insert(pos, d);
    }
    let base_len = spec.base_log_ids.len();
    for _ in 0..base_len {
        if rng.random_bool(params.noise_insert_rate) {
            let noise = TemplateId(rng.random_range(1..=params.log_vocab_size));
            let pos = rng.random_range(0..=ids.len());
            ids.insert(pos, noise);
        }
    }
    for i in 1..ids.len() {
        if rng.random_bool(params.swap_prob) {
            ids.swap(i - 1, i);
        }
    }
    LogSequence {
        ids,
        source_meta: Some(SourceMeta {
            group: spec.group.as_char(),
            failure: spec.index,
        }),
    }
}

/// Transition indices of one recovery walk: a uniformly chosen simple
/// accepting path, with rollback edges taken with probability
/// `rollback_prob` wherever one leaves the current state.
pub fn sample_path<R: Rng + ?Sized>(aut: &Automaton, rollback_prob: f64, rng: &mut R) -> Vec<usize> {
    let paths = aut.simple_accepting_paths();
    let path = paths.choose(rng).expect("validated automaton has an accepting path");
    let mut walk = Vec::with_capacity(path.len());
    let mut rollbacks = 0;
    let mut i = 0;
    while i < path.len() {
        let t = path[i];
        walk.push(t);
        i += 1;
        if rollbacks >= MAX_ROLLBACKS || i == path.len() {
            continue;
        }
        let here = aut.transitions[t].to;
        let back: Vec<usize> = aut
            .outgoing(here)
            .filter(|(_, tr)| tr.rollback)
            .map(|(k, _)| k)
            .collect();
        if back.is_empty() || !rng.random_bool(rollback_prob) {
            continue;
        }
        let rb = *back.choose(rng).unwrap();
        let target = aut.transitions[rb].to;
        // Resume at the step of the path that leaves the rolled-back state.
        let resume = path[..i].iter().position(|&k| aut.transitions[k].from == target);
        if let Some(j) = resume {
            walk.push(rb);
            rollbacks += 1;
            i = j;
        }
    }
    walk
}

/// Renders a walk with fixed variant choices.
pub fn render_commands(aut: &Automaton, walk: &[usize], variants: &[usize], component: &str) -> Vec<CommandLine> {
    walk.iter()
        .zip(variants)
        .map(|(&t, &v)| aut.transitions[t].commands[v].substitute(component))
        .collect()
}

/// Joins lines with `<ENT>` and terminates with `<EOC>`.
pub fn flatten(lines: &[CommandLine]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        if i > 0 {
            out.push(ENT.to_string());
        }
        out.extend(l.words().iter().cloned());
    }
    out.push(EOC.to_string());
    out
}

/// Operator command lines for one sample, before flattening.
pub fn gen_command_lines<R: Rng + ?Sized>(
    aut: &Automaton,
    spec: &FailureSpec,
    params: &GenParams,
    rng: &mut R,
) -> Vec<CommandLine> {
    let walk = sample_path(aut, params.rollback_prob, rng);
    let variants: Vec<usize> = walk
        .iter()
        .map(|&t| rng.random_range(0..aut.transitions[t].commands.len()))
        .collect();
    let mut lines = render_commands(aut, &walk, &variants, &spec.component);

    let k = if params.incorrect_mean > 0.0 {
        let p = Poisson::new(params.incorrect_mean).expect("positive mean");
        (p.sample(rng) as usize).min(MAX_INCORRECT)
    } else {
        0
    };
    let correct = aut.correct_commands(&spec.component);
    let mut reject = None;
    for _ in 0..k {
        let pos = rng.random_range(0..=lines.len());
        let bad = if rng.random_bool(0.5) {
            status_check(rng)
        } else {
            let (_, src) = correct.choose(rng).unwrap();
            let reject = reject.get_or_insert_with(|| aut.correct_set_any_component());
            mutate_typo_excluding(src, reject, rng).unwrap_or_else(|_| status_check(rng))
        };
        lines.insert(pos, bad);
    }
    lines
}

/// Flattened target tokens for one sample.
pub fn gen_command_sequence<R: Rng + ?Sized>(
    aut: &Automaton,
    spec: &FailureSpec,
    params: &GenParams,
    rng: &mut R,
) -> Vec<String> {
    flatten(&gen_command_lines(aut, spec, params, rng))
}

fn status_check<R: Rng + ?Sized>(rng: &mut R) -> CommandLine {
    STATUS_CHECKS.choose(rng).unwrap().parse().unwrap()
}

/// One-character typo that is not a correct command of `aut` under any
/// component.
pub fn mutate_typo<R: Rng + ?Sized>(line: &CommandLine, aut: &Automaton, rng: &mut R) -> Result<CommandLine> {
    mutate_typo_excluding(line, &aut.correct_set_any_component(), rng)
}

/// As [`mutate_typo`], rejecting any candidate in `correct`.
pub fn mutate_typo_excluding<R: Rng + ?Sized>(
    line: &CommandLine,
    correct: &HashSet<CommandLine>,
    rng: &mut R,
) -> Result<CommandLine> {
    for _ in 0..TYPO_ATTEMPTS {
        let mut words = line.words().to_vec();
        let wi = rng.random_range(0..words.len());
        let mut chars: Vec<char> = words[wi].chars().collect();
        let ci = rng.random_range(0..chars.len());
        match rng.random_range(0..3) {
            0 => {
                let old = chars[ci];
                let new = loop {
                    let c = *TYPO_ALPHABET.choose(rng).unwrap() as char;
                    if c != old {
                        break c;
                    }
                };
                chars[ci] = new;
            }
            1 if chars.len() > 1 => {
                chars.remove(ci);
            }
            _ => {
                chars.insert(ci, chars[ci]);
            }
        }
        words[wi] = chars.into_iter().collect();
        let Ok(cand) = CommandLine::new(words) else { continue };
        if cand != *line && !correct.contains(&cand) {
            return Ok(cand);
        }
    }
    Err(Error::DegenerateAlphabet {
        line: line.to_string(),
        attempts: TYPO_ATTEMPTS,
    })
}
