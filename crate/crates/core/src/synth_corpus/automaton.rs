use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Group;
use crate::error::{Error, Result};

/// Stands for the failed component inside a command pattern.
pub const PLACEHOLDER: &str = "<FailedComponent>";
/// Enter key: separates command lines in a flattened target.
pub const ENT: &str = "<ENT>";
/// End of the whole command series.
pub const EOC: &str = "<EOC>";

pub const STATE_FAILED: u32 = 0;
pub const STATE_RECOVERED: u32 = 1;

/// Component names `cmp1` ..= `cmp10`.
pub fn components() -> impl Iterator<Item = String> {
    (1..=10).map(|i| format!("cmp{i}"))
}

/// One executed command, as whitespace-free words.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommandLine(Vec<String>);

impl CommandLine {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::MalformedSequence("empty command line".into()));
        }
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w == ENT || w == EOC {
                return Err(Error::MalformedSequence(format!("invalid command word {w:?}")));
            }
        }
        Ok(CommandLine(words))
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }

    /// Replaces every placeholder word with `component`.
    pub fn substitute(&self, component: &str) -> CommandLine {
        CommandLine(
            self.0
                .iter()
                .map(|w| if w == PLACEHOLDER { component.to_string() } else { w.clone() })
                .collect(),
        )
    }
}

impl fmt::Display for CommandLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl FromStr for CommandLine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CommandLine::new(s.split_whitespace().map(str::to_string).collect())
    }
}

impl Serialize for CommandLine {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CommandLine {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub label: String,
    pub from: u32,
    pub to: u32,
    /// Undoes earlier progress; never part of a simple accepting path.
    #[serde(default)]
    pub rollback: bool,
    pub commands: Vec<CommandLine>,
}

/// Finite-state recovery process. State 0 is the failed state, state 1 the
/// recovered (accepting) state; transitions fire only on correct commands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Automaton {
    pub group: Group,
    pub states: BTreeSet<u32>,
    pub initial: u32,
    pub accept: u32,
    pub transitions: Vec<Transition>,
}

impl Automaton {
    pub fn outgoing(&self, state: u32) -> impl Iterator<Item = (usize, &Transition)> {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.from == state)
    }

    pub fn transition_by_label(&self, label: &str) -> Option<usize> {
        self.transitions.iter().position(|t| t.label == label)
    }

    /// Every correct command with `component` substituted, tagged with its
    /// transition index.
    pub fn correct_commands(&self, component: &str) -> Vec<(usize, CommandLine)> {
        self.transitions
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.commands.iter().map(move |c| (i, c.substitute(component))))
            .collect()
    }

    /// Correct commands under every component substitution.
    pub fn correct_set_any_component(&self) -> HashSet<CommandLine> {
        components()
            .flat_map(|c| self.correct_commands(&c).into_iter().map(|(_, l)| l))
            .collect()
    }

    /// All simple paths from the initial to the accepting state, as lists of
    /// transition indices, in depth-first order.
    pub fn simple_accepting_paths(&self) -> Vec<Vec<usize>> {
        fn dfs(
            aut: &Automaton,
            state: u32,
            visited: &mut Vec<u32>,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if state == aut.accept {
                out.push(path.clone());
                return;
            }
            for (i, t) in aut.outgoing(state) {
                if visited.contains(&t.to) {
                    continue;
                }
                visited.push(t.to);
                path.push(i);
                dfs(aut, t.to, visited, path, out);
                path.pop();
                visited.pop();
            }
        }
        let mut out = Vec::new();
        dfs(self, self.initial, &mut vec![self.initial], &mut Vec::new(), &mut out);
        out
    }

    /// Fewest transitions from the initial to the accepting state.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = std::collections::HashMap::new();
        let mut queue = VecDeque::from([self.initial]);
        dist.insert(self.initial, 0usize);
        while let Some(s) = queue.pop_front() {
            if s == self.accept {
                return dist.get(&s).copied();
            }
            let d = dist[&s];
            for (_, t) in self.outgoing(s) {
                if !dist.contains_key(&t.to) {
                    dist.insert(t.to, d + 1);
                    queue.push_back(t.to);
                }
            }
        }
        None
    }

    /// Structural checks: required states, a path to acceptance, and no
    /// command shared by two transitions under any component substitution.
    pub fn validate(&self) -> Result<()> {
        if !self.states.contains(&STATE_FAILED) || !self.states.contains(&STATE_RECOVERED) {
            return Err(Error::Config(format!("automaton {}: missing state 0 or 1", self.group)));
        }
        for t in &self.transitions {
            if !self.states.contains(&t.from) || !self.states.contains(&t.to) || t.commands.is_empty() {
                return Err(Error::Config(format!(
                    "automaton {}: bad transition {}",
                    self.group, t.label
                )));
            }
        }
        if self.shortest_path_len().is_none() {
            return Err(Error::Config(format!("automaton {}: state 1 unreachable", self.group)));
        }
        for comp in components() {
            let mut seen = std::collections::HashMap::new();
            for (ti, line) in self.correct_commands(&comp) {
                if let Some(prev) = seen.insert(line.clone(), ti) {
                    if prev != ti {
                        return Err(Error::Config(format!(
                            "automaton {}: {line} is correct for two transitions",
                            self.group
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn cmds(lines: &[&str]) -> Vec<CommandLine> {
    lines
        .iter()
        .map(|l| l.parse().expect("built-in command"))
        .collect()
}

fn tr(label: &str, from: u32, to: u32, lines: &[&str]) -> Transition {
    Transition {
        label: label.to_string(),
        from,
        to,
        rollback: false,
        commands: cmds(lines),
    }
}

fn rollback(label: &str, from: u32, to: u32, lines: &[&str]) -> Transition {
    Transition {
        rollback: true,
        ..tr(label, from, to, lines)
    }
}

fn automaton(group: Group, transitions: Vec<Transition>) -> Automaton {
    let states = transitions.iter().flat_map(|t| [t.from, t.to]).collect();
    Automaton {
        group,
        states,
        initial: STATE_FAILED,
        accept: STATE_RECOVERED,
        transitions,
    }
}

/// The five fixed recovery automata, indexed in group order A..E.
pub fn build_group_automata() -> Vec<Automaton> {
    let fc = PLACEHOLDER;
    let f = |s: &str| s.replace("{}", fc);
    let a = automaton(
        Group::A,
        vec![tr(
            "a",
            0,
            1,
            &[&f("cmd3 restart {}"), &f("cmd3 -f restart {}"), &f("cmd3 reload {}")],
        )],
    );
    let b = automaton(
        Group::B,
        vec![
            tr("a", 0, 2, &[&f("cmd1 -a xxx {}"), &f("cmd1 -b xxx {}"), &f("cmd1 xxx {}")]),
            tr("b", 2, 1, &[&f("cmd2 start {}"), &f("cmd2 restart {}")]),
            tr("c", 0, 1, &["reboot", "shutdown -r now"]),
        ],
    );
    let c = automaton(
        Group::C,
        vec![
            tr("a", 0, 2, &[&f("cmd4 stop {}"), &f("cmd4 -f stop {}")]),
            tr(
                "b",
                2,
                3,
                &[&f("cmd5 clear cache {}"), &f("cmd5 -a clear cache {}"), &f("cmd5 purge {}")],
            ),
            tr("c", 3, 4, &[&f("cmd6 update config {}"), &f("cmd6 -y update config {}")]),
            tr("d", 4, 1, &[&f("cmd4 start {}"), &f("cmd4 -w start {}")]),
        ],
    );
    let d = automaton(
        Group::D,
        vec![
            tr("a", 0, 2, &[&f("cmd7 detach {}"), &f("cmd7 -q detach {}")]),
            tr("b", 2, 3, &[&f("cmd8 migrate {}"), &f("cmd8 -l migrate {}"), &f("cmd8 move {}")]),
            tr("c", 3, 1, &[&f("cmd7 attach {}"), &f("cmd7 -q attach {}")]),
            rollback("d", 3, 2, &[&f("cmd8 rollback {}"), &f("cmd8 -f rollback {}")]),
            rollback("e", 2, 0, &[&f("cmd7 undo {}"), &f("cmd7 -r undo {}")]),
        ],
    );
    let e = automaton(
        Group::E,
        vec![
            tr("a", 0, 2, &[&f("cmd9 failover {}"), &f("cmd9 -s failover {}")]),
            tr("b", 2, 1, &[&f("cmd10 verify {}"), &f("cmd10 -v verify {}")]),
            tr("c", 0, 3, &[&f("cmd11 drain {}"), &f("cmd11 -g drain {}")]),
            tr(
                "d",
                3,
                4,
                &[&f("cmd12 rebuild {}"), &f("cmd12 -x rebuild {}"), &f("cmd12 rebuild -p {}")],
            ),
            tr("e", 4, 5, &[&f("cmd13 resync {}"), &f("cmd13 -n resync {}")]),
            tr("f", 5, 1, &[&f("cmd11 undrain {}"), &f("cmd11 -g undrain {}")]),
        ],
    );
    vec![a, b, c, d, e]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery_eval::simulate;

    fn lines(ls: &[&str]) -> Vec<CommandLine> {
        ls.iter().map(|l| l.parse().unwrap()).collect()
    }

    #[test]
    fn all_automata_validate() {
        let auts = build_group_automata();
        assert_eq!(auts.len(), 5);
        for (aut, g) in auts.iter().zip(Group::ALL) {
            assert_eq!(aut.group, g);
            aut.validate().unwrap();
        }
    }

    #[test]
    fn group_b_matches_table() {
        let b = &build_group_automata()[1];
        let row = |label: &str| {
            let t = &b.transitions[b.transition_by_label(label).unwrap()];
            (t.from, t.to, t.commands.iter().map(|c| c.to_string()).collect::<Vec<_>>())
        };
        assert_eq!(
            row("a"),
            (
                0,
                2,
                vec![
                    "cmd1 -a xxx <FailedComponent>".to_string(),
                    "cmd1 -b xxx <FailedComponent>".to_string(),
                    "cmd1 xxx <FailedComponent>".to_string()
                ]
            )
        );
        assert_eq!(
            row("b"),
            (
                2,
                1,
                vec![
                    "cmd2 start <FailedComponent>".to_string(),
                    "cmd2 restart <FailedComponent>".to_string()
                ]
            )
        );
        assert_eq!(row("c"), (0, 1, vec!["reboot".to_string(), "shutdown -r now".to_string()]));
    }

    #[test]
    fn group_b_worked_example() {
        let b = &build_group_automata()[1];
        let r = simulate(b, "cmp1", &lines(&["cmd1 xxx cmp1"]));
        assert_eq!(r.final_state, 2);
        let r = simulate(b, "cmp1", &lines(&["cmd1 xxx cmp1", "cmd1 start cmp1"]));
        assert_eq!(r.final_state, 2);
        assert!(!r.accepted);
        let r = simulate(b, "cmp1", &lines(&["cmd1 xxx cmp1", "show status", "cmd2 restart cmp1"]));
        assert!(r.accepted);
    }

    /// Breadth-first distances written out separately from `shortest_path_len`.
    #[test]
    fn shortest_paths_by_bfs() {
        let expect = [1, 1, 4, 3, 2];
        for (aut, want) in build_group_automata().iter().zip(expect) {
            let mut frontier = vec![aut.initial];
            let mut seen = vec![aut.initial];
            let mut depth = 0;
            let found = loop {
                if frontier.contains(&aut.accept) {
                    break depth;
                }
                let next: Vec<u32> = frontier
                    .iter()
                    .flat_map(|&s| aut.transitions.iter().filter(move |t| t.from == s).map(|t| t.to))
                    .filter(|s| !seen.contains(s))
                    .collect();
                seen.extend(&next);
                frontier = next;
                depth += 1;
            };
            assert_eq!(found, want, "group {}", aut.group);
            assert_eq!(aut.shortest_path_len(), Some(want));
        }
    }

    #[test]
    fn simple_paths_exclude_rollbacks() {
        let auts = build_group_automata();
        let count: Vec<usize> = auts.iter().map(|a| a.simple_accepting_paths().len()).collect();
        assert_eq!(count, vec![1, 2, 1, 1, 2]);
        for a in &auts {
            for p in a.simple_accepting_paths() {
                assert!(p.iter().all(|&t| !a.transitions[t].rollback));
            }
        }
    }

    #[test]
    fn duplicate_command_is_rejected() {
        let mut b = build_group_automata()[1].clone();
        let dup = b.transitions[0].commands[0].clone();
        b.transitions[1].commands.push(dup);
        assert!(b.validate().is_err());
    }

    #[test]
    fn command_line_rules() {
        assert!("".parse::<CommandLine>().is_err());
        assert!(CommandLine::new(vec!["a".into(), EOC.into()]).is_err());
        let l: CommandLine = "cmd2  restart\t<FailedComponent>".parse().unwrap();
        assert_eq!(l.substitute("cmp4").to_string(), "cmd2 restart cmp4");
    }

    #[test]
    fn automata_json_round_trip() {
        for a in build_group_automata() {
            let json = serde_json::to_string(&a).unwrap();
            let back: Automaton = serde_json::from_str(&json).unwrap();
            assert_eq!(back, a);
        }
    }
}
