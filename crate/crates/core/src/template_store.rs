//! Raw log lines → masked templates → template IDs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use regex::{NoExpand, Regex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural-number ID of a log template. Assigned IDs start at 1; 0 is
/// reserved for templates a frozen store has never seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateId(pub u32);

impl TemplateId {
    pub const UNKNOWN: TemplateId = TemplateId(0);

    pub fn get(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One masking rule as written in the pipeline config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRule {
    pub name: String,
    pub pattern: String,
    pub replacement: String,
}

impl MaskRule {
    fn new(name: &str, pattern: &str, replacement: &str) -> Self {
        MaskRule {
            name: name.to_string(),
            pattern: pattern.to_string(),
            replacement: replacement.to_string(),
        }
    }
}

/// The built-in rules, in application order.
pub fn default_mask_rules() -> Vec<MaskRule> {
    vec![
        MaskRule::new(
            "timestamp",
            r"(?:\d{4}-\d{2}-\d{2}[T ])?\d{1,2}:\d{2}:\d{2}(?:[.,]\d+)?(?:Z|[+-]\d{2}:?\d{2})?",
            "<TS>",
        ),
        MaskRule::new("date", r"\b\d{4}-\d{2}-\d{2}\b", "<DATE>"),
        MaskRule::new("url", r"\b[A-Za-z][A-Za-z0-9+.\-]*://\S+", "<URL>"),
        MaskRule::new("request_id", r"\breq-[0-9A-Za-z\-]+", "req-<ID>"),
        MaskRule::new("uuid", r"\b[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}\b", "<UUID>"),
        MaskRule::new("ip", r"\b\d{1,3}(?:\.\d{1,3}){3}\b", "<IP>"),
        MaskRule::new("port", r":\d{1,5}\b", ":<PORT>"),
        MaskRule::new("hex", r"\b(?:0x)?[0-9A-Fa-f]{8,}\b", "<HEX>"),
        MaskRule::new("path", r"\B/[\w.\-]+(?:/[\w.\-]*)*", "<PATH>"),
        MaskRule::new("number", r"\b\d{3,}\b", "<NUM>"),
        // object name closing a "... instance <name>" message
        MaskRule::new("instance_ref", r"\binstance [^\s<>]+$", "instance <INST>"),
    ]
}

/// Compiled, ordered masking rules.
#[derive(Clone, Debug)]
pub struct MaskRuleSet {
    rules: Vec<(MaskRule, Regex)>,
}

impl MaskRuleSet {
    pub fn new(rules: Vec<MaskRule>) -> Result<Self> {
        let rules = rules
            .into_iter()
            .map(|r| {
                let re = Regex::new(&r.pattern).map_err(|source| Error::Pattern {
                    name: r.name.clone(),
                    source,
                })?;
                Ok((r, re))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskRuleSet { rules })
    }

    pub fn default_rules() -> Self {
        Self::new(default_mask_rules()).expect("built-in mask rules compile")
    }

    pub fn rules(&self) -> impl Iterator<Item = &MaskRule> {
        self.rules.iter().map(|(r, _)| r)
    }
}

/// Applies every rule in order, then collapses whitespace runs to one space.
pub fn mask_line(raw_line: &str, rules: &MaskRuleSet) -> String {
    let mut line = raw_line.to_string();
    for (rule, re) in &rules.rules {
        if let std::borrow::Cow::Owned(s) = re.replace_all(&line, NoExpand(&rule.replacement)) {
            line = s;
        }
    }
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Bijection between masked template text and [`TemplateId`]s, assigned in
/// first-seen order starting at 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemplateStore {
    ids: HashMap<String, TemplateId>,
    templates: Vec<String>,
}

impl TemplateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn next_id(&self) -> TemplateId {
        TemplateId(self.templates.len() as u32 + 1)
    }

    pub fn lookup(&self, template: &str) -> Option<TemplateId> {
        self.ids.get(template).copied()
    }

    pub fn template(&self, id: TemplateId) -> Option<&str> {
        let idx = (id.0 as usize).checked_sub(1)?;
        self.templates.get(idx).map(String::as_str)
    }

    /// Returns the ID of `template`, registering it if unseen.
    pub fn assign_id(&mut self, template: &str) -> TemplateId {
        if let Some(id) = self.ids.get(template) {
            return *id;
        }
        let id = self.next_id();
        self.ids.insert(template.to_string(), id);
        self.templates.push(template.to_string());
        id
    }

    /// Masks and registers every line, growing the store.
    pub fn encode_log<S: AsRef<str>>(&mut self, raw_lines: &[S], rules: &MaskRuleSet) -> LogSequence {
        let ids = raw_lines
            .iter()
            .map(|l| self.assign_id(&mask_line(l.as_ref(), rules)))
            .collect();
        LogSequence::new(ids)
    }

    /// Like [`encode_log`](Self::encode_log) against a frozen store: unseen
    /// templates become [`TemplateId::UNKNOWN`].
    pub fn encode_frozen<S: AsRef<str>>(&self, raw_lines: &[S], rules: &MaskRuleSet) -> LogSequence {
        let ids = raw_lines
            .iter()
            .map(|l| self.lookup(&mask_line(l.as_ref(), rules)).unwrap_or(TemplateId::UNKNOWN))
            .collect();
        LogSequence::new(ids)
    }

    /// `ID<TAB>template` lines, IDs ascending.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.templates.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", i + 1, t);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut store = TemplateStore::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, template) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("template store line {}: missing tab", lineno + 1))
            })?;
            let id: u32 = id.parse().map_err(|_| {
                Error::Config(format!("template store line {}: bad id {id:?}", lineno + 1))
            })?;
            if TemplateId(id) != store.next_id() || store.lookup(template).is_some() {
                return Err(Error::Config(format!(
                    "template store line {}: id {id} breaks the contiguous bijection",
                    lineno + 1
                )));
            }
            store.assign_id(template);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Which synthetic failure a sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub group: char,
    pub failure: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSequence {
    pub ids: Vec<TemplateId>,
    pub source_meta: Option<SourceMeta>,
}

impl LogSequence {
    pub fn new(ids: Vec<TemplateId>) -> Self {
        LogSequence {
            ids,
            source_meta: None,
        }
    }

    pub fn from_raw(ids: &[u32]) -> Self {
        Self::new(ids.iter().copied().map(TemplateId).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
