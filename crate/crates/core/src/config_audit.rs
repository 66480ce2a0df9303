//! php.ini parsing and audit against a hardening policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_POLICY: &str = include_str!("../data/default_policy.ini");

/// Folds the boolean spellings PHP accepts to `On`/`Off`; any other value
/// is returned trimmed and unquoted.
pub fn normalize_value(raw: &str) -> String {
    let v = unquote(raw.trim());
    match v.to_ascii_lowercase().as_str() {
        "on" | "yes" | "true" | "1" => "On".to_string(),
        "off" | "no" | "false" | "0" => "Off".to_string(),
        _ => v.to_string(),
    }
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Strips a trailing `; comment` outside quotes.
fn strip_comment(v: &str) -> &str {
    let mut quote = None;
    for (i, c) in v.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, ';') => return &v[..i],
            _ => {}
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    /// Key as written in the file.
    pub name: String,
    pub raw: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IniDiagnostic {
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SettingsMap {
    entries: BTreeMap<String, Setting>,
    pub diagnostics: Vec<IniDiagnostic>,
}

impl SettingsMap {
    pub fn get(&self, name: &str) -> Option<&Setting> {
        self.entries.get(&name.to_ascii_lowercase())
    }

    /// Normalized value of `name`, if present.
    pub fn value(&self, name: &str) -> Option<&str> {
        self.get(name).map(|s| s.value.as_str())
    }

    pub fn set(&mut self, name: &str, raw: &str, line: usize) {
        self.entries.insert(
            name.to_ascii_lowercase(),
            Setting {
                name: name.to_string(),
                raw: raw.to_string(),
                value: normalize_value(raw),
                line,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Setting> {
        self.entries.values()
    }
}

struct IniLine<'a> {
    key: &'a str,
    value: &'a str,
}

enum Line<'a> {
    Blank,
    Comment(&'a str),
    Section,
    Entry(IniLine<'a>),
    Bad,
}

fn classify(raw: &str) -> Line<'_> {
    let t = raw.trim();
    if t.is_empty() {
        return Line::Blank;
    }
    if let Some(c) = t.strip_prefix(';').or_else(|| t.strip_prefix('#')) {
        return Line::Comment(c.trim());
    }
    if t.starts_with('[') {
        return if t.ends_with(']') { Line::Section } else { Line::Bad };
    }
    match t.split_once('=') {
        Some((k, v)) => {
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                Line::Bad
            } else {
                Line::Entry(IniLine {
                    key,
                    value: strip_comment(v).trim(),
                })
            }
        }
        None => Line::Bad,
    }
}

pub fn parse_ini(text: &str) -> SettingsMap {
    let mut map = SettingsMap::default();
    for (i, raw) in text.lines().enumerate() {
        match classify(raw) {
            Line::Entry(e) => map.set(e.key, e.value, i + 1),
            Line::Bad => map.diagnostics.push(IniDiagnostic {
                line: i + 1,
                text: raw.to_string(),
            }),
            Line::Blank | Line::Comment(_) | Line::Section => {}
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub name: String,
    pub recommended: String,
    pub rationale: String,
    /// Value PHP uses when the setting is absent.
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub entries: Vec<PolicyEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy line {line}: cannot parse {text:?}")]
    Malformed { line: usize, text: String },
    #[error("policy line {line}: {name} has no `; rationale:` comment")]
    MissingRationale { line: usize, name: String },
    #[error("policy line {line}: {name} listed twice")]
    Duplicate { line: usize, name: String },
}

impl Policy {
    pub fn builtin() -> Policy {
        load_policy(DEFAULT_POLICY).expect("bundled policy is valid")
    }
}

/// Policy files use ini syntax; each key is preceded by a
/// `; rationale: ...` comment and optionally `; default: ...`.
pub fn load_policy(text: &str) -> Result<Policy, PolicyError> {
    let mut entries: Vec<PolicyEntry> = Vec::new();
    let mut rationale = None;
    let mut default = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        match classify(raw) {
            Line::Comment(c) => {
                if let Some(r) = c.strip_prefix("rationale:") {
                    rationale = Some(r.trim().to_string());
                } else if let Some(d) = c.strip_prefix("default:") {
                    default = Some(normalize_value(d));
                }
            }
            Line::Entry(e) => {
                let Some(r) = rationale.take() else {
                    return Err(PolicyError::MissingRationale {
                        line,
                        name: e.key.to_string(),
                    });
                };
                if entries.iter().any(|x| x.name.eq_ignore_ascii_case(e.key)) {
                    return Err(PolicyError::Duplicate {
                        line,
                        name: e.key.to_string(),
                    });
                }
                entries.push(PolicyEntry {
                    name: e.key.to_string(),
                    recommended: normalize_value(e.value),
                    rationale: r,
                    default: default.take(),
                });
            }
            Line::Bad => {
                return Err(PolicyError::Malformed {
                    line,
                    text: raw.to_string(),
                })
            }
            Line::Blank | Line::Section => {}
        }
    }
    Ok(Policy { entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Misconfiguration {
    pub name: String,
    pub current: String,
    pub recommended: String,
    pub rationale: String,
    /// Line of the offending entry; `None` when the value is PHP's default.
    pub line: Option<usize>,
}

/// Shown as the current value of a setting that is absent and has no
/// documented default.
pub const UNSET: &str = "(unset)";

pub fn audit(settings: &SettingsMap, policy: &Policy) -> Vec<Misconfiguration> {
    let mut out = Vec::new();
    for p in &policy.entries {
        let (current, line) = match settings.get(&p.name) {
            Some(s) => (s.value.clone(), Some(s.line)),
            None => (
                p.default.clone().unwrap_or_else(|| UNSET.to_string()),
                None,
            ),
        };
        if current != p.recommended {
            out.push(Misconfiguration {
                name: p.name.clone(),
                current,
                recommended: p.recommended.clone(),
                rationale: p.rationale.clone(),
                line,
            });
        }
    }
    out
}

pub fn apply_recommendations(settings: &mut SettingsMap, findings: &[Misconfiguration]) {
    for m in findings {
        let line = settings.get(&m.name).map_or(0, |s| s.line);
        settings.set(&m.name, &m.recommended, line);
    }
}

/// Rewrites ini text so that every finding takes its recommended value:
/// the effective (last) entry is edited in place, absent keys are appended.
pub fn rewrite_ini(text: &str, findings: &[Misconfiguration]) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let settings = parse_ini(text);
    for m in findings {
        match settings.get(&m.name) {
            Some(s) => lines[s.line - 1] = format!("{} = {}", s.name, m.recommended),
            None => lines.push(format!("{} = {}", m.name, m.recommended)),
        }
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
