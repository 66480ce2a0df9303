//! Vulnerability checklist: sink, sanitizer and source function lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHECKLIST: &str = include_str!("../data/default_checklist.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    CrossSiteScripting,
    SqlInjection,
    CommandInjection,
    CodeInjection,
    FileInclusion,
    FileManipulation,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::CrossSiteScripting,
        Category::SqlInjection,
        Category::CommandInjection,
        Category::CodeInjection,
        Category::FileInclusion,
        Category::FileManipulation,
    ];

    /// Identifier used in checklist files.
    pub fn id(self) -> &'static str {
        match self {
            Category::CrossSiteScripting => "CrossSiteScripting",
            Category::SqlInjection => "SqlInjection",
            Category::CommandInjection => "CommandInjection",
            Category::CodeInjection => "CodeInjection",
            Category::FileInclusion => "FileInclusion",
            Category::FileManipulation => "FileManipulation",
        }
    }

    /// Human-readable name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Category::CrossSiteScripting => "Cross-Site Scripting",
            Category::SqlInjection => "SQL Injection",
            Category::CommandInjection => "Command Injection",
            Category::CodeInjection => "Code Injection",
            Category::FileInclusion => "File Inclusion",
            Category::FileManipulation => "File Manipulation",
        }
    }

    pub fn from_display_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.display_name() == name)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Category {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.id().eq_ignore_ascii_case(s))
            .ok_or(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChecklistError {
    #[error("line {line}: expected `<Category>.<sinks|sanitizers|sources>: name, ...`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown category {name:?}")]
    UnknownCategory { line: usize, name: String },
    #[error("line {line}: unknown list kind {kind:?} (expected sinks, sanitizers or sources)")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: empty entry for {category}")]
    EmptyEntry { line: usize, category: String },
    #[error("no categories")]
    NoCategories,
    #[error("{name:?} is both a sink and a sanitizer for {category}")]
    Overlap { category: Category, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Checklist {
    sinks: BTreeMap<Category, BTreeSet<String>>,
    sanitizers: BTreeMap<Category, BTreeSet<String>>,
    sources: BTreeSet<String>,
}

/// Superglobals keep their case (`$_GET`); function names are folded.
fn normalize_name(name: &str) -> String {
    if name.starts_with('$') {
        name.to_string()
    } else {
        name.to_ascii_lowercase()
    }
}

impl Checklist {
    pub fn builtin() -> Checklist {
        load_checklist(DEFAULT_CHECKLIST).expect("bundled checklist is valid")
    }

    /// Categories in which `name` is a sink.
    pub fn sink_categories(&self, name: &str) -> Vec<Category> {
        let name = normalize_name(name);
        self.sinks
            .iter()
            .filter(|(_, set)| set.contains(&name))
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn is_sink(&self, category: Category, name: &str) -> bool {
        self.sinks
            .get(&category)
            .is_some_and(|s| s.contains(&normalize_name(name)))
    }

    pub fn is_sanitizer(&self, category: Category, name: &str) -> bool {
        self.sanitizers
            .get(&category)
            .is_some_and(|s| s.contains(&normalize_name(name)))
    }

    pub fn is_source(&self, name: &str) -> bool {
        self.sources.contains(&normalize_name(name))
    }

    pub fn sinks(&self, category: Category) -> impl Iterator<Item = &str> {
        self.sinks.get(&category).into_iter().flatten().map(String::as_str)
    }

    pub fn sanitizers(&self, category: Category) -> impl Iterator<Item = &str> {
        self.sanitizers
            .get(&category)
            .into_iter()
            .flatten()
            .map(String::as_str)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.sources.iter().map(String::as_str)
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.sinks.keys().copied()
    }

    pub fn add_sink(&mut self, category: Category, name: &str) -> Result<(), ChecklistError> {
        let name = normalize_name(name);
        if self.is_sanitizer(category, &name) {
            return Err(ChecklistError::Overlap { category, name });
        }
        self.sinks.entry(category).or_default().insert(name);
        Ok(())
    }

    pub fn add_sanitizer(&mut self, category: Category, name: &str) -> Result<(), ChecklistError> {
        let name = normalize_name(name);
        if self.is_sink(category, &name) {
            return Err(ChecklistError::Overlap { category, name });
        }
        self.sanitizers.entry(category).or_default().insert(name);
        Ok(())
    }

    pub fn add_source(&mut self, name: &str) {
        self.sources.insert(normalize_name(name));
    }
}

enum ListKind {
    Sinks,
    Sanitizers,
    Sources,
}

pub fn load_checklist(config_text: &str) -> Result<Checklist, ChecklistError> {
    let mut checklist = Checklist::default();
    for (idx, raw) in config_text.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let Some((key, values)) = text.split_once(':') else {
            return Err(ChecklistError::Malformed {
                line,
                text: raw.to_string(),
            });
        };
        let key = key.trim();
        let (cat_name, kind) = match key.split_once('.') {
            Some((c, k)) => {
                let kind = match k.trim().to_ascii_lowercase().as_str() {
                    "sinks" => ListKind::Sinks,
                    "sanitizers" => ListKind::Sanitizers,
                    "sources" => ListKind::Sources,
                    other => {
                        return Err(ChecklistError::UnknownKind {
                            line,
                            kind: other.to_string(),
                        })
                    }
                };
                (c.trim(), kind)
            }
            None => (key, ListKind::Sinks),
        };
        if cat_name.is_empty() || cat_name.contains(char::is_whitespace) {
            return Err(ChecklistError::Malformed {
                line,
                text: raw.to_string(),
            });
        }
        let names: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            return Err(ChecklistError::EmptyEntry {
                line,
                category: cat_name.to_string(),
            });
        }
        let category = cat_name.parse::<Category>().ok();
        match kind {
            ListKind::Sources => {
                if category.is_none() && !cat_name.eq_ignore_ascii_case("All") {
                    return Err(ChecklistError::UnknownCategory {
                        line,
                        name: cat_name.to_string(),
                    });
                }
                names.iter().for_each(|n| checklist.add_source(n));
            }
            ListKind::Sinks | ListKind::Sanitizers => {
                let category = category.ok_or_else(|| ChecklistError::UnknownCategory {
                    line,
                    name: cat_name.to_string(),
                })?;
                for n in names {
                    if matches!(kind, ListKind::Sinks) {
                        checklist.add_sink(category, n)?;
                    } else {
                        checklist.add_sanitizer(category, n)?;
                    }
                }
            }
        }
    }
    if checklist.sinks.is_empty() {
        return Err(ChecklistError::NoCategories);
    }
    Ok(checklist)
}
