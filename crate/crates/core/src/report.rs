//! Scan report: plain-text rendering and a structured sidecar.
//!
//! Text layout per finding:
//!
//! ```text
//! VulnerabilityNumber : 1
//! Vulnerability FileName : C:/xampp/htdocs/app/AdminMenu.php
//! VulnerabilityName : Cross-Site Scripting
//! Vulnerable Line : 114: printf printf("...", $Query_String);
//! ```
//!
//! The first source line is printed verbatim; continuation lines of a
//! multi-line call follow it. A continuation line that is empty, starts with
//! `\` or starts with one of the labels gets a `\` prefix so the text can be
//! read back unambiguously. File and sink names escape `\`, CR and LF.
//!
//! The sidecar is one version line followed by the JSON form of [`Report`].

use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{Finding, ScanResult};
use crate::checklist::Category;
use crate::config_audit::Misconfiguration;

pub const STRUCTURED_HEADER: &str = "phpguard-report 1";

const LABELS: [&str; 4] = [
    "VulnerabilityNumber : ",
    "Vulnerability FileName : ",
    "VulnerabilityName : ",
    "Vulnerable Line : ",
];

pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub application_name: String,
    pub scan_timestamp: DateTime<Utc>,
    pub files_scanned: usize,
    pub elapsed: Duration,
    pub findings: Vec<Finding>,
    /// `None` when no configuration file was audited.
    pub misconfigurations: Option<Vec<Misconfiguration>>,
}

pub fn build_report(
    scan: &ScanResult,
    audits: Option<Vec<Misconfiguration>>,
    app_name: &str,
    clock: &dyn Clock,
) -> Report {
    Report {
        application_name: app_name.to_string(),
        scan_timestamp: clock.now(),
        files_scanned: scan.files_scanned,
        elapsed: scan.elapsed,
        findings: scan.findings.clone(),
        misconfigurations: audits,
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

fn needs_guard(line: &str) -> bool {
    line.is_empty() || line.starts_with('\\') || LABELS.iter().any(|l| line.starts_with(l.trim_end()))
}

/// Renders the four labeled lines of one finding.
pub fn render_finding(f: &Finding) -> String {
    let line_text = f.line_text.replace('\r', "");
    let mut text_lines = line_text.split('\n');
    let first = text_lines.next().unwrap_or("");
    let mut out = format!(
        "{}{}\n{}{}\n{}{}\n{}{}: {} {}\n",
        LABELS[0],
        f.number,
        LABELS[1],
        escape_field(&f.file),
        LABELS[2],
        f.category.display_name(),
        LABELS[3],
        f.line,
        escape_field(&f.sink),
        first,
    );
    for cont in text_lines {
        if needs_guard(cont) {
            out.push('\\');
        }
        out.push_str(cont);
        out.push('\n');
    }
    out
}

pub fn render(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("PHP SECURITY SCAN REPORT\n");
    out.push_str(&format!(
        "Application Name : {}\n",
        escape_field(&report.application_name)
    ));
    out.push_str(&format!(
        "Scan Date : {}\n",
        report.scan_timestamp.format("%Y-%m-%d %H:%M:%S UTC")
    ));
    out.push_str(&format!("Files Scanned : {}\n", report.files_scanned));
    out.push_str(&format!(
        "Scanning Time : {:.3} s\n",
        report.elapsed.as_secs_f64()
    ));
    out.push_str("\nVULNERABILITY DETAILS\n\n");
    if report.findings.is_empty() {
        out.push_str("No vulnerabilities detected.\n");
    }
    for (i, f) in report.findings.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&render_finding(f));
    }
    if let Some(misconfigs) = &report.misconfigurations {
        out.push_str("\nCONFIGURATION DETAILS\n\n");
        if misconfigs.is_empty() {
            out.push_str("No misconfigured settings.\n");
        }
        for (i, m) in misconfigs.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!(
                "Setting : {}\nCurrent Value : {}\nRecommended Value : {}\nReason : {}\n",
                m.name, m.current, m.recommended, m.rationale
            ));
        }
    }
    out
}

/// Visible fields of a finding as read back from rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFinding {
    pub number: usize,
    pub file: String,
    pub category: Category,
    pub line: u32,
    pub sink: String,
    pub line_text: String,
}

impl From<&Finding> for RenderedFinding {
    fn from(f: &Finding) -> Self {
        RenderedFinding {
            number: f.number,
            file: f.file.clone(),
            category: f.category,
            line: f.line,
            sink: f.sink.clone(),
            line_text: f.line_text.replace('\r', ""),
        }
    }
}

/// Reads the finding blocks back from rendered text. Requires sink names
/// without spaces, which holds for every name the scanner reports.
pub fn parse_rendered_findings(text: &str) -> Option<Vec<RenderedFinding>> {
    let start = text.find("\nVULNERABILITY DETAILS\n\n")? + "\nVULNERABILITY DETAILS\n\n".len();
    let body = &text[start..];
    let body = body
        .find("\nCONFIGURATION DETAILS\n")
        .map_or(body, |end| &body[..end]);
    let mut lines = body.lines().peekable();
    let mut out = Vec::new();
    if lines.peek() == Some(&"No vulnerabilities detected.") {
        return Some(out);
    }
    while let Some(l) = lines.next() {
        if l.is_empty() && !out.is_empty() {
            continue;
        }
        let number = l.strip_prefix(LABELS[0])?.parse().ok()?;
        let file = unescape_field(lines.next()?.strip_prefix(LABELS[1])?)?;
        let category = Category::from_display_name(lines.next()?.strip_prefix(LABELS[2])?)?;
        let rest = lines.next()?.strip_prefix(LABELS[3])?;
        let (line_no, rest) = rest.split_once(": ")?;
        let (sink, first) = rest.split_once(' ')?;
        let mut line_text = first.to_string();
        while let Some(next) = lines.peek() {
            if next.is_empty() {
                break;
            }
            let cont = match next.strip_prefix('\\') {
                Some(c) => c,
                None if needs_guard(next) => return None,
                None => next,
            };
            line_text.push('\n');
            line_text.push_str(cont);
            lines.next();
        }
        out.push(RenderedFinding {
            number,
            file,
            category,
            line: line_no.parse().ok()?,
            sink: unescape_field(sink)?,
            line_text,
        });
    }
    Some(out)
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("structured report: missing or unsupported version line (expected {STRUCTURED_HEADER:?})")]
    Version,
    #[error("structured report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn render_structured(report: &Report) -> String {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    format!("{STRUCTURED_HEADER}\n{json}\n")
}

pub fn parse_structured(text: &str) -> Result<Report, ReportError> {
    let (header, body) = text.split_once('\n').ok_or(ReportError::Version)?;
    if header.trim_end() != STRUCTURED_HEADER {
        return Err(ReportError::Version);
    }
    Ok(serde_json::from_str(body)?)
}

/// Path of the structured sidecar written next to a text report.
pub fn sidecar_path(text_path: &Path) -> PathBuf {
    let mut name = text_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the text report to `path` and the structured form beside it.
pub fn write_report(report: &Report, path: &Path) -> Result<PathBuf, ReportError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ReportError::Io { path: p, source }
    };
    std::fs::write(path, render(report)).map_err(io_err(path))?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, render_structured(report)).map_err(io_err(&sidecar))?;
    Ok(sidecar)
}

pub fn read_structured(path: &Path) -> Result<Report, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_structured(&text)
}
