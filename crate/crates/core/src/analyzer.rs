//! Token-level sink/taint scanner.
//!
//! Each sink call found while walking a file becomes a candidate finding;
//! its arguments are checked by backtracking through the variable
//! assignments collected from the file and its literal includes. A
//! parameter is tainted when its resolution reaches a source (superglobal,
//! file or database read) or an unresolved variable without passing through
//! a sanitizer for the sink's category.
//!
//! Resolution is flow-insensitive: every assignment to a variable anywhere
//! in the file (or its include chain) counts, regardless of order.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::checklist::{Category, Checklist};
use crate::lexer::{split_lines, tokenize_bytes, Token, TokenKind, TokenStream};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    /// A request superglobal such as `$_GET`.
    Superglobal(String),
    /// A file or database read function listed as a source.
    Function(String),
    /// A variable with no visible assignment; treated as tainted.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaintDescriptor {
    pub variable: String,
    pub source: SourceKind,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub number: usize,
    pub file: String,
    pub category: Category,
    /// The sink name as written at the call site.
    pub sink: String,
    pub line: u32,
    /// Trimmed source text of the call; lines of a call spanning several
    /// lines are joined with `\n`.
    pub line_text: String,
    pub children: Vec<TaintDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanDiagnostic {
    pub file: String,
    pub line: Option<u32>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub findings: Vec<Finding>,
    pub files_scanned: usize,
    pub elapsed: Duration,
    pub diagnostics: Vec<ScanDiagnostic>,
}

impl ScanResult {
    pub fn categories(&self) -> BTreeSet<Category> {
        self.findings.iter().map(|f| f.category).collect()
    }
}

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("scan root {0} does not exist")]
    MissingRoot(PathBuf),
}

/// Brace-depth register tracking whether the walk is inside a function or
/// class body.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Register {
    pending: bool,
    depths: Vec<usize>,
}

impl Register {
    pub fn is_active(&self) -> bool {
        !self.depths.is_empty()
    }

    fn is_clear(&self) -> bool {
        !self.pending && self.depths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub rhs: Vec<Token>,
    pub line: u32,
    pub file: PathBuf,
}

#[derive(Debug, Default)]
pub struct ScanContext {
    /// Variables currently being resolved, innermost last.
    pub dependency_stack: Vec<String>,
    /// Files currently being scanned, innermost last.
    pub file_stack: Vec<PathBuf>,
    pub declared_variables: HashMap<String, Vec<Assignment>>,
    pub in_function: Register,
    pub in_class: Register,
    pub diagnostics: Vec<ScanDiagnostic>,
    loaded: HashSet<PathBuf>,
    resolved: HashMap<(String, Category), Option<SourceKind>>,
}

impl ScanContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when no scan is in progress: stacks empty, registers clear.
    pub fn is_quiescent(&self) -> bool {
        self.dependency_stack.is_empty()
            && self.file_stack.is_empty()
            && self.in_function.is_clear()
            && self.in_class.is_clear()
    }

    fn diag(&mut self, file: &Path, line: Option<u32>, message: impl Into<String>) {
        self.diagnostics.push(ScanDiagnostic {
            file: display_path(file),
            line,
            message: message.into(),
        });
    }
}

const ASSIGN_OPS: &[&str] = &[
    "=", ".=", "+=", "-=", "*=", "/=", "%=", "**=", "??=", "|=", "&=", "^=", "<<=", ">>=",
];

const CONSTRUCT_SINKS: &[&str] = &[
    "echo",
    "print",
    "include",
    "include_once",
    "require",
    "require_once",
];

const INCLUDE_KEYWORDS: &[&str] = &["include", "include_once", "require", "require_once"];

fn display_path(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn is_member_access(tokens: &[Token], idx: usize) -> bool {
    idx > 0
        && tokens[idx - 1].kind == TokenKind::Operator
        && matches!(tokens[idx - 1].lexeme.as_str(), "->" | "?->" | "::")
}

fn is_call(tokens: &[Token], idx: usize) -> bool {
    tokens.get(idx + 1).is_some_and(|t| t.is_punct("("))
}

/// Index of the bracket closing the one opened at `open`.
pub(crate) fn matching_close(tokens: &[Token], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        if t.kind != TokenKind::Punctuation {
            continue;
        }
        match t.lexeme.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// End (exclusive) of the expression starting at `start`: the first `;`,
/// close tag or unbalanced closing bracket, and `,` as well when
/// `stop_at_comma` is set.
fn expr_end(tokens: &[Token], start: usize, stop_at_comma: bool) -> usize {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate().skip(start) {
        match t.kind {
            TokenKind::CloseTag => return i,
            TokenKind::Punctuation => match t.lexeme.as_str() {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => {
                    if depth == 0 {
                        return i;
                    }
                    depth -= 1;
                }
                ";" if depth == 0 => return i,
                "," if depth == 0 && stop_at_comma => return i,
                _ => {}
            },
            _ => {}
        }
    }
    tokens.len()
}

/// Argument token range of the sink call at `call_site`, plus the index of
/// the last token belonging to the call.
fn call_arguments(tokens: &[Token], call_site: usize) -> (std::ops::Range<usize>, usize) {
    let tok = &tokens[call_site];
    let is_construct = tok.kind == TokenKind::Keyword
        && CONSTRUCT_SINKS
            .iter()
            .any(|k| tok.lexeme.eq_ignore_ascii_case(k));
    if !is_construct && is_call(tokens, call_site) {
        let open = call_site + 1;
        let close = matching_close(tokens, open).unwrap_or(tokens.len());
        let last = close.min(tokens.len() - 1);
        return (open + 1..close, last);
    }
    let end = expr_end(tokens, call_site + 1, false);
    let last = end.saturating_sub(1).max(call_site);
    (call_site + 1..end, last)
}

/// One occurrence of taint in an expression.
#[derive(Debug, Clone)]
struct Hit {
    name: String,
    source: SourceKind,
    line: u32,
}

struct Resolver<'a> {
    checklist: &'a Checklist,
    category: Category,
}

impl Resolver<'_> {
    /// All tainted occurrences in `tokens`, skipping sanitizer calls of the
    /// current category. With `first_only`, stops at the first hit.
    fn expr_hits(&self, tokens: &[Token], ctx: &mut ScanContext, first_only: bool) -> Vec<Hit> {
        let mut hits = Vec::new();
        let mut k = 0;
        while k < tokens.len() {
            let t = &tokens[k];
            if matches!(t.kind, TokenKind::Identifier | TokenKind::Keyword) && is_call(tokens, k) {
                if self.checklist.is_sanitizer(self.category, &t.lexeme) {
                    k = matching_close(tokens, k + 1).map_or(tokens.len(), |c| c + 1);
                    continue;
                }
                if self.checklist.is_source(&t.lexeme) {
                    hits.push(Hit {
                        name: t.lexeme.clone(),
                        source: SourceKind::Function(t.lexeme.clone()),
                        line: t.line,
                    });
                    if first_only {
                        return hits;
                    }
                    k = matching_close(tokens, k + 1).map_or(tokens.len(), |c| c + 1);
                    continue;
                }
            }
            let mut vars: Vec<&str> = Vec::new();
            if t.kind == TokenKind::Variable && !is_member_access(tokens, k) {
                vars.push(&t.lexeme);
            } else if t.kind == TokenKind::StringLiteral {
                vars.extend(t.interpolations.iter().map(String::as_str));
            }
            for var in vars {
                if let Some(source) = self.resolve(var, ctx) {
                    hits.push(Hit {
                        name: var.to_string(),
                        source,
                        line: t.line,
                    });
                    if first_only {
                        return hits;
                    }
                }
            }
            k += 1;
        }
        hits
    }

    /// Taint source reached by `var`, if any.
    fn resolve(&self, var: &str, ctx: &mut ScanContext) -> Option<SourceKind> {
        if self.checklist.is_source(var) {
            return Some(SourceKind::Superglobal(var.to_string()));
        }
        let key = (var.to_string(), self.category);
        if let Some(cached) = ctx.resolved.get(&key) {
            return cached.clone();
        }
        let mut visited = HashSet::new();
        let result = self.resolve_inner(var, ctx, &mut visited);
        ctx.resolved.insert(key, result.clone());
        result
    }

    fn resolve_inner(
        &self,
        var: &str,
        ctx: &mut ScanContext,
        visited: &mut HashSet<String>,
    ) -> Option<SourceKind> {
        if self.checklist.is_source(var) {
            return Some(SourceKind::Superglobal(var.to_string()));
        }
        if !visited.insert(var.to_string()) {
            return None;
        }
        let Some(assignments) = ctx.declared_variables.get(var) else {
            return Some(SourceKind::Unresolved);
        };
        let rhss: Vec<Vec<Token>> = assignments.iter().map(|a| a.rhs.clone()).collect();
        ctx.dependency_stack.push(var.to_string());
        let mut found = None;
        'outer: for rhs in &rhss {
            let mut k = 0;
            while k < rhs.len() {
                let t = &rhs[k];
                if matches!(t.kind, TokenKind::Identifier | TokenKind::Keyword) && is_call(rhs, k) {
                    if self.checklist.is_sanitizer(self.category, &t.lexeme) {
                        k = matching_close(rhs, k + 1).map_or(rhs.len(), |c| c + 1);
                        continue;
                    }
                    if self.checklist.is_source(&t.lexeme) {
                        found = Some(SourceKind::Function(t.lexeme.clone()));
                        break 'outer;
                    }
                }
                let mut vars: Vec<&str> = Vec::new();
                if t.kind == TokenKind::Variable && !is_member_access(rhs, k) {
                    vars.push(&t.lexeme);
                } else if t.kind == TokenKind::StringLiteral {
                    vars.extend(t.interpolations.iter().map(String::as_str));
                }
                for v in vars {
                    if let Some(src) = self.resolve_inner(v, ctx, visited) {
                        found = Some(src);
                        break 'outer;
                    }
                }
                k += 1;
            }
        }
        ctx.dependency_stack.pop();
        found
    }
}

/// Tainted parameters of the sink call at `call_site` for `category`.
pub fn backtrack_taint(
    stream: &TokenStream,
    call_site: usize,
    ctx: &mut ScanContext,
    checklist: &Checklist,
    category: Category,
) -> Vec<TaintDescriptor> {
    let tokens = &stream.tokens;
    let (args, _) = call_arguments(tokens, call_site);
    let resolver = Resolver {
        checklist,
        category,
    };
    let hits = resolver.expr_hits(&tokens[args], ctx, false);
    let mut seen = HashSet::new();
    hits.into_iter()
        .filter(|h| seen.insert(h.name.clone()))
        .map(|h| TaintDescriptor {
            variable: h.name,
            source: h.source,
            line: h.line,
        })
        .collect()
}

/// Assignments found in a token stream, as (variable, rhs range, line).
fn collect_assignments(tokens: &[Token]) -> Vec<(String, std::ops::Range<usize>, u32)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        if t.is_word("function") || t.is_word("fn") {
            // Parameter defaults are not assignments.
            if let Some(open) = (i + 1..tokens.len().min(i + 4)).find(|&j| tokens[j].is_punct("(")) {
                i = matching_close(tokens, open).unwrap_or(tokens.len()) + 1;
                continue;
            }
        }
        if t.is_word("foreach") && is_call(tokens, i) {
            let open = i + 1;
            if let Some(close) = matching_close(tokens, open) {
                if let Some(as_idx) = (open + 1..close).find(|&j| tokens[j].is_word("as")) {
                    for j in as_idx + 1..close {
                        if tokens[j].kind == TokenKind::Variable && !is_member_access(tokens, j) {
                            out.push((tokens[j].lexeme.clone(), open + 1..as_idx, tokens[j].line));
                        }
                    }
                }
            }
        }
        if t.is_word("list") && is_call(tokens, i) {
            if let Some(close) = matching_close(tokens, i + 1) {
                if tokens.get(close + 1).is_some_and(|n| n.is_op("=")) {
                    let rhs = close + 2..expr_end(tokens, close + 2, true);
                    for v in tokens[i + 2..close].iter().filter(|v| v.kind == TokenKind::Variable) {
                        out.push((v.lexeme.clone(), rhs.clone(), v.line));
                    }
                }
            }
        }
        if t.kind == TokenKind::Variable && !is_member_access(tokens, i) {
            let mut j = i + 1;
            loop {
                match tokens.get(j) {
                    Some(n) if n.is_punct("[") => {
                        j = matching_close(tokens, j).map_or(tokens.len(), |c| c + 1);
                    }
                    Some(n)
                        if (n.is_op("->") || n.is_op("?->"))
                            && tokens
                                .get(j + 1)
                                .is_some_and(|m| m.kind == TokenKind::Identifier) =>
                    {
                        j += 2;
                    }
                    _ => break,
                }
            }
            if let Some(op) = tokens.get(j) {
                if op.kind == TokenKind::Operator && ASSIGN_OPS.contains(&op.lexeme.as_str()) {
                    let end = expr_end(tokens, j + 1, true);
                    out.push((t.lexeme.clone(), j + 1..end, t.line));
                }
            }
        }
        i += 1;
    }
    out
}

/// Literal include targets: `include 'a.php'`, `require_once("a.php")`,
/// `include __DIR__ . '/a.php'`.
fn include_targets(tokens: &[Token]) -> Vec<(String, u32)> {
    let mut out = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokenKind::Keyword
            || !INCLUDE_KEYWORDS
                .iter()
                .any(|k| t.lexeme.eq_ignore_ascii_case(k))
        {
            continue;
        }
        let end = expr_end(tokens, i + 1, false);
        let parts: Vec<&Token> = tokens[i + 1..end]
            .iter()
            .filter(|t| !t.is_punct("(") && !t.is_punct(")"))
            .collect();
        let target = match parts.as_slice() {
            [lit] if lit.kind == TokenKind::StringLiteral && lit.interpolations.is_empty() => {
                lit.string_value()
            }
            [dir, dot, lit]
                if dir.is(TokenKind::Identifier, "__DIR__")
                    && dot.is_op(".")
                    && lit.kind == TokenKind::StringLiteral
                    && lit.interpolations.is_empty() =>
            {
                lit.string_value()
                    .map(|s| s.trim_start_matches('/').to_string())
            }
            _ => None,
        };
        if let Some(target) = target {
            out.push((target, t.line));
        }
    }
    out
}

fn resolve_include(from: &Path, target: &str) -> PathBuf {
    let base = from.parent().unwrap_or_else(|| Path::new("."));
    base.join(target)
}

fn canonical(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

fn read_stream(path: &Path, ctx: &mut ScanContext) -> Option<(TokenStream, String)> {
    match std::fs::read(path) {
        Ok(bytes) => {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let stream = tokenize_bytes(&bytes, &display_path(path));
            for d in &stream.diagnostics {
                ctx.diag(path, Some(d.line), format!("lexer: {}", d.message));
            }
            Some((stream, text))
        }
        Err(e) => {
            ctx.diag(path, None, format!("skipped: {e}"));
            None
        }
    }
}

/// Loads assignments of `path` and, transitively, of its literal includes.
fn load_declarations(path: &Path, stream: &TokenStream, ctx: &mut ScanContext) {
    let key = canonical(path);
    if !ctx.loaded.insert(key.clone()) {
        return;
    }
    for (var, rhs, line) in collect_assignments(&stream.tokens) {
        ctx.declared_variables
            .entry(var)
            .or_default()
            .push(Assignment {
                rhs: stream.tokens[rhs].to_vec(),
                line,
                file: path.to_path_buf(),
            });
    }
    ctx.resolved.clear();
    ctx.file_stack.push(key);
    for (target, line) in include_targets(&stream.tokens) {
        let inc = resolve_include(path, &target);
        if ctx.file_stack.contains(&canonical(&inc)) {
            continue;
        }
        if !inc.is_file() {
            ctx.diag(path, Some(line), format!("unresolved include {target:?}"));
            continue;
        }
        if let Some((inc_stream, _)) = read_stream(&inc, ctx) {
            load_declarations(&inc, &inc_stream, ctx);
        }
    }
    ctx.file_stack.pop();
}

fn update_registers(tokens: &[Token], i: usize, depth: &mut usize, ctx: &mut ScanContext) {
    let t = &tokens[i];
    match t.kind {
        TokenKind::Keyword if t.lexeme.eq_ignore_ascii_case("function") => {
            ctx.in_function.pending = true;
        }
        TokenKind::Keyword
            if ["class", "interface", "trait"]
                .iter()
                .any(|k| t.lexeme.eq_ignore_ascii_case(k))
                && !is_member_access(tokens, i) =>
        {
            ctx.in_class.pending = true;
        }
        TokenKind::Punctuation => match t.lexeme.as_str() {
            ";" => {
                ctx.in_function.pending = false;
                ctx.in_class.pending = false;
            }
            "{" => {
                *depth += 1;
                if ctx.in_function.pending {
                    ctx.in_function.pending = false;
                    ctx.in_function.depths.push(*depth);
                } else if ctx.in_class.pending {
                    ctx.in_class.pending = false;
                    ctx.in_class.depths.push(*depth);
                }
            }
            "}" => {
                if ctx.in_function.depths.last() == Some(depth) {
                    ctx.in_function.depths.pop();
                }
                if ctx.in_class.depths.last() == Some(depth) {
                    ctx.in_class.depths.pop();
                }
                *depth = depth.saturating_sub(1);
            }
            _ => {}
        },
        _ => {}
    }
}

fn sink_call_site(tokens: &[Token], i: usize) -> bool {
    let t = &tokens[i];
    match t.kind {
        TokenKind::Keyword => CONSTRUCT_SINKS
            .iter()
            .any(|k| t.lexeme.eq_ignore_ascii_case(k)),
        TokenKind::Identifier => {
            is_call(tokens, i)
                && !(i > 0
                    && (tokens[i - 1].is_word("function")
                        || tokens[i - 1].is_word("new")
                        || tokens[i - 1].is_word("fn")))
        }
        _ => false,
    }
}

fn call_text(lines: &[&str], first: u32, last: u32) -> String {
    (first..=last.max(first))
        .filter_map(|l| lines.get(l as usize - 1))
        .map(|s| s.trim())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Scans one file (and, recursively, its literal includes). Findings are
/// numbered 1..n in discovery order. Unreadable files are recorded in
/// `ctx.diagnostics`.
pub fn scan_file(path: &Path, checklist: &Checklist, ctx: &mut ScanContext) -> Vec<Finding> {
    let key = canonical(path);
    if ctx.file_stack.contains(&key) {
        return Vec::new();
    }
    let Some((stream, text)) = read_stream(path, ctx) else {
        return Vec::new();
    };
    load_declarations(path, &stream, ctx);
    ctx.file_stack.push(key);

    let lines = split_lines(&text);
    let tokens = &stream.tokens;
    let mut findings = Vec::new();
    let mut depth = 0usize;
    let saved = (
        std::mem::take(&mut ctx.in_function),
        std::mem::take(&mut ctx.in_class),
    );
    for i in 0..tokens.len() {
        update_registers(tokens, i, &mut depth, ctx);
        if !sink_call_site(tokens, i) {
            continue;
        }
        for category in checklist.sink_categories(&tokens[i].lexeme) {
            let children = backtrack_taint(&stream, i, ctx, checklist, category);
            if children.is_empty() {
                continue;
            }
            let (_, last) = call_arguments(tokens, i);
            findings.push(Finding {
                number: 0,
                file: display_path(path),
                category,
                sink: tokens[i].lexeme.clone(),
                line: tokens[i].line,
                line_text: call_text(&lines, tokens[i].line, tokens[last].line),
                children,
            });
        }
    }
    // Unbalanced braces in malformed input must not leak into later files.
    ctx.in_function = saved.0;
    ctx.in_class = saved.1;

    for (target, _) in include_targets(tokens) {
        let inc = resolve_include(path, &target);
        if inc.is_file() {
            findings.extend(scan_file(&inc, checklist, ctx));
        }
    }
    ctx.file_stack.pop();
    for (n, f) in findings.iter_mut().enumerate() {
        f.number = n + 1;
    }
    findings
}

#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    /// Prefix substituted for the scan root in reported file names.
    pub display_root: Option<String>,
}

/// All `*.php` files under `root` in lexicographic path order. A file root
/// yields itself.
pub fn php_files(root: &Path) -> Vec<PathBuf> {
    if root.is_file() {
        return vec![root.to_path_buf()];
    }
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            e.path()
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("php"))
        })
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

fn display_name(root: &Path, file: &str, options: &ScanOptions) -> String {
    let Some(prefix) = &options.display_root else {
        return file.to_string();
    };
    let root_str = display_path(root);
    let rel = if root.is_file() {
        Path::new(file)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
    } else {
        file.strip_prefix(&root_str)
            .map(|r| r.trim_start_matches('/').to_string())
    };
    match rel {
        Some(rel) => format!("{}/{}", prefix.trim_end_matches('/'), rel),
        None => file.to_string(),
    }
}

pub fn scan_project(
    root: &Path,
    checklist: &Checklist,
    options: &ScanOptions,
) -> Result<ScanResult, ScanError> {
    if !root.exists() {
        return Err(ScanError::MissingRoot(root.to_path_buf()));
    }
    let started = Instant::now();
    let files = php_files(root);
    let mut findings: Vec<Finding> = Vec::new();
    let mut seen = HashSet::new();
    let mut diagnostics = Vec::new();
    for file in &files {
        let mut ctx = ScanContext::new();
        for mut f in scan_file(file, checklist, &mut ctx) {
            f.file = display_name(root, &f.file, options);
            if seen.insert((f.file.clone(), f.line, f.category, f.sink.clone())) {
                findings.push(f);
            }
        }
        debug_assert!(ctx.is_quiescent());
        diagnostics.append(&mut ctx.diagnostics);
    }
    for (n, f) in findings.iter_mut().enumerate() {
        f.number = n + 1;
    }
    Ok(ScanResult {
        findings,
        files_scanned: files.len(),
        elapsed: started.elapsed(),
        diagnostics,
    })
}
