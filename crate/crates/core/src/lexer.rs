//! Line-annotated PHP tokenizer.
//!
//! Covers the subset of the PHP lexical grammar needed for sink/taint
//! scanning: open/close tags, inline HTML, variables, identifiers and
//! keywords, numbers, single/double-quoted strings (with `$var`
//! interpolation), heredoc/nowdoc, comments, operators and punctuation.
//! The lexer is total: malformed input produces diagnostics, never an error.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    OpenTag,
    CloseTag,
    Identifier,
    Variable,
    StringLiteral,
    NumberLiteral,
    Operator,
    Punctuation,
    Comment,
    InlineHtml,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    /// 1-based line on which the lexeme starts.
    pub line: u32,
    /// Variables interpolated into a double-quoted string or heredoc, in
    /// order of appearance (with the leading `$`).
    pub interpolations: Vec<String>,
}

impl Token {
    fn new(kind: TokenKind, lexeme: &str, line: u32) -> Self {
        Self {
            kind,
            lexeme: lexeme.to_string(),
            line,
            interpolations: Vec::new(),
        }
    }

    pub fn is(&self, kind: TokenKind, lexeme: &str) -> bool {
        self.kind == kind && self.lexeme == lexeme
    }

    pub fn is_punct(&self, lexeme: &str) -> bool {
        self.is(TokenKind::Punctuation, lexeme)
    }

    pub fn is_op(&self, lexeme: &str) -> bool {
        self.is(TokenKind::Operator, lexeme)
    }

    /// Identifier or keyword whose text matches `name` case-insensitively.
    pub fn is_word(&self, name: &str) -> bool {
        matches!(self.kind, TokenKind::Identifier | TokenKind::Keyword)
            && self.lexeme.eq_ignore_ascii_case(name)
    }

    /// Unquoted value of a string literal. Escape sequences are left as
    /// written except for the quote character itself.
    pub fn string_value(&self) -> Option<String> {
        if self.kind != TokenKind::StringLiteral {
            return None;
        }
        let s = self.lexeme.as_str();
        if s.len() >= 2 && s.starts_with('\'') && s.ends_with('\'') {
            return Some(s[1..s.len() - 1].replace("\\'", "'").replace("\\\\", "\\"));
        }
        if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
            return Some(s[1..s.len() - 1].replace("\\\"", "\""));
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexDiagnostic {
    pub line: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub source_path: String,
    pub diagnostics: Vec<LexDiagnostic>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }
}

impl<'a> IntoIterator for &'a TokenStream {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.iter()
    }
}

const KEYWORDS: &[&str] = &[
    "abstract",
    "and",
    "array",
    "as",
    "break",
    "callable",
    "case",
    "catch",
    "class",
    "clone",
    "const",
    "continue",
    "declare",
    "default",
    "do",
    "echo",
    "else",
    "elseif",
    "empty",
    "enddeclare",
    "endfor",
    "endforeach",
    "endif",
    "endswitch",
    "endwhile",
    "enum",
    "extends",
    "final",
    "finally",
    "fn",
    "for",
    "foreach",
    "function",
    "global",
    "goto",
    "if",
    "implements",
    "include",
    "include_once",
    "instanceof",
    "insteadof",
    "interface",
    "isset",
    "list",
    "match",
    "namespace",
    "new",
    "or",
    "print",
    "private",
    "protected",
    "public",
    "readonly",
    "require",
    "require_once",
    "return",
    "static",
    "switch",
    "throw",
    "trait",
    "try",
    "unset",
    "use",
    "var",
    "while",
    "xor",
    "yield",
];

/// Longest first.
const OPERATORS: &[&str] = &[
    "<<<", "===", "!==", "<=>", "**=", "...", "<<=", ">>=", "??=", "?->", "==", "!=", "<>", "<=",
    ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", ".=", "%=", "&=", "|=", "^=", "->", "=>",
    "::", "<<", ">>", "??", "**", "=", "+", "-", "*", "/", "%", ".", "<", ">", "!", "&", "|", "^",
    "~", "?", ":", "@", "\\", "$",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

fn is_name_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b >= 0x80
}

fn is_name_char(b: u8) -> bool {
    is_name_start(b) || b.is_ascii_digit()
}

/// Number of line breaks in `text`, treating CRLF, LF and lone CR alike.
pub fn count_line_breaks(text: &str) -> u32 {
    let bytes = text.as_bytes();
    let mut n = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\n' => n += 1,
            b'\r' => {
                n += 1;
                if bytes.get(i + 1) == Some(&b'\n') {
                    i += 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    n
}

/// Splits `text` into lines on LF, CR or CRLF.
pub fn split_lines(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut lines = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\n' => {
                lines.push(&text[start..i]);
                start = i + 1;
            }
            b'\r' => {
                lines.push(&text[start..i]);
                if bytes.get(i + 1) == Some(&b'\n') {
                    i += 1;
                }
                start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    if start < bytes.len() {
        lines.push(&text[start..]);
    }
    lines
}

/// Tokenizes raw bytes. Invalid UTF-8 is replaced lossily before lexing.
pub fn tokenize_bytes(source: &[u8], path: &str) -> TokenStream {
    tokenize(&String::from_utf8_lossy(source), path)
}

pub fn tokenize(source: &str, path: &str) -> TokenStream {
    let mut lexer = Lexer {
        src: source,
        bytes: source.as_bytes(),
        pos: 0,
        line: 1,
        tokens: Vec::new(),
        diagnostics: Vec::new(),
    };
    lexer.run();
    TokenStream {
        tokens: lexer.tokens,
        source_path: path.to_string(),
        diagnostics: lexer.diagnostics,
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: u32,
    tokens: Vec<Token>,
    diagnostics: Vec<LexDiagnostic>,
}

impl<'a> Lexer<'a> {
    fn run(&mut self) {
        while self.pos < self.bytes.len() {
            self.lex_html();
            if self.pos < self.bytes.len() {
                self.lex_php();
            }
        }
    }

    fn peek(&self, offset: usize) -> Option<u8> {
        self.bytes.get(self.pos + offset).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.bytes[self.pos..].starts_with(s.as_bytes())
    }

    fn starts_with_ci(&self, s: &str) -> bool {
        let rest = &self.bytes[self.pos..];
        rest.len() >= s.len() && rest[..s.len()].eq_ignore_ascii_case(s.as_bytes())
    }

    /// Emits `src[start..self.pos]` as a token starting at `line`, then
    /// advances the line counter past any line breaks it contains.
    fn emit(&mut self, kind: TokenKind, start: usize, line: u32) -> &mut Token {
        let lexeme = &self.src[start..self.pos];
        self.line = line + count_line_breaks(lexeme);
        self.tokens.push(Token::new(kind, lexeme, line));
        self.tokens.last_mut().expect("just pushed")
    }

    fn diag(&mut self, line: u32, message: impl Into<String>) {
        self.diagnostics.push(LexDiagnostic {
            line,
            message: message.into(),
        });
    }

    fn open_tag_len(&self) -> Option<usize> {
        if self.starts_with_ci("<?php") {
            match self.peek(5) {
                None => Some(5),
                Some(b) if b.is_ascii_whitespace() => Some(5),
                _ => None,
            }
        } else if self.starts_with("<?=") {
            Some(3)
        } else {
            None
        }
    }

    fn lex_html(&mut self) {
        let start = self.pos;
        let line = self.line;
        while self.pos < self.bytes.len() {
            if self.bytes[self.pos] == b'<' && self.open_tag_len().is_some() {
                break;
            }
            self.pos += 1;
        }
        if self.pos > start {
            self.emit(TokenKind::InlineHtml, start, line);
        }
        if let Some(len) = self.open_tag_len() {
            let start = self.pos;
            self.pos += len;
            let line = self.line;
            self.emit(TokenKind::OpenTag, start, line);
        }
    }

    fn skip_whitespace(&mut self) {
        let start = self.pos;
        while let Some(b) = self.peek(0) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.line += count_line_breaks(&self.src[start..self.pos]);
    }

    fn lex_php(&mut self) {
        loop {
            self.skip_whitespace();
            let Some(b) = self.peek(0) else { return };
            let start = self.pos;
            let line = self.line;
            match b {
                b'?' if self.peek(1) == Some(b'>') => {
                    self.pos += 2;
                    self.emit(TokenKind::CloseTag, start, line);
                    return;
                }
                b'#' => self.line_comment(start, line),
                b'/' if self.peek(1) == Some(b'/') => self.line_comment(start, line),
                b'/' if self.peek(1) == Some(b'*') => self.block_comment(start, line),
                b'$' if self.peek(1).is_some_and(is_name_start) => {
                    self.pos += 1;
                    self.take_name();
                    self.emit(TokenKind::Variable, start, line);
                }
                b'\'' => self.single_quoted(start, line),
                b'"' => self.double_quoted(start, line, b'"'),
                b'`' => self.double_quoted(start, line, b'`'),
                b'<' if self.starts_with("<<<") && self.heredoc(start, line) => {}
                b'0'..=b'9' => self.number(start, line),
                b'.' if self.peek(1).is_some_and(|c| c.is_ascii_digit()) => {
                    self.number(start, line)
                }
                _ if is_name_start(b) => {
                    self.take_name();
                    let word = &self.src[start..self.pos];
                    let kind = if is_keyword(word) {
                        TokenKind::Keyword
                    } else {
                        TokenKind::Identifier
                    };
                    self.emit(kind, start, line);
                }
                b'(' | b')' | b'[' | b']' | b'{' | b'}' | b';' | b',' => {
                    self.pos += 1;
                    self.emit(TokenKind::Punctuation, start, line);
                }
                _ => {
                    if let Some(op) = OPERATORS
                        .iter()
                        .filter(|op| **op != "<<<")
                        .find(|op| self.starts_with(op))
                    {
                        self.pos += op.len();
                        self.emit(TokenKind::Operator, start, line);
                    } else {
                        // Unknown byte: consume one full character.
                        let ch_len = self.src[self.pos..]
                            .chars()
                            .next()
                            .map(char::len_utf8)
                            .unwrap_or(1);
                        self.pos += ch_len;
                        let text = self.src[start..self.pos].to_string();
                        self.emit(TokenKind::Operator, start, line);
                        self.diag(line, format!("unexpected character {text:?}"));
                    }
                }
            }
        }
    }

    fn take_name(&mut self) {
        while self.peek(0).is_some_and(is_name_char) {
            self.pos += 1;
        }
    }

    /// `//` and `#` comments end at the line break or at `?>`.
    fn line_comment(&mut self, start: usize, line: u32) {
        while let Some(b) = self.peek(0) {
            if b == b'\n' || b == b'\r' || (b == b'?' && self.peek(1) == Some(b'>')) {
                break;
            }
            self.pos += 1;
        }
        self.emit(TokenKind::Comment, start, line);
    }

    fn block_comment(&mut self, start: usize, line: u32) {
        self.pos += 2;
        let mut closed = false;
        while self.pos < self.bytes.len() {
            if self.starts_with("*/") {
                self.pos += 2;
                closed = true;
                break;
            }
            self.pos += 1;
        }
        self.emit(TokenKind::Comment, start, line);
        if !closed {
            self.diag(line, "unterminated block comment");
        }
    }

    fn single_quoted(&mut self, start: usize, line: u32) {
        self.pos += 1;
        let mut closed = false;
        while let Some(b) = self.peek(0) {
            self.pos += 1;
            match b {
                b'\\' if self.peek(0).is_some() => self.pos += 1,
                b'\'' => {
                    closed = true;
                    break;
                }
                _ => {}
            }
        }
        self.emit(TokenKind::StringLiteral, start, line);
        if !closed {
            self.diag(line, "unterminated string literal");
        }
    }

    fn double_quoted(&mut self, start: usize, line: u32, quote: u8) {
        self.pos += 1;
        let mut closed = false;
        let mut vars = Vec::new();
        while let Some(b) = self.peek(0) {
            match b {
                b'\\' => self.pos += if self.peek(1).is_some() { 2 } else { 1 },
                _ if b == quote => {
                    self.pos += 1;
                    closed = true;
                    break;
                }
                b'$' | b'{' => {
                    if let Some(var) = self.interpolation() {
                        vars.push(var);
                    } else {
                        self.pos += 1;
                    }
                }
                _ => self.pos += 1,
            }
        }
        self.emit(TokenKind::StringLiteral, start, line).interpolations = vars;
        if !closed {
            self.diag(line, "unterminated string literal");
        }
    }

    /// Recognizes `$name`, `{$name`, `${name` at the cursor; on success
    /// advances past the variable name and returns it with its `$`.
    fn interpolation(&mut self) -> Option<String> {
        let (skip, braced) = if self.starts_with("{$") || self.starts_with("${") {
            (2, true)
        } else if self.starts_with("$") {
            (1, false)
        } else {
            return None;
        };
        if !self.peek(skip).is_some_and(is_name_start) {
            return None;
        }
        self.pos += skip;
        let name_start = self.pos;
        self.take_name();
        let name = format!("${}", &self.src[name_start..self.pos]);
        if braced {
            // Skip the rest of the braced expression.
            let mut depth = 1usize;
            while let Some(b) = self.peek(0) {
                match b {
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            self.pos += 1;
                            break;
                        }
                    }
                    b'"' => break,
                    _ => {}
                }
                self.pos += 1;
            }
        }
        Some(name)
    }

    /// Heredoc / nowdoc. Returns false when `<<<` is not followed by a
    /// valid label, leaving the cursor untouched.
    fn heredoc(&mut self, start: usize, line: u32) -> bool {
        let mut p = self.pos + 3;
        while matches!(self.bytes.get(p), Some(b' ' | b'\t')) {
            p += 1;
        }
        let quote = match self.bytes.get(p) {
            Some(b'\'') => Some(b'\''),
            Some(b'"') => Some(b'"'),
            _ => None,
        };
        if quote.is_some() {
            p += 1;
        }
        let label_start = p;
        if !self.bytes.get(p).copied().is_some_and(is_name_start) {
            return false;
        }
        while self.bytes.get(p).copied().is_some_and(is_name_char) {
            p += 1;
        }
        let label = &self.src[label_start..p];
        if let Some(q) = quote {
            if self.bytes.get(p) != Some(&q) {
                return false;
            }
            p += 1;
        }
        if !matches!(self.bytes.get(p), Some(b'\n' | b'\r')) {
            return false;
        }
        let nowdoc = quote == Some(b'\'');
        self.pos = p;
        let mut vars = Vec::new();
        let mut closed = false;
        let mut at_line_start = false;
        while let Some(b) = self.peek(0) {
            if at_line_start {
                let mut q = self.pos;
                while matches!(self.bytes.get(q), Some(b' ' | b'\t')) {
                    q += 1;
                }
                if self.bytes[q..].starts_with(label.as_bytes())
                    && !self
                        .bytes
                        .get(q + label.len())
                        .copied()
                        .is_some_and(is_name_char)
                {
                    self.pos = q + label.len();
                    closed = true;
                    break;
                }
                at_line_start = false;
                continue;
            }
            match b {
                b'\n' | b'\r' => {
                    self.pos += 1;
                    at_line_start = true;
                }
                b'\\' if !nowdoc => self.pos += if self.peek(1).is_some() { 2 } else { 1 },
                b'$' | b'{' if !nowdoc => {
                    if let Some(var) = self.interpolation() {
                        vars.push(var);
                    } else {
                        self.pos += 1;
                    }
                }
                _ => self.pos += 1,
            }
        }
        self.emit(TokenKind::StringLiteral, start, line).interpolations = vars;
        if !closed {
            self.diag(line, format!("unterminated heredoc <<<{label}"));
        }
        true
    }

    fn number(&mut self, start: usize, line: u32) {
        if self.starts_with("0x") || self.starts_with("0X") {
            self.pos += 2;
            while self
                .peek(0)
                .is_some_and(|b| b.is_ascii_hexdigit() || b == b'_')
            {
                self.pos += 1;
            }
        } else {
            while self
                .peek(0)
                .is_some_and(|b| b.is_ascii_digit() || b == b'_' || b == b'.')
            {
                self.pos += 1;
            }
            if matches!(self.peek(0), Some(b'e' | b'E')) {
                let sign = usize::from(matches!(self.peek(1), Some(b'+' | b'-')));
                if self.peek(1 + sign).is_some_and(|b| b.is_ascii_digit()) {
                    self.pos += 1 + sign;
                    while self.peek(0).is_some_and(|b| b.is_ascii_digit()) {
                        self.pos += 1;
                    }
                }
            }
        }
        self.emit(TokenKind::NumberLiteral, start, line);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenKind::*;

    fn kinds_and_lexemes(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src, "t.php")
            .tokens
            .into_iter()
            .map(|t| (t.kind, t.lexeme))
            .collect()
    }

    #[test]
    fn empty_source_gives_empty_stream() {
        let s = tokenize("", "empty.php");
        assert!(s.is_empty());
        assert!(s.diagnostics.is_empty());
        assert_eq!(s.source_path, "empty.php");
    }

    // Hand-tokenized against the PHP lexical grammar.
    #[test]
    fn assignment_concat_and_comment() {
        let toks = kinds_and_lexemes("<?php $a = $b . \"x\"; // note");
        let expected: Vec<(TokenKind, String)> = vec![
            (OpenTag, "<?php".into()),
            (Variable, "$a".into()),
            (Operator, "=".into()),
            (Variable, "$b".into()),
            (Operator, ".".into()),
            (StringLiteral, "\"x\"".into()),
            (Punctuation, ";".into()),
            (Comment, "// note".into()),
        ];
        assert_eq!(toks, expected);
    }

    #[test]
    fn printf_debug_line() {
        let s = tokenize(
            "<?php printf(\"Debug: query = %s<br>\\n\", $Query_String);",
            "AdminMenu.php",
        );
        let t = &s.tokens;
        assert!(t.iter().any(|t| t.is(Identifier, "printf") && t.line == 1));
        assert!(t.iter().any(|t| t.is(Variable, "$Query_String") && t.line == 1));
        let lit = t.iter().find(|t| t.kind == StringLiteral).unwrap();
        assert_eq!(lit.lexeme, "\"Debug: query = %s<br>\\n\"");
        assert!(lit.interpolations.is_empty());
    }

    #[test]
    fn inline_html_and_tags() {
        let toks = kinds_and_lexemes("<p>hi</p>\n<?php echo $x; ?>\n<b>");
        assert_eq!(toks[0], (InlineHtml, "<p>hi</p>\n".into()));
        assert_eq!(toks[1], (OpenTag, "<?php".into()));
        assert_eq!(toks[2], (Keyword, "echo".into()));
        assert_eq!(toks[5], (CloseTag, "?>".into()));
        assert_eq!(toks[6], (InlineHtml, "\n<b>".into()));
    }

    #[test]
    fn short_echo_tag_is_open_tag() {
        let toks = kinds_and_lexemes("<?= $name ?>");
        assert_eq!(toks[0], (OpenTag, "<?=".into()));
        assert_eq!(toks[1], (Variable, "$name".into()));
    }

    #[test]
    fn xml_declaration_is_html() {
        let toks = kinds_and_lexemes("<?xml version=\"1.0\"?>");
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].0, InlineHtml);
    }

    #[test]
    fn interpolated_variables_are_listed() {
        let s = tokenize(
            "<?php $s = \"id=$id and {$row['x']} and ${name} \\$no\";",
            "t",
        );
        let lit = s.tokens.iter().find(|t| t.kind == StringLiteral).unwrap();
        assert_eq!(lit.interpolations, vec!["$id", "$row", "$name"]);
    }

    #[test]
    fn single_quoted_has_no_interpolation() {
        let s = tokenize("<?php $s = 'it\\'s $id';", "t");
        let lit = s.tokens.iter().find(|t| t.kind == StringLiteral).unwrap();
        assert!(lit.interpolations.is_empty());
        assert_eq!(lit.string_value().unwrap(), "it's $id");
    }

    #[test]
    fn heredoc_and_nowdoc() {
        let src = "<?php\n$q = <<<SQL\nSELECT * FROM t WHERE id = $id\nSQL;\n$n = <<<'RAW'\n$raw\nRAW;\n$z = 1;";
        let s = tokenize(src, "t");
        let lits: Vec<&Token> = s.tokens.iter().filter(|t| t.kind == StringLiteral).collect();
        assert_eq!(lits.len(), 2);
        assert_eq!(lits[0].line, 2);
        assert_eq!(lits[0].interpolations, vec!["$id"]);
        assert!(lits[1].interpolations.is_empty());
        assert_eq!(lits[1].line, 5);
        let z = s.tokens.iter().find(|t| t.lexeme == "$z").unwrap();
        assert_eq!(z.line, 8);
        assert!(s.diagnostics.is_empty());
    }

    #[test]
    fn unterminated_string_consumes_to_eof_with_diagnostic() {
        let s = tokenize("<?php echo \"abc\n$x;\n", "t");
        let last = s.tokens.last().unwrap();
        assert_eq!(last.kind, StringLiteral);
        assert_eq!(last.interpolations, vec!["$x"]);
        assert_eq!(s.diagnostics.len(), 1);
        assert_eq!(s.diagnostics[0].line, 1);
    }

    #[test]
    fn unterminated_block_comment() {
        let s = tokenize("<?php /* open\n\n", "t");
        assert_eq!(s.tokens.last().unwrap().kind, Comment);
        assert_eq!(s.diagnostics.len(), 1);
    }

    #[test]
    fn line_comment_stops_at_close_tag() {
        let toks = kinds_and_lexemes("<?php // c ?>html");
        assert_eq!(toks[1], (Comment, "// c ".into()));
        assert_eq!(toks[2], (CloseTag, "?>".into()));
        assert_eq!(toks[3], (InlineHtml, "html".into()));
    }

    #[test]
    fn hash_comment_and_operators() {
        let toks = kinds_and_lexemes("<?php # c\n$a .= $b->c ?? $d::E;");
        let ops: Vec<&str> = toks
            .iter()
            .filter(|(k, _)| *k == Operator)
            .map(|(_, l)| l.as_str())
            .collect();
        assert_eq!(ops, vec![".=", "->", "??", "::"]);
        assert_eq!(toks[1], (Comment, "# c".into()));
    }

    #[test]
    fn line_endings_are_uniform() {
        for sep in ["\n", "\r", "\r\n"] {
            let src = format!("<?php{sep}$a;{sep}{sep}$b;");
            let s = tokenize(&src, "t");
            let b = s.tokens.iter().find(|t| t.lexeme == "$b").unwrap();
            assert_eq!(b.line, 4, "separator {sep:?}");
        }
    }

    #[test]
    fn numbers_and_keywords() {
        let toks = kinds_and_lexemes("<?php if ($x > 0x1F && $y < 1.5e3) return .5;");
        assert!(toks.contains(&(Keyword, "if".into())));
        assert!(toks.contains(&(NumberLiteral, "0x1F".into())));
        assert!(toks.contains(&(NumberLiteral, "1.5e3".into())));
        assert!(toks.contains(&(NumberLiteral, ".5".into())));
        assert!(toks.contains(&(Keyword, "return".into())));
    }

    #[test]
    fn split_lines_handles_all_separators() {
        assert_eq!(split_lines("a\nb\r\nc\rd"), vec!["a", "b", "c", "d"]);
        assert_eq!(split_lines("a\n"), vec!["a"]);
        assert!(split_lines("").is_empty());
    }

    #[test]
    fn invalid_utf8_is_tolerated() {
        let s = tokenize_bytes(b"<?php $a = \"\xff\xfe\";", "t");
        assert_eq!(s.tokens.len(), 5);
    }
}
