//! Learned models: the request relation (Model Set 1) and per-role page
//! transition graphs (Model Set 2), with their on-disk forms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Role of unauthenticated traffic.
pub const ANONYMOUS_ROLE: &str = "0";

/// File name of the Model Set 1 table inside a model directory.
pub const MODEL_SET1_FILE: &str = "modelset1.csv";

pub const MODEL_SET1_HEADER: [&str; 5] = ["sno", "convid", "reqresid", "sessionFlag", "role"];

/// Page served for a path ending in `/`.
pub const DEFAULT_INDEX_PAGE: &str = "index.php";

const ASSET_EXTENSIONS: &[&str] = &[
    "js", "css", "png", "gif", "jpg", "jpeg", "ico", "svg", "woff", "woff2",
];

/// Static resources are recorded in Model Set 1 but are not graph nodes.
pub fn is_asset(page: &str) -> bool {
    page.rsplit_once('.')
        .is_some_and(|(_, ext)| ASSET_EXTENSIONS.iter().any(|a| ext.eq_ignore_ascii_case(a)))
}

/// Role ids double as file names.
pub fn validate_role(role: &str) -> Result<(), ModelError> {
    if !role.is_empty()
        && role
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        Ok(())
    } else {
        Err(ModelError::BadRole(role.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId {
    pub method: String,
    pub page: String,
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.method, self.page)
    }
}

impl FromStr for RequestId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('_') {
            Some((m, p)) if !m.is_empty() && !p.is_empty() => Ok(RequestId {
                method: m.to_string(),
                page: p.to_string(),
            }),
            _ => Err(ModelError::BadRequestId(s.to_string())),
        }
    }
}

/// `METHOD_page` from a method and request path; the page is the final
/// path segment with any query or fragment removed, and a trailing `/`
/// maps to `index_page`.
pub fn derive_request_id(
    method: &str,
    url_path: &str,
    index_page: &str,
) -> Result<RequestId, ModelError> {
    let method = method.trim();
    if method.is_empty() {
        return Err(ModelError::EmptyMethod);
    }
    let path = url_path.split(['?', '#']).next().unwrap_or("");
    let last = path.rsplit('/').next().unwrap_or("");
    let page = if last.is_empty() { index_page } else { last };
    Ok(RequestId {
        method: method.to_ascii_uppercase(),
        page: page.to_string(),
    })
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty request method")]
    EmptyMethod,
    #[error("not a request id: {0:?}")]
    BadRequestId(String),
    #[error("invalid role id {0:?} (use letters, digits, '_' or '-')")]
    BadRole(String),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRow {
    pub sno: u64,
    pub convid: u64,
    pub reqresid: String,
    #[serde(rename = "sessionFlag")]
    pub session_flag: u8,
    pub role: String,
}

/// Every observed request, in communication-id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelSet1 {
    pub rows: Vec<ModelRow>,
}

impl ModelSet1 {
    /// Deduplicated (reqresid, sessionFlag, role) triples.
    pub fn relation(&self) -> BTreeSet<(String, u8, String)> {
        self.rows
            .iter()
            .map(|r| (r.reqresid.clone(), r.session_flag, r.role.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleGraph {
    /// Page → next pages in first-seen order. Lists are never empty.
    pub edges: BTreeMap<String, Vec<String>>,
    pub entries: BTreeSet<String>,
}

impl RoleGraph {
    pub fn add_edge(&mut self, from: &str, to: &str) {
        let next = self.edges.entry(from.to_string()).or_default();
        if !next.iter().any(|p| p == to) {
            next.push(to.to_string());
        }
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.edges
            .get(from)
            .is_some_and(|n| n.iter().any(|p| p == to))
    }

    pub fn nodes(&self) -> BTreeSet<&str> {
        let mut n: BTreeSet<&str> = self.entries.iter().map(String::as_str).collect();
        for (from, to) in &self.edges {
            n.insert(from);
            n.extend(to.iter().map(String::as_str));
        }
        n
    }

    pub fn contains(&self, page: &str) -> bool {
        self.entries.contains(page)
            || self
                .edges
                .iter()
                .any(|(f, t)| f == page || t.iter().any(|p| p == page))
    }

    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .flat_map(|(f, t)| t.iter().map(move |p| (f.clone(), p.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelSet2 {
    pub roles: BTreeMap<String, RoleGraph>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Models {
    pub set1: ModelSet1,
    pub set2: ModelSet2,
}

/// Encodes a page name as an XML element name: characters outside
/// `[A-Za-z0-9._-]`, a leading character that cannot start a name, a
/// leading `xml`, and any `_x` become `_xHHHH_`.
pub fn encode_xml_name(name: &str) -> String {
    let mut out = String::new();
    let reserved = name.get(..3).is_some_and(|p| p.eq_ignore_ascii_case("xml"));
    let chars: Vec<char> = name.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let plain = if i == 0 {
            (c.is_ascii_alphabetic() || c == '_') && !reserved
        } else {
            c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_')
        };
        let fake_escape = c == '_' && chars.get(i + 1) == Some(&'x');
        if plain && !fake_escape {
            out.push(c);
        } else {
            out.push_str(&format!("_x{:04X}_", c as u32));
        }
    }
    if out.is_empty() {
        out.push_str("_x_");
    }
    out
}

pub fn decode_xml_name(name: &str) -> Option<String> {
    if name == "_x_" {
        return Some(String::new());
    }
    let mut out = String::new();
    let mut rest = name;
    while let Some(i) = rest.find("_x") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after.find('_')?;
        let code = u32::from_str_radix(&after[..end], 16).ok()?;
        out.push(char::from_u32(code)?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

fn encode_item(page: &str) -> String {
    let mut out = String::new();
    for c in page.chars() {
        if c == ',' || c == '%' || c.is_whitespace() {
            let mut b = [0u8; 4];
            for byte in c.encode_utf8(&mut b).bytes() {
                out.push_str(&format!("%{byte:02X}"));
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn decode_item(item: &str) -> Option<String> {
    let bytes = item.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = item.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn encode_list<'a>(pages: impl IntoIterator<Item = &'a String>) -> String {
    pages
        .into_iter()
        .map(|p| encode_item(p))
        .collect::<Vec<_>>()
        .join(", ")
}

fn decode_list(text: &str) -> Option<Vec<String>> {
    if text.trim().is_empty() {
        return Some(Vec::new());
    }
    text.split(',').map(|i| decode_item(i.trim())).collect()
}

pub(crate) fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

/// Role graph as a `<Pages>` document: one element per page with outgoing
/// edges, text = comma-separated next pages; entry pages in the `entries`
/// attribute.
pub fn render_role_xml(graph: &RoleGraph) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    if graph.edges.is_empty() && graph.entries.is_empty() {
        out.push_str("<Pages/>\n");
        return out;
    }
    out.push_str(&format!(
        "<Pages entries=\"{}\">\n",
        escape_xml(&encode_list(&graph.entries))
    ));
    for (page, next) in &graph.edges {
        let tag = encode_xml_name(page);
        out.push_str(&format!(
            "  <{tag}>{}</{tag}>\n",
            escape_xml(&encode_list(next))
        ));
    }
    out.push_str("</Pages>\n");
    out
}

fn parse_error(file: &Path, doc: Option<&roxmltree::Document>, pos: usize, message: String) -> ModelError {
    let line = doc.map_or(1, |d| d.text_pos_at(pos).row as u64);
    ModelError::Parse {
        file: file.to_path_buf(),
        line,
        message,
    }
}

pub fn parse_role_xml(text: &str, file: &Path) -> Result<RoleGraph, ModelError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| ModelError::Parse {
        file: file.to_path_buf(),
        line: e.pos().row as u64,
        message: e.to_string(),
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "Pages" {
        return Err(parse_error(
            file,
            Some(&doc),
            root.range().start,
            format!("expected <Pages>, found <{}>", root.tag_name().name()),
        ));
    }
    let mut graph = RoleGraph::default();
    if let Some(entries) = root.attribute("entries") {
        let list = decode_list(entries).ok_or_else(|| {
            parse_error(file, Some(&doc), root.range().start, "bad entries list".into())
        })?;
        graph.entries.extend(list);
    }
    for el in root.children().filter(|n| n.is_element()) {
        let at = el.range().start;
        let page = decode_xml_name(el.tag_name().name()).ok_or_else(|| {
            parse_error(file, Some(&doc), at, format!("bad page element <{}>", el.tag_name().name()))
        })?;
        if graph.edges.contains_key(&page) {
            return Err(parse_error(file, Some(&doc), at, format!("page {page} listed twice")));
        }
        let next = decode_list(el.text().unwrap_or(""))
            .ok_or_else(|| parse_error(file, Some(&doc), at, format!("bad page list for {page}")))?;
        if next.is_empty() {
            return Err(parse_error(file, Some(&doc), at, format!("{page} has no next pages")));
        }
        for n in next {
            graph.add_edge(&page, &n);
        }
    }
    Ok(graph)
}

pub fn render_model_set1(set: &ModelSet1) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if set.rows.is_empty() {
        w.write_record(MODEL_SET1_HEADER).expect("in-memory write");
    }
    // The header row comes from the field names of the first record.
    for r in &set.rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
}

pub fn parse_model_set1(text: &str, file: &Path) -> Result<ModelSet1, ModelError> {
    let err = |line: u64, message: String| ModelError::Parse {
        file: file.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| err(1, e.to_string()))?;
    if header.iter().ne(MODEL_SET1_HEADER) {
        return Err(err(
            1,
            format!("expected header {:?}", MODEL_SET1_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<ModelRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        if row.session_flag > 1 {
            return Err(err(rows.len() as u64 + 2, format!("sessionFlag {} not 0 or 1", row.session_flag)));
        }
        rows.push(row);
    }
    Ok(ModelSet1 { rows })
}

/// Writes `modelset1.csv` and one `<role>.xml` per role into `dir`.
pub fn persist_model(models: &Models, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(MODEL_SET1_FILE);
    fs::write(&p, render_model_set1(&models.set1)).map_err(io_err(&p))?;
    for (role, graph) in &models.set2.roles {
        validate_role(role)?;
        let p = dir.join(format!("{role}.xml"));
        fs::write(&p, render_role_xml(graph)).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<Models, ModelError> {
    let p = dir.join(MODEL_SET1_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let set1 = parse_model_set1(&text, &p)?;
    let mut set2 = ModelSet2::default();
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    entries.sort();
    for p in entries {
        let role = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        set2.roles.insert(role, parse_role_xml(&text, &p)?);
    }
    Ok(Models { set1, set2 })
}

/// Lookup structure for level-1 checks: reqresid → trained (flag, role).
#[derive(Debug, Clone, Default)]
pub struct RelationIndex {
    by_request: HashMap<String, BTreeSet<(u8, String)>>,
}

impl RelationIndex {
    pub fn new(set1: &ModelSet1) -> Self {
        let mut by_request: HashMap<String, BTreeSet<(u8, String)>> = HashMap::new();
        for (req, flag, role) in set1.relation() {
            by_request.entry(req).or_default().insert((flag, role));
        }
        RelationIndex { by_request }
    }

    pub fn get(&self, reqresid: &str) -> Option<&BTreeSet<(u8, String)>> {
        self.by_request.get(reqresid)
    }
}
