//! Training phase: capture requests into a profile store, crawl the target
//! per role, and build the models from the store.
//!
//! Store layout (one directory per training corpus):
//!
//! * `<id>_request`: the request exactly as sent (head and body)
//! * `<id>_Srequest`: `0` or `1`, the session flag
//! * `<role>.xml`: the role's page sequence, split into browsing sessions
//!
//! ```xml
//! <Sequence role="manager">
//!   <Session>
//!     <Page id="7">home.php</Page>
//!     <Page id="8">Assign_works.php</Page>
//!   </Session>
//! </Sequence>
//! ```
//!
//! Requests without a session cookie belong to role 0 whatever the run is
//! tagged with; that is where login-page traffic of authenticated runs goes.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use regex::Regex;
use thiserror::Error;
use url::Url;

use crate::http::{self, HttpError, Request, Response};
use crate::model::{
    derive_request_id, escape_xml, io_err, is_asset, validate_role, ModelError, ModelRow,
    ModelSet1, ModelSet2, Models, RoleGraph, ANONYMOUS_ROLE, DEFAULT_INDEX_PAGE,
};

pub const DEFAULT_SESSION_COOKIE: &str = "PHPSESSID";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot parse captured request: {0}")]
    BadRequest(HttpError),
    #[error("communication id {0}: `{0}_request` has no matching `{0}_Srequest`")]
    OrphanRequest(u64),
    #[error("communication id {0}: `{0}_Srequest` has no matching `{0}_request`")]
    OrphanFlag(u64),
    #[error("communication id {id}: session flag {text:?} is not 0 or 1")]
    BadFlag { id: u64, text: String },
    #[error("communication id {0} does not appear in any role sequence")]
    Unattributed(u64),
    #[error("role sequence lists communication id {0} but the store has no such request")]
    MissingRequest(u64),
    #[error("profile store {0} holds no requests")]
    EmptyStore(PathBuf),
    #[error("{url} unreachable: {source}")]
    Unreachable { url: String, source: HttpError },
    #[error("login failed for role {role}: {detail}")]
    LoginFailed { role: String, detail: String },
    #[error("invalid base URL {0:?}")]
    BadBase(String),
}

/// 1 iff some `Cookie` header carries `session_cookie` with a non-empty
/// value.
pub fn extract_session_flag(headers: &[(String, String)], session_cookie: &str) -> u8 {
    let present = headers
        .iter()
        .filter(|(n, _)| n.eq_ignore_ascii_case("cookie"))
        .flat_map(|(_, v)| http::parse_cookie_header(v))
        .any(|(n, v)| n == session_cookie && !v.is_empty());
    u8::from(present)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleSequence {
    pub sessions: Vec<Vec<(u64, String)>>,
}

fn render_sequence(role: &str, seq: &RoleSequence) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!("<Sequence role=\"{}\">\n", escape_xml(role)));
    for s in &seq.sessions {
        out.push_str("  <Session>\n");
        for (id, page) in s {
            out.push_str(&format!("    <Page id=\"{id}\">{}</Page>\n", escape_xml(page)));
        }
        out.push_str("  </Session>\n");
    }
    out.push_str("</Sequence>\n");
    out
}

fn parse_sequence(text: &str, file: &Path) -> Result<RoleSequence, ModelError> {
    let err = |line: u32, message: String| ModelError::Parse {
        file: file.to_path_buf(),
        line: line as u64,
        message,
    };
    let doc = roxmltree::Document::parse(text).map_err(|e| err(e.pos().row, e.to_string()))?;
    let line_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row;
    let root = doc.root_element();
    if root.tag_name().name() != "Sequence" {
        return Err(err(line_of(root), "expected <Sequence>".into()));
    }
    let mut seq = RoleSequence::default();
    for s in root.children().filter(|n| n.is_element()) {
        if s.tag_name().name() != "Session" {
            return Err(err(line_of(s), format!("unexpected <{}>", s.tag_name().name())));
        }
        let mut pages = Vec::new();
        for p in s.children().filter(|n| n.is_element()) {
            let id = p
                .attribute("id")
                .and_then(|v| v.parse::<u64>().ok())
                .filter(|&id| id > 0)
                .ok_or_else(|| err(line_of(p), "page without a positive id".into()))?;
            pages.push((id, p.text().unwrap_or("").to_string()));
        }
        seq.sessions.push(pages);
    }
    Ok(seq)
}

type ById = BTreeMap<u64, PathBuf>;

/// `<id>_request` and `<id>_Srequest` files of a store, by id.
fn numbered_files(dir: &Path) -> Result<(ById, ById), TrainError> {
    let mut requests = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_Srequest").and_then(|n| n.parse().ok()) {
            flags.insert(id, e.path());
        } else if let Some(id) = name.strip_suffix("_request").and_then(|n| n.parse().ok()) {
            requests.insert(id, e.path());
        }
    }
    Ok((requests, flags))
}

fn read_sequences(dir: &Path) -> Result<BTreeMap<String, RoleSequence>, TrainError> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|x| x == "xml") {
            let role = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            out.insert(role, parse_sequence(&text, &p)?);
        }
    }
    Ok(out)
}

/// Capture side of a training run. Single writer per directory.
#[derive(Debug)]
pub struct ProfileStore {
    dir: PathBuf,
    next_id: u64,
    session_cookie: String,
    index_page: String,
    sequences: BTreeMap<String, RoleSequence>,
    open: HashSet<String>,
}

impl ProfileStore {
    /// Opens (creating if needed) a store; ids continue after the largest
    /// one already present.
    pub fn open(dir: &Path, session_cookie: &str) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (requests, flags) = numbered_files(dir)?;
        let last = requests.keys().chain(flags.keys()).max().copied().unwrap_or(0);
        Ok(ProfileStore {
            dir: dir.to_path_buf(),
            next_id: last + 1,
            session_cookie: session_cookie.to_string(),
            index_page: DEFAULT_INDEX_PAGE.to_string(),
            sequences: read_sequences(dir)?,
            open: HashSet::new(),
        })
    }

    pub fn with_index_page(mut self, page: &str) -> Self {
        self.index_page = page.to_string();
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn sequences(&self) -> &BTreeMap<String, RoleSequence> {
        &self.sequences
    }

    /// Stores one captured request and returns its communication id.
    pub fn record_exchange(&mut self, raw_request: &[u8], role: &str) -> Result<u64, TrainError> {
        validate_role(role)?;
        let req = http::parse_request(raw_request).map_err(TrainError::BadRequest)?;
        let id = derive_request_id(&req.method, req.path(), &self.index_page)?;
        let flag = extract_session_flag(&req.headers, &self.session_cookie);
        let role = if flag == 0 { ANONYMOUS_ROLE } else { role };

        let cid = self.next_id;
        let p = self.dir.join(format!("{cid}_request"));
        fs::write(&p, raw_request).map_err(io_err(&p))?;
        let p = self.dir.join(format!("{cid}_Srequest"));
        fs::write(&p, flag.to_string()).map_err(io_err(&p))?;
        self.next_id += 1;

        let seq = self.sequences.entry(role.to_string()).or_default();
        if self.open.insert(role.to_string()) || seq.sessions.is_empty() {
            seq.sessions.push(Vec::new());
        }
        seq.sessions.last_mut().expect("session opened above").push((cid, id.page));
        let p = self.dir.join(format!("{role}.xml"));
        fs::write(&p, render_sequence(role, seq)).map_err(io_err(&p))?;
        Ok(cid)
    }

    /// Ends the current browsing session; the next capture for any role
    /// starts a new one.
    pub fn end_session(&mut self) {
        self.open.clear();
    }
}

/// Builds both model sets from a store directory.
pub fn build_model(dir: &Path, index_page: &str) -> Result<Models, TrainError> {
    let (requests, flags) = numbered_files(dir)?;
    if let Some(id) = requests.keys().find(|id| !flags.contains_key(id)) {
        return Err(TrainError::OrphanRequest(*id));
    }
    if let Some(id) = flags.keys().find(|id| !requests.contains_key(id)) {
        return Err(TrainError::OrphanFlag(*id));
    }
    if requests.is_empty() {
        return Err(TrainError::EmptyStore(dir.to_path_buf()));
    }
    let sequences = read_sequences(dir)?;
    let mut role_of: HashMap<u64, &str> = HashMap::new();
    for (role, seq) in &sequences {
        for (id, _) in seq.sessions.iter().flatten() {
            if !requests.contains_key(id) {
                return Err(TrainError::MissingRequest(*id));
            }
            role_of.insert(*id, role);
        }
    }

    let mut set1 = ModelSet1::default();
    for (sno, (id, path)) in requests.iter().enumerate() {
        let raw = fs::read(path).map_err(io_err(path))?;
        let req = http::parse_request(&raw).map_err(TrainError::BadRequest)?;
        let reqresid = derive_request_id(&req.method, req.path(), index_page)?;
        let fp = &flags[id];
        let text = fs::read_to_string(fp).map_err(io_err(fp))?;
        let session_flag = match text.trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(TrainError::BadFlag { id: *id, text }),
        };
        let role = role_of.get(id).ok_or(TrainError::Unattributed(*id))?;
        set1.rows.push(ModelRow {
            sno: sno as u64,
            convid: *id,
            reqresid: reqresid.to_string(),
            session_flag,
            role: role.to_string(),
        });
    }

    let mut set2 = ModelSet2::default();
    for (role, seq) in &sequences {
        let graph = set2.roles.entry(role.clone()).or_insert_with(RoleGraph::default);
        for session in &seq.sessions {
            let pages: Vec<&str> = session
                .iter()
                .map(|(_, p)| p.as_str())
                .filter(|p| !is_asset(p))
                .collect();
            if let Some(first) = pages.first() {
                graph.entries.insert(first.to_string());
            }
            for w in pages.windows(2) {
                graph.add_edge(w[0], w[1]);
            }
        }
    }
    Ok(Models { set1, set2 })
}

#[derive(Debug, Clone)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone)]
pub struct CrawlConfig {
    pub base_url: String,
    pub role: String,
    pub credentials: Option<Credentials>,
    /// First page of an unauthenticated crawl.
    pub start_page: String,
    pub login_page: String,
    pub logout_page: String,
    pub user_field: String,
    pub password_field: String,
    pub session_cookie: String,
    pub user_agent: String,
    /// Upper bound on captured requests, as a guard against link traps.
    pub max_requests: usize,
}

impl CrawlConfig {
    pub fn new(base_url: &str, role: &str) -> Self {
        CrawlConfig {
            base_url: base_url.to_string(),
            role: role.to_string(),
            credentials: None,
            start_page: "About.php".into(),
            login_page: "Login.php".into(),
            logout_page: "Logout.php".into(),
            user_field: "username".into(),
            password_field: "password".into(),
            session_cookie: DEFAULT_SESSION_COOKIE.into(),
            user_agent: "phpguard-crawler/0.1".into(),
            max_requests: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrawlReport {
    /// Distinct pages in first-visit order (basenames).
    pub pages: Vec<String>,
    pub requests: usize,
    pub sessions: usize,
}

fn link_pattern() -> Regex {
    Regex::new(r#"(?i)\b(href|src)\s*=\s*["']([^"'#]+)["']"#).expect("valid pattern")
}

fn page_of(url: &Url) -> String {
    url.path_segments()
        .and_then(|mut s| s.next_back())
        .unwrap_or("")
        .to_string()
}

struct Browser<'a> {
    cfg: &'a CrawlConfig,
    base: Url,
    addr: SocketAddr,
    host: String,
    user_agent: String,
    cookies: BTreeMap<String, String>,
    links: Regex,
}

struct Fetched {
    url: Url,
    response: Response,
}

impl Browser<'_> {
    fn send(&mut self, method: &str, url: &Url, body: &[u8], store: &mut ProfileStore, record: bool) -> Result<Response, TrainError> {
        let mut target = url.path().to_string();
        if let Some(q) = url.query() {
            target.push('?');
            target.push_str(q);
        }
        let cookie = self
            .cookies
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join("; ");
        let mut headers = vec![("User-Agent", self.user_agent.as_str())];
        if !cookie.is_empty() {
            headers.push(("Cookie", cookie.as_str()));
        }
        if !body.is_empty() {
            headers.push(("Content-Type", "application/x-www-form-urlencoded"));
        }
        let raw = http::build_request(method, &target, &self.host, &headers, body);
        let response = http::exchange(self.addr, &raw, None).map_err(|source| TrainError::Unreachable {
            url: url.to_string(),
            source,
        })?;
        if record {
            store.record_exchange(&raw, &self.cfg.role)?;
        }
        for c in response.set_cookies() {
            if c.expired || c.value.is_empty() {
                self.cookies.remove(&c.name);
            } else {
                self.cookies.insert(c.name, c.value);
            }
        }
        Ok(response)
    }

    /// GET with redirects followed; every hop is captured.
    fn get(&mut self, url: &Url, store: &mut ProfileStore) -> Result<Fetched, TrainError> {
        let mut url = url.clone();
        for _ in 0..5 {
            let response = self.send("GET", &url, b"", store, true)?;
            match redirect_target(&url, &response) {
                Some(next) if self.same_origin(&next) => url = next,
                _ => return Ok(Fetched { url, response }),
            }
        }
        let response = self.send("GET", &url, b"", store, true)?;
        Ok(Fetched { url, response })
    }

    fn same_origin(&self, u: &Url) -> bool {
        u.scheme() == self.base.scheme()
            && u.host_str() == self.base.host_str()
            && u.port_or_known_default() == self.base.port_or_known_default()
    }

    /// Navigable page links and asset references of a response body.
    fn extract(&self, page: &Url, body: &[u8]) -> (Vec<Url>, Vec<Url>) {
        let text = String::from_utf8_lossy(body);
        let mut pages = Vec::new();
        let mut assets = Vec::new();
        for cap in self.links.captures_iter(&text) {
            let Ok(mut u) = page.join(cap[2].trim()) else { continue };
            u.set_fragment(None);
            if !self.same_origin(&u) {
                continue;
            }
            let name = page_of(&u);
            if is_asset(&name) {
                if !assets.contains(&u) {
                    assets.push(u);
                }
            } else if cap[1].eq_ignore_ascii_case("href")
                && !name.eq_ignore_ascii_case(&self.cfg.logout_page)
                && !pages.contains(&u)
            {
                pages.push(u);
            }
        }
        (pages, assets)
    }

    fn login(&mut self, creds: &Credentials, store: &mut ProfileStore) -> Result<Fetched, TrainError> {
        let fail = |detail: String| TrainError::LoginFailed {
            role: self.cfg.role.clone(),
            detail,
        };
        let login_url = self
            .base
            .join(&self.cfg.login_page)
            .map_err(|_| TrainError::BadBase(self.cfg.login_page.clone()))?;
        self.get(&login_url, store)?;
        let body = url::form_urlencoded::Serializer::new(String::new())
            .append_pair(&self.cfg.user_field, &creds.username)
            .append_pair(&self.cfg.password_field, &creds.password)
            .finish();
        let response = self.send("POST", &login_url, body.as_bytes(), store, true)?;
        if !self.cookies.contains_key(&self.cfg.session_cookie) {
            return Err(fail(format!(
                "no {} cookie in the {} response",
                self.cfg.session_cookie, response.status
            )));
        }
        let landing = redirect_target(&login_url, &response)
            .ok_or_else(|| fail(format!("login answered {} without a redirect", response.status)))?;
        self.get(&landing, store)
    }

    fn logout(&mut self, store: &mut ProfileStore) {
        if let Ok(u) = self.base.join(&self.cfg.logout_page) {
            // Performed but not captured.
            let _ = self.send("GET", &u, b"", store, false);
        }
        self.cookies.clear();
    }
}

fn redirect_target(from: &Url, r: &Response) -> Option<Url> {
    if !(300..400).contains(&r.status) {
        return None;
    }
    from.join(r.header("location")?.trim()).ok()
}

/// Crawls the target for one role, capturing every request into `store`.
///
/// The crawl is a link-following walk: from the current page follow the
/// first link not yet visited; otherwise walk known links to the nearest
/// page that still has one (those revisits are captured but not
/// re-expanded); otherwise end the browsing session, log out, and start a
/// new session from the entry page. Each session uses its own User-Agent.
/// Assets are fetched once but never navigated.
pub fn crawl(cfg: &CrawlConfig, store: &mut ProfileStore) -> Result<CrawlReport, TrainError> {
    validate_role(&cfg.role)?;
    let mut base = Url::parse(&cfg.base_url).map_err(|_| TrainError::BadBase(cfg.base_url.clone()))?;
    if !base.path().ends_with('/') {
        let p = format!("{}/", base.path());
        base.set_path(&p);
    }
    let host = match base.port() {
        Some(p) => format!("{}:{p}", base.host_str().unwrap_or("")),
        None => base.host_str().unwrap_or("").to_string(),
    };
    let addr = base
        .socket_addrs(|| Some(80))
        .ok()
        .and_then(|a| a.into_iter().next())
        .or_else(|| host.to_socket_addrs().ok().and_then(|mut a| a.next()))
        .ok_or_else(|| TrainError::BadBase(cfg.base_url.clone()))?;
    let start = base
        .join(&cfg.start_page)
        .map_err(|_| TrainError::BadBase(cfg.start_page.clone()))?;

    let mut report = CrawlReport::default();
    // Page path → its links; presence means the page has been expanded.
    let mut links: HashMap<String, Vec<Url>> = HashMap::new();
    // Every path requested so far, including redirect sources.
    let mut attempted: HashSet<String> = HashSet::new();
    let mut fetched_assets: HashSet<String> = HashSet::new();
    let first_id = store.next_id;
    let budget_left = |store: &ProfileStore| ((store.next_id - first_id) as usize) < cfg.max_requests;

    loop {
        report.sessions += 1;
        let mut b = Browser {
            cfg,
            base: base.clone(),
            addr,
            host: host.clone(),
            user_agent: format!("{} ({}; session {})", cfg.user_agent, cfg.role, report.sessions),
            cookies: BTreeMap::new(),
            links: link_pattern(),
        };
        let attempted_before = attempted.len();
        let mut current = match &cfg.credentials {
            Some(c) => b.login(c, store)?,
            None => b.get(&start, store)?,
        };
        loop {
            let key = current.url.path().to_string();
            attempted.insert(key.clone());
            if !links.contains_key(&key) {
                report.pages.push(page_of(&current.url));
                let (pages, assets) = if current.response.status < 400 {
                    b.extract(&current.url, &current.response.body)
                } else {
                    (Vec::new(), Vec::new())
                };
                for a in assets {
                    if fetched_assets.insert(a.path().to_string()) {
                        b.send("GET", &a, b"", store, true)?;
                    }
                }
                links.insert(key.clone(), pages);
            }
            if !budget_left(store) {
                break;
            }
            let next = links[&key].iter().find(|u| !attempted.contains(u.path())).cloned();
            if let Some(u) = next {
                attempted.insert(u.path().to_string());
                current = b.get(&u, store)?;
                continue;
            }
            let Some(path) = path_to_unexplored(&key, &links, &attempted) else { break };
            for u in path {
                current = b.get(&u, store)?;
            }
        }
        if cfg.credentials.is_some() {
            b.logout(store);
        }
        store.end_session();
        let unexplored = links
            .values()
            .flatten()
            .any(|u| !attempted.contains(u.path()));
        let progressed = attempted.len() > attempted_before;
        if !unexplored || !progressed || !budget_left(store) {
            break;
        }
    }
    report.requests = (store.next_id - first_id) as usize;
    Ok(report)
}

/// Shortest walk over known links from `from` to an expanded page that
/// still has a link never requested.
fn path_to_unexplored(
    from: &str,
    links: &HashMap<String, Vec<Url>>,
    attempted: &HashSet<String>,
) -> Option<Vec<Url>> {
    let mut prev: HashMap<String, (String, Url)> = HashMap::new();
    let mut queue = VecDeque::from([from.to_string()]);
    let mut seen = HashSet::from([from.to_string()]);
    while let Some(p) = queue.pop_front() {
        let Some(out) = links.get(&p) else { continue };
        if p != from && out.iter().any(|u| !attempted.contains(u.path())) {
            let mut path = Vec::new();
            let mut cur = p;
            while let Some((before, url)) = prev.get(&cur) {
                path.push(url.clone());
                cur = before.clone();
            }
            path.reverse();
            return Some(path);
        }
        for u in out {
            let k = u.path().to_string();
            if links.contains_key(&k) && seen.insert(k.clone()) {
                prev.insert(k.clone(), (p.clone(), u.clone()));
                queue.push_back(k);
            }
        }
    }
    None
}

/// Reads back every captured request of a store in id order.
pub fn captured_requests(dir: &Path) -> Result<Vec<(u64, Request)>, TrainError> {
    let (requests, _) = numbered_files(dir)?;
    let mut out = Vec::new();
    for (id, p) in requests {
        let raw = fs::read(&p).map_err(io_err(&p))?;
        out.push((id, http::parse_request(&raw).map_err(TrainError::BadRequest)?));
    }
    Ok(out)
}
