//! Runtime enforcement: a reverse proxy that checks each request against
//! the learned models and the client's state before forwarding it.
//!
//! Checks run in order: session-cookie pinning (hijack), Model Set 1
//! membership of (request id, session flag, role), then the role's page
//! graph (entry page or trained edge from the client's last page).

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::{IpAddr, SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::http::{self, HttpError, Request, Response, Server};
use crate::model::{
    derive_request_id, is_asset, ModelSet2, Models, RelationIndex, RequestId, ANONYMOUS_ROLE,
    DEFAULT_INDEX_PAGE,
};
use crate::trainer::{extract_session_flag, DEFAULT_SESSION_COOKIE};

pub const VERDICT_HEADER: &str = "X-Workflow-Verdict";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Block,
    DontBlock,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Block => "block",
            Status::DontBlock => "don't_block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reason {
    Ok,
    UnknownRequest,
    SessionFlagMismatch,
    RoleMismatch,
    UnknownPageForRole,
    SequenceViolation,
    IdentityMismatch,
}

impl Reason {
    pub const ALL: [Reason; 7] = [
        Reason::Ok,
        Reason::UnknownRequest,
        Reason::SessionFlagMismatch,
        Reason::RoleMismatch,
        Reason::UnknownPageForRole,
        Reason::SequenceViolation,
        Reason::IdentityMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::UnknownRequest => "unknown_request",
            Reason::SessionFlagMismatch => "session_flag_mismatch",
            Reason::RoleMismatch => "role_mismatch",
            Reason::UnknownPageForRole => "unknown_page_for_role",
            Reason::SequenceViolation => "sequence_violation",
            Reason::IdentityMismatch => "identity_mismatch",
        }
    }

    pub fn parse(s: &str) -> Option<Reason> {
        Reason::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// Verification level a block with this reason comes from.
    pub fn level(self) -> Option<Level> {
        match self {
            Reason::Ok => None,
            Reason::UnknownRequest | Reason::SessionFlagMismatch | Reason::RoleMismatch => {
                Some(Level::One)
            }
            Reason::UnknownPageForRole | Reason::SequenceViolation => Some(Level::Two),
            Reason::IdentityMismatch => Some(Level::Identity),
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    One,
    Two,
    Identity,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::One => "1",
            Level::Two => "2",
            Level::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        [Level::One, Level::Two, Level::Identity]
            .into_iter()
            .find(|l| l.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub status: Status,
    pub reason: Reason,
    pub detail: String,
}

impl Verdict {
    pub fn allow() -> Verdict {
        Verdict {
            status: Status::DontBlock,
            reason: Reason::Ok,
            detail: String::new(),
        }
    }

    pub fn block(reason: Reason, detail: impl Into<String>) -> Verdict {
        debug_assert_ne!(reason, Reason::Ok);
        Verdict {
            status: Status::Block,
            reason,
            detail: detail.into(),
        }
    }

    pub fn is_block(&self) -> bool {
        self.status == Status::Block
    }
}

/// Model Set 1 check of one (request id, session flag, role) triple.
pub fn verify_level1(reqresid: &str, flag: u8, role: &str, index: &RelationIndex) -> Verdict {
    let Some(trained) = index.get(reqresid) else {
        return Verdict::block(Reason::UnknownRequest, format!("{reqresid} was never trained"));
    };
    if trained.contains(&(flag, role.to_string())) {
        return Verdict::allow();
    }
    if trained.contains(&(1 - flag.min(1), role.to_string())) {
        return Verdict::block(
            Reason::SessionFlagMismatch,
            format!("{reqresid} for role {role} requires session flag {}", 1 - flag.min(1)),
        );
    }
    if trained.iter().any(|(f, _)| *f == flag) {
        return Verdict::block(
            Reason::RoleMismatch,
            format!("{reqresid} is not trained for role {role}"),
        );
    }
    Verdict::block(
        Reason::SessionFlagMismatch,
        format!("{reqresid} is never trained with session flag {flag}"),
    )
}

/// Model Set 2 check: entry page when there is no last page, else a
/// trained edge from the last page.
pub fn verify_level2(page: &str, role: &str, last_page: Option<&str>, set2: &ModelSet2) -> Verdict {
    let Some(graph) = set2.roles.get(role) else {
        return Verdict::block(Reason::UnknownPageForRole, format!("role {role} has no page graph"));
    };
    if !graph.contains(page) {
        return Verdict::block(
            Reason::UnknownPageForRole,
            format!("{page} is not a page of role {role}"),
        );
    }
    match last_page {
        None if graph.entries.contains(page) => Verdict::allow(),
        None => Verdict::block(
            Reason::SequenceViolation,
            format!("{page} is not an entry page of role {role}"),
        ),
        Some(last) if graph.has_edge(last, page) => Verdict::allow(),
        Some(last) => Verdict::block(
            Reason::SequenceViolation,
            format!("{page} does not follow {last} for role {role}"),
        ),
    }
}

/// Levels 1 and 2 for a request whose identity check already passed.
/// Assets skip level 2.
pub fn verify_request(
    id: &RequestId,
    flag: u8,
    role: &str,
    last_page: Option<&str>,
    index: &RelationIndex,
    set2: &ModelSet2,
) -> Verdict {
    let v = verify_level1(&id.to_string(), flag, role, index);
    if v.is_block() || is_asset(&id.page) {
        return v;
    }
    verify_level2(&id.page, role, last_page, set2)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientIdentity {
    pub ip: IpAddr,
    pub user_agent: String,
}

impl fmt::Display for ClientIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.ip, self.user_agent)
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub identity: ClientIdentity,
    pub session_cookie: Option<String>,
    pub role: String,
    pub last_page: Option<String>,
    pub first_seen: Instant,
    pub last_seen: Instant,
}

impl ClientState {
    fn new(identity: ClientIdentity, session_cookie: Option<String>, now: Instant) -> Self {
        ClientState {
            identity,
            session_cookie,
            role: ANONYMOUS_ROLE.to_string(),
            last_page: None,
            first_seen: now,
            last_seen: now,
        }
    }
}

#[derive(Debug, Error)]
pub enum BindingsError {
    #[error("{file}:{line}: expected `username,role`, got {text:?}")]
    Malformed {
        file: String,
        line: usize,
        text: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Username → role table known before enforcement starts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(pub HashMap<String, String>);

impl Bindings {
    /// Lines `username,role`; blank lines and `#` comments ignored.
    pub fn parse(text: &str, file: &str) -> Result<Bindings, BindingsError> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            match t.split_once(',') {
                Some((u, r)) if !u.trim().is_empty() && !r.trim().is_empty() && !r.contains(',') => {
                    map.insert(u.trim().to_string(), r.trim().to_string());
                }
                _ => {
                    return Err(BindingsError::Malformed {
                        file: file.to_string(),
                        line: i + 1,
                        text: raw.to_string(),
                    })
                }
            }
        }
        Ok(Bindings(map))
    }

    pub fn load(path: &Path) -> Result<Bindings, BindingsError> {
        let text = std::fs::read_to_string(path).map_err(|source| BindingsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Bindings::parse(&text, &path.display().to_string())
    }
}

/// Role after an optional login event; unknown usernames get role 0.
pub fn resolve_role(state: &ClientState, login_event: Option<&str>, bindings: &Bindings) -> String {
    match login_event {
        None => state.role.clone(),
        Some(user) => match bindings.0.get(user) {
            Some(role) => role.clone(),
            None => {
                log::warn!("login by {user:?}, who has no role binding; treating as role 0");
                ANONYMOUS_ROLE.to_string()
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviationRecord {
    pub timestamp: DateTime<Utc>,
    /// `ip user-agent`
    pub identity: String,
    pub request_id: String,
    pub level: Level,
    pub reason: Reason,
    pub detail: String,
}

fn escape_field(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\t', "\\t")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

impl DeviationRecord {
    /// One tab-separated line (no trailing newline).
    pub fn to_line(&self) -> String {
        [
            self.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            escape_field(&self.identity),
            escape_field(&self.request_id),
            self.level.as_str().to_string(),
            self.reason.as_str().to_string(),
            escape_field(&self.detail),
        ]
        .join("\t")
    }

    pub fn parse_line(line: &str) -> Option<DeviationRecord> {
        let f: Vec<&str> = line.split('\t').collect();
        let [ts, identity, request_id, level, reason, detail] = f.as_slice() else {
            return None;
        };
        Some(DeviationRecord {
            timestamp: DateTime::parse_from_rfc3339(ts).ok()?.with_timezone(&Utc),
            identity: unescape_field(identity)?,
            request_id: unescape_field(request_id)?,
            level: Level::parse(level)?,
            reason: Reason::parse(reason)?,
            detail: unescape_field(detail)?,
        })
    }
}

/// Append-only record of blocked requests.
#[derive(Debug)]
pub struct DeviationLog {
    inner: Mutex<LogInner>,
}

#[derive(Debug)]
struct LogInner {
    file: Option<File>,
    records: Vec<DeviationRecord>,
}

impl DeviationLog {
    pub fn in_memory() -> DeviationLog {
        DeviationLog {
            inner: Mutex::new(LogInner {
                file: None,
                records: Vec::new(),
            }),
        }
    }

    pub fn open(path: &Path) -> std::io::Result<DeviationLog> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(DeviationLog {
            inner: Mutex::new(LogInner {
                file: Some(file),
                records: Vec::new(),
            }),
        })
    }

    pub fn append(&self, record: DeviationRecord) {
        let mut inner = self.inner.lock().expect("log lock");
        if let Some(f) = inner.file.as_mut() {
            if let Err(e) = writeln!(f, "{}", record.to_line()).and_then(|_| f.flush()) {
                log::error!("deviation log write failed: {e}");
            }
        }
        inner.records.push(record);
    }

    /// Records appended by this process.
    pub fn records(&self) -> Vec<DeviationRecord> {
        self.inner.lock().expect("log lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_log(path: &Path) -> std::io::Result<Vec<DeviationRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            DeviationRecord::parse_line(l).ok_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: malformed deviation record", path.display(), i + 1),
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnforcerConfig {
    pub session_cookie: String,
    pub login_page: String,
    pub user_field: String,
    pub idle_timeout: Duration,
    pub index_page: String,
}

impl Default for EnforcerConfig {
    fn default() -> Self {
        EnforcerConfig {
            session_cookie: DEFAULT_SESSION_COOKIE.into(),
            login_page: "Login.php".into(),
            user_field: "username".into(),
            idle_timeout: Duration::from_secs(1800),
            index_page: DEFAULT_INDEX_PAGE.into(),
        }
    }
}

type ClientKey = (ClientIdentity, Option<String>);

#[derive(Default)]
struct Clients {
    states: HashMap<ClientKey, ClientState>,
    /// Session cookie → identity it was first seen with.
    pins: HashMap<String, ClientIdentity>,
}

pub struct Enforcer {
    models: Models,
    index: RelationIndex,
    config: EnforcerConfig,
    bindings: Bindings,
    clients: Mutex<Clients>,
    log: DeviationLog,
}

/// Result of verifying one request, with what the response handler needs.
struct Checked {
    verdict: Verdict,
    request_id: String,
    cookie: Option<String>,
}

impl Enforcer {
    pub fn new(models: Models, bindings: Bindings, config: EnforcerConfig, log: DeviationLog) -> Self {
        let index = RelationIndex::new(&models.set1);
        Enforcer {
            models,
            index,
            config,
            bindings,
            clients: Mutex::new(Clients::default()),
            log,
        }
    }

    pub fn log(&self) -> &DeviationLog {
        &self.log
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    /// Snapshot of a client's state.
    pub fn client_state(&self, identity: &ClientIdentity, cookie: Option<&str>) -> Option<ClientState> {
        let clients = self.clients.lock().expect("client lock");
        clients
            .states
            .get(&(identity.clone(), cookie.map(str::to_string)))
            .cloned()
    }

    fn session_cookie(&self, req: &Request) -> Option<String> {
        req.cookie(&self.config.session_cookie).filter(|c| !c.is_empty())
    }

    fn check(&self, req: &Request, identity: &ClientIdentity) -> Checked {
        let cookie = self.session_cookie(req);
        let flag = extract_session_flag(&req.headers, &self.config.session_cookie);
        let id = derive_request_id(&req.method, req.path(), &self.config.index_page);
        let request_id = id.as_ref().map_or_else(|_| "-".to_string(), |i| i.to_string());
        let done = |verdict| Checked {
            verdict,
            request_id: request_id.clone(),
            cookie: cookie.clone(),
        };
        let now = Instant::now();
        let mut clients = self.clients.lock().expect("client lock");
        if let Some(c) = &cookie {
            match clients.pins.get(c) {
                Some(owner) if owner != identity => {
                    return done(Verdict::block(
                        Reason::IdentityMismatch,
                        format!("session cookie belongs to another client ({owner})"),
                    ))
                }
                Some(_) => {}
                None => {
                    clients.pins.insert(c.clone(), identity.clone());
                }
            }
        }
        let state = clients
            .states
            .entry((identity.clone(), cookie.clone()))
            .or_insert_with(|| ClientState::new(identity.clone(), cookie.clone(), now));
        if now.duration_since(state.last_seen) > self.config.idle_timeout {
            state.role = ANONYMOUS_ROLE.to_string();
            state.last_page = None;
        }
        state.last_seen = now;
        let Ok(id) = id else {
            return done(Verdict::block(Reason::UnknownRequest, "request has no method"));
        };
        let verdict = verify_request(
            &id,
            flag,
            &state.role,
            state.last_page.as_deref(),
            &self.index,
            &self.models.set2,
        );
        if !verdict.is_block() && !is_asset(&id.page) {
            state.last_page = Some(id.page.clone());
        }
        done(verdict)
    }

    /// Verifies a request and updates the client's state.
    pub fn verify(&self, req: &Request, identity: &ClientIdentity) -> Verdict {
        self.check(req, identity).verdict
    }

    /// Applies login/logout effects of a forwarded request's response.
    fn observe_response(&self, req: &Request, identity: &ClientIdentity, old_cookie: Option<&str>, resp: &Response) {
        let name = &self.config.session_cookie;
        let Some(set) = resp.set_cookies().into_iter().find(|c| &c.name == name) else {
            return;
        };
        let now = Instant::now();
        let mut clients = self.clients.lock().expect("client lock");
        if set.expired || set.value.is_empty() {
            if let Some(c) = old_cookie {
                clients.states.remove(&(identity.clone(), Some(c.to_string())));
                clients.pins.remove(c);
            }
            return;
        }
        let is_login = req.method.eq_ignore_ascii_case("POST")
            && derive_request_id(&req.method, req.path(), &self.config.index_page)
                .is_ok_and(|id| id.page == self.config.login_page);
        let prior = old_cookie.and_then(|c| clients.states.get(&(identity.clone(), Some(c.to_string()))).cloned());
        let mut state = ClientState::new(identity.clone(), Some(set.value.clone()), now);
        if let Some(p) = &prior {
            state.role = p.role.clone();
            state.last_page = p.last_page.clone();
        }
        if is_login {
            let user = url::form_urlencoded::parse(&req.body)
                .find(|(k, _)| k == self.config.user_field.as_str())
                .map(|(_, v)| v.into_owned());
            state.role = resolve_role(&state, Some(user.as_deref().unwrap_or("")), &self.bindings);
            state.last_page = None;
        }
        clients.pins.insert(set.value.clone(), identity.clone());
        clients.states.insert((identity.clone(), Some(set.value)), state);
    }

    fn record_block(&self, identity: &ClientIdentity, request_id: &str, verdict: &Verdict) {
        self.log.append(DeviationRecord {
            timestamp: Utc::now(),
            identity: identity.to_string(),
            request_id: request_id.to_string(),
            level: verdict.reason.level().unwrap_or(Level::One),
            reason: verdict.reason,
            detail: verdict.detail.clone(),
        });
    }

    /// Full request path: verify, then forward or block. Returns the raw
    /// response for the client.
    pub fn handle(&self, req: Result<Request, HttpError>, peer: SocketAddr, upstream: SocketAddr) -> Vec<u8> {
        let req = match req {
            Ok(r) => r,
            Err(e) => {
                let identity = ClientIdentity {
                    ip: peer.ip(),
                    user_agent: "-".into(),
                };
                let v = Verdict::block(Reason::UnknownRequest, format!("unparseable request: {e}"));
                self.record_block(&identity, "-", &v);
                return block_response(&v).raw;
            }
        };
        let identity = ClientIdentity {
            ip: peer.ip(),
            user_agent: req.header("user-agent").unwrap_or("").to_string(),
        };
        let checked = self.check(&req, &identity);
        if checked.verdict.is_block() {
            self.record_block(&identity, &checked.request_id, &checked.verdict);
            return block_response(&checked.verdict).raw;
        }
        match http::exchange(upstream, &req.raw, None) {
            Ok(resp) => {
                self.observe_response(&req, &identity, checked.cookie.as_deref(), &resp);
                resp.raw
            }
            Err(e) => {
                log::warn!("upstream {upstream} failed: {e}");
                Response::new(
                    502,
                    "Bad Gateway",
                    &[("Content-Type", "text/plain")],
                    b"upstream unavailable\n",
                )
                .raw
            }
        }
    }

    /// Starts the proxy on `listener`, forwarding to `upstream`.
    pub fn serve(self: Arc<Self>, listener: TcpListener, upstream: SocketAddr) -> std::io::Result<Server> {
        http::serve(
            listener,
            Arc::new(move |req, peer| self.handle(req, peer, upstream)),
        )
    }
}

/// 403 page naming the reason category only.
pub fn block_response(v: &Verdict) -> Response {
    let body = format!(
        "<html><head><title>403 Forbidden</title></head><body>\n\
         <h1>Request blocked</h1>\n\
         <p>This request deviates from the application's expected work flow ({}).</p>\n\
         </body></html>\n",
        v.reason
    );
    let header = format!("block; reason={}", v.reason);
    Response::new(
        403,
        "Forbidden",
        &[
            ("Content-Type", "text/html; charset=utf-8"),
            (VERDICT_HEADER, header.as_str()),
        ],
        body.as_bytes(),
    )
}
