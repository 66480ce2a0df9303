//! Minimal HTTP/1.x message handling: one request per connection, bodies by
//! `Content-Length` only.

use std::io::{self, Read, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

const MAX_HEAD: usize = 64 * 1024;
const MAX_HEADERS: usize = 64;
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("connection closed before a complete message")]
    Incomplete,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message head exceeds {MAX_HEAD} bytes")]
    TooLarge,
    #[error("chunked transfer encoding is not supported")]
    Chunked,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub target: String,
    pub version: u8,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    /// The request exactly as received (head and body).
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub raw: Vec<u8>,
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

fn headers_all<'a>(
    headers: &'a [(String, String)],
    name: &'a str,
) -> impl Iterator<Item = &'a str> + 'a {
    headers
        .iter()
        .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        header(&self.headers, name)
    }

    /// Path component of the request target, without query or fragment.
    pub fn path(&self) -> &str {
        let t = self.target.as_str();
        let t = match t.find("://") {
            // absolute-form: scheme://authority/path
            Some(i) => t[i + 3..].find('/').map_or("/", |j| &t[i + 3 + j..]),
            None => t,
        };
        t.split(['?', '#']).next().unwrap_or("")
    }

    /// `name=value` pairs from every `Cookie` header.
    pub fn cookies(&self) -> Vec<(String, String)> {
        headers_all(&self.headers, "cookie")
            .flat_map(parse_cookie_header)
            .collect()
    }

    pub fn cookie(&self, name: &str) -> Option<String> {
        self.cookies()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

impl Response {
    pub fn header(&self, name: &str) -> Option<&str> {
        header(&self.headers, name)
    }

    /// `(name, value)` of each `Set-Cookie` header, attributes dropped.
    pub fn set_cookies(&self) -> Vec<SetCookie> {
        headers_all(&self.headers, "set-cookie")
            .filter_map(parse_set_cookie)
            .collect()
    }

    /// Builds a complete response with `Content-Length` and
    /// `Connection: close`.
    pub fn new(status: u16, reason: &str, headers: &[(&str, &str)], body: &[u8]) -> Response {
        let mut head = format!("HTTP/1.1 {status} {reason}\r\n");
        let mut hs = Vec::new();
        for (n, v) in headers {
            head.push_str(&format!("{n}: {v}\r\n"));
            hs.push((n.to_string(), v.to_string()));
        }
        head.push_str(&format!(
            "Content-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        ));
        hs.push(("Content-Length".into(), body.len().to_string()));
        hs.push(("Connection".into(), "close".into()));
        let mut raw = head.into_bytes();
        raw.extend_from_slice(body);
        Response {
            status,
            reason: reason.to_string(),
            headers: hs,
            body: body.to_vec(),
            raw,
        }
    }
}

pub fn parse_cookie_header(value: &str) -> Vec<(String, String)> {
    value
        .split(';')
        .filter_map(|pair| {
            let (n, v) = pair.split_once('=')?;
            let n = n.trim();
            (!n.is_empty()).then(|| (n.to_string(), v.trim().to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetCookie {
    pub name: String,
    pub value: String,
    /// `Max-Age=0` or an `Expires` date in the past.
    pub expired: bool,
}

fn parse_set_cookie(value: &str) -> Option<SetCookie> {
    let mut parts = value.split(';');
    let (name, v) = parts.next()?.split_once('=')?;
    let mut expired = false;
    for attr in parts {
        let (k, a) = attr.split_once('=').unwrap_or((attr, ""));
        let k = k.trim();
        if k.eq_ignore_ascii_case("max-age") && a.trim().parse::<i64>().is_ok_and(|n| n <= 0) {
            expired = true;
        }
        if k.eq_ignore_ascii_case("expires") {
            if let Ok(t) = chrono::DateTime::parse_from_rfc2822(a.trim()) {
                expired |= t < chrono::Utc::now();
            }
        }
    }
    Some(SetCookie {
        name: name.trim().to_string(),
        value: v.trim().to_string(),
        expired,
    })
}

fn content_length(headers: &[(String, String)]) -> Result<Option<usize>, HttpError> {
    if header(headers, "transfer-encoding").is_some_and(|v| !v.eq_ignore_ascii_case("identity")) {
        return Err(HttpError::Chunked);
    }
    match header(headers, "content-length") {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HttpError::Malformed(format!("bad Content-Length {v:?}"))),
    }
}

fn owned_headers(hs: &[httparse::Header<'_>]) -> Vec<(String, String)> {
    hs.iter()
        .map(|h| {
            (
                h.name.to_string(),
                String::from_utf8_lossy(h.value).into_owned(),
            )
        })
        .collect()
}

/// Reads until `parse` reports a complete head; returns the buffer and the
/// head length.
fn read_head<R: Read>(
    reader: &mut R,
    mut parse: impl FnMut(&[u8]) -> Result<httparse::Status<usize>, httparse::Error>,
) -> Result<(Vec<u8>, usize), HttpError> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 4096];
    loop {
        if !buf.is_empty() {
            match parse(&buf) {
                Ok(httparse::Status::Complete(n)) => return Ok((buf, n)),
                Ok(httparse::Status::Partial) => {}
                Err(e) => return Err(HttpError::Malformed(e.to_string())),
            }
        }
        if buf.len() > MAX_HEAD {
            return Err(HttpError::TooLarge);
        }
        let n = reader.read(&mut chunk)?;
        if n == 0 {
            return Err(HttpError::Incomplete);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

fn read_body<R: Read>(reader: &mut R, buf: &mut Vec<u8>, total: usize) -> Result<(), HttpError> {
    let mut chunk = [0u8; 8192];
    while buf.len() < total {
        let n = reader.read(&mut chunk)?;
        if n == 0 {
            return Err(HttpError::Incomplete);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    buf.truncate(total);
    Ok(())
}

pub fn read_request<R: Read>(reader: &mut R) -> Result<Request, HttpError> {
    let (mut buf, head_len) = read_head(reader, |b| {
        let mut hs = [httparse::EMPTY_HEADER; MAX_HEADERS];
        httparse::Request::new(&mut hs).parse(b)
    })?;
    let mut hs = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut hs);
    req.parse(&buf)
        .map_err(|e| HttpError::Malformed(e.to_string()))?;
    let method = req.method.unwrap_or_default().to_string();
    let target = req.path.unwrap_or_default().to_string();
    let version = req.version.unwrap_or(1);
    let headers = owned_headers(req.headers);
    let len = content_length(&headers)?.unwrap_or(0);
    read_body(reader, &mut buf, head_len + len)?;
    Ok(Request {
        method,
        target,
        version,
        headers,
        body: buf[head_len..].to_vec(),
        raw: buf,
    })
}

/// Parses a request held entirely in memory.
pub fn parse_request(bytes: &[u8]) -> Result<Request, HttpError> {
    read_request(&mut io::Cursor::new(bytes))
}

pub fn read_response<R: Read>(reader: &mut R) -> Result<Response, HttpError> {
    let (mut buf, head_len) = read_head(reader, |b| {
        let mut hs = [httparse::EMPTY_HEADER; MAX_HEADERS];
        httparse::Response::new(&mut hs).parse(b)
    })?;
    let mut hs = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut hs);
    resp.parse(&buf)
        .map_err(|e| HttpError::Malformed(e.to_string()))?;
    let status = resp.code.unwrap_or(0);
    let reason = resp.reason.unwrap_or_default().to_string();
    let headers = owned_headers(resp.headers);
    match content_length(&headers)? {
        Some(len) => read_body(reader, &mut buf, head_len + len)?,
        None => {
            reader.read_to_end(&mut buf)?;
        }
    }
    Ok(Response {
        status,
        reason,
        headers,
        body: buf[head_len..].to_vec(),
        raw: buf,
    })
}

/// Serializes a request with `Connection: close` and, when a body is
/// given, `Content-Length`.
pub fn build_request(
    method: &str,
    target: &str,
    host: &str,
    headers: &[(&str, &str)],
    body: &[u8],
) -> Vec<u8> {
    let mut head = format!("{method} {target} HTTP/1.1\r\nHost: {host}\r\n");
    for (n, v) in headers {
        head.push_str(&format!("{n}: {v}\r\n"));
    }
    if !body.is_empty() || method.eq_ignore_ascii_case("POST") {
        head.push_str(&format!("Content-Length: {}\r\n", body.len()));
    }
    head.push_str("Connection: close\r\n\r\n");
    let mut raw = head.into_bytes();
    raw.extend_from_slice(body);
    raw
}

/// Opens a connection to `addr`, optionally from a specific local address.
pub fn connect(addr: SocketAddr, local_ip: Option<IpAddr>) -> io::Result<TcpStream> {
    let stream = match local_ip {
        None => TcpStream::connect_timeout(&addr, IO_TIMEOUT)?,
        Some(ip) => {
            let socket = socket2::Socket::new(
                socket2::Domain::for_address(addr),
                socket2::Type::STREAM,
                None,
            )?;
            socket.bind(&SocketAddr::new(ip, 0).into())?;
            socket.connect_timeout(&addr.into(), IO_TIMEOUT)?;
            socket.into()
        }
    };
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

/// Sends raw request bytes and reads the response.
pub fn exchange(
    addr: SocketAddr,
    raw_request: &[u8],
    local_ip: Option<IpAddr>,
) -> Result<Response, HttpError> {
    let mut stream = connect(addr, local_ip)?;
    stream.write_all(raw_request)?;
    read_response(&mut stream)
}

/// Handler invoked once per connection with the request bytes (or the
/// parse error) and the peer address; returns raw response bytes.
pub type Handler =
    dyn Fn(Result<Request, HttpError>, SocketAddr) -> Vec<u8> + Send + Sync + 'static;

/// A background accept loop; dropping it does not stop the server.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves connections on `listener`, one thread per connection, one
/// request per connection.
pub fn serve(listener: TcpListener, handler: Arc<Handler>) -> io::Result<Server> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let handler = handler.clone();
            thread::spawn(move || handle_connection(stream, &*handler));
        }
    });
    Ok(Server {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn handle_connection(mut stream: TcpStream, handler: &Handler) {
    let Ok(peer) = stream.peer_addr() else { return };
    let _ = stream.set_read_timeout(Some(IO_TIMEOUT));
    let _ = stream.set_write_timeout(Some(IO_TIMEOUT));
    let _ = stream.set_nodelay(true);
    let req = read_request(&mut stream);
    if matches!(&req, Err(HttpError::Incomplete)) {
        // The client hung up, e.g. a shutdown wake-up or a port probe.
        return;
    }
    let out = handler(req, peer);
    let _ = stream.write_all(&out);
    let _ = stream.flush();
    let _ = stream.shutdown(Shutdown::Write);
}
