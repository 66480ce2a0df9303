//! Scripted request sequences run against the enforcing proxy.
//!
//! Scenario files are line oriented; `#` starts a comment.
//!
//! ```text
//! client <name> [ip=<addr>] [ua=<user agent, rest of line>]
//! send <METHOD> <target> [<urlencoded body>]
//! expect allow
//! expect block <reason>
//! expect status <code>
//! expect log <n>
//! copy-cookie <client>
//! ```
//!
//! `client` switches the acting client, creating it on first use (default
//! ip 127.0.0.1). Each client keeps a cookie jar fed by `Set-Cookie`.
//! `expect` lines check the most recent response; `expect log` checks how
//! many deviation records were appended since the scenario started.
//! `copy-cookie` gives the acting client another client's session cookie.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;

use thiserror::Error;

use phpguard_runtime::enforcer::{Reason, VERDICT_HEADER};
use phpguard_runtime::http::{self, Response};

use crate::demo::SESSION_COOKIE;

pub const DEFAULT_CLIENT: &str = "default";
pub const DEFAULT_UA: &str = "phpguard-scenario";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Client {
        name: String,
        ip: Option<IpAddr>,
        user_agent: Option<String>,
    },
    Send {
        method: String,
        target: String,
        body: String,
    },
    ExpectAllow,
    ExpectBlock(Reason),
    ExpectStatus(u16),
    ExpectLog(usize),
    CopyCookie(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    /// (line number, step)
    pub steps: Vec<(usize, Step)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{file}:{line}: {message}")]
pub struct ScenarioParseError {
    pub file: String,
    pub line: usize,
    pub message: String,
}

pub fn parse_scenario(name: &str, text: &str) -> Result<Scenario, ScenarioParseError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ScenarioParseError {
            file: name.to_string(),
            line,
            message,
        };
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (cmd, rest) = t.split_once(char::is_whitespace).unwrap_or((t, ""));
        let rest = rest.trim();
        let step = match cmd {
            "client" => parse_client(rest).map_err(err)?,
            "send" => {
                let mut parts = rest.splitn(3, char::is_whitespace);
                let method = parts.next().filter(|m| !m.is_empty());
                let target = parts.next();
                let (Some(method), Some(target)) = (method, target) else {
                    return Err(err("send needs a method and a target".into()));
                };
                Step::Send {
                    method: method.to_ascii_uppercase(),
                    target: target.to_string(),
                    body: parts.next().unwrap_or("").trim().to_string(),
                }
            }
            "expect" => {
                let (what, arg) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                let arg = arg.trim();
                match what {
                    "allow" if arg.is_empty() => Step::ExpectAllow,
                    "block" => Step::ExpectBlock(
                        Reason::parse(arg)
                            .filter(|r| *r != Reason::Ok)
                            .ok_or_else(|| err(format!("unknown block reason {arg:?}")))?,
                    ),
                    "status" => Step::ExpectStatus(
                        arg.parse().map_err(|_| err(format!("bad status {arg:?}")))?,
                    ),
                    "log" => Step::ExpectLog(
                        arg.parse().map_err(|_| err(format!("bad record count {arg:?}")))?,
                    ),
                    _ => return Err(err(format!("unknown expectation {rest:?}"))),
                }
            }
            "copy-cookie" if !rest.is_empty() && !rest.contains(char::is_whitespace) => {
                Step::CopyCookie(rest.to_string())
            }
            _ => return Err(err(format!("cannot parse {t:?}"))),
        };
        steps.push((line, step));
    }
    Ok(Scenario {
        name: name.to_string(),
        steps,
    })
}

fn parse_client(rest: &str) -> Result<Step, String> {
    let (name, mut opts) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    if name.is_empty() {
        return Err("client needs a name".into());
    }
    let mut ip = None;
    let mut user_agent = None;
    loop {
        opts = opts.trim_start();
        if opts.is_empty() {
            break;
        }
        if let Some(ua) = opts.strip_prefix("ua=") {
            user_agent = Some(ua.trim_end().to_string());
            break;
        }
        let (tok, tail) = opts.split_once(char::is_whitespace).unwrap_or((opts, ""));
        let Some(addr) = tok.strip_prefix("ip=") else {
            return Err(format!("unknown client option {tok:?}"));
        };
        ip = Some(addr.parse().map_err(|_| format!("bad ip {addr:?}"))?);
        opts = tail;
    }
    Ok(Step::Client {
        name: name.to_string(),
        ip,
        user_agent,
    })
}

#[derive(Debug, Clone)]
struct Client {
    ip: IpAddr,
    user_agent: String,
    cookies: BTreeMap<String, String>,
}

impl Client {
    fn new(ip: Option<IpAddr>, user_agent: Option<String>) -> Client {
        Client {
            ip: ip.unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST)),
            user_agent: user_agent.unwrap_or_else(|| DEFAULT_UA.to_string()),
            cookies: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub passed: bool,
    pub transcript: Vec<String>,
    /// Responses that carried a block verdict.
    pub blocks: usize,
}

fn verdict_of(r: &Response) -> Option<Reason> {
    let v = r.header(VERDICT_HEADER)?;
    let reason = v.split(';').find_map(|p| p.trim().strip_prefix("reason="))?;
    Reason::parse(reason.trim())
}

fn count_records(log: &Path) -> usize {
    std::fs::read_to_string(log)
        .map(|t| t.lines().filter(|l| !l.is_empty()).count())
        .unwrap_or(0)
}

/// Runs a scenario through the proxy at `proxy`. `log` is the proxy's
/// deviation log file, needed only by `expect log`.
pub fn run_scenario(scenario: &Scenario, proxy: SocketAddr, log: Option<&Path>) -> ScenarioOutcome {
    let mut out = ScenarioOutcome {
        name: scenario.name.clone(),
        passed: true,
        ..Default::default()
    };
    let log_start = log.map(count_records).unwrap_or(0);
    let mut clients: HashMap<String, Client> = HashMap::new();
    let mut acting = DEFAULT_CLIENT.to_string();
    clients.insert(acting.clone(), Client::new(None, None));
    let mut last: Option<Response> = None;

    for (line, step) in &scenario.steps {
        let result: Result<String, String> = match step {
            Step::Client { name, ip, user_agent } => {
                let c = clients
                    .entry(name.clone())
                    .or_insert_with(|| Client::new(*ip, user_agent.clone()));
                if let Some(ip) = ip {
                    c.ip = *ip;
                }
                if let Some(ua) = user_agent {
                    c.user_agent = ua.clone();
                }
                acting = name.clone();
                Ok(format!("client {name} ({} {})", c.ip, c.user_agent))
            }
            Step::Send { method, target, body } => {
                let c = clients.get_mut(&acting).expect("acting client exists");
                let cookie = c
                    .cookies
                    .iter()
                    .map(|(n, v)| format!("{n}={v}"))
                    .collect::<Vec<_>>()
                    .join("; ");
                let mut headers = vec![("User-Agent", c.user_agent.as_str())];
                if !cookie.is_empty() {
                    headers.push(("Cookie", cookie.as_str()));
                }
                if !body.is_empty() {
                    headers.push(("Content-Type", "application/x-www-form-urlencoded"));
                }
                let raw = http::build_request(method, target, &proxy.to_string(), &headers, body.as_bytes());
                let local = (c.ip != IpAddr::V4(Ipv4Addr::LOCALHOST)).then_some(c.ip);
                match http::exchange(proxy, &raw, local) {
                    Ok(r) => {
                        let verdict = match verdict_of(&r) {
                            Some(reason) => {
                                out.blocks += 1;
                                format!("block {reason}")
                            }
                            None => {
                                for sc in r.set_cookies() {
                                    if sc.expired || sc.value.is_empty() {
                                        c.cookies.remove(&sc.name);
                                    } else {
                                        c.cookies.insert(sc.name, sc.value);
                                    }
                                }
                                "allow".to_string()
                            }
                        };
                        let msg = format!("{method} {target} -> {} ({verdict})", r.status);
                        last = Some(r);
                        Ok(msg)
                    }
                    Err(e) => Err(format!("{method} {target}: transport failure: {e}")),
                }
            }
            Step::ExpectAllow | Step::ExpectBlock(_) | Step::ExpectStatus(_) => match &last {
                None => Err("expectation before any request".into()),
                Some(r) => {
                    let got = verdict_of(r);
                    match step {
                        Step::ExpectAllow if got.is_none() => Ok("expect allow: ok".into()),
                        Step::ExpectAllow => Err(format!("expected allow, got block {}", got.unwrap())),
                        Step::ExpectBlock(want) if got == Some(*want) => Ok(format!("expect block {want}: ok")),
                        Step::ExpectBlock(want) => Err(format!(
                            "expected block {want}, got {}",
                            got.map_or("allow".to_string(), |g| format!("block {g}"))
                        )),
                        Step::ExpectStatus(s) if r.status == *s => Ok(format!("expect status {s}: ok")),
                        Step::ExpectStatus(s) => Err(format!("expected status {s}, got {}", r.status)),
                        _ => unreachable!(),
                    }
                }
            },
            Step::ExpectLog(n) => match log {
                None => Err("expect log needs a deviation log path".into()),
                Some(p) => {
                    let got = count_records(p) - log_start;
                    if got == *n {
                        Ok(format!("expect log {n}: ok"))
                    } else {
                        Err(format!("expected {n} new deviation records, found {got}"))
                    }
                }
            },
            Step::CopyCookie(from) => match clients.get(from).and_then(|c| c.cookies.get(SESSION_COOKIE)).cloned() {
                None => Err(format!("client {from} has no session cookie")),
                Some(v) => {
                    let c = clients.get_mut(&acting).expect("acting client exists");
                    c.cookies.insert(SESSION_COOKIE.to_string(), v);
                    Ok(format!("copy-cookie {from}"))
                }
            },
        };
        match result {
            Ok(msg) => out.transcript.push(format!("{line:>3}  {msg}")),
            Err(msg) => {
                out.transcript.push(format!("{line:>3}  FAIL {msg}"));
                out.passed = false;
                break;
            }
        }
    }
    out
}

/// Scenario files shipped with the tool, by name.
pub const BUILTIN: &[(&str, &str)] = &[
    ("happy-manager", include_str!("../scenarios/happy-manager.scn")),
    ("happy-employer", include_str!("../scenarios/happy-employer.scn")),
    ("auth-bypass", include_str!("../scenarios/auth-bypass.scn")),
    ("privilege-escalation", include_str!("../scenarios/privilege-escalation.scn")),
    ("sequence-bypass", include_str!("../scenarios/sequence-bypass.scn")),
    ("session-hijack", include_str!("../scenarios/session-hijack.scn")),
];

pub fn builtin(name: &str) -> Option<Scenario> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_scenario(n, text).expect("bundled scenario parses"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_step_kind() {
        let s = parse_scenario(
            "t",
            "# c\nclient mal ip=127.0.0.2 ua=Mozilla/5.0 (X11)\nsend get /Home.php\nsend POST /Login.php username=a&password=b\n\
             expect allow\nexpect block sequence_violation\nexpect status 403\nexpect log 2\ncopy-cookie default\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 8);
        assert_eq!(
            s.steps[0].1,
            Step::Client {
                name: "mal".into(),
                ip: Some("127.0.0.2".parse().unwrap()),
                user_agent: Some("Mozilla/5.0 (X11)".into())
            }
        );
        assert_eq!(s.steps[1], (3, Step::Send { method: "GET".into(), target: "/Home.php".into(), body: String::new() }));
        assert_eq!(s.steps[4].1, Step::ExpectBlock(Reason::SequenceViolation));
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(parse_scenario("t", "expect block ok").unwrap_err().line, 1);
        assert!(parse_scenario("t", "send GET").is_err());
        assert!(parse_scenario("t", "client x port=3").is_err());
        assert!(parse_scenario("t", "\n\nfly away").unwrap_err().to_string().starts_with("t:3:"));
    }

    #[test]
    fn builtins_parse() {
        for (n, _) in BUILTIN {
            assert!(!builtin(n).unwrap().steps.is_empty());
        }
    }

    #[test]
    fn empty_scenario_passes_without_network() {
        let s = parse_scenario("empty", "# nothing\n").unwrap();
        let out = run_scenario(&s, "127.0.0.1:9".parse().unwrap(), None);
        assert!(out.passed);
        assert!(out.transcript.is_empty());
    }
}
