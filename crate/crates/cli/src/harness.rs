//! End-to-end plumbing shared by the CLI and the tests: train against the
//! demo app, stand up the proxy, replay captured traffic, time requests.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use phpguard_runtime::enforcer::{Bindings, DeviationLog, Enforcer, EnforcerConfig, Reason, VERDICT_HEADER};
use phpguard_runtime::http::{self, HttpError, Server};
use phpguard_runtime::model::{Models, DEFAULT_INDEX_PAGE};
use phpguard_runtime::trainer::{
    build_model, captured_requests, crawl, CrawlConfig, CrawlReport, Credentials, ProfileStore, TrainError,
    DEFAULT_SESSION_COOKIE,
};

use crate::demo::{self, SimulatedApp, USERS};

/// Crawl configuration for one demo role; role 0 crawls anonymously.
pub fn demo_crawl_config(app: SocketAddr, role: &str) -> CrawlConfig {
    let mut cfg = CrawlConfig::new(&format!("http://{app}/"), role);
    cfg.credentials = USERS.iter().find(|u| u.role == role).map(|u| Credentials {
        username: u.username.to_string(),
        password: u.password.to_string(),
    });
    cfg
}

pub const DEMO_ROLES: [&str; 3] = ["0", "manager", "employer"];

#[derive(Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub crawls: Vec<(String, CrawlReport)>,
}

/// Crawls the demo app for role 0, manager and employer into `store`, then
/// builds the models.
pub fn train_demo(app: SocketAddr, store: &Path) -> Result<TrainOutcome, TrainError> {
    let mut s = ProfileStore::open(store, DEFAULT_SESSION_COOKIE)?;
    let mut crawls = Vec::new();
    for role in DEMO_ROLES {
        let report = crawl(&demo_crawl_config(app, role), &mut s)?;
        crawls.push((role.to_string(), report));
    }
    Ok(TrainOutcome {
        models: build_model(store, DEFAULT_INDEX_PAGE)?,
        crawls,
    })
}

/// Demo app plus enforcing proxy in front of it.
pub struct DemoStack {
    pub app: Server,
    pub app_state: Arc<SimulatedApp>,
    pub proxy: Server,
    pub enforcer: Arc<Enforcer>,
    pub log_path: PathBuf,
}

impl DemoStack {
    pub fn start(models: Models, seed: u64, log_path: &Path) -> std::io::Result<DemoStack> {
        let (app, app_state) = demo::serve_app(TcpListener::bind("127.0.0.1:0")?, seed)?;
        let bindings = Bindings::parse(&demo::bindings_text(), "demo bindings").expect("demo bindings parse");
        let enforcer = Arc::new(Enforcer::new(
            models,
            bindings,
            EnforcerConfig::default(),
            DeviationLog::open(log_path)?,
        ));
        let proxy = enforcer.clone().serve(TcpListener::bind("127.0.0.1:0")?, app.addr())?;
        Ok(DemoStack {
            app,
            app_state,
            proxy,
            enforcer,
            log_path: log_path.to_path_buf(),
        })
    }

    pub fn proxy_addr(&self) -> SocketAddr {
        self.proxy.addr()
    }

    pub fn shutdown(self) {
        self.proxy.shutdown();
        self.app.shutdown();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub requests: usize,
    /// (communication id, reason) of every blocked replayed request.
    pub blocked: Vec<(u64, Reason)>,
}

/// Sends every captured request of `store`, byte for byte and in id order,
/// through the proxy at `proxy`.
pub fn replay(store: &Path, proxy: SocketAddr) -> Result<ReplayReport, TrainError> {
    let mut report = ReplayReport::default();
    for (id, req) in captured_requests(store)? {
        let resp = http::exchange(proxy, &req.raw, None).map_err(|source| TrainError::Unreachable {
            url: format!("http://{proxy}{}", req.target),
            source,
        })?;
        report.requests += 1;
        if let Some(v) = resp.header(VERDICT_HEADER) {
            let reason = v
                .split(';')
                .find_map(|p| p.trim().strip_prefix("reason="))
                .and_then(Reason::parse)
                .unwrap_or(Reason::UnknownRequest);
            report.blocked.push((id, reason));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub samples: usize,
    pub direct_p50: Duration,
    pub proxied_p50: Duration,
}

impl LatencyReport {
    pub fn overhead_p50(&self) -> Duration {
        self.proxied_p50.saturating_sub(self.direct_p50)
    }

    pub fn ratio(&self) -> f64 {
        self.proxied_p50.as_secs_f64() / self.direct_p50.as_secs_f64().max(1e-9)
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Times `n` anonymous landing-page requests straight to the app and `n`
/// through the proxy, interleaved. Each proxied request uses its own
/// User-Agent, so each is a fresh client at an entry page.
pub fn measure_latency(app: SocketAddr, proxy: SocketAddr, n: usize) -> Result<LatencyReport, HttpError> {
    assert!(n > 0, "need at least one sample");
    let mut direct = Vec::with_capacity(n);
    let mut proxied = Vec::with_capacity(n);
    let target = format!("/{}", demo::LANDING_PAGE);
    for i in 0..n {
        let ua = format!("phpguard-bench/{i}");
        let raw = http::build_request("GET", &target, "demo", &[("User-Agent", ua.as_str())], b"");
        let t = Instant::now();
        let r = http::exchange(app, &raw, None)?;
        direct.push(t.elapsed());
        debug_assert_eq!(r.status, 200);
        let t = Instant::now();
        let r = http::exchange(proxy, &raw, None)?;
        proxied.push(t.elapsed());
        if r.status != 200 {
            return Err(HttpError::Malformed(format!("proxied benchmark request answered {}", r.status)));
        }
    }
    Ok(LatencyReport {
        samples: n,
        direct_p50: median(direct),
        proxied_p50: median(proxied),
    })
}
