use std::collections::{BTreeSet, HashMap};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use phpguard_runtime::http::{self, Request, Response, Server};
use phpguard_runtime::trainer::{build_model, captured_requests, crawl, CrawlConfig, Credentials, ProfileStore, TrainError};

type Seen = Arc<Mutex<Vec<(String, String)>>>;

fn page(links: &[&str]) -> Response {
    let body: String = links.iter().map(|l| format!("<a href=\"{l}\">{l}</a>\n")).collect();
    Response::new(200, "OK", &[("Content-Type", "text/html")], body.as_bytes())
}

fn site(req: &Request) -> Response {
    let authed = req.cookie("PHPSESSID").as_deref() == Some("s3cret");
    match (req.method.as_str(), req.path()) {
        ("GET", "/About.php") => page(&[
            "a.php",
            "b.php",
            "/img/logo.png",
            "http://elsewhere.invalid/x.php",
            "a.php#top",
        ]),
        ("GET", "/a.php") => page(&["c.php", "About.php", "style.css"]),
        ("GET", "/b.php") => Response::new(302, "Found", &[("Location", "/c.php")], b""),
        ("GET", "/c.php") => page(&["a.php", "Logout.php"]),
        ("GET", "/img/logo.png" | "/style.css") => Response::new(200, "OK", &[], b"bytes"),
        ("GET", "/Login.php") => page(&[]),
        ("POST", "/Login.php") if req.body == b"username=u&password=p" => Response::new(
            302,
            "Found",
            &[("Location", "panel.php"), ("Set-Cookie", "PHPSESSID=s3cret; Path=/")],
            b"",
        ),
        ("POST", "/Login.php") => page(&[]),
        ("GET", "/panel.php") if authed => page(&["x.php", "y.php", "Logout.php"]),
        ("GET", "/x.php") if authed => page(&["y.php"]),
        ("GET", "/y.php") if authed => page(&[]),
        ("GET", "/Logout.php") => Response::new(
            302,
            "Found",
            &[("Location", "About.php"), ("Set-Cookie", "PHPSESSID=; Max-Age=0")],
            b"",
        ),
        ("GET", _) if !authed => Response::new(302, "Found", &[("Location", "Login.php")], b""),
        _ => Response::new(404, "Not Found", &[], b""),
    }
}

fn serve() -> (Server, Seen) {
    let seen: Seen = Arc::default();
    let s = seen.clone();
    let server = http::serve(
        TcpListener::bind("127.0.0.1:0").unwrap(),
        Arc::new(move |req, _| match req {
            Ok(r) => {
                s.lock()
                    .unwrap()
                    .push((r.header("user-agent").unwrap_or("").to_string(), r.path().to_string()));
                site(&r).raw
            }
            Err(_) => Response::new(400, "Bad Request", &[], b"").raw,
        }),
    )
    .unwrap();
    (server, seen)
}

fn config(server: &Server, role: &str) -> CrawlConfig {
    CrawlConfig::new(&format!("http://{}/", server.addr()), role)
}

#[test]
fn anonymous_crawl_covers_the_site() {
    let (server, seen) = serve();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProfileStore::open(dir.path(), "PHPSESSID").unwrap();
    let report = crawl(&config(&server, "0"), &mut store).unwrap();

    let pages: BTreeSet<&str> = report.pages.iter().map(String::as_str).collect();
    assert_eq!(pages, BTreeSet::from(["About.php", "a.php", "c.php"]));
    let seen = seen.lock().unwrap();
    let paths: Vec<&str> = seen.iter().map(|(_, p)| p.as_str()).collect();
    assert!(paths.contains(&"/b.php"));
    assert!(!paths.contains(&"/x.php"), "off-origin link followed");
    assert!(!paths.contains(&"/Logout.php"));
    for asset in ["/img/logo.png", "/style.css"] {
        assert_eq!(paths.iter().filter(|p| **p == asset).count(), 1, "{asset}");
    }
    // Everything sent was captured, and each session had its own agent.
    assert_eq!(report.requests, seen.len());
    assert_eq!(captured_requests(dir.path()).unwrap().len(), seen.len());
    let agents: BTreeSet<&str> = seen.iter().map(|(ua, _)| ua.as_str()).collect();
    assert_eq!(agents.len(), report.sessions);

    let models = build_model(dir.path(), "index.php").unwrap();
    let g = &models.set2.roles["0"];
    assert!(g.entries.contains("About.php"));
    let links: BTreeSet<(String, String)> = [
        ("About.php", "a.php"),
        ("About.php", "b.php"),
        ("a.php", "c.php"),
        ("a.php", "About.php"),
        ("c.php", "a.php"),
        ("b.php", "c.php"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    assert!(g.edge_set().is_subset(&links), "{:?}", g.edge_set());
    assert!(g.has_edge("About.php", "a.php") && g.has_edge("a.php", "c.php"));
}

#[test]
fn authenticated_crawl_logs_in_per_session() {
    let (server, seen) = serve();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProfileStore::open(dir.path(), "PHPSESSID").unwrap();
    let mut cfg = config(&server, "staff");
    cfg.credentials = Some(Credentials {
        username: "u".into(),
        password: "p".into(),
    });
    let report = crawl(&cfg, &mut store).unwrap();
    let pages: BTreeSet<&str> = report.pages.iter().map(String::as_str).collect();
    assert_eq!(pages, BTreeSet::from(["panel.php", "x.php", "y.php"]));

    let seen = seen.lock().unwrap();
    let mut logins: HashMap<&str, usize> = HashMap::new();
    for (ua, p) in seen.iter() {
        if p == "/Logout.php" {
            *logins.entry(ua.as_str()).or_default() += 1;
        }
    }
    // Every session logged out once under its own agent.
    assert_eq!(logins.len(), report.sessions);
    assert!(logins.values().all(|n| *n == 1));

    let m = build_model(dir.path(), "index.php").unwrap();
    let staff = &m.set2.roles["staff"];
    assert_eq!(staff.entries, BTreeSet::from(["panel.php".to_string()]));
    assert!(staff.has_edge("panel.php", "x.php") && staff.has_edge("x.php", "y.php"));
    let rel = m.set1.relation();
    assert!(rel.contains(&("POST_Login.php".to_string(), 0, "0".to_string())));
    assert!(rel.contains(&("GET_panel.php".to_string(), 1, "staff".to_string())));
    assert!(!rel.iter().any(|(r, _, _)| r == "GET_Logout.php"));
}

#[test]
fn bad_credentials_fail_the_crawl() {
    let (server, _) = serve();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProfileStore::open(dir.path(), "PHPSESSID").unwrap();
    let mut cfg = config(&server, "staff");
    cfg.credentials = Some(Credentials {
        username: "u".into(),
        password: "wrong".into(),
    });
    assert!(matches!(crawl(&cfg, &mut store), Err(TrainError::LoginFailed { .. })));
}

#[test]
fn request_budget_bounds_the_crawl() {
    let (server, _) = serve();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProfileStore::open(dir.path(), "PHPSESSID").unwrap();
    let mut cfg = config(&server, "0");
    cfg.max_requests = 2;
    let report = crawl(&cfg, &mut store).unwrap();
    // The page that exhausts the budget may still pull in its assets.
    assert!(report.requests <= 3, "{report:?}");
}

#[test]
fn unreachable_target_is_reported() {
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProfileStore::open(dir.path(), "PHPSESSID").unwrap();
    let cfg = CrawlConfig::new(&format!("http://{dead}/"), "0");
    assert!(matches!(crawl(&cfg, &mut store), Err(TrainError::Unreachable { .. })));
}
