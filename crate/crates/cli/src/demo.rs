//! Simulated two-role target application used for training and for the
//! end-to-end tests. Pages are plain HTML with href links; no PHP runs.

use std::collections::HashMap;
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phpguard_runtime::http::{self, HttpError, Request, Response, Server};
use phpguard_runtime::model::ANONYMOUS_ROLE;

pub const SESSION_COOKIE: &str = "PHPSESSID";
pub const LOGIN_PAGE: &str = "Login.php";
pub const LOGOUT_PAGE: &str = "Logout.php";
pub const LANDING_PAGE: &str = "About.php";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub page: &'static str,
    pub requires_session: bool,
    pub links: &'static [&'static str],
    pub roles: &'static [&'static str],
}

const ANON: &[&str] = &[ANONYMOUS_ROLE];
const MANAGER: &[&str] = &["manager"];
const EMPLOYER: &[&str] = &["employer"];

/// Page inventory. A page name may appear once per role with different
/// links (`View.php` is shared by both roles).
pub const ROUTES: &[Route] = &[
    Route { page: "About.php", requires_session: false, links: &["Help.php", "Login.php", "Services.php", "Products.php"], roles: ANON },
    Route { page: "Help.php", requires_session: false, links: &[], roles: ANON },
    Route { page: "Login.php", requires_session: false, links: &[], roles: ANON },
    Route { page: "Services.php", requires_session: false, links: &[], roles: ANON },
    Route { page: "Products.php", requires_session: false, links: &[], roles: ANON },
    Route { page: "home.php", requires_session: true, links: &["Assign_works.php", "User_mgmt.php", "View.php"], roles: MANAGER },
    Route { page: "Assign_works.php", requires_session: true, links: &[], roles: MANAGER },
    Route { page: "User_mgmt.php", requires_session: true, links: &["Update_users.php", "Update_roles.php"], roles: MANAGER },
    Route { page: "Update_users.php", requires_session: true, links: &[], roles: MANAGER },
    Route { page: "Update_roles.php", requires_session: true, links: &[], roles: MANAGER },
    Route { page: "View.php", requires_session: true, links: &["Viewusers.php", "Viewroles.php"], roles: MANAGER },
    Route { page: "Viewusers.php", requires_session: true, links: &[], roles: MANAGER },
    Route { page: "Viewroles.php", requires_session: true, links: &[], roles: MANAGER },
    Route { page: "Home.php", requires_session: true, links: &["work_report.php", "View.php"], roles: EMPLOYER },
    Route { page: "work_report.php", requires_session: true, links: &[], roles: EMPLOYER },
    Route { page: "View.php", requires_session: true, links: &["Viewusers.php", "Viewroles.php"], roles: EMPLOYER },
    Route { page: "Viewusers.php", requires_session: true, links: &[], roles: EMPLOYER },
    Route { page: "Viewroles.php", requires_session: true, links: &[], roles: EMPLOYER },
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoUser {
    pub username: &'static str,
    pub password: &'static str,
    pub role: &'static str,
    pub home: &'static str,
}

pub const USERS: &[DemoUser] = &[
    DemoUser { username: "alice", password: "alice-pw", role: "manager", home: "home.php" },
    DemoUser { username: "bob", password: "bob-pw", role: "employer", home: "Home.php" },
];

/// Bindings file content matching [`USERS`].
pub fn bindings_text() -> String {
    USERS.iter().map(|u| format!("{},{}\n", u.username, u.role)).collect()
}

pub fn user(name: &str) -> Option<&'static DemoUser> {
    USERS.iter().find(|u| u.username == name)
}

pub struct SimulatedApp {
    sessions: Mutex<HashMap<String, &'static DemoUser>>,
    rng: Mutex<ChaCha8Rng>,
}

fn page_of(req: &Request) -> &str {
    let path = req.path();
    path.rsplit('/').next().unwrap_or(path)
}

fn html(title: &str, body: &str) -> Vec<u8> {
    format!(
        "<!DOCTYPE html>\n<html><head><title>{title}</title></head>\n<body>\n<h1>{title}</h1>\n{body}</body></html>\n"
    )
    .into_bytes()
}

fn redirect(to: &str, extra: &[(&str, &str)]) -> Response {
    let mut headers = vec![("Location", to)];
    headers.extend_from_slice(extra);
    Response::new(302, "Found", &headers, b"")
}

fn plain(status: u16, reason: &str, text: &str) -> Response {
    Response::new(status, reason, &[("Content-Type", "text/plain")], text.as_bytes())
}

const LOGIN_FORM: &str = "<form method=\"post\" action=\"Login.php\">\n\
<input name=\"username\"> <input name=\"password\" type=\"password\">\n\
<button>Log in</button>\n</form>\n";

impl SimulatedApp {
    /// Session cookies come from a generator seeded with `seed`, so two
    /// apps with the same seed hand out the same cookie sequence.
    pub fn new(seed: u64) -> SimulatedApp {
        SimulatedApp {
            sessions: Mutex::new(HashMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn fresh_cookie(&self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().expect("rng lock").fill_bytes(&mut bytes);
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn session_user(&self, req: &Request) -> Option<(String, &'static DemoUser)> {
        let c = req.cookie(SESSION_COOKIE)?;
        let u = self.sessions.lock().expect("session lock").get(&c).copied()?;
        Some((c, u))
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    pub fn handle(&self, req: &Request) -> Response {
        let page = page_of(req);
        let method = req.method.to_ascii_uppercase();
        let session = self.session_user(req);
        match (method.as_str(), page) {
            ("GET", "") => redirect(LANDING_PAGE, &[]),
            ("GET", LOGIN_PAGE) => Response::new(
                200,
                "OK",
                &[("Content-Type", "text/html")],
                &html("Login.php", LOGIN_FORM),
            ),
            ("POST", LOGIN_PAGE) => self.login(req),
            ("GET", LOGOUT_PAGE) => {
                if let Some((c, _)) = session {
                    self.sessions.lock().expect("session lock").remove(&c);
                }
                redirect(
                    LANDING_PAGE,
                    &[("Set-Cookie", "PHPSESSID=deleted; Path=/; Max-Age=0")],
                )
            }
            ("GET", _) => self.page(page, session.map(|(_, u)| u)),
            _ => plain(405, "Method Not Allowed", "method not allowed\n"),
        }
    }

    fn login(&self, req: &Request) -> Response {
        let form: HashMap<String, String> = url::form_urlencoded::parse(&req.body).into_owned().collect();
        let found = form
            .get("username")
            .and_then(|n| user(n))
            .filter(|u| form.get("password").map(String::as_str) == Some(u.password));
        let Some(u) = found else {
            let body = format!("<p>Invalid username or password.</p>\n{LOGIN_FORM}");
            return Response::new(200, "OK", &[("Content-Type", "text/html")], &html("Login.php", &body));
        };
        let cookie = self.fresh_cookie();
        self.sessions.lock().expect("session lock").insert(cookie.clone(), u);
        let set = format!("{SESSION_COOKIE}={cookie}; Path=/; HttpOnly");
        redirect(u.home, &[("Set-Cookie", set.as_str())])
    }

    fn page(&self, page: &str, user: Option<&'static DemoUser>) -> Response {
        let role = user.map_or(ANONYMOUS_ROLE, |u| u.role);
        let route = ROUTES.iter().find(|r| r.page == page && r.roles.contains(&role));
        let Some(route) = route else {
            if ROUTES.iter().any(|r| r.page == page) {
                return match user {
                    None => redirect(LOGIN_PAGE, &[]),
                    Some(_) => plain(403, "Forbidden", "not permitted for your role\n"),
                };
            }
            return plain(404, "Not Found", "no such page\n");
        };
        let mut body = String::from("<ul>\n");
        for l in route.links {
            body.push_str(&format!("<li><a href=\"{l}\">{l}</a></li>\n"));
        }
        body.push_str("</ul>\n");
        if route.requires_session {
            body.push_str(&format!("<p><a href=\"{LOGOUT_PAGE}\">Log out</a></p>\n"));
        }
        Response::new(200, "OK", &[("Content-Type", "text/html")], &html(page, &body))
    }
}

/// Serves the demo app on `listener`.
pub fn serve_app(listener: TcpListener, seed: u64) -> std::io::Result<(Server, Arc<SimulatedApp>)> {
    let app = Arc::new(SimulatedApp::new(seed));
    let a = app.clone();
    let server = http::serve(
        listener,
        Arc::new(move |req: Result<Request, HttpError>, _peer| match req {
            Ok(r) => a.handle(&r).raw,
            Err(e) => plain(400, "Bad Request", &format!("{e}\n")).raw,
        }),
    )?;
    Ok((server, app))
}
