use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use phpguard::{demo, scenario};
use phpguard_core::analyzer::{scan_project, ScanOptions};
use phpguard_core::checklist::{load_checklist, Checklist};
use phpguard_core::config_audit::{audit, load_policy, parse_ini, rewrite_ini, Misconfiguration, Policy};
use phpguard_core::report::{build_report, read_structured, render, write_report, SystemClock};
use phpguard_runtime::enforcer::{Bindings, DeviationLog, Enforcer, EnforcerConfig};
use phpguard_runtime::model::{load_model, persist_model, DEFAULT_INDEX_PAGE};
use phpguard_runtime::trainer::{build_model, crawl, CrawlConfig, Credentials, ProfileStore};

/// Exit status for input and runtime errors; clap uses the same code for
/// usage errors.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "phpguard", version, about = "PHP web application vulnerability scanner and work-flow enforcing proxy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan PHP sources for tainted sink calls. Exits 1 when anything is found.
    Scan {
        /// Directory (or single file) to scan.
        #[arg(long)]
        root: PathBuf,
        /// Checklist file, or `default` for the bundled one.
        #[arg(long, default_value = "default")]
        checklist: String,
        /// Application name for the report header (defaults to the root's name).
        #[arg(long)]
        app_name: Option<String>,
        /// Prefix shown instead of the scan root in file names.
        #[arg(long)]
        display_root: Option<String>,
        /// Also audit this php.ini and include it in the report.
        #[arg(long)]
        ini: Option<PathBuf>,
        /// Policy for --ini, or `default`.
        #[arg(long, default_value = "default")]
        policy: String,
        /// Write the text report here and the structured form to `<out>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a php.ini against a policy. Exits 1 on misconfigurations.
    Audit {
        #[arg(long)]
        ini: PathBuf,
        /// Policy file, or `default` for the bundled one.
        #[arg(long, default_value = "default")]
        policy: String,
        /// Write a copy of the ini with recommendations applied.
        #[arg(long)]
        fix: Option<PathBuf>,
    },
    /// Re-render a text report from its structured sidecar.
    Report {
        /// Structured report (`<report>.json`).
        #[arg(long)]
        from: PathBuf,
        /// Write text here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Crawl a running application for one role and capture its requests.
    Train {
        #[arg(long)]
        role: String,
        /// Base URL, e.g. http://127.0.0.1:8080/
        #[arg(long)]
        base: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, requires = "login_pass")]
        login_user: Option<String>,
        #[arg(long, requires = "login_user")]
        login_pass: Option<String>,
        /// First page of an anonymous crawl.
        #[arg(long, default_value = "About.php")]
        start_page: String,
        #[arg(long, default_value = "Login.php")]
        login_page: String,
        #[arg(long, default_value = "Logout.php")]
        logout_page: String,
        #[arg(long, default_value = "PHPSESSID")]
        session_cookie: String,
        #[arg(long, default_value_t = 10_000)]
        max_requests: usize,
    },
    /// Build Model Set 1 and Model Set 2 from a capture store.
    BuildModel {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_INDEX_PAGE)]
        index_page: String,
    },
    /// Run the enforcing reverse proxy.
    Enforce {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        upstream: SocketAddr,
        /// Lines `username,role`.
        #[arg(long)]
        bindings: PathBuf,
        #[arg(long, default_value = "PHPSESSID")]
        session_cookie: String,
        /// Seconds of inactivity after which a client reverts to role 0.
        #[arg(long, default_value_t = 1800)]
        idle_timeout: u64,
        #[arg(long, default_value = "Login.php")]
        login_page: String,
        /// Deviation log, appended to.
        #[arg(long, default_value = "deviations.log")]
        log: PathBuf,
    },
    /// Serve the built-in two-role demo application.
    ServeDemo {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Seed for session cookies.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run scenario scripts through a running proxy. Exits 1 if any fails.
    Scenario {
        /// Scenario files, or names of built-in scenarios (`all` runs every one).
        #[arg(required = true)]
        scenarios: Vec<String>,
        #[arg(long)]
        proxy: SocketAddr,
        /// The proxy's deviation log, for `expect log` steps.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn checklist(arg: &str) -> Result<Checklist, String> {
    if arg == "default" {
        return Ok(Checklist::builtin());
    }
    load_checklist(&read(Path::new(arg))?).map_err(|e| format!("{arg}: {e}"))
}

fn policy(arg: &str) -> Result<Policy, String> {
    if arg == "default" {
        return Ok(Policy::builtin());
    }
    load_policy(&read(Path::new(arg))?).map_err(|e| format!("{arg}: {e}"))
}

fn audit_file(ini: &Path, policy_arg: &str) -> Result<(String, Vec<Misconfiguration>), String> {
    let text = read(ini)?;
    let settings = parse_ini(&text);
    for d in &settings.diagnostics {
        log::warn!("{}:{}: cannot parse {:?}", ini.display(), d.line, d.text);
    }
    let findings = audit(&settings, &policy(policy_arg)?);
    Ok((text, findings))
}

fn run(cmd: Command) -> Result<u8, String> {
    match cmd {
        Command::Scan {
            root,
            checklist: cl,
            app_name,
            display_root,
            ini,
            policy: pol,
            out,
        } => {
            let cl = checklist(&cl)?;
            let scan = scan_project(&root, &cl, &ScanOptions { display_root }).map_err(|e| e.to_string())?;
            for d in &scan.diagnostics {
                match d.line {
                    Some(l) => log::warn!("{}:{l}: {}", d.file, d.message),
                    None => log::warn!("{}: {}", d.file, d.message),
                }
            }
            let audits = match &ini {
                Some(p) => Some(audit_file(p, &pol)?.1),
                None => None,
            };
            let name = app_name.unwrap_or_else(|| {
                root.file_name()
                    .map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned())
            });
            let failed = !scan.findings.is_empty() || audits.as_ref().is_some_and(|a| !a.is_empty());
            let report = build_report(&scan, audits, &name, &SystemClock);
            match out {
                Some(p) => {
                    let sidecar = write_report(&report, &p).map_err(|e| e.to_string())?;
                    println!(
                        "{} finding(s); wrote {} and {}",
                        report.findings.len(),
                        p.display(),
                        sidecar.display()
                    );
                }
                None => print!("{}", render(&report)),
            }
            Ok(u8::from(failed))
        }
        Command::Audit { ini, policy: pol, fix } => {
            let (text, findings) = audit_file(&ini, &pol)?;
            if findings.is_empty() {
                println!("No misconfigured settings.");
            }
            for m in &findings {
                let at = m.line.map_or_else(|| "default".to_string(), |l| format!("line {l}"));
                println!("{} = {} ({at}); recommended {}: {}", m.name, m.current, m.recommended, m.rationale);
            }
            if let Some(out) = fix {
                std::fs::write(&out, rewrite_ini(&text, &findings)).map_err(|e| format!("{}: {e}", out.display()))?;
                println!("wrote {}", out.display());
            }
            Ok(u8::from(!findings.is_empty()))
        }
        Command::Report { from, out } => {
            let report = read_structured(&from).map_err(|e| e.to_string())?;
            let text = render(&report);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Train {
            role,
            base,
            store,
            login_user,
            login_pass,
            start_page,
            login_page,
            logout_page,
            session_cookie,
            max_requests,
        } => {
            let mut cfg = CrawlConfig::new(&base, &role);
            cfg.credentials = login_user.zip(login_pass).map(|(username, password)| Credentials { username, password });
            cfg.start_page = start_page;
            cfg.login_page = login_page;
            cfg.logout_page = logout_page;
            cfg.session_cookie = session_cookie.clone();
            cfg.max_requests = max_requests;
            let mut s = ProfileStore::open(&store, &session_cookie).map_err(|e| e.to_string())?;
            let r = crawl(&cfg, &mut s).map_err(|e| e.to_string())?;
            println!(
                "role {role}: {} request(s) over {} session(s), {} page(s): {}",
                r.requests,
                r.sessions,
                r.pages.len(),
                r.pages.join(", ")
            );
            Ok(0)
        }
        Command::BuildModel { store, out, index_page } => {
            let models = build_model(&store, &index_page).map_err(|e| e.to_string())?;
            persist_model(&models, &out).map_err(|e| e.to_string())?;
            println!(
                "{} row(s), {} distinct triple(s), {} role graph(s) written to {}",
                models.set1.rows.len(),
                models.set1.relation().len(),
                models.set2.roles.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Enforce {
            models,
            listen,
            upstream,
            bindings,
            session_cookie,
            idle_timeout,
            login_page,
            log,
        } => {
            let models = load_model(&models).map_err(|e| e.to_string())?;
            let bindings = Bindings::load(&bindings).map_err(|e| e.to_string())?;
            let config = EnforcerConfig {
                session_cookie,
                login_page,
                idle_timeout: Duration::from_secs(idle_timeout),
                ..EnforcerConfig::default()
            };
            let dlog = DeviationLog::open(&log).map_err(|e| format!("{}: {e}", log.display()))?;
            let enforcer = Arc::new(Enforcer::new(models, bindings, config, dlog));
            let listener = TcpListener::bind(listen).map_err(|e| format!("{listen}: {e}"))?;
            let server = enforcer.serve(listener, upstream).map_err(|e| e.to_string())?;
            eprintln!("enforcing on {} -> {upstream}; deviations to {}", server.addr(), log.display());
            server.join();
            Ok(0)
        }
        Command::ServeDemo { listen, seed } => {
            let listener = TcpListener::bind(listen).map_err(|e| format!("{listen}: {e}"))?;
            let (server, _) = demo::serve_app(listener, seed).map_err(|e| e.to_string())?;
            eprintln!("demo app on http://{}/{}", server.addr(), demo::LANDING_PAGE);
            server.join();
            Ok(0)
        }
        Command::Scenario { scenarios, proxy, log } => {
            let mut list = Vec::new();
            for s in &scenarios {
                if s == "all" {
                    list.extend(scenario::BUILTIN.iter().filter_map(|(n, _)| scenario::builtin(n)));
                } else if let Some(b) = scenario::builtin(s) {
                    list.push(b);
                } else {
                    let p = Path::new(s);
                    list.push(scenario::parse_scenario(s, &read(p)?).map_err(|e| e.to_string())?);
                }
            }
            let mut failed = 0;
            for s in &list {
                let out = scenario::run_scenario(s, proxy, log.as_deref());
                println!("scenario {}: {}", out.name, if out.passed { "pass" } else { "FAIL" });
                for l in &out.transcript {
                    println!("  {l}");
                }
                failed += usize::from(!out.passed);
            }
            Ok(u8::from(failed > 0))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("phpguard: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
