//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs without the libtest harness so the
//! lines always show up in `cargo test` output.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use tempfile::TempDir;

use phpguard::harness::{measure_latency, replay, train_demo, DemoStack, TrainOutcome};
use phpguard::scenario::{builtin, run_scenario};
use phpguard_core::analyzer::{scan_project, ScanOptions};
use phpguard_core::checklist::{Category, Checklist};
use phpguard_core::config_audit::{apply_recommendations, audit, parse_ini, rewrite_ini, Policy};
use phpguard_core::report::{build_report, parse_structured, render, render_structured, FixedClock};
use phpguard_runtime::enforcer::{read_log, verify_request, Reason, Status};
use phpguard_runtime::model::{
    is_asset, load_model, persist_model, ModelRow, ModelSet1, ModelSet2, RelationIndex, RequestId, RoleGraph,
};

const SEED: u64 = 20_140_301;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Runs one criterion, times it against `limit`, prints its line.
fn criterion(n: u32, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    if let Some(l) = limit {
        if took > l {
            o.pass = false;
            o.detail = format!("{}; took longer than {:.0} s", o.detail, l.as_secs_f64());
        }
    }
    println!(
        "criterion {n} {title}: {} ({:.3} s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        o.detail
    );
    o.pass
}

// Expected scanner report blocks for the AdminMenu fixture, field for field.
const ADMIN_MENU_BLOCKS: [&str; 3] = [
    "VulnerabilityNumber : 1\n\
     Vulnerability FileName : C:/xampp/htdocs/empldir_php4t/AdminMenu.php\n\
     VulnerabilityName : Cross-Site Scripting\n\
     Vulnerable Line : 114: printf printf(\"Debug: query = %s<br>\\n\", $Query_String); // db_mysql.inc\n",
    "VulnerabilityNumber : 2\n\
     Vulnerability FileName : C:/xampp/htdocs/empldir_php4t/AdminMenu.php\n\
     VulnerabilityName : SQL Injection\n\
     Vulnerable Line : 131: query $db_fill->query ($sql_query);\n",
    "VulnerabilityNumber : 3\n\
     Vulnerability FileName : C:/xampp/htdocs/empldir_php4t/AdminMenu.php\n\
     VulnerabilityName : SQL Injection\n\
     Vulnerable Line : 153: query $db_look->query (\"SELECT \" . $field_name . \" FROM \" .\n\
     $table_name . \" WHERE \" . $where_condition);\n",
];

fn report_reproduction() -> Outcome {
    let opts = ScanOptions {
        display_root: Some("C:/xampp/htdocs/empldir_php4t".into()),
    };
    let scan = match scan_project(&fixture("empldir_php4t"), &Checklist::builtin(), &opts) {
        Ok(s) => s,
        Err(e) => return check(false, e.to_string()),
    };
    let lines: Vec<u32> = scan.findings.iter().map(|f| f.line).collect();
    let text = render(&build_report(&scan, None, "empldir_php4t", &FixedClock(Utc::now())));
    let missing: Vec<usize> = ADMIN_MENU_BLOCKS
        .iter()
        .enumerate()
        .filter(|(_, b)| !text.contains(*b))
        .map(|(i, _)| i + 1)
        .collect();
    check(
        lines == [114, 131, 153] && missing.is_empty(),
        format!("finding lines {lines:?}; blocks not reproduced verbatim: {missing:?}"),
    )
}

fn category_sets() -> Outcome {
    use Category::*;
    let cases: [(&str, &[Category]); 5] = [
        ("portal", &[SqlInjection, FileManipulation, CrossSiteScripting]),
        ("scarf", &[FileManipulation, SqlInjection, CrossSiteScripting]),
        ("cet", &[SqlInjection, CrossSiteScripting]),
        ("bookstore", &[SqlInjection, CrossSiteScripting]),
        ("employee_dir", &[SqlInjection, CrossSiteScripting, FileManipulation]),
    ];
    let mut wrong = Vec::new();
    for (app, expected) in cases {
        let expected: BTreeSet<Category> = expected.iter().copied().collect();
        match scan_project(&fixture(app), &Checklist::builtin(), &ScanOptions::default()) {
            Ok(r) if r.categories() == expected => {}
            Ok(r) => wrong.push(format!("{app}: {:?}", r.categories())),
            Err(e) => wrong.push(format!("{app}: {e}")),
        }
    }
    check(wrong.is_empty(), format!("5 applications; mismatches: {wrong:?}"))
}

const EXPECTED_RELATION: [(&str, u8, &str); 19] = [
    ("GET_About.php", 0, "0"),
    ("GET_Help.php", 0, "0"),
    ("GET_Login.php", 0, "0"),
    ("POST_Login.php", 0, "0"),
    ("GET_Services.php", 0, "0"),
    ("GET_Products.php", 0, "0"),
    ("GET_home.php", 1, "manager"),
    ("GET_Assign_works.php", 1, "manager"),
    ("GET_User_mgmt.php", 1, "manager"),
    ("GET_Update_users.php", 1, "manager"),
    ("GET_Update_roles.php", 1, "manager"),
    ("GET_View.php", 1, "manager"),
    ("GET_Viewusers.php", 1, "manager"),
    ("GET_Viewroles.php", 1, "manager"),
    ("GET_Home.php", 1, "employer"),
    ("GET_work_report.php", 1, "employer"),
    ("GET_View.php", 1, "employer"),
    ("GET_Viewusers.php", 1, "employer"),
    ("GET_Viewroles.php", 1, "employer"),
];

// Page transitions per role as published; compared with ASCII case folding.
const EXPECTED_MANAGER: [(&str, &[&str]); 3] = [
    ("Home.php", &["Assign_works.php", "User_mgmt.php", "View.php"]),
    ("User_mgmt.php", &["Update_users.php", "Update_roles.php"]),
    ("View.php", &["Viewusers.php", "Viewroles.php"]),
];
const EXPECTED_EMPLOYER: [(&str, &[&str]); 2] = [
    ("Home.php", &["Work_report.php", "View.php"]),
    ("View.php", &["Viewusers.php", "Viewroles.php"]),
];

fn folded_edges(table: &[(&str, &[&str])]) -> BTreeSet<(String, String)> {
    table
        .iter()
        .flat_map(|(from, tos)| tos.iter().map(move |to| (from.to_ascii_lowercase(), to.to_ascii_lowercase())))
        .collect()
}

fn fold_graph(g: &RoleGraph) -> (BTreeSet<(String, String)>, BTreeSet<String>) {
    let edges = g
        .edge_set()
        .into_iter()
        .map(|(a, b)| (a.to_ascii_lowercase(), b.to_ascii_lowercase()))
        .collect();
    let entries = g.entries.iter().map(|e| e.to_ascii_lowercase()).collect();
    (edges, entries)
}

fn model_reproduction(trained: &Result<TrainOutcome, String>) -> Outcome {
    let t = match trained {
        Ok(t) => t,
        Err(e) => return check(false, format!("training failed: {e}")),
    };
    let expected: BTreeSet<(String, u8, String)> = EXPECTED_RELATION
        .iter()
        .map(|(r, f, role)| (r.to_string(), *f, role.to_string()))
        .collect();
    let got = t.models.set1.relation();
    let mut problems = Vec::new();
    if got != expected {
        problems.push(format!(
            "relation differs: extra {:?}, missing {:?}",
            got.difference(&expected).collect::<Vec<_>>(),
            expected.difference(&got).collect::<Vec<_>>()
        ));
    }
    let home = BTreeSet::from(["home.php".to_string()]);
    for (role, table) in [("manager", &EXPECTED_MANAGER[..]), ("employer", &EXPECTED_EMPLOYER[..])] {
        match t.models.set2.roles.get(role) {
            None => problems.push(format!("no graph for {role}")),
            Some(g) => {
                let (edges, entries) = fold_graph(g);
                if edges != folded_edges(table) {
                    problems.push(format!("{role} edges {edges:?}"));
                }
                if entries != home {
                    problems.push(format!("{role} entries {entries:?}"));
                }
            }
        }
    }
    check(
        problems.is_empty(),
        format!(
            "{} captured rows, {} distinct triples; {problems:?}",
            t.models.set1.rows.len(),
            got.len()
        ),
    )
}

// Brute-force oracle over plain lists, independent of the index and graph
// types the verifier uses.
struct NaiveModel {
    rows: Vec<(String, u8, String)>,
    entries: Vec<(String, String)>,
    edges: Vec<(String, String, String)>,
}

fn naive_verdict(m: &NaiveModel, method: &str, page: &str, flag: u8, role: &str, last: Option<&str>) -> Reason {
    let id = format!("{method}_{page}");
    let mut known = false;
    let mut same_role_other_flag = false;
    let mut same_flag_other_role = false;
    for (r, f, ro) in &m.rows {
        if *r != id {
            continue;
        }
        known = true;
        if *f == flag && ro == role {
            return level2_naive(m, page, role, last);
        }
        if *f != flag && ro == role {
            same_role_other_flag = true;
        }
        if *f == flag && ro != role {
            same_flag_other_role = true;
        }
    }
    if !known {
        Reason::UnknownRequest
    } else if same_role_other_flag {
        Reason::SessionFlagMismatch
    } else if same_flag_other_role {
        Reason::RoleMismatch
    } else {
        Reason::SessionFlagMismatch
    }
}

fn level2_naive(m: &NaiveModel, page: &str, role: &str, last: Option<&str>) -> Reason {
    if is_asset(page) {
        return Reason::Ok;
    }
    let mut node = false;
    for (r, p) in &m.entries {
        if r == role && p == page {
            node = true;
            if last.is_none() {
                return Reason::Ok;
            }
        }
    }
    for (r, a, b) in &m.edges {
        if r != role {
            continue;
        }
        if b == page || a == page {
            node = true;
        }
        if Some(a.as_str()) == last && b == page {
            return Reason::Ok;
        }
    }
    if node {
        Reason::SequenceViolation
    } else {
        Reason::UnknownPageForRole
    }
}

fn oracle_equivalence() -> Outcome {
    let pages = ["a.php", "b.php", "c.php", "d.php", "e.php", "f.php", "g.php", "h.php", "app.js"];
    let rows: Vec<(String, u8, String)> = [
        ("GET_a.php", 0, "r1"),
        ("GET_a.php", 1, "r1"),
        ("GET_b.php", 1, "r1"),
        ("GET_c.php", 1, "r1"),
        ("POST_c.php", 1, "r1"),
        ("GET_d.php", 1, "r2"),
        ("GET_b.php", 1, "r2"),
        ("GET_e.php", 0, "r2"),
        ("GET_f.php", 1, "r2"),
        ("GET_g.php", 1, "r1"),
        ("GET_app.js", 1, "r1"),
    ]
    .iter()
    .map(|(r, f, ro)| (r.to_string(), *f, ro.to_string()))
    .collect();
    let entries: Vec<(String, String)> = [("r1", "a.php"), ("r2", "d.php"), ("r2", "e.php")]
        .iter()
        .map(|(r, p)| (r.to_string(), p.to_string()))
        .collect();
    let edges: Vec<(String, String, String)> = [
        ("r1", "a.php", "b.php"),
        ("r1", "b.php", "c.php"),
        ("r1", "c.php", "a.php"),
        ("r1", "c.php", "c.php"),
        ("r2", "d.php", "b.php"),
        ("r2", "b.php", "f.php"),
        ("r2", "e.php", "d.php"),
    ]
    .iter()
    .map(|(r, a, b)| (r.to_string(), a.to_string(), b.to_string()))
    .collect();

    let set1 = ModelSet1 {
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, (r, f, ro))| ModelRow {
                sno: i as u64,
                convid: i as u64 + 1,
                reqresid: r.clone(),
                session_flag: *f,
                role: ro.clone(),
            })
            .collect(),
    };
    let mut set2 = ModelSet2::default();
    for (r, p) in &entries {
        set2.roles.entry(r.clone()).or_default().entries.insert(p.clone());
    }
    for (r, a, b) in &edges {
        set2.roles.entry(r.clone()).or_default().add_edge(a, b);
    }
    let index = RelationIndex::new(&set1);
    let naive = NaiveModel { rows, entries, edges };

    let mut total = 0usize;
    let mut mismatches = Vec::new();
    let lasts: Vec<Option<&str>> = std::iter::once(None).chain(pages.iter().map(|p| Some(*p))).collect();
    for method in ["GET", "POST"] {
        for page in pages {
            for flag in [0u8, 1] {
                for role in ["r1", "r2"] {
                    for last in &lasts {
                        total += 1;
                        let id = RequestId {
                            method: method.into(),
                            page: page.into(),
                        };
                        let v = verify_request(&id, flag, role, *last, &index, &set2);
                        let want = naive_verdict(&naive, method, page, flag, role, *last);
                        let consistent = (v.status == Status::DontBlock) == (v.reason == Reason::Ok);
                        if v.reason != want || !consistent {
                            mismatches.push(format!("{method} {page} {flag} {role} {last:?}: {} vs {want}", v.reason));
                        }
                    }
                }
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("{} of {total} tuples agree; first mismatches {:?}", total - mismatches.len(), &mismatches[..mismatches.len().min(3)]),
    )
}

fn round_trips(trained: &Result<TrainOutcome, String>, dir: &Path) -> Outcome {
    let mut problems = Vec::new();
    match trained {
        Ok(t) => {
            let out = dir.join("models-roundtrip");
            match persist_model(&t.models, &out).and_then(|_| load_model(&out)) {
                Ok(back) if back == t.models => {}
                Ok(_) => problems.push("model reload differs".to_string()),
                Err(e) => problems.push(format!("model: {e}")),
            }
        }
        Err(e) => problems.push(format!("no trained model: {e}")),
    }

    let opts = ScanOptions {
        display_root: Some("C:/xampp/htdocs/empldir_php4t".into()),
    };
    let policy = Policy::builtin();
    let ini = std::fs::read_to_string(fixture("php_ini/insecure.ini")).unwrap_or_default();
    let settings = parse_ini(&ini);
    let audits = audit(&settings, &policy);
    match scan_project(&fixture("empldir_php4t"), &Checklist::builtin(), &opts) {
        Ok(scan) => {
            let clock = FixedClock(Utc.with_ymd_and_hms(2014, 3, 1, 10, 30, 0).unwrap());
            let r = build_report(&scan, Some(audits.clone()), "empldir_php4t", &clock);
            match parse_structured(&render_structured(&r)) {
                Ok(back) if back == r => {}
                Ok(_) => problems.push("structured report differs after reparse".into()),
                Err(e) => problems.push(format!("structured report: {e}")),
            }
        }
        Err(e) => problems.push(format!("scan: {e}")),
    }

    if audits.is_empty() {
        problems.push("insecure.ini produced no findings".into());
    }
    let mut fixed = settings.clone();
    apply_recommendations(&mut fixed, &audits);
    if !audit(&fixed, &policy).is_empty() {
        problems.push("settings still misconfigured after applying recommendations".into());
    }
    if !audit(&parse_ini(&rewrite_ini(&ini, &audits)), &policy).is_empty() {
        problems.push("rewritten ini still misconfigured".into());
    }
    check(problems.is_empty(), format!("model, report and config round trips; problems {problems:?}"))
}

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("temp dir");
    let mut results = Vec::new();

    results.push(criterion(1, "scanner report reproduction", Some(Duration::from_secs(1)), report_reproduction));
    results.push(criterion(2, "mini-application category sets", Some(Duration::from_secs(5)), category_sets));

    let store = tmp.path().join("store");
    let mut trained: Result<TrainOutcome, String> = Err("not run".into());
    results.push(criterion(3, "model reproduction", Some(Duration::from_secs(10)), || {
        trained = (|| {
            let (app, _) = phpguard::demo::serve_app(std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?, SEED)
                .map_err(|e| e.to_string())?;
            let r = train_demo(app.addr(), &store).map_err(|e| e.to_string());
            app.shutdown();
            r
        })();
        model_reproduction(&trained)
    }));

    let log_path = tmp.path().join("deviations.log");
    let stack = trained
        .as_ref()
        .ok()
        .map(|t| DemoStack::start(t.models.clone(), SEED, &log_path).expect("demo stack starts"));
    let mut blocks_seen = 0usize;

    // Replay first: the fresh app must hand out the training run's cookies.
    let mut replayed = None;
    let mut replay_time = Duration::ZERO;
    if let Some(s) = &stack {
        let t = Instant::now();
        replayed = Some(replay(&store, s.proxy_addr()).map_err(|e| e.to_string()));
        replay_time = t.elapsed();
    }

    let run = |names: &[&str], blocks: &mut usize| -> Vec<String> {
        let Some(s) = &stack else { return vec!["no stack".into()] };
        let mut failures = Vec::new();
        for n in names {
            let sc = builtin(n).expect("bundled scenario");
            let out = run_scenario(&sc, s.proxy_addr(), Some(&s.log_path));
            *blocks += out.blocks;
            if !out.passed {
                failures.push(format!("{n}: {}", out.transcript.last().cloned().unwrap_or_default()));
            }
        }
        failures
    };

    results.push(criterion(4, "attack triad", Some(Duration::from_secs(5)), || {
        let f = run(&["auth-bypass", "privilege-escalation", "sequence-bypass"], &mut blocks_seen);
        check(f.is_empty(), format!("authentication bypass, privilege escalation, sequence bypass; failures {f:?}"))
    }));

    results.push(criterion(5, "session hijack and log completeness", None, || {
        let mut f = run(&["session-hijack", "happy-manager", "happy-employer"], &mut blocks_seen);
        if let Some(Ok(r)) = &replayed {
            blocks_seen += r.blocked.len();
        }
        let records = read_log(&log_path).map(|r| r.len()).unwrap_or(usize::MAX);
        if records != blocks_seen {
            f.push(format!("{blocks_seen} blocks but {records} log records"));
        }
        check(f.is_empty(), format!("{blocks_seen} blocked responses, {records} log records; failures {f:?}"))
    }));

    results.push(criterion(6, "verifier oracle equivalence", Some(Duration::from_secs(10)), oracle_equivalence));

    results.push(criterion(7, "training replay", None, || match &replayed {
        Some(Ok(r)) => check(
            r.blocked.is_empty() && r.requests > 0,
            format!(
                "{} requests replayed in {:.3} s, {} blocked {:?}",
                r.requests,
                replay_time.as_secs_f64(),
                r.blocked.len(),
                r.blocked
            ),
        ),
        Some(Err(e)) => check(false, e.clone()),
        None => check(false, "no trained model"),
    }));

    results.push(criterion(8, "enforcement overhead", None, || {
        let Some(s) = &stack else { return check(false, "no stack") };
        match measure_latency(s.app.addr(), s.proxy_addr(), 1000) {
            Ok(l) => check(
                l.ratio() < 10.0,
                format!(
                    "{} samples: direct p50 {:.1} us, proxied p50 {:.1} us, added {:.1} us, ratio {:.2} (limit 10)",
                    l.samples,
                    l.direct_p50.as_secs_f64() * 1e6,
                    l.proxied_p50.as_secs_f64() * 1e6,
                    l.overhead_p50().as_secs_f64() * 1e6,
                    l.ratio()
                ),
            ),
            Err(e) => check(false, e.to_string()),
        }
    }));

    results.push(criterion(9, "round trips", None, || round_trips(&trained, tmp.path())));

    if let Some(s) = stack {
        s.shutdown();
    }
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
