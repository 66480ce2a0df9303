//! Scanner vs. an exhaustive-substitution oracle over generated programs.
//!
//! Programs are built from a tiny statement grammar. The oracle works on the
//! grammar itself, not on tokens: a variable is expanded into every
//! right-hand side assigned to it anywhere in the program, recursively, and
//! an expansion that revisits a variable already on the current path is
//! dropped.

use std::collections::BTreeSet;

use phpguard_core::analyzer::{scan_file, ScanContext};
use phpguard_core::checklist::{Category, Checklist};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Expr {
    Lit(&'static str),
    Var(usize),
    Super(&'static str),
    SourceFn(&'static str),
    Call(&'static str, Box<Expr>),
    Concat(Vec<Expr>),
    Interp(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Stmt {
    Assign(usize, Expr),
    Sink(&'static str, Expr),
}

const SANITIZERS: &[(&str, &[Category])] = &[
    ("htmlspecialchars", &[Category::CrossSiteScripting]),
    ("mysql_real_escape_string", &[Category::SqlInjection]),
    ("escapeshellarg", &[Category::CommandInjection]),
    (
        "intval",
        &[
            Category::CrossSiteScripting,
            Category::SqlInjection,
            Category::CommandInjection,
        ],
    ),
    ("trim", &[]),
];

fn sink_category(sink: &str) -> Category {
    match sink {
        "echo" | "print" | "printf" => Category::CrossSiteScripting,
        "mysql_query" => Category::SqlInjection,
        "system" | "passthru" => Category::CommandInjection,
        _ => unreachable!(),
    }
}

fn sanitizes(name: &str, cat: Category) -> bool {
    SANITIZERS
        .iter()
        .any(|(n, cats)| *n == name && cats.contains(&cat))
}

fn render_expr(e: &Expr) -> String {
    match e {
        Expr::Lit(s) => format!("'{s}'"),
        Expr::Var(v) => format!("$v{v}"),
        Expr::Super(s) => format!("{s}['k']"),
        Expr::SourceFn(f) => format!("{f}($fp)"),
        Expr::Call(f, inner) => format!("{f}({})", render_expr(inner)),
        Expr::Concat(parts) => parts.iter().map(render_expr).collect::<Vec<_>>().join(" . "),
        Expr::Interp(vars) => {
            let body: Vec<String> = vars.iter().map(|v| format!("x $v{v}")).collect();
            format!("\"{} y\"", body.join(" "))
        }
    }
}

fn render(prog: &[Stmt]) -> String {
    let mut out = String::from("<?php\n");
    for s in prog {
        match s {
            Stmt::Assign(v, e) => out.push_str(&format!("$v{v} = {};\n", render_expr(e))),
            Stmt::Sink(f @ ("echo" | "print"), e) => {
                out.push_str(&format!("{f} {};\n", render_expr(e)))
            }
            Stmt::Sink(f, e) => out.push_str(&format!("{f}({});\n", render_expr(e))),
        }
    }
    out
}

struct Oracle<'a> {
    prog: &'a [Stmt],
}

impl Oracle<'_> {
    fn defs(&self, var: usize) -> Vec<&Expr> {
        self.prog
            .iter()
            .filter_map(|s| match s {
                Stmt::Assign(v, e) if *v == var => Some(e),
                _ => None,
            })
            .collect()
    }

    fn var_tainted(&self, var: usize, cat: Category, path: &mut Vec<usize>) -> bool {
        if path.contains(&var) {
            return false;
        }
        // `$fp` is never assigned, but it only appears as a source argument.
        let defs = self.defs(var);
        if defs.is_empty() {
            return true;
        }
        path.push(var);
        let t = defs.iter().any(|e| self.tainted(e, cat, path));
        path.pop();
        t
    }

    fn tainted(&self, e: &Expr, cat: Category, path: &mut Vec<usize>) -> bool {
        match e {
            Expr::Lit(_) => false,
            Expr::Super(_) | Expr::SourceFn(_) => true,
            Expr::Var(v) => self.var_tainted(*v, cat, path),
            Expr::Call(f, inner) => !sanitizes(f, cat) && self.tainted(inner, cat, path),
            Expr::Concat(parts) => parts.iter().any(|p| self.tainted(p, cat, path)),
            Expr::Interp(vars) => vars.iter().any(|v| self.var_tainted(*v, cat, path)),
        }
    }

    /// Names of the tainted operands visible in a sink argument.
    fn tainted_names(&self, e: &Expr, cat: Category, out: &mut BTreeSet<String>) {
        match e {
            Expr::Lit(_) => {}
            Expr::Super(s) => {
                out.insert(s.to_string());
            }
            Expr::SourceFn(f) => {
                out.insert(f.to_string());
            }
            Expr::Var(v) => {
                if self.var_tainted(*v, cat, &mut Vec::new()) {
                    out.insert(format!("$v{v}"));
                }
            }
            Expr::Call(f, inner) => {
                if !sanitizes(f, cat) {
                    self.tainted_names(inner, cat, out)
                }
            }
            Expr::Concat(parts) => parts.iter().for_each(|p| self.tainted_names(p, cat, out)),
            Expr::Interp(vars) => {
                for v in vars {
                    if self.var_tainted(*v, cat, &mut Vec::new()) {
                        out.insert(format!("$v{v}"));
                    }
                }
            }
        }
    }

    fn findings(&self) -> Vec<(u32, Category, BTreeSet<String>)> {
        let mut out = Vec::new();
        for (i, s) in self.prog.iter().enumerate() {
            if let Stmt::Sink(f, e) = s {
                let cat = sink_category(f);
                let mut names = BTreeSet::new();
                self.tainted_names(e, cat, &mut names);
                if !names.is_empty() {
                    out.push((i as u32 + 2, cat, names));
                }
            }
        }
        out
    }
}

const VARS: usize = 4;

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        prop::sample::select(vec!["a", "b", "SELECT 1"]).prop_map(Expr::Lit),
        (0..VARS).prop_map(Expr::Var),
        (0..VARS).prop_map(Expr::Var),
        prop::sample::select(vec!["$_GET", "$_POST", "$_COOKIE"]).prop_map(Expr::Super),
        prop::sample::select(vec!["fgets", "mysql_fetch_assoc"]).prop_map(Expr::SourceFn),
        prop::collection::vec(0..VARS, 1..3).prop_map(Expr::Interp),
    ];
    leaf.prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            (
                prop::sample::select(SANITIZERS.iter().map(|s| s.0).collect::<Vec<_>>()),
                inner.clone()
            )
                .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
            prop::collection::vec(inner, 2..4).prop_map(Expr::Concat),
        ]
    })
}

fn stmt() -> impl Strategy<Value = Stmt> {
    prop_oneof![
        3 => ((0..VARS), expr()).prop_map(|(v, e)| Stmt::Assign(v, e)),
        2 => (
            prop::sample::select(vec!["echo", "print", "printf", "mysql_query", "system", "passthru"]),
            expr()
        )
            .prop_map(|(f, e)| Stmt::Sink(f, e)),
    ]
}

fn program() -> impl Strategy<Value = Vec<Stmt>> {
    prop::collection::vec(stmt(), 1..18)
}

fn scan(src: &str) -> Vec<(u32, Category, BTreeSet<String>)> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.php");
    std::fs::write(&path, src).unwrap();
    let mut ctx = ScanContext::new();
    scan_file(&path, &Checklist::builtin(), &mut ctx)
        .into_iter()
        .map(|f| {
            let names = f.children.iter().map(|c| c.variable.clone()).collect();
            (f.line, f.category, names)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn scanner_matches_substitution_oracle(prog in program()) {
        let src = render(&prog);
        let expected = Oracle { prog: &prog }.findings();
        prop_assert_eq!(scan(&src), expected, "program:\n{}", src);
    }

    #[test]
    fn adding_a_tainted_assignment_never_removes_findings(
        prog in program(),
        var in 0..VARS,
    ) {
        let before = scan(&render(&prog));
        let mut grown = prog.clone();
        // Appended so existing statements keep their line numbers.
        grown.push(Stmt::Assign(var, Expr::Super("$_REQUEST")));
        let after: BTreeSet<(u32, Category)> =
            scan(&render(&grown)).into_iter().map(|(l, c, _)| (l, c)).collect();
        for (l, c, _) in before {
            prop_assert!(after.contains(&(l, c)));
        }
    }

    #[test]
    fn scanning_is_deterministic(prog in program()) {
        let src = render(&prog);
        prop_assert_eq!(scan(&src), scan(&src));
    }
}

#[test]
fn oracle_agrees_on_a_hand_traced_program() {
    let prog = vec![
        Stmt::Assign(0, Expr::Super("$_GET")),
        Stmt::Assign(1, Expr::Call("htmlspecialchars", Box::new(Expr::Var(0)))),
        Stmt::Sink("echo", Expr::Var(1)),
        Stmt::Sink("mysql_query", Expr::Var(1)),
    ];
    let expected = vec![(
        5,
        Category::SqlInjection,
        BTreeSet::from(["$v1".to_string()]),
    )];
    assert_eq!(Oracle { prog: &prog }.findings(), expected);
    assert_eq!(scan(&render(&prog)), expected);
}
