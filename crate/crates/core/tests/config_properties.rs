use std::collections::BTreeSet;

use phpguard_core::config_audit::{audit, normalize_value, parse_ini, rewrite_ini, Policy};
use proptest::prelude::*;

fn ini_text() -> impl Strategy<Value = String> {
    let key = prop::sample::select(vec![
        "register_globals",
        "Display_Errors",
        "allow_url_fopen",
        "allow_url_include",
        "expose_php",
        "session.use_only_cookies",
        "magic_quotes_gpc",
        "memory_limit",
    ]);
    let value = prop::sample::select(vec![
        "On", "off", "1", "0", "yes", "No", "TRUE", "false", "\"On\"", "128M", "",
    ]);
    let line = prop_oneof![
        (key, value).prop_map(|(k, v)| format!("{k} = {v}")),
        Just("[PHP]".to_string()),
        Just("; comment".to_string()),
        Just(String::new()),
        Just("garbage line".to_string()),
    ];
    prop::collection::vec(line, 0..20).prop_map(|l| l.join("\n"))
}

proptest! {
    #[test]
    fn normalization_is_idempotent(v in "\\PC{0,12}") {
        let once = normalize_value(&v);
        prop_assert_eq!(normalize_value(&once), once);
    }

    #[test]
    fn audit_only_reports_policy_keys(text in ini_text()) {
        let policy = Policy::builtin();
        let keys: BTreeSet<&str> = policy.entries.iter().map(|e| e.name.as_str()).collect();
        for m in audit(&parse_ini(&text), &policy) {
            prop_assert!(keys.contains(m.name.as_str()));
            prop_assert_ne!(&m.current, &m.recommended);
        }
    }

    #[test]
    fn applying_recommendations_reaches_fixpoint(text in ini_text()) {
        let policy = Policy::builtin();
        let findings = audit(&parse_ini(&text), &policy);
        let fixed = rewrite_ini(&text, &findings);
        prop_assert!(audit(&parse_ini(&fixed), &policy).is_empty());
    }
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!(
        "{}/../../fixtures/php_ini/{name}",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap()
}

#[test]
fn insecure_fixture_findings() {
    let found = audit(&parse_ini(&fixture("insecure.ini")), &Policy::builtin());
    let got: Vec<(&str, &str, &str)> = found
        .iter()
        .map(|m| (m.name.as_str(), m.current.as_str(), m.recommended.as_str()))
        .collect();
    assert_eq!(
        got,
        [
            ("register_globals", "On", "Off"),
            ("display_errors", "On", "Off"),
            ("allow_url_fopen", "On", "Off"),
            ("expose_php", "On", "Off"),
            ("session.use_only_cookies", "Off", "On"),
            ("magic_quotes_gpc", "On", "Off"),
        ]
    );
}

#[test]
fn hardened_fixture_is_clean() {
    // allow_url_include is absent and defaults to Off.
    assert!(audit(&parse_ini(&fixture("hardened.ini")), &Policy::builtin()).is_empty());
}
