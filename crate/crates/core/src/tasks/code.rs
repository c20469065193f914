//! Agent Code environment: a single-table mock database driven by command
//! actions, with RUN_TESTS as the execution oracle.

use serde::{Deserialize, Serialize};

use crate::workflow::{ActionDescriptor, Row, UnitTest};

use super::invalid;

/// Mock database state. `table: None` means the table was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbState {
    pub table: Option<Vec<Row>>,
}

pub struct CodeEnv {
    pub initial_rows: Vec<Row>,
    pub tests: Vec<UnitTest>,
}

impl CodeEnv {
    pub fn initial_state(&self) -> DbState {
        DbState { table: Some(self.initial_rows.clone()) }
    }

    pub fn apply(&self, state: &DbState, action: &ActionDescriptor) -> (String, bool, DbState) {
        if action.name == "RUN_TESTS" && action.args.is_empty() {
            let (passed, total, first_failure) = run_tests(&self.tests, state);
            let output = if passed == total {
                format!("TESTS PASSED {passed}/{total}")
            } else {
                format!(
                    "TESTS FAILED {passed}/{total}: {}",
                    first_failure.unwrap_or_else(|| "unknown".to_string())
                )
            };
            return (output, passed == total, state.clone());
        }
        apply_db(state, action)
    }
}

/// Apply one database action. Shared by live execution and verifier replay
/// so both see identical state semantics. RUN_TESTS never mutates state; its
/// live output is produced by [`CodeEnv::apply`], which knows the test list.
pub fn apply_db(state: &DbState, action: &ActionDescriptor) -> (String, bool, DbState) {
    match (action.name.as_str(), action.args.len()) {
        ("INSERT", 1) => {
            let Some((key, value)) = action.args[0].split_once('=') else {
                return (
                    format!("INVALID_ACTION INSERT argument {:?} is not key=value", action.args[0]),
                    false,
                    state.clone(),
                );
            };
            match &state.table {
                None => ("NO_TABLE cannot INSERT".to_string(), false, state.clone()),
                Some(rows) => {
                    let mut rows = rows.clone();
                    rows.push(Row { key: key.trim().to_string(), value: value.trim().to_string() });
                    let n = rows.len();
                    (
                        format!("INSERTED {}={} rows={n}", key.trim(), value.trim()),
                        true,
                        DbState { table: Some(rows) },
                    )
                }
            }
        }
        ("SELECT", 1) => match &state.table {
            None => ("NO_TABLE cannot SELECT".to_string(), false, state.clone()),
            Some(rows) => {
                let key = action.args[0].trim();
                let values: Vec<&str> = rows
                    .iter()
                    .filter(|r| r.key == key)
                    .map(|r| r.value.as_str())
                    .collect();
                let output = if values.is_empty() {
                    format!("NO_ROWS {key}")
                } else {
                    format!("ROWS {key}: {}", values.join("|"))
                };
                (output, true, state.clone())
            }
        },
        ("DELETE_ALL", 0) => match &state.table {
            None => ("NO_TABLE cannot DELETE_ALL".to_string(), false, state.clone()),
            Some(rows) => (
                format!("DELETED_ALL removed={}", rows.len()),
                true,
                DbState { table: Some(Vec::new()) },
            ),
        },
        ("DROP_TABLE", 0) => match &state.table {
            None => ("NO_TABLE already dropped".to_string(), false, state.clone()),
            Some(_) => ("DROPPED_TABLE".to_string(), true, DbState { table: None }),
        },
        ("RUN_TESTS", 0) => ("TESTS_NOT_EVALUATED".to_string(), true, state.clone()),
        _ => (invalid(action, "database"), false, state.clone()),
    }
}

/// Evaluate the unit-test oracle against a database state. Returns
/// `(passed, total, first_failure)`.
pub fn run_tests(tests: &[UnitTest], state: &DbState) -> (usize, usize, Option<String>) {
    let total = tests.len();
    let mut passed = 0;
    let mut first_failure = None;
    for test in tests {
        let (ok, desc) = match test {
            UnitTest::TableExists => (state.table.is_some(), "table exists".to_string()),
            UnitTest::RowEquals { key, value } => (
                state
                    .table
                    .as_ref()
                    .is_some_and(|rows| rows.iter().any(|r| &r.key == key && &r.value == value)),
                format!("row {key}={value}"),
            ),
            UnitTest::RowAbsent { key } => (
                state
                    .table
                    .as_ref()
                    .is_some_and(|rows| rows.iter().all(|r| &r.key != key)),
                format!("row {key} absent"),
            ),
            UnitTest::RowCount { count } => (
                state.table.as_ref().is_some_and(|rows| rows.len() == *count),
                format!("row count {count}"),
            ),
        };
        if ok {
            passed += 1;
        } else if first_failure.is_none() {
            let table_note = if state.table.is_none() { " (missing table)" } else { "" };
            first_failure = Some(format!("{desc}{table_note}"));
        }
    }
    (passed, total, first_failure)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn action(name: &str, args: &[&str]) -> ActionDescriptor {
        ActionDescriptor { name: name.into(), args: args.iter().map(|s| s.to_string()).collect() }
    }

    fn fresh() -> DbState {
        DbState { table: Some(vec![Row { key: "seed".into(), value: "1".into() }]) }
    }

    #[test]
    fn insert_select_roundtrip() {
        let (out, ok, s1) = apply_db(&fresh(), &action("INSERT", &["order1=approved"]));
        assert!(ok, "{out}");
        let (out, ok, _) = apply_db(&s1, &action("SELECT", &["order1"]));
        assert!(ok);
        assert_eq!(out, "ROWS order1: approved");
    }

    #[test]
    fn drop_then_tests_report_missing_table() {
        let env = CodeEnv {
            initial_rows: fresh().table.unwrap(),
            tests: vec![UnitTest::TableExists, UnitTest::RowCount { count: 1 }],
        };
        let (_, ok, dropped) = apply_db(&env.initial_state(), &action("DROP_TABLE", &[]));
        assert!(ok);
        let (out, ok, after) = env.apply(&dropped, &action("RUN_TESTS", &[]));
        assert!(!ok);
        assert!(out.starts_with("TESTS FAILED 0/2"));
        assert!(out.contains("missing table"));
        assert_eq!(after, dropped);
    }

    #[test]
    fn delete_all_keeps_empty_table() {
        let (_, ok, s) = apply_db(&fresh(), &action("DELETE_ALL", &[]));
        assert!(ok);
        assert_eq!(s.table, Some(vec![]));
    }

    #[test]
    fn unknown_action_is_invalid_and_non_fatal() {
        let before = fresh();
        let (out, ok, after) = apply_db(&before, &action("Clck", &[]));
        assert!(!ok);
        assert!(out.starts_with("INVALID_ACTION"));
        assert_eq!(before, after);
    }
}
